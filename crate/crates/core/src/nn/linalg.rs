//! Small dense kernels: matmul, im2col/col2im.
//!
//! Convolutions are lowered to im2col + matmul so the same linear kernel
//! serves both the software path and the crossbar path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// C = A(m,k) * B(k,n), row-major.
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C = A^T(k,m) * B(k,n) without materializing the transpose.
pub fn matmul_at_b(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a_row[i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C = A(m,k) * B^T(n,k) without materializing the transpose.
pub fn matmul_a_bt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Output spatial size of a valid (no padding, stride 1) convolution.
pub fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::Config(format!(
            "kernel {kh}x{kw} does not fit input {h}x{w}"
        )));
    }
    Ok((h - kh + 1, w - kw + 1))
}

/// Unfolds (C,H,W) into a (C*kh*kw, OH*OW) patch matrix.
pub fn im2col(x: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let (c, h, w) = expect_chw(x)?;
    let (oh, ow) = conv_out_dims(h, w, kh, kw)?;
    let rows = c * kh * kw;
    let cols = oh * ow;
    let xd = x.data();
    let mut out = vec![0.0; rows * cols];
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let r = (ci * kh + dy) * kw + dx;
                for oy in 0..oh {
                    let src = (ci * h + oy + dy) * w + dx;
                    let dst = r * cols + oy * ow;
                    out[dst..dst + ow].copy_from_slice(&xd[src..src + ow]);
                }
            }
        }
    }
    Tensor::from_vec(vec![rows, cols], out)
}

/// Folds a (C*kh*kw, OH*OW) patch-gradient matrix back onto (C,H,W),
/// accumulating overlaps.
pub fn col2im(
    cols_mat: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Result<Tensor> {
    let (oh, ow) = conv_out_dims(h, w, kh, kw)?;
    let cols = oh * ow;
    if cols_mat.shape() != [c * kh * kw, cols] {
        return Err(Error::Config(format!(
            "col2im expects shape [{}, {}], got {:?}",
            c * kh * kw,
            cols,
            cols_mat.shape()
        )));
    }
    let src = cols_mat.data();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let r = (ci * kh + dy) * kw + dx;
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[(ci * h + oy + dy) * w + ox + dx] += src[r * cols + oy * ow + ox];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

pub fn expect_chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::Config(format!(
            "expected a (C,H,W) tensor, got shape {other:?}"
        ))),
    }
}
