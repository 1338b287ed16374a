//! Dense row-major tensors and 8-bit affine quantization.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense f64 tensor, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that the data length matches the shape
    /// and that every entry is finite.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Config(format!(
                "tensor shape {:?} expects {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite tensor entry at flat index {bad}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar_filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Config(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Returns Err naming `context` if any entry is non-finite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite values in {context}"
            )));
        }
        Ok(())
    }
}

/// Affine quantization parameters for one tensor: `x ~ (code - zero_point) * scale`.
///
/// `zero_point` is an unclamped integer so that ranges excluding zero are
/// still representable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
}

impl QuantParams {
    /// Calibrates from an observed value range using the full u8 code space.
    ///
    /// A degenerate range (max == min) falls back to scale = 1/255 so that
    /// constant tensors still quantize without a divide by zero.
    pub fn from_range(min: f64, max: f64) -> Self {
        let span = max - min;
        let scale = if span > 0.0 { span / 255.0 } else { 1.0 / 255.0 };
        let zero_point = (-min / scale).round_ties_even() as i64;
        Self { scale, zero_point }
    }

    pub fn from_tensor(x: &Tensor) -> Self {
        let min = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min.is_finite() && max.is_finite() {
            Self::from_range(min, max)
        } else {
            Self::from_range(0.0, 0.0)
        }
    }
}

/// 8-bit quantized tensor: unsigned codes plus per-tensor affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub codes: Vec<u8>,
    pub params: QuantParams,
    pub shape: Vec<usize>,
}

impl QuantTensor {
    pub fn scale(&self) -> f64 {
        self.params.scale
    }
}

/// Quantizes with round-to-nearest-even into u8 codes. Only 8-bit width is
/// supported.
pub fn quantize(x: &Tensor, bits: u32) -> Result<QuantTensor> {
    if bits != 8 {
        return Err(Error::Config(format!(
            "only 8-bit quantization is supported, got {bits}"
        )));
    }
    x.check_finite("quantize input")?;
    let params = QuantParams::from_tensor(x);
    Ok(quantize_with(x, params))
}

/// Quantizes with externally calibrated parameters (saturating at the code
/// range edges).
pub fn quantize_with(x: &Tensor, params: QuantParams) -> QuantTensor {
    let codes = x
        .data()
        .iter()
        .map(|&v| {
            let q = (v / params.scale + params.zero_point as f64).round_ties_even();
            q.clamp(0.0, 255.0) as u8
        })
        .collect();
    QuantTensor {
        codes,
        params,
        shape: x.shape().to_vec(),
    }
}

/// Exact dequantization of the stored codes.
pub fn dequantize(q: &QuantTensor) -> Tensor {
    let data = q
        .codes
        .iter()
        .map(|&c| (c as f64 - q.params.zero_point as f64) * q.params.scale)
        .collect();
    Tensor {
        shape: q.shape.clone(),
        data,
    }
}
