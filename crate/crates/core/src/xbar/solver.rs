//! Nodal analysis of one crossbar tile's parasitic resistor network.
//!
//! Topology per tile (N rows x N columns, 2N^2 internal nodes):
//!
//! * row i: source V_i -- (r_driver + r_wire_row) -- R(i,0) -- r_wire_row --
//!   R(i,1) -- ... -- R(i,N-1)
//! * device (i,j): conductance g[i][j] between R(i,j) and C(i,j)
//! * column j: C(0,j) -- r_wire_col -- C(1,j) -- ... -- C(N-1,j) --
//!   (r_wire_col + r_sense) -- ground
//!
//! The column output current is the current through the sense path, which by
//! current conservation equals the total device current into the column.
//! Because the network is purely resistive the map V -> I is exactly linear;
//! the effective operator G' is extracted column-by-column by superposition
//! (unit voltage on one input, zeros elsewhere), factoring the conductance
//! matrix once per tile and reusing it for all N right-hand sides.
//!
//! Zero-valued resistances are handled exactly by merging their endpoint
//! nodes, so the ideal (parasitic-free) tile reduces to G' = G without any
//! epsilon hacks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::xbar::XbarConfig;

/// Union-find with path compression; representative = smallest member.
struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller id as representative
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Symmetric positive definite matrix in lower-band storage.
/// `data[j * (hb + 1) + d]` holds A[j + d][j] for d in 0..=hb.
struct BandedSpd {
    n: usize,
    hb: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    fn new(n: usize, hb: usize) -> Self {
        BandedSpd {
            n,
            hb,
            data: vec![0.0; n * (hb + 1)],
        }
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        // store lower triangle only
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(r - c <= self.hb);
        self.data[c * (self.hb + 1) + (r - c)] += v;
    }

    /// In-place Cholesky factorization A = L L^T.
    fn factor(&mut self) -> Result<()> {
        let (n, hb) = (self.n, self.hb);
        let w = hb + 1;
        for j in 0..n {
            let mut diag = self.data[j * w];
            let k0 = j.saturating_sub(hb);
            for k in k0..j {
                let l = self.data[k * w + (j - k)];
                diag -= l * l;
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::Numeric(format!(
                    "singular resistive network (non-positive pivot at node {j})"
                )));
            }
            let dsr = diag.sqrt();
            self.data[j * w] = dsr;
            let imax = (j + hb).min(n - 1);
            for i in (j + 1)..=imax {
                let mut v = self.data[j * w + (i - j)];
                let k0 = i.saturating_sub(hb).max(k0);
                for k in k0..j {
                    v -= self.data[k * w + (i - k)] * self.data[k * w + (j - k)];
                }
                self.data[j * w + (i - j)] = v / dsr;
            }
        }
        Ok(())
    }

    /// Solves L L^T x = b using the factored data.
    fn solve(&self, b: &mut [f64]) {
        let (n, hb) = (self.n, self.hb);
        let w = hb + 1;
        // forward: L y = b
        for j in 0..n {
            let y = b[j] / self.data[j * w];
            b[j] = y;
            if y != 0.0 {
                let imax = (j + hb).min(n - 1);
                for i in (j + 1)..=imax {
                    b[i] -= self.data[j * w + (i - j)] * y;
                }
            }
        }
        // backward: L^T x = y
        for j in (0..n).rev() {
            let mut v = b[j];
            let imax = (j + hb).min(n - 1);
            for i in (j + 1)..=imax {
                v -= self.data[j * w + (i - j)] * b[i];
            }
            b[j] = v / self.data[j * w];
        }
    }
}

/// Resistive element between two nodes, as a conductance.
struct Element {
    a: usize,
    b: usize,
    g: f64,
}

struct TileNetwork {
    n: usize,
    /// class representative per node
    class: Vec<usize>,
    /// compact unknown index per class representative (usize::MAX = known)
    unknown_idx: Vec<usize>,
    num_unknowns: usize,
    /// class representative of each source
    source_class: Vec<usize>,
    factored: BandedSpd,
    /// (unknown index, conductance, known class) links feeding the RHS
    rhs_links: Vec<(usize, f64, usize)>,
}

fn node_src(i: usize) -> usize {
    i
}

fn node_ground(n: usize) -> usize {
    n
}

fn node_row(n: usize, i: usize, j: usize) -> usize {
    n + 1 + 2 * (i * n + j)
}

fn node_col(n: usize, i: usize, j: usize) -> usize {
    n + 1 + 2 * (i * n + j) + 1
}

impl TileNetwork {
    fn build(g: &Tensor, cfg: &XbarConfig) -> Result<Self> {
        let n = cfg.size;
        if g.shape() != [n, n] {
            return Err(Error::Config(format!(
                "conductance tile shape {:?} does not match crossbar size {n}",
                g.shape()
            )));
        }
        if let Some(bad) = g.data().iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!(
                "device conductance at flat index {bad} must be positive and finite"
            )));
        }
        let total_nodes = n + 1 + 2 * n * n;
        let mut uf = UnionFind::new(total_nodes);
        let mut elements = Vec::with_capacity(3 * n * n + 2 * n);

        let add_resistor = |uf: &mut UnionFind, elements: &mut Vec<Element>, a: usize, b: usize, r: f64| {
            if r == 0.0 {
                uf.union(a, b);
            } else {
                elements.push(Element { a, b, g: 1.0 / r });
            }
        };

        for i in 0..n {
            add_resistor(
                &mut uf,
                &mut elements,
                node_src(i),
                node_row(n, i, 0),
                cfg.r_driver + cfg.r_wire_row,
            );
            for j in 1..n {
                add_resistor(
                    &mut uf,
                    &mut elements,
                    node_row(n, i, j - 1),
                    node_row(n, i, j),
                    cfg.r_wire_row,
                );
            }
        }
        for j in 0..n {
            for i in 1..n {
                add_resistor(
                    &mut uf,
                    &mut elements,
                    node_col(n, i - 1, j),
                    node_col(n, i, j),
                    cfg.r_wire_col,
                );
            }
            add_resistor(
                &mut uf,
                &mut elements,
                node_col(n, n - 1, j),
                node_ground(n),
                cfg.r_wire_col + cfg.r_sense,
            );
        }
        for i in 0..n {
            for j in 0..n {
                elements.push(Element {
                    a: node_row(n, i, j),
                    b: node_col(n, i, j),
                    g: g.data()[i * n + j],
                });
            }
        }

        let class: Vec<usize> = (0..total_nodes).map(|v| uf.find(v)).collect();
        let ground_class = class[node_ground(n)];
        let source_class: Vec<usize> = (0..n).map(|i| class[node_src(i)]).collect();
        for (i, &sc) in source_class.iter().enumerate() {
            if sc == ground_class || source_class[..i].contains(&sc) {
                return Err(Error::Numeric(
                    "degenerate tile: zero-resistance path shorts independent sources".into(),
                ));
            }
        }

        // compact unknown indices in ascending representative order
        let mut unknown_idx = vec![usize::MAX; total_nodes];
        let mut num_unknowns = 0;
        for node in 0..total_nodes {
            let c = class[node];
            if c != node {
                continue; // not a representative
            }
            if c == ground_class || source_class.contains(&c) {
                continue;
            }
            unknown_idx[c] = num_unknowns;
            num_unknowns += 1;
        }

        // bandwidth over unknown-unknown stamps
        let mut hb = 0usize;
        for e in &elements {
            let (ca, cb) = (class[e.a], class[e.b]);
            let (ia, ib) = (unknown_idx[ca], unknown_idx[cb]);
            if ia != usize::MAX && ib != usize::MAX && ia != ib {
                hb = hb.max(ia.abs_diff(ib));
            }
        }

        let mut matrix = BandedSpd::new(num_unknowns.max(1), hb);
        let mut rhs_links = Vec::new();
        for e in &elements {
            let (ca, cb) = (class[e.a], class[e.b]);
            if ca == cb {
                continue;
            }
            let (ia, ib) = (unknown_idx[ca], unknown_idx[cb]);
            match (ia != usize::MAX, ib != usize::MAX) {
                (true, true) => {
                    matrix.add(ia, ia, e.g);
                    matrix.add(ib, ib, e.g);
                    matrix.add(ia, ib, -e.g);
                }
                (true, false) => {
                    matrix.add(ia, ia, e.g);
                    rhs_links.push((ia, e.g, cb));
                }
                (false, true) => {
                    matrix.add(ib, ib, e.g);
                    rhs_links.push((ib, e.g, ca));
                }
                (false, false) => {} // both known; handled in the current sum
            }
        }
        if num_unknowns > 0 {
            matrix.factor()?;
        }

        Ok(TileNetwork {
            n,
            class,
            unknown_idx,
            num_unknowns,
            source_class,
            factored: matrix,
            rhs_links,
        })
    }

    /// Node voltages with unit drive on source `k`, zeros elsewhere.
    fn solve_for_source(&self, k: usize) -> Vec<f64> {
        let active = self.source_class[k];
        let mut b = vec![0.0; self.num_unknowns.max(1)];
        for &(idx, g, known_class) in &self.rhs_links {
            if known_class == active {
                b[idx] += g;
            }
        }
        if self.num_unknowns > 0 {
            self.factored.solve(&mut b);
        }
        b
    }

    fn voltage(&self, x: &[f64], node: usize, active_source_class: usize) -> f64 {
        let c = self.class[node];
        let idx = self.unknown_idx[c];
        if idx != usize::MAX {
            x[idx]
        } else if c == active_source_class {
            1.0
        } else {
            0.0 // ground or inactive source
        }
    }

    /// Column currents for unit drive on source `k`:
    /// I_j = sum_i g[i][j] (V_R(i,j) - V_C(i,j)).
    fn column_currents(&self, g: &Tensor, k: usize) -> Vec<f64> {
        let n = self.n;
        let x = self.solve_for_source(k);
        let active = self.source_class[k];
        let mut currents = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let vr = self.voltage(&x, node_row(n, i, j), active);
                let vc = self.voltage(&x, node_col(n, i, j), active);
                currents[j] += g.data()[i * n + j] * (vr - vc);
            }
        }
        currents
    }
}

/// Effective conductance operator G' of a tile: `out[i][j] = dI_j / dV_i`.
///
/// With all parasitics zero this equals the device matrix exactly.
pub fn solve_tile(g_varied: &Tensor, cfg: &XbarConfig) -> Result<Tensor> {
    let n = cfg.size;
    let net = TileNetwork::build(g_varied, cfg)?;
    let mut out = vec![0.0; n * n];
    for k in 0..n {
        let currents = net.column_currents(g_varied, k);
        out[k * n..(k + 1) * n].copy_from_slice(&currents);
    }
    Tensor::from_vec(vec![n, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn paper_cfg(n: usize) -> XbarConfig {
        XbarConfig::paper(n)
    }

    fn random_tile(n: usize, cfg: &XbarConfig, seed: u64) -> Tensor {
        let mut rng = crate::rng::substream(seed, &["tile"]);
        let data = (0..n * n)
            .map(|_| rng.gen_range(cfg.g_min()..cfg.g_max()))
            .collect();
        Tensor::from_vec(vec![n, n], data).unwrap()
    }

    /// Independent oracle: full modified nodal analysis with explicit source
    /// branch currents, assembled densely and solved by Gaussian elimination
    /// with partial pivoting. Returns column currents for arbitrary drive v.
    fn dense_mna_currents(g: &Tensor, cfg: &XbarConfig, v: &[f64]) -> Vec<f64> {
        let n = cfg.size;
        assert!(
            cfg.r_driver + cfg.r_wire_row > 0.0
                && cfg.r_wire_row >= 0.0
                && cfg.r_wire_col + cfg.r_sense > 0.0,
            "oracle requires nonzero driver and sense paths"
        );
        // nodes: src_i (0..n), R(i,j), C(i,j); ground eliminated.
        // unknowns: node voltages + n source branch currents.
        let src = |i: usize| i;
        let row = |i: usize, j: usize| n + i * n + j;
        let col = |i: usize, j: usize| n + n * n + i * n + j;
        let nv = n + 2 * n * n; // voltage unknowns
        let m = nv + n; // plus source branch currents
        let mut a = vec![0.0; m * m];
        let mut b = vec![0.0; m];
        let stamp = |a: &mut Vec<f64>, x: usize, y: usize, val: f64| {
            a[x * m + y] += val;
        };
        // resistor stamps
        let resistor = |a: &mut Vec<f64>, p: usize, q: usize, r: f64| {
            let g = 1.0 / r;
            stamp(a, p, p, g);
            stamp(a, q, q, g);
            stamp(a, p, q, -g);
            stamp(a, q, p, -g);
        };
        for i in 0..n {
            resistor(&mut a, src(i), row(i, 0), cfg.r_driver + cfg.r_wire_row);
            for j in 1..n {
                if cfg.r_wire_row == 0.0 {
                    // oracle variant: tie with a huge conductance
                    resistor(&mut a, row(i, j - 1), row(i, j), 1e-12);
                } else {
                    resistor(&mut a, row(i, j - 1), row(i, j), cfg.r_wire_row);
                }
            }
        }
        for j in 0..n {
            for i in 1..n {
                if cfg.r_wire_col == 0.0 {
                    resistor(&mut a, col(i - 1, j), col(i, j), 1e-12);
                } else {
                    resistor(&mut a, col(i - 1, j), col(i, j), cfg.r_wire_col);
                }
            }
            // sense resistor to ground: only the non-ground end stamps
            let gs = 1.0 / (cfg.r_wire_col + cfg.r_sense);
            stamp(&mut a, col(n - 1, j), col(n - 1, j), gs);
        }
        for i in 0..n {
            for j in 0..n {
                let gd = g.data()[i * n + j];
                stamp(&mut a, row(i, j), row(i, j), gd);
                stamp(&mut a, col(i, j), col(i, j), gd);
                stamp(&mut a, row(i, j), col(i, j), -gd);
                stamp(&mut a, col(i, j), row(i, j), -gd);
            }
        }
        // voltage sources: branch current unknowns nv + i
        for i in 0..n {
            stamp(&mut a, src(i), nv + i, 1.0);
            stamp(&mut a, nv + i, src(i), 1.0);
            b[nv + i] = v[i];
        }
        // dense gaussian elimination with partial pivoting
        for p in 0..m {
            let mut best = p;
            for r in p + 1..m {
                if a[r * m + p].abs() > a[best * m + p].abs() {
                    best = r;
                }
            }
            if best != p {
                for c in 0..m {
                    a.swap(p * m + c, best * m + c);
                }
                b.swap(p, best);
            }
            let piv = a[p * m + p];
            assert!(piv.abs() > 1e-300, "singular oracle system");
            for r in p + 1..m {
                let f = a[r * m + p] / piv;
                if f != 0.0 {
                    for c in p..m {
                        a[r * m + c] -= f * a[p * m + c];
                    }
                    b[r] -= f * b[p];
                }
            }
        }
        let mut x = vec![0.0; m];
        for p in (0..m).rev() {
            let mut s = b[p];
            for c in p + 1..m {
                s -= a[p * m + c] * x[c];
            }
            x[p] = s / a[p * m + p];
        }
        // output currents through the sense paths
        (0..n)
            .map(|j| x[col(n - 1, j)] / (cfg.r_wire_col + cfg.r_sense))
            .collect()
    }

    #[test]
    fn single_device_closed_form() {
        // 20 kOhm device, 1 kOhm driver and sense, 5 + 10 Ohm wires
        let cfg = paper_cfg(1);
        let g = Tensor::from_vec(vec![1, 1], vec![1.0 / 20_000.0]).unwrap();
        let gp = solve_tile(&g, &cfg).unwrap();
        let expected = 1.0 / 22_015.0;
        let rel = (gp.data()[0] - expected).abs() / expected;
        assert!(rel < 1e-9, "G' = {}, expected {expected}", gp.data()[0]);
    }

    #[test]
    fn zero_parasitics_reduce_to_device_matrix() {
        let mut cfg = XbarConfig::ideal(3);
        cfg.seed = 0;
        let g = random_tile(3, &paper_cfg(3), 42);
        let gp = solve_tile(&g, &cfg).unwrap();
        for (a, b) in gp.data().iter().zip(g.data()) {
            let rel = (a - b).abs() / b.abs();
            assert!(rel < 1e-12, "rel {rel}");
        }
    }

    #[test]
    fn superposition_matches_dense_mna_oracle() {
        for (n, seed) in [(2usize, 1u64), (3, 2), (3, 3)] {
            let cfg = paper_cfg(n);
            let g = random_tile(n, &cfg, seed);
            let gp = solve_tile(&g, &cfg).unwrap();
            let mut rng = crate::rng::substream(seed, &["v"]);
            for _ in 0..4 {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let oracle = dense_mna_currents(&g, &cfg, &v);
                for j in 0..n {
                    // I_j = sum_i G'[i][j] v_i
                    let mine: f64 = (0..n).map(|i| gp.data()[i * n + j] * v[i]).sum();
                    let rel = (mine - oracle[j]).abs() / oracle[j].abs().max(1e-18);
                    assert!(rel < 1e-9, "n={n} col {j}: {mine} vs {oracle:?}");
                }
            }
        }
    }

    #[test]
    fn partial_zero_parasitics_merge_nodes() {
        // zero row wires but nonzero driver/sense still solves and agrees
        // with a small-resistance approximation (1 mOhm wires); truly tiny
        // resistances would be ill-conditioned, which is what the exact
        // node merging avoids
        let mut cfg = paper_cfg(2);
        cfg.r_wire_row = 0.0;
        let g = random_tile(2, &cfg, 9);
        let gp = solve_tile(&g, &cfg).unwrap();

        let mut cfg_eps = cfg.clone();
        cfg_eps.r_wire_row = 1e-3;
        let gp_eps = solve_tile(&g, &cfg_eps).unwrap();
        for (a, b) in gp.data().iter().zip(gp_eps.data()) {
            assert!((a - b).abs() / b.abs() < 1e-6);
        }
    }

    #[test]
    fn nonpositive_conductance_is_rejected() {
        let cfg = paper_cfg(2);
        let g = Tensor::from_vec(vec![2, 2], vec![1e-5, 0.0, 1e-5, 1e-5]).unwrap();
        assert!(matches!(solve_tile(&g, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn deviation_grows_with_tile_size() {
        let mut last = 0.0;
        for n in [2usize, 4, 8] {
            let cfg = paper_cfg(n);
            let g = random_tile(n, &cfg, 5);
            let gp = solve_tile(&g, &cfg).unwrap();
            let num: f64 = gp
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let dev = num / den;
            assert!(dev > last, "deviation {dev} not above {last} at n={n}");
            last = dev;
        }
    }
}
