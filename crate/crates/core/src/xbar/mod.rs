//! Memristive crossbar mapping with resistive non-idealities.
//!
//! Linear layers are split into N x N tiles. Each signed weight becomes a
//! differential pair of device conductances in paired tiles; Gaussian device
//! variation is applied per device, and the parasitic resistor network of
//! every tile is solved once ([`solver`]) to obtain the effective operator
//! G'. Inference then costs one dense multiply with the assembled effective
//! weight matrix, and gradients through the mapped model are exact because
//! the network is linear.

pub mod solver;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerGraph, LayerKind, LinearOp};
use crate::rng::{derive_seed_indexed, substream_indexed};
use crate::tensor::Tensor;

pub use solver::solve_tile;

/// Crossbar geometry, parasitics (ohms), device variation and the variation
/// seed. These are also the keys of the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XbarConfig {
    /// Tile size N (rows = cols).
    pub size: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub r_driver: f64,
    pub r_wire_row: f64,
    pub r_wire_col: f64,
    pub r_sense: f64,
    /// Gaussian device variation ratio (0.1 = 10%).
    pub sigma_over_mu: f64,
    pub seed: u64,
}

impl XbarConfig {
    /// Reference parasitics: R_MIN 20k, R_MAX 200k (ON/OFF 10), driver and
    /// sense 1k, row wire 5, column wire 10 ohms, 10% device variation.
    pub fn paper(size: usize) -> Self {
        XbarConfig {
            size,
            r_min: 20_000.0,
            r_max: 200_000.0,
            r_driver: 1_000.0,
            r_wire_row: 5.0,
            r_wire_col: 10.0,
            r_sense: 1_000.0,
            sigma_over_mu: 0.10,
            seed: 0,
        }
    }

    /// Parasitic-free, variation-free crossbar of the same device range.
    pub fn ideal(size: usize) -> Self {
        XbarConfig {
            size,
            r_min: 20_000.0,
            r_max: 200_000.0,
            r_driver: 0.0,
            r_wire_row: 0.0,
            r_wire_col: 0.0,
            r_sense: 0.0,
            sigma_over_mu: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("crossbar size must be >= 1".into()));
        }
        if !(self.r_min > 0.0) || !(self.r_max > 0.0) || self.r_max / self.r_min <= 1.0 {
            return Err(Error::Config(format!(
                "need r_max/r_min > 1, got r_min={}, r_max={}",
                self.r_min, self.r_max
            )));
        }
        for (name, r) in [
            ("r_driver", self.r_driver),
            ("r_wire_row", self.r_wire_row),
            ("r_wire_col", self.r_wire_col),
            ("r_sense", self.r_sense),
        ] {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.sigma_over_mu >= 0.0) {
            return Err(Error::Config("sigma_over_mu must be >= 0".into()));
        }
        Ok(())
    }

    /// OFF-state conductance 1/r_max.
    pub fn g_min(&self) -> f64 {
        1.0 / self.r_max
    }

    /// ON-state conductance 1/r_min.
    pub fn g_max(&self) -> f64 {
        1.0 / self.r_min
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: XbarConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }
}

/// One tile's programmed, varied and effective conductances, all (N,N) with
/// `[i][j] = input row i, output column j`.
#[derive(Clone, Debug)]
pub struct ConductanceTile {
    pub g_ideal: Tensor,
    pub g_varied: Tensor,
    pub g_nonideal: Tensor,
}

impl ConductanceTile {
    /// ||G' - G_varied||_F / ||G_varied||_F.
    pub fn relative_deviation(&self) -> f64 {
        let num: f64 = self
            .g_nonideal
            .data()
            .iter()
            .zip(self.g_varied.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = self
            .g_varied
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        num / den.max(1e-300)
    }
}

/// Differential mapping of a signed weight tile onto two conductance tiles:
/// `g_plus = g_min + (g_max - g_min) * max(w, 0) / w_max` and the mirror for
/// `g_minus`, so the effective weight is proportional to `g_plus - g_minus`.
/// `w_tile` is (N,N) in crossbar orientation (input row, output column).
/// With `w_max = 0` every device sits at `g_min` (a zero tile).
pub fn weights_to_conductances(
    w_tile: &Tensor,
    w_max: f64,
    cfg: &XbarConfig,
) -> Result<(Tensor, Tensor)> {
    let n = cfg.size;
    if w_tile.shape() != [n, n] {
        return Err(Error::Config(format!(
            "weight tile shape {:?} does not match crossbar size {n}",
            w_tile.shape()
        )));
    }
    let (g_min, g_max) = (cfg.g_min(), cfg.g_max());
    let span = g_max - g_min;
    let mut plus = vec![g_min; n * n];
    let mut minus = vec![g_min; n * n];
    if w_max > 0.0 {
        for (idx, &w) in w_tile.data().iter().enumerate() {
            if w.abs() > w_max * (1.0 + 1e-12) {
                return Err(Error::Config(format!(
                    "|weight| {} exceeds recorded w_max {w_max}",
                    w.abs()
                )));
            }
            plus[idx] = g_min + span * (w.max(0.0) / w_max);
            minus[idx] = g_min + span * ((-w).max(0.0) / w_max);
        }
    }
    Ok((
        Tensor::from_vec(vec![n, n], plus)?,
        Tensor::from_vec(vec![n, n], minus)?,
    ))
}

/// Multiplies every conductance by (1 + xi), xi ~ N(0, sigma_over_mu^2),
/// clamped to [0.5 g_min, 1.5 g_max]. Deterministic per rng stream.
pub fn apply_variation(
    g: &Tensor,
    cfg: &XbarConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor {
    if cfg.sigma_over_mu == 0.0 {
        return g.clone();
    }
    let normal = Normal::new(0.0, cfg.sigma_over_mu).expect("valid sigma");
    let (lo, hi) = (0.5 * cfg.g_min(), 1.5 * cfg.g_max());
    let mut out = g.clone();
    for v in out.data_mut() {
        let xi: f64 = normal.sample(rng);
        *v = (*v * (1.0 + xi)).clamp(lo, hi);
    }
    out
}

/// Builds the full tile: program, vary, solve.
pub fn build_tile(
    w_tile: &Tensor,
    w_max: f64,
    cfg: &XbarConfig,
    variation_seed: u64,
) -> Result<(ConductanceTile, ConductanceTile)> {
    let (gp, gm) = weights_to_conductances(w_tile, w_max, cfg)?;
    let mut rng_p = substream_indexed(variation_seed, &["variation"], 0);
    let mut rng_m = substream_indexed(variation_seed, &["variation"], 1);
    let gp_var = apply_variation(&gp, cfg, &mut rng_p);
    let gm_var = apply_variation(&gm, cfg, &mut rng_m);
    let gp_eff = solve_tile(&gp_var, cfg)?;
    let gm_eff = solve_tile(&gm_var, cfg)?;
    Ok((
        ConductanceTile {
            g_ideal: gp,
            g_varied: gp_var,
            g_nonideal: gp_eff,
        },
        ConductanceTile {
            g_ideal: gm,
            g_varied: gm_var,
            g_nonideal: gm_eff,
        },
    ))
}

/// A positive/negative tile pair at one grid position.
#[derive(Clone, Debug)]
pub struct TilePair {
    /// Input block index (of ceil(K/N)).
    pub row_block: usize,
    /// Output block index (of ceil(M/N)).
    pub col_block: usize,
    pub plus: ConductanceTile,
    pub minus: ConductanceTile,
}

/// A linear layer mapped onto crossbar tiles.
///
/// The effective weight matrix is assembled once from the solved tiles;
/// `forward_mat`/`backward_mat` are then exact dense applications of the
/// non-ideal operator and its transpose. Tile partial sums accumulate
/// digitally (in full precision).
#[derive(Debug)]
pub struct XbarLinear {
    out_features: usize,
    in_features: usize,
    tile_size: usize,
    w_max: f64,
    /// Siemens -> weight-unit rescaling, `w_max / (g_max - g_min)`.
    current_scale: f64,
    tiles: Vec<TilePair>,
    w_eff: Tensor,
}

impl XbarLinear {
    /// Maps an (out, in) weight matrix onto tiles. Variation streams derive
    /// from (cfg.seed, layer_tag, tile index) so every tile is independent
    /// of solve order.
    pub fn from_weights(w: &Tensor, cfg: &XbarConfig, layer_tag: u64) -> Result<Self> {
        cfg.validate()?;
        let [out_features, in_features] = *w.shape() else {
            return Err(Error::Config(format!(
                "expected an (out, in) weight matrix, got {:?}",
                w.shape()
            )));
        };
        let n = cfg.size;
        let row_blocks = in_features.div_ceil(n);
        let col_blocks = out_features.div_ceil(n);
        let w_max = w.max_abs();
        let layer_seed = derive_seed_indexed(cfg.seed, &["xbar", "layer"], layer_tag);

        let tile_ids: Vec<(usize, usize)> = (0..row_blocks)
            .flat_map(|rb| (0..col_blocks).map(move |cb| (rb, cb)))
            .collect();
        let tiles: Vec<TilePair> = tile_ids
            .par_iter()
            .map(|&(rb, cb)| {
                // crossbar orientation: [input i][output j], zero padded
                let mut block = vec![0.0; n * n];
                for i in 0..n {
                    let k = rb * n + i;
                    if k >= in_features {
                        break;
                    }
                    for j in 0..n {
                        let m = cb * n + j;
                        if m >= out_features {
                            break;
                        }
                        block[i * n + j] = w.data()[m * in_features + k];
                    }
                }
                let block = Tensor::from_vec(vec![n, n], block)?;
                let tile_seed = derive_seed_indexed(
                    layer_seed,
                    &["tile"],
                    (rb * col_blocks + cb) as u64,
                );
                let (plus, minus) = build_tile(&block, w_max, cfg, tile_seed)?;
                Ok(TilePair {
                    row_block: rb,
                    col_block: cb,
                    plus,
                    minus,
                })
            })
            .collect::<Result<_>>()?;

        let current_scale = w_max / (cfg.g_max() - cfg.g_min());
        let mut w_eff = vec![0.0; out_features * in_features];
        for pair in &tiles {
            let (rb, cb) = (pair.row_block, pair.col_block);
            let gp = pair.plus.g_nonideal.data();
            let gm = pair.minus.g_nonideal.data();
            for i in 0..n {
                let k = rb * n + i;
                if k >= in_features {
                    break;
                }
                for j in 0..n {
                    let m = cb * n + j;
                    if m >= out_features {
                        break;
                    }
                    w_eff[m * in_features + k] =
                        current_scale * (gp[i * n + j] - gm[i * n + j]);
                }
            }
        }

        Ok(XbarLinear {
            out_features,
            in_features,
            tile_size: n,
            w_max,
            current_scale,
            tiles,
            w_eff: Tensor::from_vec(vec![out_features, in_features], w_eff)?,
        })
    }

    pub fn tiles(&self) -> &[TilePair] {
        &self.tiles
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn current_scale(&self) -> f64 {
        self.current_scale
    }

    /// The assembled non-ideal weight matrix in weight units.
    pub fn effective_weights(&self) -> &Tensor {
        &self.w_eff
    }

    /// Mean per-tile ||G' - G_varied||_F / ||G_varied||_F.
    pub fn mean_tile_deviation(&self) -> f64 {
        if self.tiles.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .tiles
            .iter()
            .map(|t| t.plus.relative_deviation() + t.minus.relative_deviation())
            .sum();
        sum / (2.0 * self.tiles.len() as f64)
    }
}

impl LinearOp for XbarLinear {
    fn in_features(&self) -> usize {
        self.in_features
    }

    fn out_features(&self) -> usize {
        self.out_features
    }

    fn forward_mat(&self, x: &Tensor) -> Result<Tensor> {
        let cols = match x.shape() {
            [k, c] if *k == self.in_features => *c,
            other => {
                return Err(Error::Config(format!(
                    "crossbar input shape {other:?}, expected [{}, cols]",
                    self.in_features
                )))
            }
        };
        let y = crate::nn::linalg::matmul(
            self.w_eff.data(),
            self.out_features,
            self.in_features,
            x.data(),
            cols,
        );
        Tensor::from_vec(vec![self.out_features, cols], y)
    }

    fn backward_mat(&self, grad: &Tensor) -> Result<Tensor> {
        let cols = match grad.shape() {
            [m, c] if *m == self.out_features => *c,
            other => {
                return Err(Error::Config(format!(
                    "crossbar gradient shape {other:?}, expected [{}, cols]",
                    self.out_features
                )))
            }
        };
        let dx = crate::nn::linalg::matmul_at_b(
            self.w_eff.data(),
            self.out_features,
            self.in_features,
            grad.data(),
            cols,
        );
        Tensor::from_vec(vec![self.in_features, cols], dx)
    }
}

/// A model whose conv/fc layers run on crossbar tiles, plus handles to the
/// concrete mapped layers for inspection and dumping.
pub struct MappedModel {
    pub graph: LayerGraph,
    pub layers: Vec<(usize, Arc<XbarLinear>)>,
    pub config: XbarConfig,
}

impl MappedModel {
    /// Mean tile deviation across all mapped layers.
    pub fn mean_deviation(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|(_, l)| l.mean_tile_deviation()).sum::<f64>()
            / self.layers.len() as f64
    }

    /// Writes per-tile G' matrices as little-endian f64 blobs plus a JSON
    /// manifest for offline inspection.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = serde_json::json!({
            "config": self.config,
            "layers": [],
        });
        let layers_json = manifest["layers"].as_array_mut().expect("array");
        for (layer_idx, xl) in &self.layers {
            let mut tiles_json = Vec::new();
            for pair in xl.tiles() {
                let mut files = Vec::new();
                for (tag, tile) in [("plus", &pair.plus), ("minus", &pair.minus)] {
                    let name = format!(
                        "tile_l{layer_idx:03}_r{:02}_c{:02}_{tag}.f64",
                        pair.row_block, pair.col_block
                    );
                    let mut bytes = Vec::with_capacity(tile.g_nonideal.len() * 8);
                    for &v in tile.g_nonideal.data() {
                        bytes.extend_from_slice(&v.to_le_bytes());
                    }
                    fs::write(dir.join(&name), bytes)?;
                    files.push(name);
                }
                tiles_json.push(serde_json::json!({
                    "row_block": pair.row_block,
                    "col_block": pair.col_block,
                    "files": files,
                }));
            }
            layers_json.push(serde_json::json!({
                "layer": layer_idx,
                "out_features": xl.out_features(),
                "in_features": xl.in_features(),
                "w_max": xl.w_max(),
                "current_scale": xl.current_scale(),
                "mean_tile_deviation": xl.mean_tile_deviation(),
                "tiles": tiles_json,
            }));
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("dump manifest: {e}")))?;
        fs::write(dir.join("xbar_manifest.json"), json + "\n")?;
        Ok(())
    }
}

/// Replaces every conv and fc layer of a trained model by a crossbar-mapped
/// linear operator; nonlinearities and pooling stay untouched. The same
/// mapped instance serves both gradient generation and evaluation.
pub fn map_model(model: &LayerGraph, cfg: &XbarConfig) -> Result<MappedModel> {
    cfg.validate()?;
    let mut graph = model.clone();
    let mut mapped = Vec::new();
    for (i, layer) in graph.layers.iter_mut().enumerate() {
        if !matches!(layer.kind, LayerKind::Conv2d | LayerKind::Fc) {
            continue;
        }
        let w = layer.weights.as_ref().expect("linear layer weights");
        let (out_features, in_features) = match layer.kind {
            LayerKind::Conv2d => {
                let [oc, c, kh, kw] = *w.shape() else { unreachable!() };
                (oc, c * kh * kw)
            }
            LayerKind::Fc => {
                let [of, inf] = *w.shape() else { unreachable!() };
                (of, inf)
            }
            _ => unreachable!(),
        };
        let w_mat = w.reshape(vec![out_features, in_features])?;
        let xl = Arc::new(XbarLinear::from_weights(&w_mat, cfg, i as u64)?);
        layer.backend = Some(xl.clone() as Arc<dyn LinearOp>);
        mapped.push((i, xl));
    }
    Ok(MappedModel {
        graph,
        layers: mapped,
        config: cfg.clone(),
    })
}
