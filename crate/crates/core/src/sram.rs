//! Hybrid 8T-6T SRAM activation memories at scaled supply voltage.
//!
//! Each 8-bit word splits into `n8` error-free 8T cells holding the most
//! significant bits and `n6` error-prone 6T cells holding the least
//! significant bits. At a given Vdd every 6T bit flips independently with
//! the bit-error rate from a voltage/probability table. The same flip
//! probability applies to 0->1 and 1->0 errors.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{ActivationHook, HookSet, LayerGraph};
use crate::rng::derive_seed_indexed;
use crate::tensor::{dequantize, quantize_with, QuantParams, QuantTensor, Tensor};

/// Bit-error rate as a function of supply voltage.
///
/// File format: one `vdd p` pair per line, `#` comments allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct BerTable {
    /// (vdd, flip probability), sorted by ascending vdd.
    entries: Vec<(f64, f64)>,
}

impl BerTable {
    pub fn from_pairs(mut entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("empty BER table".into()));
        }
        entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::Config(format!(
                    "duplicate BER table entry for {} V",
                    pair[0].0
                )));
            }
            if pair[0].1 < pair[1].1 {
                return Err(Error::Config(
                    "bit-error rate must be non-increasing in Vdd".into(),
                ));
            }
        }
        for &(vdd, p) in &entries {
            if !(0.0..=1.0).contains(&p) || !vdd.is_finite() || vdd <= 0.0 {
                return Err(Error::Config(format!(
                    "invalid BER table entry {vdd} V -> {p}"
                )));
            }
        }
        Ok(BerTable { entries })
    }

    /// Synthetic default table; the underlying transistor-level error rates
    /// are device specific, so experiments record which table they used.
    pub fn default_synthetic() -> Self {
        BerTable::from_pairs(vec![
            (0.88, 0.0),
            (0.78, 1e-4),
            (0.72, 1e-3),
            (0.68, 1e-2),
            (0.64, 5e-2),
        ])
        .expect("valid default table")
    }

    /// Per-bit flip probability at `vdd`, piecewise-linear between table
    /// entries. Voltages outside the table span are a configuration error;
    /// there is no extrapolation.
    pub fn ber(&self, vdd: f64) -> Result<f64> {
        let first = self.entries.first().unwrap();
        let last = self.entries.last().unwrap();
        if vdd < first.0 || vdd > last.0 {
            return Err(Error::Config(format!(
                "vdd {vdd} V outside BER table span [{}, {}] V",
                first.0, last.0
            )));
        }
        if let Some(&(_, p)) = self.entries.iter().find(|(v, _)| *v == vdd) {
            return Ok(p);
        }
        for pair in self.entries.windows(2) {
            let (v0, p0) = pair[0];
            let (v1, p1) = pair[1];
            if vdd <= v1 {
                let t = (vdd - v0) / (v1 - v0);
                return Ok(p0 + t * (p1 - p0));
            }
        }
        Ok(last.1)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let vdd: f64 = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format(format!("BER table line {}: bad vdd", lineno + 1)))?;
            let p: f64 = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| {
                Error::Format(format!("BER table line {}: bad probability", lineno + 1))
            })?;
            if it.next().is_some() {
                return Err(Error::Format(format!(
                    "BER table line {}: expected 'vdd p'",
                    lineno + 1
                )));
            }
            entries.push((vdd, p));
        }
        BerTable::from_pairs(entries)
    }

    pub fn format(&self) -> String {
        let mut out = String::from("# vdd_volts per_bit_flip_probability\n");
        for &(vdd, p) in &self.entries {
            out.push_str(&format!("{vdd} {p}\n"));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTarget {
    Activations,
    Weights,
}

/// One hybrid activation (or weight) memory instance for one layer.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct HybridMemConfig {
    pub layer_id: usize,
    /// 8T cells per 8-bit word (most significant bits).
    pub n8: u8,
    /// 6T cells per 8-bit word (least significant bits).
    pub n6: u8,
    pub vdd: f64,
    pub target: NoiseTarget,
}

impl HybridMemConfig {
    pub fn new(layer_id: usize, n8: u8, n6: u8, vdd: f64) -> Result<Self> {
        if n8 + n6 != 8 {
            return Err(Error::Config(format!(
                "8T/6T split {n8}/{n6} must sum to 8"
            )));
        }
        Ok(HybridMemConfig {
            layer_id,
            n8,
            n6,
            vdd,
            target: NoiseTarget::Activations,
        })
    }

    pub fn ratio_label(&self) -> String {
        if self.n6 == 0 {
            "H".to_string()
        } else {
            format!("{}/{}", self.n8, self.n6)
        }
    }
}

/// Flips each of the `n6` least significant bits of every code independently
/// with probability `p`. The `n8` most significant bits are never touched.
pub fn inject_bit_errors(q: &QuantTensor, n6: u8, p: f64, rng: &mut ChaCha8Rng) -> QuantTensor {
    let mut out = q.clone();
    if n6 == 0 || p <= 0.0 {
        return out;
    }
    for code in &mut out.codes {
        for bit in 0..n6 {
            if rng.gen::<f64>() < p {
                *code ^= 1 << bit;
            }
        }
    }
    out
}

/// Average absolute perturbation of the dequantized value for one memory
/// configuration, estimated over uniformly random codes.
#[derive(Clone, Copy, Debug)]
pub struct NoiseProfile {
    /// Mean |deq(noisy) - deq(clean)| in input-scale units.
    pub mu: f64,
    /// Standard error of the estimate.
    pub std_err: f64,
    pub samples: usize,
}

/// Quantization grid used for mu estimates: the normalized [0,1] activation
/// scale, so mu is comparable across configurations.
fn unit_scale() -> QuantParams {
    QuantParams {
        scale: 1.0 / 255.0,
        zero_point: 0,
    }
}

/// Monte-Carlo estimate of the average perturbation mu for `cfg`.
/// Requires at least 1e5 samples.
pub fn estimate_mu(
    cfg: &HybridMemConfig,
    table: &BerTable,
    samples: usize,
    seed: u64,
) -> Result<NoiseProfile> {
    if samples < 100_000 {
        return Err(Error::Config(format!(
            "mu estimation needs >= 100000 samples, got {samples}"
        )));
    }
    let p = table.ber(cfg.vdd)?;
    let params = unit_scale();
    let mut rng = crate::rng::substream(seed, &["sram", "mu"]);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let clean: u8 = rng.gen();
        let mut noisy = clean;
        for bit in 0..cfg.n6 {
            if rng.gen::<f64>() < p {
                noisy ^= 1 << bit;
            }
        }
        let delta = (noisy as f64 - clean as f64).abs() * params.scale;
        sum += delta;
        sum_sq += delta * delta;
    }
    let n = samples as f64;
    let mu = sum / n;
    let var = (sum_sq / n - mu * mu).max(0.0);
    Ok(NoiseProfile {
        mu,
        std_err: (var / n).sqrt(),
        samples,
    })
}

/// Activation hook realizing one hybrid memory: quantize with the layer's
/// calibrated parameters, inject bit errors, dequantize.
pub struct SramHook {
    cfg: HybridMemConfig,
    /// Flip probability resolved from the BER table at construction.
    p: f64,
    seed: u64,
}

impl SramHook {
    pub fn config(&self) -> &HybridMemConfig {
        &self.cfg
    }

    pub fn flip_probability(&self) -> f64 {
        self.p
    }
}

impl ActivationHook for SramHook {
    fn layer_id(&self) -> usize {
        self.cfg.layer_id
    }

    fn apply(
        &self,
        activation: &Tensor,
        act_quant: Option<&QuantParams>,
        sample: u64,
    ) -> Result<Tensor> {
        let params = act_quant.copied().ok_or_else(|| {
            Error::Config(format!(
                "layer {} has no calibrated activation quantization; calibrate before injecting bit errors",
                self.cfg.layer_id
            ))
        })?;
        let q = quantize_with(activation, params);
        let stream = derive_seed_indexed(self.seed, &["sram", "inject"], self.cfg.layer_id as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive_seed_indexed(
            stream,
            &["sample"],
            sample,
        ));
        let noisy = inject_bit_errors(&q, self.cfg.n6, self.p, &mut rng);
        Ok(dequantize(&noisy))
    }
}

/// Builds the per-layer activation transform for `cfg`. The BER lookup
/// happens here so misconfigured voltages fail before any forward pass.
pub fn make_noise_hook(cfg: HybridMemConfig, table: &BerTable, seed: u64) -> Result<SramHook> {
    if cfg.target != NoiseTarget::Activations {
        return Err(Error::Config(
            "noise hooks target activations; use apply_weight_bit_errors for weight memories"
                .into(),
        ));
    }
    let p = table.ber(cfg.vdd)?;
    Ok(SramHook { cfg, p, seed })
}

/// Convenience: a hook set from several per-layer configs.
pub fn make_hook_set(
    cfgs: &[HybridMemConfig],
    table: &BerTable,
    seed: u64,
) -> Result<HookSet> {
    let mut hooks: Vec<Arc<dyn ActivationHook>> = Vec::with_capacity(cfgs.len());
    for &cfg in cfgs {
        hooks.push(Arc::new(make_noise_hook(cfg, table, seed)?));
    }
    HookSet::new(hooks)
}

/// Returns a copy of `model` whose weight memories have bit errors injected
/// per the weight-targeted configs. One draw per (layer, sample).
pub fn apply_weight_bit_errors(
    model: &LayerGraph,
    cfgs: &[HybridMemConfig],
    table: &BerTable,
    seed: u64,
    sample: u64,
) -> Result<LayerGraph> {
    let mut noisy = model.clone();
    for cfg in cfgs {
        if cfg.target != NoiseTarget::Weights {
            continue;
        }
        let p = table.ber(cfg.vdd)?;
        let layer = noisy
            .layers
            .get_mut(cfg.layer_id)
            .ok_or_else(|| Error::Config(format!("unknown layer {}", cfg.layer_id)))?;
        let w = layer.weights.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "layer {} ({}) has no weight memory",
                cfg.layer_id,
                layer.kind.name()
            ))
        })?;
        let params = layer
            .weight_quant
            .ok_or_else(|| Error::Config("quantize weights before injecting bit errors".into()))?;
        let q = quantize_with(w, params);
        let stream = derive_seed_indexed(seed, &["sram", "weights"], cfg.layer_id as u64);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed_indexed(stream, &["sample"], sample));
        let flipped = inject_bit_errors(&q, cfg.n6, p, &mut rng);
        layer.weights = Some(dequantize(&flipped));
    }
    Ok(noisy)
}

/// Parses per-layer hybrid memory entries: `layer n8/n6 vdd`, or `layer H`
/// for homogeneous (error-free) memory which yields no config entry.
pub fn parse_hybrid_config(text: &str) -> Result<Vec<HybridMemConfig>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: &str| Error::Format(format!("hybrid config line {}: {msg}", lineno + 1));
        let layer_id: usize = toks[0].parse().map_err(|_| err("bad layer id"))?;
        match toks.get(1) {
            Some(&"H") | Some(&"h") => continue,
            Some(ratio) => {
                let (n8s, n6s) = ratio
                    .split_once('/')
                    .ok_or_else(|| err("expected n8/n6 ratio or H"))?;
                let n8: u8 = n8s.parse().map_err(|_| err("bad n8"))?;
                let n6: u8 = n6s.parse().map_err(|_| err("bad n6"))?;
                let vdd: f64 = toks
                    .get(2)
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| err("missing vdd"))?;
                out.push(HybridMemConfig::new(layer_id, n8, n6, vdd)?);
            }
            None => return Err(err("expected 'layer n8/n6 vdd' or 'layer H'")),
        }
    }
    Ok(out)
}

/// Formats per-layer entries in the same notation, writing `H` for layers
/// without injected noise.
pub fn format_hybrid_config(total_layers: usize, cfgs: &[HybridMemConfig]) -> String {
    let mut out = String::from("# layer n8/n6 vdd (H = homogeneous, no bit errors)\n");
    for layer in 0..total_layers {
        match cfgs.iter().find(|c| c.layer_id == layer) {
            Some(c) => out.push_str(&format!("{layer} {} {}\n", c.ratio_label(), c.vdd)),
            None => out.push_str(&format!("{layer} H\n")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::quantize;
    use proptest::prelude::*;

    fn unit_quant(codes: Vec<u8>) -> QuantTensor {
        QuantTensor {
            shape: vec![codes.len()],
            codes,
            params: unit_scale(),
        }
    }

    #[test]
    fn homogeneous_memory_is_identity() {
        let q = unit_quant((0..=255).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = inject_bit_errors(&q, 0, 1.0, &mut rng);
        assert_eq!(q, out);
    }

    #[test]
    fn certain_flip_of_single_lsb_is_xor_one() {
        let q = unit_quant(vec![0, 1, 7, 128, 255]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = inject_bit_errors(&q, 1, 1.0, &mut rng);
        let expected: Vec<u8> = q.codes.iter().map(|c| c ^ 1).collect();
        assert_eq!(out.codes, expected);
    }

    #[test]
    fn empirical_flip_rate_matches_p() {
        // n8/n6 = 3/5, p = 0.1: per-bit flip frequency over 1e6 codes
        let n = 1_000_000usize;
        let q = unit_quant(vec![0u8; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = inject_bit_errors(&q, 5, 0.1, &mut rng);
        let flips: u64 = out.codes.iter().map(|c| c.count_ones() as u64).sum();
        let rate = flips as f64 / (n as f64 * 5.0);
        assert!((rate - 0.1).abs() < 0.003, "flip rate {rate}");
    }

    #[test]
    fn injection_is_deterministic_per_seed() {
        let q = unit_quant((0..=255).cycle().take(4096).collect());
        let a = inject_bit_errors(&q, 4, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = inject_bit_errors(&q, 4, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let c = inject_bit_errors(&q, 4, 0.3, &mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn ber_interpolation_and_span() {
        let table = BerTable::default_synthetic();
        assert_eq!(table.ber(0.88).unwrap(), 0.0);
        assert_eq!(table.ber(0.68).unwrap(), 1e-2);
        // midpoint of (0.72, 1e-3) and (0.68, 1e-2)
        let mid = table.ber(0.70).unwrap();
        assert!((mid - (1e-3 + 1e-2) / 2.0).abs() < 1e-12);
        assert!(matches!(table.ber(0.5), Err(Error::Config(_))));
        assert!(matches!(table.ber(0.95), Err(Error::Config(_))));
    }

    #[test]
    fn table_rejects_nonmonotonic_rates() {
        let r = BerTable::from_pairs(vec![(0.7, 1e-3), (0.8, 1e-2)]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn table_file_round_trip() {
        let table = BerTable::default_synthetic();
        let parsed = BerTable::parse(&table.format()).unwrap();
        assert_eq!(table, parsed);
    }

    #[test]
    fn mu_zero_without_6t_cells() {
        let table = BerTable::default_synthetic();
        let cfg = HybridMemConfig::new(0, 8, 0, 0.64).unwrap();
        let prof = estimate_mu(&cfg, &table, 100_000, 1).unwrap();
        assert_eq!(prof.mu, 0.0);
    }

    #[test]
    fn mu_increases_with_n6_and_with_voltage_scaling() {
        let table = BerTable::default_synthetic();
        let mut last = 0.0;
        for n6 in 1..=8u8 {
            let cfg = HybridMemConfig::new(0, 8 - n6, n6, 0.68).unwrap();
            let prof = estimate_mu(&cfg, &table, 200_000, 2).unwrap();
            assert!(
                prof.mu > last + 3.0 * prof.std_err.max(1e-9),
                "mu not strictly increasing at n6={n6}: {} vs {last}",
                prof.mu
            );
            last = prof.mu;
        }
        // fixed ratio, lower vdd -> larger mu
        let cfg_hi = HybridMemConfig::new(0, 3, 5, 0.72).unwrap();
        let cfg_lo = HybridMemConfig::new(0, 3, 5, 0.64).unwrap();
        let hi = estimate_mu(&cfg_hi, &table, 200_000, 3).unwrap();
        let lo = estimate_mu(&cfg_lo, &table, 200_000, 3).unwrap();
        assert!(lo.mu > hi.mu);
    }

    #[test]
    fn mu_requires_enough_samples() {
        let table = BerTable::default_synthetic();
        let cfg = HybridMemConfig::new(0, 3, 5, 0.68).unwrap();
        assert!(matches!(
            estimate_mu(&cfg, &table, 1000, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ratio_must_sum_to_eight() {
        assert!(matches!(
            HybridMemConfig::new(0, 3, 4, 0.68),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hybrid_config_round_trip() {
        let text = "# comment\n0 H\n1 3/5 0.68\n2 2/6 0.68\n3 H\n";
        let cfgs = parse_hybrid_config(text).unwrap();
        assert_eq!(cfgs.len(), 2);
        assert_eq!(cfgs[0], HybridMemConfig::new(1, 3, 5, 0.68).unwrap());
        assert_eq!(cfgs[1], HybridMemConfig::new(2, 2, 6, 0.68).unwrap());
        let formatted = format_hybrid_config(4, &cfgs);
        let reparsed = parse_hybrid_config(&formatted).unwrap();
        assert_eq!(cfgs, reparsed);
    }

    proptest! {
        #[test]
        fn msb_bits_never_change(
            codes in proptest::collection::vec(any::<u8>(), 1..200),
            n6 in 0u8..=8,
            p in 0.0f64..=1.0,
            seed in any::<u64>()
        ) {
            let q = unit_quant(codes);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = inject_bit_errors(&q, n6, p, &mut rng);
            for (a, b) in q.codes.iter().zip(&out.codes) {
                prop_assert_eq!((*a as u16) >> n6, (*b as u16) >> n6);
            }
            // perturbation bound on the dequantized values
            let clean = dequantize(&q);
            let noisy = dequantize(&out);
            let bound = q.params.scale * ((1u32 << n6) - 1) as f64;
            for (a, b) in clean.data().iter().zip(noisy.data()) {
                prop_assert!((a - b).abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn weight_injection_needs_quantized_weights() {
        use crate::nn::{LayerSpec, LossKind};
        let mut model = crate::nn::LayerGraph::build(
            vec![4],
            &[LayerSpec::Fc { out_features: 2 }],
            LossKind::SoftmaxXent,
        )
        .unwrap();
        model.init_weights(1);
        let table = BerTable::default_synthetic();
        let mut cfg = HybridMemConfig::new(0, 3, 5, 0.64).unwrap();
        cfg.target = NoiseTarget::Weights;
        let err = apply_weight_bit_errors(&model, &[cfg], &table, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        model.quantize_weights().unwrap();
        let noisy = apply_weight_bit_errors(&model, &[cfg], &table, 1, 0).unwrap();
        assert_ne!(model.layers[0].weights, noisy.layers[0].weights);
    }

    #[test]
    fn quantize_op_feeds_injection() {
        // end to end: real tensor -> codes -> flips -> bounded dequantized error
        let x = Tensor::from_vec(vec![4], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let q = quantize(&x, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = inject_bit_errors(&q, 2, 1.0, &mut rng);
        let back = dequantize(&noisy);
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= q.scale() * 3.0 + q.scale() / 2.0 + 1e-12);
        }
    }
}
