//! FGSM and PGD adversarial input generation, the three attack modes, and
//! clean/adversarial accuracy metrics.
//!
//! Modes:
//! * SW — gradients and evaluation both on the software model.
//! * SH — gradients from the software model, evaluation on the hardware
//!   model (transfer attack).
//! * HH — gradients from the hardware model's own loss, evaluation on the
//!   same hardware model. For crossbar models the gradient flows through the
//!   solved linear operator G' (exact); for SRAM bit-error models gradients
//!   use the noise-free graph, so bit errors never enter gradient
//!   computation.
//!
//! Gradients are always taken on the smooth graph (no hooks, no activation
//! fake-quantization); evaluation applies whatever noise the target model
//! carries.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, ForwardOpts, HookSet, LayerGraph};
use crate::rng::substream_indexed;
use crate::sram::{apply_weight_bit_errors, BerTable, HybridMemConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            other => Err(Error::Config(format!("unknown attack kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackMode {
    #[serde(rename = "SW")]
    Sw,
    #[serde(rename = "SH")]
    Sh,
    #[serde(rename = "HH")]
    Hh,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::Sw => "SW",
            AttackMode::Sh => "SH",
            AttackMode::Hh => "HH",
        }
    }
}

/// L-inf budget in [0,1] input-scale units, remembering how it was written
/// so reports can print exact fractions like `8/255`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Epsilon {
    value: f64,
    label: String,
}

impl Epsilon {
    pub fn new(value: f64) -> Result<Self> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {value}")));
        }
        Ok(Epsilon {
            value,
            label: format!("{value}"),
        })
    }

    pub fn fraction(num: u32, den: u32) -> Result<Self> {
        if den == 0 {
            return Err(Error::Config("epsilon fraction with zero denominator".into()));
        }
        Ok(Epsilon {
            value: num as f64 / den as f64,
            label: format!("{num}/{den}"),
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl PartialEq for Epsilon {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value && self.label == other.label
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl FromStr for Epsilon {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((num, den)) = s.split_once('/') {
            let num: u32 = num
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad epsilon fraction '{s}'")))?;
            let den: u32 = den
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad epsilon fraction '{s}'")))?;
            Epsilon::fraction(num, den)
        } else {
            let value: f64 = s
                .parse()
                .map_err(|_| Error::Config(format!("bad epsilon '{s}'")))?;
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::Config(format!("epsilon must be >= 0, got {s}")));
            }
            Ok(Epsilon {
                value,
                label: s.to_string(),
            })
        }
    }
}

impl TryFrom<String> for Epsilon {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Epsilon> for String {
    fn from(e: Epsilon) -> String {
        e.label
    }
}

/// One attack instance: kind, budget, PGD schedule, mode and seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: Epsilon,
    pub pgd_steps: usize,
    /// PGD step size in input-scale units.
    pub pgd_alpha: f64,
    pub pgd_random_start: bool,
    pub mode: AttackMode,
    pub seed: u64,
}

impl AttackConfig {
    /// FGSM with defaults for everything else.
    pub fn fgsm(epsilon: Epsilon, mode: AttackMode, seed: u64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            pgd_steps: 7,
            pgd_alpha: 0.0,
            pgd_random_start: true,
            mode,
            seed,
        }
    }

    /// PGD with the default schedule: 7 steps, alpha = epsilon/4, random
    /// start on.
    pub fn pgd(epsilon: Epsilon, mode: AttackMode, seed: u64) -> Self {
        let alpha = epsilon.value() / 4.0;
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            pgd_steps: 7,
            pgd_alpha: alpha,
            pgd_random_start: true,
            mode,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AttackKind::Pgd {
            if self.pgd_steps < 1 {
                return Err(Error::Config("PGD needs at least one step".into()));
            }
            if self.epsilon.value() > 0.0 && !(self.pgd_alpha > 0.0) {
                return Err(Error::Config(format!(
                    "PGD step size must be positive, got {}",
                    self.pgd_alpha
                )));
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_input_range(x: &Tensor) -> Result<()> {
    if x.data().iter().any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v)) {
        return Err(Error::Config(
            "attack input must lie in the [0,1] range".into(),
        ));
    }
    Ok(())
}

/// Gradient of the loss wrt the input on the smooth (hook-free,
/// unquantized) graph.
fn smooth_input_gradient(model: &LayerGraph, x: &Tensor, label: usize) -> Result<Tensor> {
    let opts = ForwardOpts::default();
    let (_, tape) = model.forward(x, &opts)?;
    model.input_gradient(x, label, tape)
}

/// Fast gradient sign method: `clip(x + eps * sign(grad), 0, 1)`.
/// With eps = 0 the input is returned bitwise unchanged.
pub fn fgsm(grad_model: &LayerGraph, x: &Tensor, label: usize, epsilon: f64) -> Result<Tensor> {
    check_input_range(x)?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let grad = smooth_input_gradient(grad_model, x, label)?;
    let mut adv = x.clone();
    for (v, g) in adv.data_mut().iter_mut().zip(grad.data()) {
        *v = (*v + epsilon * sign(*g)).clamp(0.0, 1.0);
    }
    Ok(adv)
}

/// Projected gradient descent in the L-inf ball of radius eps around x,
/// intersected with [0,1]. Every iterate is projected into that set.
#[allow(clippy::too_many_arguments)]
pub fn pgd(
    grad_model: &LayerGraph,
    x: &Tensor,
    label: usize,
    epsilon: f64,
    alpha: f64,
    steps: usize,
    random_start: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Tensor> {
    use rand::Rng;
    check_input_range(x)?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    if steps < 1 {
        return Err(Error::Config("PGD needs at least one step".into()));
    }
    let project = |adv: &mut Tensor| {
        for (v, orig) in adv.data_mut().iter_mut().zip(x.data()) {
            *v = v.clamp(orig - epsilon, orig + epsilon).clamp(0.0, 1.0);
        }
    };
    let mut adv = x.clone();
    if random_start {
        for v in adv.data_mut() {
            *v += rng.gen_range(-epsilon..=epsilon);
        }
        project(&mut adv);
    }
    for _ in 0..steps {
        let grad = smooth_input_gradient(grad_model, &adv, label)?;
        for (v, g) in adv.data_mut().iter_mut().zip(grad.data()) {
            *v += alpha * sign(*g);
        }
        project(&mut adv);
    }
    Ok(adv)
}

/// Per-sample weight-memory noise (bit errors in weight SRAM).
#[derive(Clone, Copy)]
pub struct WeightNoise<'a> {
    pub configs: &'a [HybridMemConfig],
    pub table: &'a BerTable,
    pub seed: u64,
}

/// A model as evaluated: graph plus whatever noise it carries.
#[derive(Clone, Copy)]
pub struct EvalTarget<'a> {
    pub graph: &'a LayerGraph,
    pub hooks: Option<&'a HookSet>,
    pub weight_noise: Option<WeightNoise<'a>>,
    /// Run activations through their calibrated 8-bit grids.
    pub quantize_activations: bool,
}

impl<'a> EvalTarget<'a> {
    /// Plain software model, no noise, no activation quantization.
    pub fn software(graph: &'a LayerGraph) -> Self {
        EvalTarget {
            graph,
            hooks: None,
            weight_noise: None,
            quantize_activations: false,
        }
    }

    pub fn with_quantized_activations(mut self) -> Self {
        self.quantize_activations = true;
        self
    }

    pub fn with_hooks(mut self, hooks: &'a HookSet) -> Self {
        self.hooks = Some(hooks);
        self
    }

    fn classify(&self, x: &Tensor, sample: u64) -> Result<usize> {
        let opts = ForwardOpts {
            hooks: self.hooks,
            sample,
            quantize_activations: self.quantize_activations,
        };
        let logits = match &self.weight_noise {
            None => self.graph.infer(x, &opts)?,
            Some(wn) => {
                let noisy =
                    apply_weight_bit_errors(self.graph, wn.configs, wn.table, wn.seed, sample)?;
                noisy.infer(x, &opts)?
            }
        };
        Ok(argmax(&logits))
    }
}

/// Accuracy in percent over the dataset. Deterministic given the target's
/// noise seeds; parallel over samples with per-sample noise substreams.
pub fn evaluate(target: &EvalTarget, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Config(format!(
            "evaluation set has {} images and {} labels",
            images.len(),
            labels.len()
        )));
    }
    let correct = images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(idx, (x, &y))| Ok(usize::from(target.classify(x, idx as u64)? == y)))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(100.0 * correct as f64 / images.len() as f64)
}

/// Accuracy on pre-generated adversarial inputs.
pub fn evaluate_on(target: &EvalTarget, adv: &[Tensor], labels: &[usize]) -> Result<f64> {
    evaluate(target, adv, labels)
}

/// Generates one adversarial input per sample, parallel across samples.
/// PGD randomness derives per sample from the attack seed, so the result is
/// independent of worker count.
pub fn generate_adversaries(
    grad_model: &LayerGraph,
    images: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(idx, (x, &y))| match cfg.kind {
            AttackKind::Fgsm => fgsm(grad_model, x, y, cfg.epsilon.value()),
            AttackKind::Pgd => {
                let mut rng = substream_indexed(cfg.seed, &["pgd", "sample"], idx as u64);
                pgd(
                    grad_model,
                    x,
                    y,
                    cfg.epsilon.value(),
                    cfg.pgd_alpha,
                    cfg.pgd_steps,
                    cfg.pgd_random_start,
                    &mut rng,
                )
            }
        })
        .collect()
}

/// One report record. `adv_loss` is exactly `clean_acc - adv_acc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub attack: AttackKind,
    pub mode: AttackMode,
    pub epsilon: Epsilon,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub adv_loss: f64,
}

impl ReportRow {
    pub fn new(
        model_id: &str,
        attack: AttackKind,
        mode: AttackMode,
        epsilon: Epsilon,
        clean_acc: f64,
        adv_acc: f64,
    ) -> Self {
        ReportRow {
            model_id: model_id.to_string(),
            attack,
            mode,
            epsilon,
            clean_acc,
            adv_acc,
            adv_loss: clean_acc - adv_acc,
        }
    }
}

/// Hardware side of an attack run: the evaluated model plus the graph HH
/// gradients come from (the mapped graph for crossbars; the noise-free
/// software graph for SRAM bit-error models).
pub struct HardwareModel<'a> {
    pub eval: EvalTarget<'a>,
    pub grad_graph: &'a LayerGraph,
}

fn check_compatible(a: &LayerGraph, b: &LayerGraph) -> Result<()> {
    if a.input_shape() != b.input_shape() || a.num_classes() != b.num_classes() {
        return Err(Error::Config(
            "software and hardware models must share input shape and class count".into(),
        ));
    }
    Ok(())
}

/// Runs one attack configuration and returns its report row.
pub fn run_attack(
    software: &EvalTarget,
    hardware: Option<&HardwareModel>,
    images: &[Tensor],
    labels: &[usize],
    cfg: &AttackConfig,
    model_id: &str,
) -> Result<ReportRow> {
    cfg.validate()?;
    if let Some(hw) = hardware {
        check_compatible(software.graph, hw.eval.graph)?;
    }
    let (grad_graph, eval_target) = match cfg.mode {
        AttackMode::Sw => (software.graph, *software),
        AttackMode::Sh => {
            let hw = hardware.ok_or_else(|| {
                Error::Config("mode SH requires a hardware model".into())
            })?;
            (software.graph, hw.eval)
        }
        AttackMode::Hh => {
            let hw = hardware.ok_or_else(|| {
                Error::Config("mode HH requires a hardware model".into())
            })?;
            (hw.grad_graph, hw.eval)
        }
    };
    let adversaries = generate_adversaries(grad_graph, images, labels, cfg)?;
    let clean_acc = evaluate(&eval_target, images, labels)?;
    let adv_acc = evaluate_on(&eval_target, &adversaries, labels)?;
    Ok(ReportRow::new(
        model_id,
        cfg.kind,
        cfg.mode,
        cfg.epsilon.clone(),
        clean_acc,
        adv_acc,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, LossKind};
    use rand::Rng;

    fn logistic_1d(w: f64) -> LayerGraph {
        // two logits (0, w*x): gradient of the class-0 loss wrt x is known
        let mut m = LayerGraph::build(
            vec![1],
            &[LayerSpec::Fc { out_features: 2 }],
            LossKind::SoftmaxXent,
        )
        .unwrap();
        m.layers[0].weights = Some(Tensor::from_vec(vec![2, 1], vec![0.0, w]).unwrap());
        m
    }

    fn small_model(seed: u64) -> LayerGraph {
        let mut m = LayerGraph::build(
            vec![8],
            &[
                LayerSpec::Fc { out_features: 12 },
                LayerSpec::Relu,
                LayerSpec::Fc { out_features: 3 },
            ],
            LossKind::SoftmaxXent,
        )
        .unwrap();
        m.init_weights(seed);
        m
    }

    fn random_inputs(n: usize, dim: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = crate::rng::substream(seed, &["inputs"]);
        let images = (0..n)
            .map(|_| {
                let data = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
                Tensor::from_vec(vec![dim], data).unwrap()
            })
            .collect();
        let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
        (images, labels)
    }

    #[test]
    fn fgsm_zero_epsilon_is_bitwise_identity() {
        let model = small_model(1);
        let (images, labels) = random_inputs(4, 8, 2);
        for (x, &y) in images.iter().zip(&labels) {
            let adv = fgsm(&model, x, y, 0.0).unwrap();
            assert_eq!(&adv, x);
        }
    }

    #[test]
    fn fgsm_follows_known_gradient_sign() {
        // loss of true class 0 has d/dx = p1 * w > 0 for w > 0, x anywhere
        let model = logistic_1d(3.0);
        let x = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        let adv = fgsm(&model, &x, 0, 0.2).unwrap();
        assert!((adv.data()[0] - 0.7).abs() < 1e-15);
        // clipping at 1
        let x = Tensor::from_vec(vec![1], vec![0.95]).unwrap();
        let adv = fgsm(&model, &x, 0, 0.2).unwrap();
        assert_eq!(adv.data()[0], 1.0);
    }

    #[test]
    fn fgsm_perturbs_by_exactly_epsilon_where_unclipped() {
        let model = small_model(3);
        let (images, labels) = random_inputs(6, 8, 4);
        let eps = 0.05;
        for (x, &y) in images.iter().zip(&labels) {
            let adv = fgsm(&model, x, y, eps).unwrap();
            let grad = smooth_input_gradient(&model, x, y).unwrap();
            for ((a, b), g) in adv.data().iter().zip(x.data()).zip(grad.data()) {
                let delta = (a - b).abs();
                let interior = *b >= eps && *b <= 1.0 - eps;
                if *g != 0.0 && interior {
                    assert!((delta - eps).abs() < 1e-12, "delta {delta}");
                }
                assert!(delta <= eps + 1e-12);
            }
        }
    }

    #[test]
    fn fgsm_rejects_out_of_range_inputs() {
        let model = small_model(5);
        let x = Tensor::from_vec(vec![8], vec![1.5; 8]).unwrap();
        assert!(matches!(fgsm(&model, &x, 0, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn pgd_single_step_without_random_start_equals_fgsm() {
        let model = small_model(7);
        let (images, labels) = random_inputs(5, 8, 8);
        let eps = 0.1;
        for (x, &y) in images.iter().zip(&labels) {
            let mut rng = crate::rng::substream(0, &["pgd"]);
            let p = pgd(&model, x, y, eps, eps, 1, false, &mut rng).unwrap();
            let f = fgsm(&model, x, y, eps).unwrap();
            assert_eq!(p, f);
        }
    }

    #[test]
    fn pgd_iterates_stay_in_ball_and_box() {
        let model = small_model(9);
        let (images, labels) = random_inputs(8, 8, 10);
        let eps = 0.08;
        let cfg = AttackConfig::pgd(Epsilon::new(eps).unwrap(), AttackMode::Sw, 11);
        let advs = generate_adversaries(&model, &images, &labels, &cfg).unwrap();
        for (adv, x) in advs.iter().zip(&images) {
            for (a, b) in adv.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= eps + 1e-12);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn pgd_needs_positive_alpha() {
        let mut cfg = AttackConfig::pgd(Epsilon::new(0.1).unwrap(), AttackMode::Sw, 0);
        cfg.pgd_alpha = 0.0;
        assert!(cfg.validate().is_err());
        cfg.pgd_alpha = 0.025;
        cfg.pgd_steps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adversary_generation_is_deterministic() {
        let model = small_model(13);
        let (images, labels) = random_inputs(10, 8, 14);
        let cfg = AttackConfig::pgd(Epsilon::fraction(8, 255).unwrap(), AttackMode::Sw, 15);
        let a = generate_adversaries(&model, &images, &labels, &cfg).unwrap();
        let b = generate_adversaries(&model, &images, &labels, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_attack_zero_epsilon_has_zero_adversarial_loss() {
        let model = small_model(17);
        let (images, labels) = random_inputs(20, 8, 18);
        let cfg = AttackConfig::fgsm(Epsilon::new(0.0).unwrap(), AttackMode::Sw, 0);
        let target = EvalTarget::software(&model);
        let row = run_attack(&target, None, &images, &labels, &cfg, "m").unwrap();
        assert_eq!(row.adv_acc, row.clean_acc);
        assert_eq!(row.adv_loss, 0.0);
    }

    #[test]
    fn identical_models_make_all_modes_agree() {
        let model = small_model(19);
        let (images, labels) = random_inputs(30, 8, 20);
        let target = EvalTarget::software(&model);
        let hw = HardwareModel {
            eval: target,
            grad_graph: &model,
        };
        let mut rows = Vec::new();
        for mode in [AttackMode::Sw, AttackMode::Sh, AttackMode::Hh] {
            let cfg = AttackConfig::fgsm(Epsilon::new(0.1).unwrap(), mode, 0);
            rows.push(run_attack(&target, Some(&hw), &images, &labels, &cfg, "m").unwrap());
        }
        assert_eq!(rows[0].clean_acc, rows[1].clean_acc);
        assert_eq!(rows[0].adv_acc, rows[1].adv_acc);
        assert_eq!(rows[1].adv_acc, rows[2].adv_acc);
        assert_eq!(rows[1].adv_loss, rows[2].adv_loss);
    }

    #[test]
    fn hh_without_hardware_is_config_error() {
        let model = small_model(23);
        let (images, labels) = random_inputs(4, 8, 24);
        let cfg = AttackConfig::fgsm(Epsilon::new(0.1).unwrap(), AttackMode::Hh, 0);
        let target = EvalTarget::software(&model);
        let err = run_attack(&target, None, &images, &labels, &cfg, "m").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn report_row_identity_holds() {
        let row = ReportRow::new(
            "m",
            AttackKind::Fgsm,
            AttackMode::Sw,
            Epsilon::fraction(8, 255).unwrap(),
            91.25,
            63.5,
        );
        assert_eq!(row.adv_loss, row.clean_acc - row.adv_acc);
        assert_eq!(row.epsilon.label(), "8/255");
    }

    #[test]
    fn epsilon_parses_fractions_and_decimals() {
        let e: Epsilon = "8/255".parse().unwrap();
        assert_eq!(e.value(), 8.0 / 255.0);
        assert_eq!(e.label(), "8/255");
        let e: Epsilon = "0.05".parse().unwrap();
        assert_eq!(e.value(), 0.05);
        assert!("hello".parse::<Epsilon>().is_err());
        assert!("-0.1".parse::<Epsilon>().is_err());
    }

    #[test]
    fn perfect_and_chance_level_accuracy() {
        let model = logistic_1d(5.0);
        // one sample classified correctly: logits (0, 5x), pick x so class 1 wins
        let x = Tensor::from_vec(vec![1], vec![0.9]).unwrap();
        let target = EvalTarget::software(&model);
        let acc = evaluate(&target, &[x.clone()], &[1]).unwrap();
        assert_eq!(acc, 100.0);
        let acc = evaluate(&target, &[x], &[0]).unwrap();
        assert_eq!(acc, 0.0);
    }
}
