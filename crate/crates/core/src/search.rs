//! Layer selection for bit-error injection.
//!
//! For every layer with an activation memory, the 6T-cell count is swept
//! from 1 to 8 at fixed Vdd and a fixed-strength FGSM attack is evaluated on
//! a held-out validation split. Layers beating the noise-free baseline by
//! more than five points of adversarial accuracy are shortlisted, their best
//! configurations are combined in different ways, and the combination with
//! the highest adversarial accuracy wins. Adversaries are generated once
//! from the noise-free model and reused everywhere, so the attack inputs are
//! bitwise identical to baseline-model adversaries.
//!
//! Selection happens on the validation split; the final outcome is also
//! reported on the untouched test split.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::attacks::{evaluate, AttackConfig, AttackKind, AttackMode, Epsilon, EvalTarget};
use crate::error::{Error, Result};
use crate::nn::LayerGraph;
use crate::rng::substream;
use crate::sram::{make_hook_set, BerTable, HybridMemConfig};
use crate::tensor::Tensor;

/// Outcome of sweeping one layer's 8T/6T split.
#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub layer_id: usize,
    pub best_n8: u8,
    pub best_n6: u8,
    /// Validation adversarial accuracy of the best ratio.
    pub adv_accuracy: f64,
    pub baseline_adv_accuracy: f64,
    /// adv_accuracy - baseline_adv_accuracy.
    pub delta: f64,
    /// Full per-ratio log (n6 = 1..=8 in order).
    pub per_ratio: Vec<RatioEval>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RatioEval {
    pub n6: u8,
    pub adv_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchPhase {
    Sweep,
    Combine,
}

/// One evaluated candidate, retained so the selection is auditable.
#[derive(Clone, Debug, Serialize)]
pub struct EvalLogEntry {
    pub phase: SearchPhase,
    pub layers: Vec<usize>,
    /// One (n8, n6) per layer, aligned with `layers`.
    pub ratios: Vec<(u8, u8)>,
    pub vdd: f64,
    pub adv_accuracy: f64,
}

/// Final selection plus the metrics the paper's tables report.
#[derive(Clone, Debug, Serialize)]
pub struct SearchOutcome {
    pub selected_layers: Vec<usize>,
    pub configs: Vec<HybridMemConfig>,
    /// Adversarial accuracy of the winner on the selection (validation)
    /// split; equals the maximum over every evaluated combination.
    pub selection_adv_accuracy: f64,
    pub test_adv_accuracy: f64,
    pub test_clean_accuracy: f64,
    pub baseline_test_adv_accuracy: f64,
    pub baseline_test_clean_accuracy: f64,
    /// Baseline clean accuracy minus noisy clean accuracy (positive = drop).
    pub clean_accuracy_deviation: f64,
}

fn noisy_accuracy(
    model: &LayerGraph,
    cfgs: &[HybridMemConfig],
    table: &BerTable,
    seed: u64,
    images: &[Tensor],
    labels: &[usize],
) -> Result<f64> {
    let hooks = make_hook_set(cfgs, table, seed)?;
    let target = EvalTarget::software(model)
        .with_quantized_activations()
        .with_hooks(&hooks);
    evaluate(&target, images, labels)
}

/// Sweeps n6 = 1..=8 for one layer at fixed Vdd on pre-generated
/// adversaries; ties break toward smaller n6. Layers without activations
/// (flatten) are a configuration error; the orchestrator skips them.
#[allow(clippy::too_many_arguments)]
pub fn sweep_layer(
    model: &LayerGraph,
    layer_id: usize,
    vdd: f64,
    table: &BerTable,
    adv_images: &[Tensor],
    labels: &[usize],
    baseline_adv_accuracy: f64,
    seed: u64,
) -> Result<SweepResult> {
    let layer = model
        .layers
        .get(layer_id)
        .ok_or_else(|| Error::Config(format!("unknown layer {layer_id}")))?;
    if !layer.kind.hookable() {
        return Err(Error::Config(format!(
            "layer {layer_id} ({}) has no activation memory to sweep",
            layer.kind.name()
        )));
    }
    let mut per_ratio = Vec::with_capacity(8);
    let mut best: Option<(u8, f64)> = None;
    for n6 in 1..=8u8 {
        let cfg = HybridMemConfig::new(layer_id, 8 - n6, n6, vdd)?;
        let aa = noisy_accuracy(model, &[cfg], table, seed, adv_images, labels)?;
        per_ratio.push(RatioEval {
            n6,
            adv_accuracy: aa,
        });
        // strict improvement only: ties keep the smaller n6
        if best.map_or(true, |(_, b)| aa > b) {
            best = Some((n6, aa));
        }
    }
    let (best_n6, adv_accuracy) = best.expect("eight candidates");
    Ok(SweepResult {
        layer_id,
        best_n8: 8 - best_n6,
        best_n6,
        adv_accuracy,
        baseline_adv_accuracy,
        delta: adv_accuracy - baseline_adv_accuracy,
        per_ratio,
    })
}

/// Layers whose best configuration beats the baseline by more than
/// `threshold` points, in input order. An empty shortlist falls back to the
/// single best layer (`fallback = true`).
pub fn shortlist(results: &[SweepResult], threshold: f64) -> (Vec<usize>, bool) {
    let picked: Vec<usize> = results
        .iter()
        .filter(|r| r.delta > threshold)
        .map(|r| r.layer_id)
        .collect();
    if !picked.is_empty() {
        return (picked, false);
    }
    let top = results
        .iter()
        .max_by(|a, b| a.delta.partial_cmp(&b.delta).unwrap())
        .map(|r| r.layer_id);
    (top.into_iter().collect(), true)
}

/// Data splits used by the combination step.
pub struct SearchData<'a> {
    pub val_adv: &'a [Tensor],
    pub val_labels: &'a [usize],
    pub test_images: &'a [Tensor],
    pub test_adv: &'a [Tensor],
    pub test_labels: &'a [usize],
}

/// Enumerated candidate subsets: exhaustive for up to 8 layers, otherwise
/// singletons, pairs and the full set.
fn candidate_subsets(n: usize) -> Vec<Vec<usize>> {
    if n <= 8 {
        (1u32..(1 << n))
            .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
            .collect()
    } else {
        let mut subsets: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for i in 0..n {
            for j in i + 1..n {
                subsets.push(vec![i, j]);
            }
        }
        subsets.push((0..n).collect());
        subsets
    }
}

/// Evaluates every candidate combination of shortlisted layers (each at its
/// per-layer best configuration) and returns the argmax along with the full
/// evaluation log. The winner is re-evaluated on the test split.
pub fn combine_and_select(
    model: &LayerGraph,
    short: &[usize],
    best_cfgs: &BTreeMap<usize, HybridMemConfig>,
    table: &BerTable,
    data: &SearchData,
    baselines: &SearchBaselines,
    seed: u64,
) -> Result<(SearchOutcome, Vec<EvalLogEntry>)> {
    if short.is_empty() {
        return Err(Error::Config("empty shortlist".into()));
    }
    let mut log = Vec::new();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for subset in candidate_subsets(short.len()) {
        let layers: Vec<usize> = subset.iter().map(|&i| short[i]).collect();
        let cfgs: Vec<HybridMemConfig> =
            layers.iter().map(|l| best_cfgs[l]).collect();
        let aa = noisy_accuracy(model, &cfgs, table, seed, data.val_adv, data.val_labels)?;
        log.push(EvalLogEntry {
            phase: SearchPhase::Combine,
            layers: layers.clone(),
            ratios: cfgs.iter().map(|c| (c.n8, c.n6)).collect(),
            vdd: cfgs.first().map_or(0.0, |c| c.vdd),
            adv_accuracy: aa,
        });
        if best.as_ref().map_or(true, |(_, b)| aa > *b) {
            best = Some((layers, aa));
        }
    }
    let (selected_layers, selection_adv_accuracy) = best.expect("nonempty enumeration");
    let configs: Vec<HybridMemConfig> = selected_layers.iter().map(|l| best_cfgs[l]).collect();
    let test_adv_accuracy =
        noisy_accuracy(model, &configs, table, seed, data.test_adv, data.test_labels)?;
    let test_clean_accuracy =
        noisy_accuracy(model, &configs, table, seed, data.test_images, data.test_labels)?;
    Ok((
        SearchOutcome {
            selected_layers,
            configs,
            selection_adv_accuracy,
            test_adv_accuracy,
            test_clean_accuracy,
            baseline_test_adv_accuracy: baselines.test_adv_accuracy,
            baseline_test_clean_accuracy: baselines.test_clean_accuracy,
            clean_accuracy_deviation: baselines.test_clean_accuracy - test_clean_accuracy,
        },
        log,
    ))
}

/// Noise-free reference accuracies on both splits.
pub struct SearchBaselines {
    pub val_adv_accuracy: f64,
    pub test_adv_accuracy: f64,
    pub test_clean_accuracy: f64,
}

/// Parameters of a full layer search.
#[derive(Clone, Debug)]
pub struct LayerSearchConfig {
    /// Supply voltage held constant during the ratio sweep.
    pub vdd: f64,
    /// Fixed FGSM strength used for every candidate evaluation.
    pub epsilon: Epsilon,
    /// Shortlist threshold in accuracy points.
    pub threshold: f64,
    /// Fraction of the evaluation set held out for selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl LayerSearchConfig {
    pub fn new(vdd: f64, epsilon: Epsilon, seed: u64) -> Self {
        LayerSearchConfig {
            vdd,
            epsilon,
            threshold: 5.0,
            val_fraction: 0.2,
            seed,
        }
    }
}

/// Everything a search run produced: the outcome, all sweeps, the complete
/// evaluation log and any skip notices.
#[derive(Debug)]
pub struct LayerSearchResult {
    pub outcome: SearchOutcome,
    pub sweeps: Vec<SweepResult>,
    pub shortlisted: Vec<usize>,
    pub shortlist_fallback: bool,
    pub log: Vec<EvalLogEntry>,
    pub notices: Vec<String>,
}

/// Runs the full methodology: per-layer ratio sweep at fixed Vdd, > 5 point
/// shortlist, combination evaluation, final test-split report.
pub fn run_layer_search(
    model: &LayerGraph,
    table: &BerTable,
    cfg: &LayerSearchConfig,
    images: &[Tensor],
    labels: &[usize],
) -> Result<LayerSearchResult> {
    if images.len() != labels.len() || images.len() < 10 {
        return Err(Error::Config(format!(
            "layer search needs a labelled evaluation set (got {} images)",
            images.len()
        )));
    }
    if model
        .layers
        .iter()
        .any(|l| l.quantize_activations && l.act_quant.is_none())
    {
        return Err(Error::Config(
            "model has uncalibrated activation quantization; run calibration first".into(),
        ));
    }
    table.ber(cfg.vdd)?; // fail early on out-of-span voltages

    // deterministic validation/test split
    let mut order: Vec<usize> = (0..images.len()).collect();
    {
        use rand::Rng;
        let mut rng = substream(cfg.seed, &["search", "split"]);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    let n_val = ((images.len() as f64) * cfg.val_fraction).round().max(1.0) as usize;
    let (val_idx, test_idx) = order.split_at(n_val.min(images.len() - 1));
    let pick = |idx: &[usize], xs: &[Tensor]| -> Vec<Tensor> {
        idx.iter().map(|&i| xs[i].clone()).collect()
    };
    let val_images = pick(val_idx, images);
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
    let test_images = pick(test_idx, images);
    let test_labels: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    // adversaries from the noise-free model, bitwise shared by every candidate
    let atk = AttackConfig {
        kind: AttackKind::Fgsm,
        epsilon: cfg.epsilon.clone(),
        pgd_steps: 0,
        pgd_alpha: 0.0,
        pgd_random_start: false,
        mode: AttackMode::Sw,
        seed: cfg.seed,
    };
    let val_adv = crate::attacks::generate_adversaries(model, &val_images, &val_labels, &atk)?;
    let test_adv = crate::attacks::generate_adversaries(model, &test_images, &test_labels, &atk)?;

    let baseline_target = EvalTarget::software(model).with_quantized_activations();
    let baselines = SearchBaselines {
        val_adv_accuracy: evaluate(&baseline_target, &val_adv, &val_labels)?,
        test_adv_accuracy: evaluate(&baseline_target, &test_adv, &test_labels)?,
        test_clean_accuracy: evaluate(&baseline_target, &test_images, &test_labels)?,
    };

    let mut notices = Vec::new();
    let mut sweeps = Vec::new();
    let mut log = Vec::new();
    for (layer_id, layer) in model.layers.iter().enumerate() {
        if !layer.kind.hookable() {
            notices.push(format!(
                "layer {layer_id} ({}) skipped: no activation memory",
                layer.kind.name()
            ));
            continue;
        }
        let sweep = sweep_layer(
            model,
            layer_id,
            cfg.vdd,
            table,
            &val_adv,
            &val_labels,
            baselines.val_adv_accuracy,
            cfg.seed,
        )?;
        for r in &sweep.per_ratio {
            log.push(EvalLogEntry {
                phase: SearchPhase::Sweep,
                layers: vec![layer_id],
                ratios: vec![(8 - r.n6, r.n6)],
                vdd: cfg.vdd,
                adv_accuracy: r.adv_accuracy,
            });
        }
        sweeps.push(sweep);
    }
    if sweeps.is_empty() {
        return Err(Error::Config("model has no sweepable layers".into()));
    }

    let (short, fallback) = shortlist(&sweeps, cfg.threshold);
    if fallback {
        notices.push(format!(
            "no layer beat the baseline by more than {} points; falling back to the single best layer",
            cfg.threshold
        ));
    }
    let best_cfgs: BTreeMap<usize, HybridMemConfig> = sweeps
        .iter()
        .map(|s| {
            (
                s.layer_id,
                HybridMemConfig::new(s.layer_id, s.best_n8, s.best_n6, cfg.vdd)
                    .expect("swept ratios are valid"),
            )
        })
        .collect();
    let data = SearchData {
        val_adv: &val_adv,
        val_labels: &val_labels,
        test_images: &test_images,
        test_adv: &test_adv,
        test_labels: &test_labels,
    };
    let (outcome, combine_log) =
        combine_and_select(model, &short, &best_cfgs, table, &data, &baselines, cfg.seed)?;
    log.extend(combine_log);

    Ok(LayerSearchResult {
        outcome,
        sweeps,
        shortlisted: short,
        shortlist_fallback: fallback,
        log,
        notices,
    })
}
