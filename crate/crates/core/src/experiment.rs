//! Experiment configuration, staged execution and the run manifest.
//!
//! A run is: load dataset -> train or load the model -> set up hardware
//! (crossbar mapping, SRAM noise hooks, or the layer search) -> attack grid
//! over all requested modes -> report emission. All randomness derives from
//! the root seed through labelled substreams, so toggling one stage never
//! perturbs another's stream and identical configs reproduce identical
//! outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    evaluate, generate_adversaries, AttackConfig, AttackKind, AttackMode, Epsilon, EvalTarget,
    HardwareModel, ReportRow, WeightNoise,
};
use crate::dataset::{load_dataset, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, train::TrainConfig, HookSet, LayerGraph};
use crate::rng::{derive_seed, derive_seed_indexed};
use crate::search::{run_layer_search, LayerSearchConfig};
use crate::sram::{format_hybrid_config, make_hook_set, parse_hybrid_config, BerTable, NoiseTarget};
use crate::xbar::{map_model, XbarConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Identifier used in report rows.
    #[serde(default = "default_model_id")]
    pub id: String,
    /// Load this checkpoint instead of training.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

fn default_model_id() -> String {
    "desk-cnn".into()
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            id: default_model_id(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lr_decay: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 4,
            lr: 0.08,
            batch_size: 32,
            lr_decay: 0.85,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackGridSpec {
    pub kinds: Vec<AttackKind>,
    /// Epsilon grid; exact fractions like "8/255" keep their notation in
    /// reports.
    pub epsilons: Vec<Epsilon>,
    pub modes: Vec<AttackMode>,
    pub pgd_steps: usize,
    /// PGD step size as a fraction of epsilon.
    pub pgd_alpha_fraction: f64,
    pub pgd_random_start: bool,
}

impl Default for AttackGridSpec {
    fn default() -> Self {
        AttackGridSpec {
            kinds: vec![AttackKind::Fgsm],
            epsilons: ["0.05", "0.1", "0.15", "0.2", "0.25", "0.3"]
                .iter()
                .map(|s| s.parse().expect("valid default epsilon"))
                .collect(),
            modes: vec![AttackMode::Sw, AttackMode::Sh, AttackMode::Hh],
            pgd_steps: 7,
            pgd_alpha_fraction: 0.25,
            pgd_random_start: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SramTarget {
    #[default]
    Activations,
    Weights,
}

/// Exactly one hardware mode per run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum HardwareSpec {
    /// No hardware model: SH/HH degenerate to the software model.
    None,
    /// Crossbar-mapped model from an XbarConfig JSON file.
    Xbar { config: String },
    /// SRAM bit-error noise from a per-layer hybrid config file.
    Sram {
        config: String,
        #[serde(default)]
        ber_table: Option<String>,
        #[serde(default)]
        target: SramTarget,
    },
    /// Run the layer search first, then attack the selected configuration.
    SramSearch {
        vdd: f64,
        epsilon: String,
        #[serde(default)]
        ber_table: Option<String>,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
}

fn default_threshold() -> f64 {
    5.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub attacks: AttackGridSpec,
    pub hardware: HardwareSpec,
    pub seed: u64,
    pub output_dir: String,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_calibration_samples")]
    pub calibration_samples: usize,
}

fn default_eval_samples() -> usize {
    1000
}

fn default_calibration_samples() -> usize {
    256
}

impl ExperimentConfig {
    /// Parses a config file, applies the HWNOISE_OUT override, and validates
    /// that every referenced file exists before any compute starts.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Ok(out) = std::env::var("HWNOISE_OUT") {
            cfg.output_dir = out;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be >= 1".into()));
        }
        if self.attacks.kinds.is_empty()
            || self.attacks.epsilons.is_empty()
            || self.attacks.modes.is_empty()
        {
            return Err(Error::Config("attack grid must not be empty".into()));
        }
        for path in self.referenced_files() {
            if !Path::new(&path).exists() {
                return Err(Error::Config(format!("referenced file '{path}' does not exist")));
            }
        }
        if let HardwareSpec::SramSearch { epsilon, .. } = &self.hardware {
            epsilon.parse::<Epsilon>()?;
        }
        Ok(())
    }

    /// Every external file this config references.
    pub fn referenced_files(&self) -> Vec<String> {
        let mut files = Vec::new();
        match &self.dataset {
            DatasetSpec::Mnist { path } => {
                for f in [
                    "train-images-idx3-ubyte",
                    "train-labels-idx1-ubyte",
                    "t10k-images-idx3-ubyte",
                    "t10k-labels-idx1-ubyte",
                ] {
                    files.push(Path::new(path).join(f).display().to_string());
                }
            }
            DatasetSpec::Cifar10 { path } => {
                for i in 1..=5 {
                    files.push(
                        Path::new(path)
                            .join(format!("data_batch_{i}.bin"))
                            .display()
                            .to_string(),
                    );
                }
                files.push(Path::new(path).join("test_batch.bin").display().to_string());
            }
            _ => {}
        }
        if let Some(cp) = &self.model.checkpoint {
            files.push(
                Path::new(cp)
                    .join(checkpoint::MANIFEST_NAME)
                    .display()
                    .to_string(),
            );
        }
        match &self.hardware {
            HardwareSpec::None => {}
            HardwareSpec::Xbar { config } => files.push(config.clone()),
            HardwareSpec::Sram {
                config, ber_table, ..
            } => {
                files.push(config.clone());
                if let Some(t) = ber_table {
                    files.push(t.clone());
                }
            }
            HardwareSpec::SramSearch { ber_table, .. } => {
                if let Some(t) = ber_table {
                    files.push(t.clone());
                }
            }
        }
        files
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub wall_clock_ms: u128,
    pub completed: bool,
}

/// Resolved config snapshot, content hashes of all inputs and outputs, and
/// per-stage wall clock. Written as manifest.json in the output directory;
/// a failed run records the failing stage.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub input_hashes: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub outputs: BTreeMap<String, String>,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

struct StageTimer<'a> {
    manifest: &'a mut RunManifest,
}

impl RunManifest {
    fn new(config: &ExperimentConfig) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            input_hashes: BTreeMap::new(),
            stages: Vec::new(),
            outputs: BTreeMap::new(),
            completed: false,
            failed_stage: None,
        }
    }

    fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs
            .insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        fs::write(&path, json + "\n")?;
        Ok(path)
    }
}

impl<'a> StageTimer<'a> {
    fn run<T>(
        manifest: &'a mut RunManifest,
        name: &str,
        f: impl FnOnce(&mut RunManifest) -> Result<T>,
    ) -> Result<T> {
        let start = Instant::now();
        let result = f(manifest);
        manifest.stages.push(StageRecord {
            name: name.to_string(),
            wall_clock_ms: start.elapsed().as_millis(),
            completed: result.is_ok(),
        });
        if result.is_err() {
            manifest.failed_stage = Some(name.to_string());
        }
        result
    }
}

/// Prepared hardware side of a run.
enum Hardware {
    /// Degenerate: the software model plays the hardware role.
    None,
    Xbar {
        mapped: crate::xbar::MappedModel,
    },
    Sram {
        hooks: HookSet,
        table: BerTable,
        configs: Vec<crate::sram::HybridMemConfig>,
        target: SramTarget,
        injection_seed: u64,
    },
}

/// Everything a finished run hands back.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub rows: Vec<ReportRow>,
    pub manifest_path: PathBuf,
}

/// Runs the whole experiment described by `config`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir)?;
    let mut manifest = RunManifest::new(config);
    for file in config.referenced_files() {
        let hash = hash_file(Path::new(&file))?;
        manifest.input_hashes.insert(file, hash);
    }

    let result = run_stages(config, &out_dir, &mut manifest);
    match result {
        Ok(rows) => {
            manifest.completed = true;
            let manifest_path = manifest.write(&out_dir)?;
            Ok(RunOutput {
                manifest,
                rows,
                manifest_path,
            })
        }
        Err(e) => {
            // record the partial run before propagating
            let _ = manifest.write(&out_dir);
            Err(e)
        }
    }
}

fn run_stages(
    config: &ExperimentConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<Vec<ReportRow>> {
    let (train_set, test_set) = StageTimer::run(manifest, "load-dataset", |_| {
        load_dataset(&config.dataset)
    })?;
    let eval_set = test_set.take(config.eval_samples);

    let model = StageTimer::run(manifest, "train-or-load", |m| {
        train_or_load(config, &train_set, out_dir, m)
    })?;

    let hardware = StageTimer::run(manifest, "hardware-setup", |m| {
        setup_hardware(config, &model, &eval_set, out_dir, m)
    })?;

    let rows = StageTimer::run(manifest, "attack-grid", |_| {
        attack_grid(config, &model, &hardware, &eval_set)
    })?;

    StageTimer::run(manifest, "emit-reports", |m| {
        for path in crate::report::emit_report(&rows, out_dir)? {
            m.record_output(&path)?;
        }
        Ok(())
    })?;
    Ok(rows)
}

fn train_or_load(
    config: &ExperimentConfig,
    train_set: &Dataset,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<LayerGraph> {
    let model = if let Some(cp) = &config.model.checkpoint {
        checkpoint::load(Path::new(cp))?
    } else {
        let mut model = LayerGraph::desk_cnn(
            train_set.input_shape.clone(),
            train_set.num_classes,
        )?;
        let train_seed = derive_seed(config.seed, &["train"]);
        model.init_weights(train_seed);
        let cfg = TrainConfig {
            epochs: config.train.epochs,
            lr: config.train.lr,
            batch_size: config.train.batch_size,
            seed: train_seed,
            lr_decay: config.train.lr_decay,
        };
        let (mut trained, _) =
            crate::nn::train::train(&model, &train_set.images, &train_set.labels, &cfg)?;
        trained.quantize_weights()?;
        let calib = train_set.take(config.calibration_samples.max(1));
        trained.calibrate_activations(&calib.images)?;
        let cp_dir = out_dir.join("checkpoint");
        checkpoint::save(&trained, &cp_dir, Some(train_seed))?;
        for entry in fs::read_dir(&cp_dir)? {
            manifest.record_output(&entry?.path())?;
        }
        trained
    };
    Ok(model)
}

fn load_ber_table(path: &Option<String>) -> Result<BerTable> {
    match path {
        Some(p) => BerTable::parse(&fs::read_to_string(p)?),
        None => Ok(BerTable::default_synthetic()),
    }
}

fn setup_hardware(
    config: &ExperimentConfig,
    model: &LayerGraph,
    eval_set: &Dataset,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<Hardware> {
    let injection_seed = derive_seed(config.seed, &["injection"]);
    match &config.hardware {
        HardwareSpec::None => Ok(Hardware::None),
        HardwareSpec::Xbar { config: path } => {
            let xcfg = XbarConfig::load(Path::new(path))?;
            let mapped = map_model(model, &xcfg)?;
            Ok(Hardware::Xbar { mapped })
        }
        HardwareSpec::Sram {
            config: path,
            ber_table,
            target,
        } => {
            let table = load_ber_table(ber_table)?;
            let mut configs = parse_hybrid_config(&fs::read_to_string(path)?)?;
            if *target == SramTarget::Weights {
                for c in &mut configs {
                    c.target = NoiseTarget::Weights;
                }
            }
            let hooks = match target {
                SramTarget::Activations => make_hook_set(&configs, &table, injection_seed)?,
                SramTarget::Weights => HookSet::new(vec![])?,
            };
            Ok(Hardware::Sram {
                hooks,
                table,
                configs,
                target: *target,
                injection_seed,
            })
        }
        HardwareSpec::SramSearch {
            vdd,
            epsilon,
            ber_table,
            threshold,
        } => {
            let table = load_ber_table(ber_table)?;
            let mut search_cfg = LayerSearchConfig::new(
                *vdd,
                epsilon.parse()?,
                derive_seed(config.seed, &["search"]),
            );
            search_cfg.threshold = *threshold;
            let result =
                run_layer_search(model, &table, &search_cfg, &eval_set.images, &eval_set.labels)?;
            let log_path = out_dir.join("search_log.csv");
            crate::report::write_search_log(&result.log, &log_path)?;
            manifest.record_output(&log_path)?;
            let cfg_path = out_dir.join("selected_hybrid.cfg");
            fs::write(
                &cfg_path,
                format_hybrid_config(model.layers.len(), &result.outcome.configs),
            )?;
            manifest.record_output(&cfg_path)?;
            let outcome_path = out_dir.join("search_outcome.json");
            let json = serde_json::to_string_pretty(&result.outcome)
                .map_err(|e| Error::Format(format!("search outcome: {e}")))?;
            fs::write(&outcome_path, json + "\n")?;
            manifest.record_output(&outcome_path)?;
            let configs = result.outcome.configs.clone();
            let hooks = make_hook_set(&configs, &table, injection_seed)?;
            Ok(Hardware::Sram {
                hooks,
                table,
                configs,
                target: SramTarget::Activations,
                injection_seed,
            })
        }
    }
}

/// Runs the (kind, epsilon, mode) grid. Adversaries are generated once per
/// gradient source and reused; clean accuracies once per evaluated model.
fn attack_grid(
    config: &ExperimentConfig,
    model: &LayerGraph,
    hardware: &Hardware,
    eval_set: &Dataset,
) -> Result<Vec<ReportRow>> {
    let quantize = matches!(hardware, Hardware::Sram { .. });
    let mut software = EvalTarget::software(model);
    software.quantize_activations = quantize;

    // hardware target borrows hooks/table; keep locals alive here
    let (hw_eval, hw_grad_graph): (EvalTarget, &LayerGraph) = match hardware {
        Hardware::None => (software, model),
        Hardware::Xbar { mapped } => (EvalTarget::software(&mapped.graph), &mapped.graph),
        Hardware::Sram {
            hooks,
            table,
            configs,
            target,
            injection_seed,
        } => {
            let mut t = EvalTarget::software(model).with_quantized_activations();
            match target {
                SramTarget::Activations => t = t.with_hooks(hooks),
                SramTarget::Weights => {
                    t.weight_noise = Some(WeightNoise {
                        configs,
                        table,
                        seed: *injection_seed,
                    });
                }
            }
            // SRAM gradients are noise-free: HH uses the software graph
            (t, model)
        }
    };
    let hw_model = HardwareModel {
        eval: hw_eval,
        grad_graph: hw_grad_graph,
    };

    let images = &eval_set.images;
    let labels = &eval_set.labels;
    let ca_software = evaluate(&software, images, labels)?;
    let ca_hardware = evaluate(&hw_model.eval, images, labels)?;

    let mut rows = Vec::new();
    for kind in &config.attacks.kinds {
        for (ei, eps) in config.attacks.epsilons.iter().enumerate() {
            let seed = derive_seed_indexed(
                config.seed,
                &["attack", kind.as_str()],
                ei as u64,
            );
            let base = AttackConfig {
                kind: *kind,
                epsilon: eps.clone(),
                pgd_steps: config.attacks.pgd_steps,
                pgd_alpha: eps.value() * config.attacks.pgd_alpha_fraction,
                pgd_random_start: config.attacks.pgd_random_start,
                mode: AttackMode::Sw,
                seed,
            };
            base.validate()?;
            let need_sw_adv = config
                .attacks
                .modes
                .iter()
                .any(|m| matches!(m, AttackMode::Sw | AttackMode::Sh));
            let sw_adv = if need_sw_adv {
                Some(generate_adversaries(model, images, labels, &base)?)
            } else {
                None
            };
            let hh_adv = if config.attacks.modes.contains(&AttackMode::Hh) {
                Some(generate_adversaries(
                    hw_model.grad_graph,
                    images,
                    labels,
                    &base,
                )?)
            } else {
                None
            };
            for mode in &config.attacks.modes {
                let (target, ca, adv) = match mode {
                    AttackMode::Sw => (&software, ca_software, sw_adv.as_ref().unwrap()),
                    AttackMode::Sh => (&hw_model.eval, ca_hardware, sw_adv.as_ref().unwrap()),
                    AttackMode::Hh => (&hw_model.eval, ca_hardware, hh_adv.as_ref().unwrap()),
                };
                let adv_acc = evaluate(target, adv, labels)?;
                rows.push(ReportRow::new(
                    &config.model.id,
                    *kind,
                    *mode,
                    eps.clone(),
                    ca,
                    adv_acc,
                ));
            }
        }
    }
    Ok(rows)
}
