//! Experiment manifests: a TOML file with `[train]`, `[model]`, `[data]` and
//! `[sweep]` tables. Any key can be overridden from the environment as
//! `SDIF_<TABLE>__<KEY>=<toml value>`, e.g. `SDIF_TRAIN__LR=0.0005`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::SynthSpec;
use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "SDIF_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine: bool,
    /// Weight of the adversarial loss.
    pub lambda: f64,
    /// When false the adversarial loss is left out of the objective entirely.
    pub adv_in_objective: bool,
    pub grl_strength: f64,
    /// Fraction of steps over which the reversal strength ramps up from 0.
    pub grl_warmup: Option<f64>,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Epochs over which the DFE temperature decays linearly.
    pub temperature_epochs: usize,
    pub bank_refresh_epochs: usize,
    /// Training images per class whose statistics feed the style bank.
    pub bank_pool_per_class: usize,
    pub eval_batch_size: usize,
    /// Checkpoint whose `stage*` weights initialize the backbone.
    pub init_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            cosine: true,
            lambda: 1.0,
            adv_in_objective: true,
            grl_strength: 1.0,
            grl_warmup: None,
            temperature_start: 30.0,
            temperature_end: 1.0,
            temperature_epochs: 10,
            bank_refresh_epochs: 1,
            bank_pool_per_class: 256,
            eval_batch_size: 128,
            init_weights: None,
        }
    }
}

impl TrainConfig {
    fn problems(&self, out: &mut Vec<String>) {
        if self.epochs == 0 {
            out.push("train.epochs must be ≥ 1".into());
        }
        if self.batch_size < 2 {
            out.push("train.batch_size must be ≥ 2 (batch norm)".into());
        }
        if !(self.lr > 0.0) {
            out.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.lambda >= 0.0) {
            out.push(format!("train.lambda must be ≥ 0, got {}", self.lambda));
        }
        if !(self.grl_strength >= 0.0) {
            out.push(format!("train.grl_strength must be ≥ 0, got {}", self.grl_strength));
        }
        if let Some(w) = self.grl_warmup {
            if !(0.0..=1.0).contains(&w) {
                out.push(format!("train.grl_warmup {w} outside [0, 1]"));
            }
        }
        if !(self.temperature_start > 0.0) || !(self.temperature_end > 0.0) {
            out.push("train temperatures must be positive".into());
        }
        if self.bank_refresh_epochs == 0 {
            out.push("train.bank_refresh_epochs must be ≥ 1".into());
        }
        if self.eval_batch_size == 0 {
            out.push("train.eval_batch_size must be ≥ 1".into());
        }
    }

    /// DFE temperature for 0-based `epoch`.
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.temperature_epochs <= 1 {
            return self.temperature_end;
        }
        let t = (epoch as f64 / (self.temperature_epochs - 1) as f64).min(1.0);
        self.temperature_start + t * (self.temperature_end - self.temperature_start)
    }

    pub fn learning_rate(&self, step: usize, total_steps: usize) -> f64 {
        if !self.cosine || total_steps == 0 {
            return self.lr;
        }
        let p = step as f64 / total_steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    InDomain,
    LeaveOneDomainOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderSource {
    pub root: PathBuf,
    /// CSV mapping folders or files to `(y, domain)`; relative to `root`
    /// unless absolute.
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub protocol: Protocol,
    /// Required for leave-one-domain-out; defaults to the last domain.
    pub held_out_domain: Option<u32>,
    pub synthetic: Option<SynthSpec>,
    pub folder: Option<FolderSource>,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            protocol: Protocol::LeaveOneDomainOut,
            held_out_domain: None,
            synthetic: None,
            folder: None,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lambdas: vec![0.0, 0.1, 0.5, 1.0, 2.0, 5.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Ablation variant used by `train`.
    pub variant: String,
    /// Bit-reproducible execution; the only mode currently implemented, kept
    /// so manifests can state it explicitly.
    pub deterministic: bool,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            seeds: vec![0],
            out: PathBuf::from("runs"),
            variant: "full".into(),
            deterministic: true,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_overrides(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    for (key, raw) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let parts: Vec<String> = path.split("__").map(|p| p.to_ascii_lowercase()).collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(vec![format!("malformed override variable {key}")]));
        }
        let mut node = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = node
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(vec![format!("{key}: `{p}` is not a table")]))?;
        }
        log::info!("manifest override {key}={raw}");
        node.insert(parts.last().unwrap().clone(), override_value(&raw));
    }
    Ok(())
}

impl Manifest {
    pub fn from_toml_str(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("manifest: {}", e.message())]))?;
        apply_overrides(&mut table, env)?;
        let manifest: Manifest = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("manifest: {}", e.message())]))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Reads `path`, applies `SDIF_*` environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read manifest {}: {e}", path.display())]))?;
        let mut m = Self::from_toml_str(&text, std::env::vars())?;
        if let Some(folder) = m.data.folder.as_mut() {
            let base = path.parent().unwrap_or(Path::new("."));
            if folder.root.is_relative() {
                folder.root = base.join(&folder.root);
            }
        }
        Ok(m)
    }

    /// Defaults plus environment overrides, for runs without a manifest file.
    pub fn from_env() -> Result<Self> {
        Self::from_toml_str("", std::env::vars())
    }

    /// Collects every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.seeds.is_empty() {
            problems.push("seeds must not be empty".to_string());
        }
        self.train.problems(&mut problems);
        if let Err(Error::Config(p)) = self.model.validate() {
            problems.extend(p.into_iter().map(|p| format!("model: {p}")));
        }
        if self.data.synthetic.is_some() && self.data.folder.is_some() {
            problems.push("data: give either [data.synthetic] or [data.folder], not both".into());
        }
        if let Some(spec) = &self.data.synthetic {
            if let Err(Error::Config(p)) = spec.validate() {
                problems.extend(p.into_iter().map(|p| format!("data.synthetic: {p}")));
            }
            if self.data.protocol == Protocol::LeaveOneDomainOut && spec.domains.len() < 2 {
                problems.push("leave-one-domain-out needs ≥ 2 domains".into());
            }
        }
        for (name, f) in [("val_fraction", self.data.val_fraction), ("test_fraction", self.data.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                problems.push(format!("data.{name} {f} outside [0, 1)"));
            }
        }
        if let Some(l) = self.sweep.lambdas.iter().find(|l| !(**l >= 0.0)) {
            problems.push(format!("sweep.lambdas contains negative or NaN value {l}"));
        }
        if self.sweep.lambdas.is_empty() {
            problems.push("sweep.lambdas must not be empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// The synthetic spec, defaulting to the reference benchmark rendered at
    /// the model's image size.
    pub fn synth_spec(&self, seed: u64) -> SynthSpec {
        let mut spec = self.data.synthetic.clone().unwrap_or_else(|| SynthSpec {
            image_size: self.model.image_size,
            ..SynthSpec::reference(seed)
        });
        spec.seed = crate::rng::derive_seed(seed, "data");
        spec.val_fraction = self.data.val_fraction;
        spec.test_fraction = self.data.test_fraction;
        spec.held_out_domain = match self.data.protocol {
            Protocol::InDomain => None,
            Protocol::LeaveOneDomainOut => Some(self.data.held_out_domain.unwrap_or(spec.domains.len() as u32)),
        };
        spec
    }
}
