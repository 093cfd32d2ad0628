//! Run configuration files and the manifest written alongside each run.
//!
//! A config is TOML with `[model]`, `[train]`, `[adapter]` and `[task]`
//! tables whose keys mirror the library's config structs. Every key is
//! optional. A `manifest.json` from an earlier run is accepted in place of
//! a config and reproduces that run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::Args;
use denselora_core::adapters::ADAPTER_FORMAT_VERSION;
use denselora_core::model::MODEL_FORMAT_VERSION;
use denselora_core::{ActivationKind, AdapterConfig, AdapterVariant, ModelConfig, TargetSet, Task, TaskKind, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub variant: AdapterVariant,
    pub targets: TargetSet,
    pub rank: usize,
    pub alpha: Option<f64>,
    pub dropout: f64,
    pub activation: ActivationKind,
    /// Seed for adapter initialization.
    pub init_seed: u64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let base = AdapterConfig::default();
        Self {
            variant: AdapterVariant::DenseLora,
            targets: "QKVUD".parse().expect("literal target set"),
            rank: base.rank,
            alpha: base.alpha,
            dropout: base.dropout,
            activation: base.activation,
            init_seed: 0,
        }
    }
}

impl AdapterSection {
    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.dropout,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapter: AdapterSection,
    pub task: Task,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest =
                serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
            return Ok(manifest.config);
        }
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.task.input_len() > self.model.max_seq_len {
            anyhow::bail!(denselora_core::Error::Config(format!(
                "task needs {} positions but max_seq_len is {}",
                self.task.input_len(),
                self.model.max_seq_len
            )));
        }
        if self.task.vocab_size > self.model.vocab_size {
            anyhow::bail!(denselora_core::Error::Config(format!(
                "task vocab {} exceeds model vocab {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub adapter_init: u64,
    pub train: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub tensor: String,
    pub adapter_checkpoint: u32,
    pub model_checkpoint: u32,
}

/// Everything needed to rerun a training job bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub created_unix_secs: u64,
    pub seeds: Seeds,
    pub formats: FormatVersions,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            seeds: Seeds {
                model: config.model.seed,
                adapter_init: config.adapter.init_seed,
                train: config.train.seed,
            },
            formats: FormatVersions {
                tensor: "DLT1".into(),
                adapter_checkpoint: ADAPTER_FORMAT_VERSION,
                model_checkpoint: MODEL_FORMAT_VERSION,
            },
            config: config.clone(),
        }
    }
}

/// Config file plus flag overrides shared by `train` and `sweep-rank`.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// TOML config or a manifest.json from an earlier run.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "DENSELORA_OUT_DIR", default_value = "denselora-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<AdapterVariant>,
    /// Adapted sites, e.g. QKVUD.
    #[arg(long)]
    pub targets: Option<TargetSet>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub activation: Option<ActivationKind>,
    /// Sets the model, adapter-init and training seeds together.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub train_examples: Option<usize>,
    #[arg(long)]
    pub eval_examples: Option<usize>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut c.adapter.variant, &self.variant);
        set(&mut c.adapter.targets, &self.targets);
        set(&mut c.adapter.rank, &self.rank);
        if self.alpha.is_some() {
            c.adapter.alpha = self.alpha;
        }
        set(&mut c.adapter.dropout, &self.dropout);
        set(&mut c.adapter.activation, &self.activation);
        if let Some(seed) = self.seed {
            c.model.seed = seed;
            c.adapter.init_seed = seed;
            c.train.seed = seed;
        }
        set(&mut c.train.learning_rate, &self.lr);
        set(&mut c.train.warmup_steps, &self.warmup);
        set(&mut c.train.epochs, &self.epochs);
        set(&mut c.train.batch_size, &self.batch_size);
        set(&mut c.train.eval_every, &self.eval_every);
        set(&mut c.model.n_layers, &self.layers);
        set(&mut c.model.d_model, &self.d_model);
        set(&mut c.model.n_heads, &self.heads);
        set(&mut c.model.d_ff, &self.d_ff);
        set(&mut c.task.kind, &self.task);
        set(&mut c.task.train_examples, &self.train_examples);
        set(&mut c.task.eval_examples, &self.eval_examples);
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_default() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let c: RunConfig = toml::from_str(
            r#"
            [model]
            d_model = 16
            [train]
            learning_rate = 0.01
            [adapter]
            variant = "lora"
            targets = "QV"
            rank = 4
            [task]
            kind = "reverse"
            "#,
        )
        .unwrap();
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.model.n_layers, ModelConfig::default().n_layers);
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.adapter.variant, AdapterVariant::Lora);
        assert_eq!(c.adapter.targets.to_string(), "QV");
        assert_eq!(c.task.kind, TaskKind::Reverse);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[adapter]\nrnak = 4").is_err());
        assert!(toml::from_str::<RunConfig>("[optimizer]\nlr = 1").is_err());
    }

    #[test]
    fn manifest_round_trips_config() {
        let mut c = RunConfig::default();
        c.adapter.variant = AdapterVariant::Freeze;
        c.train.learning_rate = 1e-2;
        let m = RunManifest::new(&c);
        let back: RunManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back.config, c);
        let t: RunConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(t, c);
    }

    #[test]
    fn seed_flag_sets_every_seed() {
        let args = RunArgs { seed: Some(9), ..Default::default() };
        let c = args.resolve().unwrap();
        assert_eq!((c.model.seed, c.adapter.init_seed, c.train.seed), (9, 9, 9));
    }
}
