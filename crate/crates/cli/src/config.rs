//! Experiment configuration: one JSON document, every field optional.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tnt_core::allocator::{AllocatorHyper, HeadKind, NoiseConfig};
use tnt_core::data::DatasetSpec;
use tnt_core::pruning::{Keep, Mode, PruneSchedule};
use tnt_core::vit::{ModelConfig, TrainHyper};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(DatasetSpec),
    /// Path to a dataset container written by `save_container`.
    Container(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            epochs: 2,
            batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorSection {
    pub head: HeadKind,
    pub hidden: Option<usize>,
    /// 0-based blocks whose output is noised during training.
    pub noised_layers: Vec<usize>,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub train_alpha_norm: bool,
    pub antithetic: bool,
    /// Train on the first `n` training samples only; `None` uses all of them.
    pub train_samples: Option<usize>,
}

impl Default for AllocatorSection {
    fn default() -> Self {
        Self {
            head: HeadKind::Linear,
            hidden: None,
            noised_layers: vec![0, 1, 2, 3],
            beta: 0.02,
            lr: 0.01,
            epochs: 40,
            batch: 32,
            train_alpha_norm: true,
            antithetic: true,
            train_samples: Some(256),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dense,
    Tnt,
    TntNoSim,
    TntSeq,
    TntMerge,
    Random,
    ClsTopk,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Dense,
        Method::Tnt,
        Method::TntNoSim,
        Method::TntSeq,
        Method::TntMerge,
        Method::Random,
        Method::ClsTopk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Tnt => "tnt",
            Method::TntNoSim => "tnt_no_sim",
            Method::TntSeq => "tnt_seq",
            Method::TntMerge => "tnt_merge",
            Method::Random => "random",
            Method::ClsTopk => "cls_topk",
        }
    }

    pub fn uses_allocator(self) -> bool {
        matches!(
            self,
            Method::Tnt | Method::TntNoSim | Method::TntSeq | Method::TntMerge
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<Method>,
    /// Final kept patch-token counts.
    pub keep_counts: Vec<usize>,
    /// Keep rates converted to counts with `floor(K·N)` and merged into `keep_counts`.
    pub keep_rates: Vec<f64>,
    /// Seeds partitions and random drops; training outputs never depend on it.
    pub eval_seed: u64,
    pub throughput: bool,
    pub throughput_batch: usize,
    pub throughput_iters: usize,
    pub write_history: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            keep_counts: Vec::new(),
            keep_rates: vec![1.0, 0.75, 0.5, 0.25],
            eval_seed: 0,
            throughput: false,
            throughput_batch: 32,
            throughput_iters: 5,
            write_history: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    pub preset: Option<String>,
    /// Tokens entering each block; overrides the schedule-derived profile.
    pub tokens_per_layer: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataSource,
    pub holdout_fraction: f64,
    pub backbone: BackboneSection,
    pub allocator: AllocatorSection,
    pub schedule: PruneSchedule,
    pub sweep: SweepSection,
    pub flops: FlopsSection,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

/// Mean-pooled toy transformer sized for the default synthetic data.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 4,
        channels: 3,
        dim: 16,
        depth: 4,
        heads: 2,
        mlp_dim: 32,
        num_classes: 2,
        special_tokens: 0,
        layernorm_eps: 1e-6,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: toy_model(),
            data: DataSource::Synthetic(DatasetSpec::default()),
            holdout_fraction: 0.2,
            backbone: BackboneSection::default(),
            allocator: AllocatorSection::default(),
            schedule: PruneSchedule::single(1, Keep::Count(32), 8),
            sweep: SweepSection::default(),
            flops: FlopsSection::default(),
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            let same = spec.image_size == self.model.image_size
                && spec.patch_size == self.model.patch_size
                && spec.channels == self.model.channels
                && spec.num_classes == self.model.num_classes;
            if !same {
                return Err(CliError::Config(
                    "data spec and model disagree on image size, patch size, channels or classes"
                        .into(),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(CliError::Config(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        self.noise(0).validate(&self.model)?;
        if self.allocator.noised_layers.is_empty() {
            return Err(CliError::Config("allocator.noised_layers must not be empty".into()));
        }
        self.schedule.validate(&self.model)?;
        if let Some(l) = self
            .schedule
            .alpha_layers()
            .into_iter()
            .find(|l| !self.allocator.noised_layers.contains(l))
        {
            return Err(CliError::Config(format!(
                "schedule location {} has no noised layer {l} to learn scores at",
                l + 1
            )));
        }
        if let Some(&k) = self.sweep.keep_rates.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
            return Err(CliError::Config(format!("keep rate must be in (0, 1], got {k}")));
        }
        if self.sweep.keep_counts.contains(&0) {
            return Err(CliError::Config("keep counts must be positive".into()));
        }
        Ok(())
    }

    pub fn backbone_hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            lr: self.backbone.lr,
            momentum: self.backbone.momentum,
            epochs: self.backbone.epochs,
            batch: self.backbone.batch,
            seed,
        }
    }

    pub fn allocator_hyper(&self, seed: u64) -> AllocatorHyper {
        AllocatorHyper {
            lr: self.allocator.lr,
            epochs: self.allocator.epochs,
            batch: self.allocator.batch,
            seed,
            train_alpha_norm: self.allocator.train_alpha_norm,
            antithetic: self.allocator.antithetic,
        }
    }

    pub fn noise(&self, seed: u64) -> NoiseConfig {
        NoiseConfig {
            beta: self.allocator.beta,
            noised_layers: self.allocator.noised_layers.clone(),
            seed,
        }
    }

    /// Keep points as patch-token counts, largest first, without duplicates.
    pub fn keep_points(&self) -> Vec<usize> {
        let n = self.model.num_patches();
        let mut points: Vec<usize> = self
            .sweep
            .keep_counts
            .iter()
            .map(|&c| c.min(n))
            .chain(self.sweep.keep_rates.iter().map(|&k| keep_rate_to_count(k, n)))
            .filter(|&c| c > 0)
            .collect();
        points.sort_unstable_by(|a, b| b.cmp(a));
        points.dedup();
        points
    }

    /// The configured schedule with its final stage set to keep `count` tokens.
    pub fn schedule_for(&self, count: usize) -> PruneSchedule {
        let mut s = self.schedule.clone();
        match s.mode {
            Mode::SingleLayer => s.rates = vec![Keep::Count(count)],
            Mode::MultiLayer => {
                if let Some(last) = s.rates.last_mut() {
                    *last = Keep::Count(count);
                }
            }
        }
        s
    }
}

/// `floor(K·N)`, robust to `K·N` landing a hair below an integer.
pub fn keep_rate_to_count(rate: f64, n: usize) -> usize {
    Keep::Rate(rate).resolve(n)
}
