//! Sectioned TOML experiment configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costmodel::ScalingSpec;
use crate::datasynth::{self, SynthConfig, SyntheticDataset};
use crate::error::{Error, Result};
use crate::loss::{MarginConfig, MarginKind};
use crate::trainer::{SamplingRatio, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Clean,
    Conflict,
    Flip,
    Longtail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset file read by `train` (and written by `synth` when `--out` is absent).
    pub path: Option<PathBuf>,
    pub kind: DatasetKind,
    pub num_identities: usize,
    pub min_per_identity: usize,
    pub max_per_identity: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
    pub flip_ratio: f64,
    pub split_identities: usize,
    pub extra_classes: usize,
    pub head_identities: usize,
    pub tail_min: usize,
    pub tail_max: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            kind: DatasetKind::Clean,
            num_identities: 600,
            min_per_identity: 10,
            max_per_identity: 10,
            dim: 18,
            noise: 0.45,
            seed: 0,
            flip_ratio: 0.2,
            split_identities: 200,
            extra_classes: 600,
            head_identities: 60,
            tail_min: 2,
            tail_max: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub margin: MarginKind,
    /// Defaults to 64 for the margin kinds that use it.
    pub scale: Option<f64>,
    /// Defaults to 0.4 (additive cosine) or 0.5 (additive angular).
    pub margin_value: Option<f64>,
    pub center_init_std: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embedding_dim: 18,
            margin: MarginKind::AdditiveCosine,
            scale: None,
            margin_value: None,
            center_init_std: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfcSection {
    pub ratio: SamplingRatio,
    /// When non-empty, `train` runs one experiment per ratio.
    pub sweep: Vec<SamplingRatio>,
    pub shards: usize,
    pub batch_size: usize,
    pub filter_threshold: Option<f64>,
}

impl Default for PfcSection {
    fn default() -> Self {
        Self {
            ratio: SamplingRatio::Fixed(0.1),
            sweep: Vec::new(),
            shards: 1,
            batch_size: 32,
            filter_threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            base_lr: t.base_lr,
            warmup_epochs: t.warmup_epochs,
            power: t.power,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub eval_every: u64,
    /// Write `checkpoint.bin` every this many steps; 0 writes it only at the end.
    pub checkpoint_every: u64,
    /// Continue from an existing `checkpoint.bin` in the run directory.
    pub resume: bool,
    pub holdout_fraction: f64,
    pub far_target: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            eval_every: 50,
            checkpoint_every: 0,
            resume: false,
            holdout_fraction: 0.1,
            far_target: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub classes: Vec<usize>,
    pub shards: Vec<usize>,
    pub per_shard_batch: usize,
    pub dim: usize,
    pub ratios: Vec<f64>,
    pub width_bytes: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        let p = ScalingSpec::memory_preset();
        Self {
            classes: p.points.iter().map(|x| x.0).collect(),
            shards: p.points.iter().map(|x| x.1).collect(),
            per_shard_batch: p.per_shard_batch,
            dim: p.dim,
            ratios: p.ratios,
            width_bytes: p.width_bytes,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub pfc: PfcSection,
    pub schedule: ScheduleSection,
    pub output: OutputSection,
    pub bench: BenchSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, returning the parsed config and the original text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn synth_config(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            num_identities: d.num_identities,
            min_per_identity: d.min_per_identity,
            max_per_identity: d.max_per_identity,
            dim: d.dim,
            noise: d.noise,
            seed: d.seed,
        }
    }

    /// Generates the configured dataset and applies its corruption protocol.
    pub fn synthesize(&self) -> Result<SyntheticDataset> {
        let d = &self.data;
        let clean = datasynth::generate(&self.synth_config())?;
        match d.kind {
            DatasetKind::Clean => Ok(clean),
            DatasetKind::Conflict => datasynth::conflict_split(&clean, d.split_identities, d.extra_classes, d.seed),
            DatasetKind::Flip => datasynth::flip_labels(&clean, d.flip_ratio, d.seed),
            DatasetKind::Longtail => datasynth::longtail_condense(&clean, d.head_identities, d.tail_min, d.tail_max, d.seed),
        }
    }

    pub fn margin(&self) -> Result<MarginConfig> {
        let m = &self.model;
        let base = MarginConfig::default_for(m.margin);
        MarginConfig::new(
            m.margin,
            m.scale.unwrap_or(base.scale()),
            m.margin_value.unwrap_or(base.margin()),
        )
    }

    pub fn train_config(&self, ratio: SamplingRatio) -> Result<TrainConfig> {
        let (m, p, s, o) = (&self.model, &self.pfc, &self.schedule, &self.output);
        Ok(TrainConfig {
            ratio,
            margin: self.margin()?,
            filter_threshold: p.filter_threshold,
            shards: p.shards,
            batch_size: p.batch_size,
            epochs: s.epochs,
            seed: self.data.seed,
            eval_every: o.eval_every,
            base_lr: s.base_lr,
            warmup_epochs: s.warmup_epochs,
            power: s.power,
            momentum: s.momentum,
            weight_decay: s.weight_decay,
            hidden_dim: m.hidden_dim,
            embedding_dim: m.embedding_dim,
            center_init_std: m.center_init_std,
            holdout_fraction: o.holdout_fraction,
            far_target: o.far_target,
        })
    }

    /// Ratios to run: the sweep list, or the single ratio.
    pub fn ratios(&self) -> Vec<SamplingRatio> {
        if self.pfc.sweep.is_empty() {
            vec![self.pfc.ratio]
        } else {
            self.pfc.sweep.clone()
        }
    }

    pub fn scaling_spec(&self) -> Result<ScalingSpec> {
        let b = &self.bench;
        if b.classes.len() != b.shards.len() {
            return Err(Error::Config(format!(
                "bench.classes has {} entries but bench.shards has {}",
                b.classes.len(),
                b.shards.len()
            )));
        }
        let spec = ScalingSpec {
            points: b.classes.iter().copied().zip(b.shards.iter().copied()).collect(),
            per_shard_batch: b.per_shard_batch,
            dim: b.dim,
            ratios: b.ratios.clone(),
            width_bytes: b.width_bytes,
        };
        spec.validate()?;
        Ok(spec)
    }
}
