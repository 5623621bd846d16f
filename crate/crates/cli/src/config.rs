//! TOML run configuration for `hfb train`.

use std::path::{Path, PathBuf};

use hfb::hybrid::{ArchSpec, QuantPlan};
use hfb::train::{Augment, DistillConfig, NagConfig, PhaseConfig, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives weight init, synthetic data and batch order.
    #[serde(default)]
    pub seed: u64,
    pub arch: ArchSection,
    pub plan: QuantPlan,
    #[serde(default)]
    pub train: TrainSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub name: String,
    #[serde(default = "default_width")]
    pub width: f64,
    /// 224 for mobilenet-v1, 32 for tinynet.
    #[serde(default)]
    pub resolution: Option<usize>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_width() -> f64 {
    1.0
}

fn default_classes() -> usize {
    10
}

/// [`TrainConfig`] without its seed, which comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub phases: Vec<PhaseConfig>,
    pub optimizer: NagConfig,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub distillation: DistillConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            phases: d.phases,
            optimizer: d.optimizer,
            batch_size: d.batch_size,
            eval_batch_size: d.eval_batch_size,
            distillation: d.distillation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Directory of CIFAR-10 binary batches.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub augment: Augment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| usage(format!("config: {e}")))
    }

    /// Reads a config; relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Ok(cfg)
    }

    pub fn dataset_path(&self) -> Option<PathBuf> {
        self.dataset.path.as_ref().map(|p| self.base_dir.join(p))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base_dir.join(&self.output.dir)
    }

    /// Copy with every default written out.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.arch.resolution = Some(self.resolution());
        if c.dataset.kind == DatasetKind::Synthetic && c.dataset.synthetic.is_none() {
            c.dataset.synthetic = Some(SyntheticSpec::default());
        }
        c.train = TrainSection {
            phases: self.train_config().resolved().phases,
            ..c.train
        };
        c
    }

    fn resolution(&self) -> usize {
        self.arch
            .resolution
            .unwrap_or(if self.arch.name == "tinynet" { 32 } else { 224 })
    }

    pub fn arch_spec(&self) -> CliResult<ArchSpec> {
        let spec = ArchSpec::named(
            &self.arch.name,
            self.arch.width,
            self.resolution(),
            self.arch.num_classes,
        )
        .map_err(|e| usage(format!("config [arch]: {e}")))?;
        if spec.resolution != self.resolution() {
            return Err(usage(format!(
                "config [arch]: {} takes resolution {}, got {}",
                spec.name,
                spec.resolution,
                self.resolution()
            )));
        }
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            phases: self.train.phases.clone(),
            optimizer: self.train.optimizer,
            batch_size: self.train.batch_size,
            eval_batch_size: self.train.eval_batch_size,
            seed: self.seed,
            distillation: self.train.distillation,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.plan
            .validate()
            .map_err(|e| usage(format!("config [plan]: {e}")))?;
        self.train_config()
            .validate()
            .map_err(|e| usage(format!("config [train]: {e}")))?;
        self.arch_spec()?;
        match self.dataset.kind {
            DatasetKind::Cifar10 if self.dataset.path.is_none() => {
                Err(usage("config [dataset]: cifar10 needs a path"))
            }
            DatasetKind::Synthetic if self.dataset.path.is_some() => {
                Err(usage("config [dataset]: synthetic data takes no path"))
            }
            _ => Ok(()),
        }
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(usage)
    }
}
