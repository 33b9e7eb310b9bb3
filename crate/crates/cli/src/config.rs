//! Run configuration: a TOML file with `[model]`, `[data]`, `[train]`,
//! `[basis]`, `[sanity]` and `[search]` sections. Every key has a default,
//! unknown keys are rejected, and the resolved configuration is written
//! back next to the outputs as `config.toml`.

use std::path::{Path, PathBuf};

use convbasis::basisconv::BasisMode;
use convbasis::data::{load_cifar10, synth_dataset_with, AugmentPolicy, SynthConfig};
use convbasis::nn::model::Arch;
use convbasis::nn::optim::TrainConfig;
use convbasis::pipeline::{Clock, Data, Extraction, RunOptions, Skip, SkipConfig};
use convbasis::sensitivity::LimitPolicy;
use convbasis::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub basis: BasisSection,
    pub sanity: SanitySection,
    pub search: SearchSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TinyCnn,
    MicroResnet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Micro-ResNet18 only.
    pub width_divisor: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::MicroResnet18,
            width_divisor: 8,
            image_size: 32,
            num_classes: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Synthetic: samples per class before the 80/20 split.
    pub n_per_class: usize,
    pub noise: f64,
    pub shift_jitter: f64,
    pub contrast_jitter: f64,
    pub angle_jitter: f64,
    pub seed: u64,
    /// CIFAR-10: directory with the binary batches.
    pub dir: Option<PathBuf>,
    pub max_per_class: Option<usize>,
    pub augment: AugmentPolicy,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n_per_class: 50,
            noise: 0.1,
            shift_jitter: 0.0,
            contrast_jitter: 0.0,
            angle_jitter: 0.0,
            seed: 0,
            dir: None,
            max_per_class: None,
            augment: AugmentPolicy::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr0: f64,
    pub t_max: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// One run per seed; outputs go to `seed_{n}/`.
    pub seeds: Vec<u64>,
    pub clock: Clock,
    pub eval_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let o = RunOptions::default();
        Self {
            epochs: t.epochs,
            lr0: t.lr0,
            t_max: t.t_max,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seeds: vec![t.seed],
            clock: o.clock,
            eval_batch: o.eval_batch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Full,
    WeightCompose,
    OutputCompose,
    RestrictedCompose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSection {
    pub mode: ModeName,
    /// Basis count for the dense modes when training.
    pub r: Option<usize>,
    /// Basis fraction of `c_out` for the dense modes in `cost` when `r` is
    /// not set.
    pub r_fraction: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Integer: epochs; float: fraction of all epochs.
    pub skip: Skip,
    pub layers: Vec<usize>,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self {
            mode: ModeName::RestrictedCompose,
            r: None,
            r_fraction: 0.25,
            alpha: 0.25,
            beta: 0.25,
            skip: Skip::Epochs(8),
            layers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SanitySection {
    pub extraction: Extraction,
    /// Basis counts as fractions of each layer's `c_out`.
    pub r_values: Vec<f64>,
}

impl Default for SanitySection {
    fn default() -> Self {
        Self {
            extraction: Extraction::Svd,
            r_values: vec![0.125, 0.25, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub n_buckets: usize,
    pub limit: LimitPolicy,
    /// Explicit combinations for `run-selected` when no selection file is
    /// given.
    pub combos: Vec<Vec<usize>>,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            n_buckets: 4,
            limit: LimitPolicy::Exhaustive,
            combos: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without data or compute.
    pub fn validate(&self) -> Result<()> {
        self.arch().build(0)?;
        self.train_config(0).validate()?;
        self.data.augment.validate()?;
        if self.train.seeds.is_empty() {
            return Err(Error::Config("train.seeds must not be empty".into()));
        }
        if self.train.eval_batch == 0 {
            return Err(Error::Config("train.eval_batch must be at least 1".into()));
        }
        if let Clock::Modeled { ops_per_second } = self.train.clock {
            if !(ops_per_second > 0.0) {
                return Err(Error::Config("train.clock.ops_per_second must be positive".into()));
            }
        }
        if self.data.source == DataSource::Cifar10 && self.data.dir.is_none() {
            return Err(Error::Config("data.dir is required for source = \"cifar10\"".into()));
        }
        if self.data.augment.output_side(self.model.image_size) != self.model.image_size
            && !matches!(self.data.augment, AugmentPolicy::ResizeCrop { .. })
        {
            return Err(Error::Config("data.augment changes the image size".into()));
        }
        if !(self.basis.r_fraction > 0.0 && self.basis.r_fraction <= 1.0) {
            return Err(Error::Config(format!("basis.r_fraction={} outside (0, 1]", self.basis.r_fraction)));
        }
        self.basis.skip.resolve(self.train.epochs.max(1))?;
        let n = self.arch().build(0)?.num_convs();
        for &l in self.basis.layers.iter().chain(self.search.combos.iter().flatten()) {
            if l == 0 || l > n {
                return Err(Error::Config(format!("layer ordinal {l} outside 1..={n}")));
            }
        }
        for &f in &self.sanity.r_values {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("sanity.r_values entry {f} outside (0, 1]")));
            }
        }
        if self.search.n_buckets == 0 {
            return Err(Error::Config("search.n_buckets must be at least 1".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        let m = &self.model;
        match m.kind {
            ModelKind::TinyCnn => Arch::tiny_cnn(m.image_size, m.num_classes),
            ModelKind::MicroResnet18 => Arch::micro_resnet18(m.width_divisor, m.image_size, m.num_classes),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr0: t.lr0,
            t_max: t.t_max,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed,
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            augment: self.data.augment,
            clock: self.train.clock,
            eval_batch: self.train.eval_batch,
        }
    }

    /// Training-time basis mode; dense modes need an explicit `r`.
    pub fn basis_mode(&self) -> Result<BasisMode> {
        let b = &self.basis;
        let need_r = || b.r.ok_or_else(|| Error::Config("basis.r is required for dense basis modes".into()));
        Ok(match b.mode {
            ModeName::Full => BasisMode::Full,
            ModeName::WeightCompose => BasisMode::WeightCompose { r: need_r()? },
            ModeName::OutputCompose => BasisMode::OutputCompose { r: need_r()? },
            ModeName::RestrictedCompose => BasisMode::RestrictedCompose { alpha: b.alpha, beta: b.beta },
        })
    }

    pub fn skip_config(&self) -> Result<SkipConfig> {
        Ok(SkipConfig {
            skip: self.basis.skip,
            basis_layers: self.basis.layers.clone(),
            mode: self.basis_mode()?,
        })
    }

    pub fn load_data(&self) -> Result<Data> {
        let d = &self.data;
        let (train, valid) = match d.source {
            DataSource::Synthetic => synth_dataset_with(&SynthConfig {
                n_per_class: d.n_per_class,
                num_classes: self.model.num_classes,
                image_size: self.model.image_size,
                noise: d.noise,
                shift_jitter: d.shift_jitter,
                contrast_jitter: d.contrast_jitter,
                angle_jitter: d.angle_jitter,
                seed: d.seed,
            })?,
            DataSource::Cifar10 => {
                let dir = d.dir.as_ref().expect("validated");
                let (train, valid) = load_cifar10(dir, d.max_per_class)?;
                if self.model.num_classes != 10 {
                    return Err(Error::Config("CIFAR-10 needs model.num_classes = 10".into()));
                }
                let side = self.data.augment.output_side(32);
                if side != self.model.image_size {
                    return Err(Error::Config(format!(
                        "CIFAR-10 images reach the model at {side}x{side}, model.image_size is {}",
                        self.model.image_size
                    )));
                }
                (train, valid)
            }
        };
        Ok(Data { train, valid })
    }
}
