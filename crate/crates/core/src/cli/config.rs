//! Run configuration files and the presets shipped with the crate.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    channel_stats, load_cifar_binary, synthetic_dataset, train_val_split, Augment, Dataset, Normalization, Split,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, BlockKind, Method, Stem};
use crate::rng::InitKind;
use crate::train::TrainConfig;

/// Environment variable naming the directory with dataset files.
pub const DATA_DIR_ENV: &str = "HFN_DATA_DIR";

pub const PRESETS: &[(&str, &str)] = &[
    ("desk-hfn", include_str!("../../presets/desk-hfn.toml")),
    ("paper-cifar100", include_str!("../../presets/paper-cifar100.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds weight generation, shuffling and augmentation.
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub method: Method,
    pub stage_blocks: [usize; 4],
    #[serde(default)]
    pub fold: Vec<usize>,
    #[serde(default = "one")]
    pub width_mult: f64,
    pub base_channels: usize,
    pub stem: Stem,
    /// Percentage of connections each supermask keeps.
    pub topk: f64,
    /// Defaults to signed constant for supermask methods, Kaiming normal otherwise.
    #[serde(default)]
    pub init: Option<InitKind>,
    #[serde(default = "yes")]
    pub ubn: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default = "one_usize")]
    pub eval_cadence: usize,
    /// Random crop (4-pixel pad) and horizontal flip.
    #[serde(default)]
    pub augment: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    /// `train.bin` and `test.bin` of the CIFAR-100 binary release.
    Cifar100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationKind {
    /// Fixed CIFAR-100 channel statistics.
    Cifar,
    /// Statistics of the training split.
    Measured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub normalization: NormalizationKind,
    /// Records held out of the training file for validation.
    pub val: usize,
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Synthetic only.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub classes: usize,
    #[serde(default)]
    pub size: usize,
    #[serde(default)]
    pub separation: f64,
    #[serde(default)]
    pub train: usize,
    #[serde(default)]
    pub test: usize,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn yes() -> bool {
    true
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub topk: Option<f64>,
    pub fold: Option<Vec<usize>>,
    pub depth: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub ubn: Option<bool>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset '{}' (available: {})", name, names.join(", ")))
        })?;
        Self::parse(text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(m) = o.method {
            self.model.method = m;
            if o.fold.is_none() {
                self.model.fold = if m.is_folded() { vec![3, 4] } else { vec![] };
            }
            if o.topk.is_none() && !m.uses_supermask() {
                self.model.topk = 100.0;
            }
        }
        if let Some(f) = &o.fold {
            self.model.fold = f.clone();
        }
        if let Some(k) = o.topk {
            self.model.topk = k;
        }
        if let Some(d) = o.depth {
            let zoo = ArchConfig::resnet(d, 1, self.model.stem, self.model.method)?;
            if zoo.block != BlockKind::Bottleneck {
                return Err(Error::Config(format!("depth {} uses basic blocks, which cannot be trained", d)));
            }
            self.model.stage_blocks = zoo.stage_blocks;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
            self.train.warmup_epochs = self.train.warmup_epochs.min(e.saturating_sub(1));
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(lr) = o.lr {
            self.train.lr = lr;
        }
        if let Some(u) = o.ubn {
            self.model.ubn = u;
        }
        Ok(())
    }

    pub fn k_permille(&self) -> Result<u16> {
        let k = (self.model.topk * 10.0).round();
        if !(k >= 1.0 && k <= 1000.0) {
            return Err(Error::Config(format!("topk {}% outside (0, 100]", self.model.topk)));
        }
        Ok(k as u16)
    }

    pub fn num_classes(&self) -> usize {
        match self.data.source {
            DataSource::Synthetic => self.data.classes,
            DataSource::Cifar100 => 100,
        }
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let m = &self.model;
        let init = m.init.unwrap_or(if m.method.uses_supermask() {
            InitKind::SignedConstant
        } else {
            InitKind::KaimingNormal
        });
        let arch = ArchConfig {
            stem: m.stem,
            block: BlockKind::Bottleneck,
            stage_blocks: m.stage_blocks,
            folded_stages: m.fold.clone(),
            width_mult: m.width_mult,
            base_channels: m.base_channels,
            num_classes: self.num_classes(),
            k_permille: self.k_permille()?,
            method: m.method,
            init,
            ubn: m.ubn,
            in_channels: 3,
        };
        arch.validate_buildable()?;
        Ok(arch)
    }

    /// Training hyperparameters; `normalization` comes from [`Self::load_data`].
    pub fn train_config(&self, normalization: Normalization) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            method: self.model.method,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.lr,
            warmup_epochs: t.warmup_epochs,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: self.seed,
            eval_cadence: t.eval_cadence,
            augment: t.augment.then(Augment::default),
            normalization,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn data_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.data.dir {
            return Ok(d.clone());
        }
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
            Error::Config(format!("no data directory: set data.dir or {}", DATA_DIR_ENV))
        })
    }

    /// Loads the three splits and the normalization to use with them.
    pub fn load_data(&self) -> Result<(Splits, Normalization)> {
        let d = &self.data;
        let splits = match d.source {
            DataSource::Synthetic => {
                let spec = SyntheticSpec {
                    classes: d.classes,
                    size: d.size,
                    channels: 3,
                    separation: d.separation,
                };
                Splits {
                    train: synthetic_dataset(d.seed, d.train, &spec, Split::Train)?,
                    val: synthetic_dataset(d.seed, d.val, &spec, Split::Val)?,
                    test: synthetic_dataset(d.seed, d.test, &spec, Split::Test)?,
                }
            }
            DataSource::Cifar100 => {
                let dir = self.data_dir()?;
                let full = load_cifar_binary(&dir.join("train.bin"), 2, 100)?;
                let (train, val) = train_val_split(&full, d.val, self.seed)?;
                let test = load_cifar_binary(&dir.join("test.bin"), 2, 100)?;
                Splits { train, val, test }
            }
        };
        let norm = match d.normalization {
            NormalizationKind::Cifar => Normalization::default(),
            NormalizationKind::Measured => channel_stats(&splits.train),
        };
        Ok((splits, norm))
    }
}
