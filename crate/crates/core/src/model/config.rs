//! Architecture description of (folded) ResNets and the standard zoo.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::InitKind;
use crate::supermask::kept_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// 3×3 stride-1 conv, no max-pool.
    Cifar,
    /// 7×7 stride-2 conv followed by 3×3 stride-2 max-pool.
    Imagenet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Bottleneck,
    /// Two 3×3 convs. Supported for parameter accounting only.
    Basic,
}

/// The four training regimes: what is trained (weights or supermask) and
/// whether the architecture is folded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    Folding,
    Hnn,
    Hfn,
}

impl Method {
    pub fn uses_supermask(self) -> bool {
        matches!(self, Method::Hnn | Method::Hfn)
    }

    pub fn is_folded(self) -> bool {
        matches!(self, Method::Folding | Method::Hfn)
    }

    pub fn code(self) -> u8 {
        match self {
            Method::Vanilla => 0,
            Method::Folding => 1,
            Method::Hnn => 2,
            Method::Hfn => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Method::Vanilla, Method::Folding, Method::Hnn, Method::Hfn]
            .into_iter()
            .find(|m| m.code() == c)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Vanilla => "vanilla",
            Method::Folding => "folding",
            Method::Hnn => "hnn",
            Method::Hfn => "hfn",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Method::Vanilla),
            "folding" | "folded" => Ok(Method::Folding),
            "hnn" => Ok(Method::Hnn),
            "hfn" => Ok(Method::Hfn),
            other => Err(Error::Config(format!("unknown method '{}'", other))),
        }
    }
}

fn default_in_channels() -> usize {
    3
}

fn default_ubn() -> bool {
    true
}

/// Full description of a (possibly folded) ResNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub stem: Stem,
    pub block: BlockKind,
    pub stage_blocks: [usize; 4],
    /// 1-based stage indices whose non-projection blocks share weights.
    #[serde(default)]
    pub folded_stages: Vec<usize>,
    pub width_mult: f64,
    pub base_channels: usize,
    pub num_classes: usize,
    /// Supermask density in permille; ignored (treated as 1000) for weight learning.
    pub k_permille: u16,
    pub method: Method,
    pub init: InitKind,
    /// Independent affine BN per fold iteration.
    #[serde(default = "default_ubn")]
    pub ubn: bool,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

impl ArchConfig {
    /// ResNet-`depth` (34, 50, 101, 152, 200) at full width, trained with `method`.
    pub fn resnet(depth: usize, num_classes: usize, stem: Stem, method: Method) -> Result<Self> {
        let (block, stage_blocks) = match depth {
            34 => (BlockKind::Basic, [3, 4, 6, 3]),
            50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
            101 => (BlockKind::Bottleneck, [3, 4, 23, 3]),
            152 => (BlockKind::Bottleneck, [3, 8, 36, 3]),
            200 => (BlockKind::Bottleneck, [3, 24, 36, 3]),
            other => return Err(Error::Config(format!("no ResNet{} in the zoo", other))),
        };
        let folded_stages = if method.is_folded() { vec![3, 4] } else { vec![] };
        let (init, k_permille) = if method.uses_supermask() {
            (InitKind::SignedConstant, 300)
        } else {
            (InitKind::KaimingNormal, 1000)
        };
        Ok(ArchConfig {
            stem,
            block,
            stage_blocks,
            folded_stages,
            width_mult: 1.0,
            base_channels: 64,
            num_classes,
            k_permille,
            method,
            init,
            ubn: true,
            in_channels: 3,
        })
    }

    /// Wide ResNet-50-2: bottleneck inner width doubled.
    pub fn wide_resnet50(num_classes: usize, stem: Stem, method: Method) -> Result<Self> {
        let mut c = Self::resnet(50, num_classes, stem, method)?;
        c.width_mult = 2.0;
        Ok(c)
    }

    /// Smallest configuration exercising every mechanism: stages (1,1,3,3),
    /// 16 base channels, stages 3 and 4 folded, 30% density.
    pub fn desk(num_classes: usize) -> Self {
        ArchConfig {
            stem: Stem::Cifar,
            block: BlockKind::Bottleneck,
            stage_blocks: [1, 1, 3, 3],
            folded_stages: vec![3, 4],
            width_mult: 1.0,
            base_channels: 16,
            num_classes,
            k_permille: 300,
            method: Method::Hfn,
            init: InitKind::SignedConstant,
            ubn: true,
            in_channels: 3,
        }
    }

    pub fn with_folded(mut self, stages: &[usize]) -> Self {
        self.folded_stages = stages.to_vec();
        self
    }

    pub fn is_folded(&self, stage: usize) -> bool {
        self.folded_stages.contains(&stage)
    }

    /// Density actually applied to masked layers.
    pub fn effective_k_permille(&self) -> u16 {
        if self.method.uses_supermask() {
            self.k_permille
        } else {
            1000
        }
    }

    /// Bottleneck inner width of stage `s` (0-based).
    pub fn mid_channels(&self, s: usize) -> usize {
        ((self.base_channels << s) as f64 * self.width_mult).round() as usize
    }

    /// Output channels of stage `s` (0-based).
    pub fn out_channels(&self, s: usize) -> usize {
        match self.block {
            BlockKind::Bottleneck => (self.base_channels << s) * 4,
            BlockKind::Basic => self.base_channels << s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel and class counts must be positive".into()));
        }
        if !(self.width_mult >= 1.0 && self.width_mult.is_finite()) {
            return Err(Error::Config(format!("width_mult {} must be >= 1", self.width_mult)));
        }
        if self.k_permille == 0 || self.k_permille > 1000 {
            return Err(Error::Config(format!(
                "k_permille {} outside (0, 1000]",
                self.k_permille
            )));
        }
        if let Some(s) = self.stage_blocks.iter().position(|&b| b == 0) {
            return Err(Error::Config(format!("stage {} has no blocks", s + 1)));
        }
        let mut seen = [false; 4];
        for &s in &self.folded_stages {
            if !(1..=4).contains(&s) {
                return Err(Error::Config(format!("folded stage {} not in 1..=4", s)));
            }
            if seen[s - 1] {
                return Err(Error::Config(format!("stage {} listed twice", s)));
            }
            seen[s - 1] = true;
            if self.stage_blocks[s - 1] < 3 {
                return Err(Error::Config(format!(
                    "stage {} has {} blocks; folding needs at least 3",
                    s,
                    self.stage_blocks[s - 1]
                )));
            }
        }
        match (self.method.is_folded(), self.folded_stages.is_empty()) {
            (true, true) => Err(Error::Config(format!(
                "method {} requires at least one folded stage",
                self.method
            ))),
            (false, false) => Err(Error::Config(format!(
                "method {} is feed-forward; use folding or hfn to fold stages {:?}",
                self.method, self.folded_stages
            ))),
            _ => Ok(()),
        }
    }

    /// Validation plus the constraints of executable models.
    pub fn validate_buildable(&self) -> Result<()> {
        self.validate()?;
        if self.block != BlockKind::Bottleneck {
            return Err(Error::Config(
                "only bottleneck blocks can be built; basic blocks are accounting-only".into(),
            ));
        }
        let k = self.effective_k_permille();
        if let Some(l) = super::NetPlan::new(self)?.layers().iter().find(|l| kept_count(l.len(), k) == 0) {
            return Err(Error::Config(format!(
                "density {} permille keeps no weight of {} ({} elements)",
                k,
                l.name,
                l.len()
            )));
        }
        Ok(())
    }

    /// Short human-readable name, e.g. `HFN-ResNet50 (3,4)`.
    pub fn label(&self) -> String {
        let depth = match self.block {
            BlockKind::Bottleneck => 3 * self.stage_blocks.iter().sum::<usize>() + 2,
            BlockKind::Basic => 2 * self.stage_blocks.iter().sum::<usize>() + 2,
        };
        let wide = if self.width_mult > 1.0 { "Wide" } else { "" };
        let prefix = match self.method {
            Method::Vanilla => "",
            Method::Folding => "Folded ",
            Method::Hnn => "HNN-",
            Method::Hfn => "HFN-",
        };
        let mut s = format!("{}{}ResNet{}", prefix, wide, depth);
        if !self.folded_stages.is_empty() {
            let f: Vec<String> = self.folded_stages.iter().map(|s| s.to_string()).collect();
            s.push_str(&format!(" ({})", f.join(",")));
        }
        s
    }
}
