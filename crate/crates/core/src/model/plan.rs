//! Layer-by-layer layout of a configuration, shared by model construction,
//! parameter accounting, the file format and the cost model.

use serde::Serialize;

use crate::error::Result;
use crate::model::config::{ArchConfig, BlockKind, Stem};
use crate::supermask::{kept_count, LayerKind};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    /// OIHW for convs, [out, in] for the classifier.
    pub shape: Vec<usize>,
    pub kind: LayerKind,
}

impl LayerSpec {
    fn conv(name: String, cout: usize, cin: usize, k: usize, stride: usize) -> Self {
        LayerSpec {
            name,
            shape: vec![cout, cin, k, k],
            kind: LayerKind::Conv { stride, pad: k / 2 },
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fan_in(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn stride(&self) -> usize {
        match self.kind {
            LayerKind::Conv { stride, .. } => stride,
            LayerKind::Linear => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormSpec {
    pub channels: usize,
    pub affine: bool,
}

/// Convs of one residual block; the BN after each conv has `cout` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub main: Vec<LayerSpec>,
    pub shortcut: Option<LayerSpec>,
}

impl BlockPlan {
    fn new(config: &ArchConfig, prefix: &str, cin: usize, s: usize, stride: usize, project: bool) -> Self {
        let out = config.out_channels(s);
        let main = match config.block {
            BlockKind::Bottleneck => {
                let mid = config.mid_channels(s);
                vec![
                    LayerSpec::conv(format!("{prefix}.conv1"), mid, cin, 1, 1),
                    LayerSpec::conv(format!("{prefix}.conv2"), mid, mid, 3, stride),
                    LayerSpec::conv(format!("{prefix}.conv3"), out, mid, 1, 1),
                ]
            }
            BlockKind::Basic => vec![
                LayerSpec::conv(format!("{prefix}.conv1"), out, cin, 3, stride),
                LayerSpec::conv(format!("{prefix}.conv2"), out, out, 3, 1),
            ],
        };
        let shortcut = project.then(|| LayerSpec::conv(format!("{prefix}.shortcut"), out, cin, 1, stride));
        BlockPlan { main, shortcut }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.main.iter().chain(self.shortcut.iter())
    }

    pub fn weight_count(&self) -> usize {
        self.layers().map(LayerSpec::len).sum()
    }

    /// Output channels of each BN, main path first then shortcut.
    pub fn norm_channels(&self) -> Vec<usize> {
        self.layers().map(|l| l.shape[0]).collect()
    }

    pub fn out_channels(&self) -> usize {
        self.main.last().expect("block has convs").shape[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    /// 1-based.
    pub index: usize,
    pub projection: BlockPlan,
    /// Shape shared by every non-projection block.
    pub repeat: BlockPlan,
    /// Number of non-projection blocks (fold iterations when folded).
    pub repeats: usize,
    pub folded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetPlan {
    pub stem: LayerSpec,
    pub stem_pool: bool,
    pub stages: Vec<StagePlan>,
    pub classifier: LayerSpec,
}

impl NetPlan {
    pub fn new(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let base = config.base_channels;
        let stem = match config.stem {
            Stem::Cifar => LayerSpec::conv("stem".into(), base, config.in_channels, 3, 1),
            Stem::Imagenet => LayerSpec::conv("stem".into(), base, config.in_channels, 7, 2),
        };
        let mut cin = base;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let index = s + 1;
            let stride = if s == 0 { 1 } else { 2 };
            let projection = BlockPlan::new(config, &format!("s{index}.b0"), cin, s, stride, true);
            let out = projection.out_channels();
            let project_first = cin != out || stride != 1;
            let projection = if project_first {
                projection
            } else {
                BlockPlan::new(config, &format!("s{index}.b0"), cin, s, stride, false)
            };
            let folded = config.is_folded(index);
            let repeat_prefix = if folded {
                format!("s{index}.fold")
            } else {
                format!("s{index}.b1")
            };
            let repeat = BlockPlan::new(config, &repeat_prefix, out, s, 1, false);
            stages.push(StagePlan {
                index,
                projection,
                repeat,
                repeats: config.stage_blocks[s] - 1,
                folded,
            });
            cin = out;
        }
        Ok(NetPlan {
            stem,
            stem_pool: config.stem == Stem::Imagenet,
            stages,
            classifier: LayerSpec {
                name: "fc".into(),
                shape: vec![config.num_classes, cin],
                kind: LayerKind::Linear,
            },
        })
    }

    /// Every distinct weight tensor in declaration order. A folded stage
    /// contributes its shared block once.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut out = vec![self.stem.clone()];
        for st in &self.stages {
            out.extend(st.projection.layers().cloned());
            let copies = if st.folded { 1 } else { st.repeats };
            for b in 0..copies {
                if st.folded {
                    out.extend(st.repeat.layers().cloned());
                } else {
                    out.extend(st.repeat.layers().map(|l| LayerSpec {
                        name: l.name.replacen(".b1.", &format!(".b{}.", b + 1), 1),
                        ..l.clone()
                    }));
                }
            }
        }
        out.push(self.classifier.clone());
        out
    }

    /// Every BN layer in declaration order (stem, then per block; a folded
    /// stage holds one BN set per iteration with UBN, or one shared set).
    pub fn norms(&self, config: &ArchConfig) -> Vec<NormSpec> {
        let weight_learning = !config.method.uses_supermask();
        let plain = NormSpec {
            channels: 0,
            affine: weight_learning,
        };
        let mut out = vec![NormSpec {
            channels: self.stem.shape[0],
            ..plain
        }];
        for st in &self.stages {
            out.extend(st.projection.norm_channels().into_iter().map(|c| NormSpec { channels: c, ..plain }));
            let (sets, affine) = if st.folded {
                if config.ubn {
                    (st.repeats, true)
                } else {
                    (1, weight_learning)
                }
            } else {
                (st.repeats, weight_learning)
            };
            for _ in 0..sets {
                out.extend(
                    st.repeat
                        .norm_channels()
                        .into_iter()
                        .map(|c| NormSpec { channels: c, affine }),
                );
            }
        }
        out
    }
}

/// Closed-form parameter accounting of a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Distinct weight elements (shared folded weights counted once).
    pub dense: u64,
    /// Weights kept by the supermasks, `Σ floor(k·n)`; equals `dense` for
    /// weight learning.
    pub surviving: u64,
    /// Learnable per-iteration BN parameters of folded stages (UBN).
    pub ubn: u64,
    /// One bit per distinct weight element.
    pub mask_bits: u64,
    /// BN running statistics (mean and variance) over every BN layer.
    pub running_stats: u64,
    pub masked_layers: usize,
    pub norm_layers: usize,
}

impl ParamCount {
    /// Trainable parameter count as reported for the method: surviving
    /// weights plus UBN parameters.
    pub fn reported(&self) -> u64 {
        self.surviving + self.ubn
    }
}

pub fn count_params(config: &ArchConfig) -> Result<ParamCount> {
    let plan = NetPlan::new(config)?;
    let k = config.effective_k_permille();
    let layers = plan.layers();
    let dense: u64 = layers.iter().map(|l| l.len() as u64).sum();
    let surviving: u64 = layers.iter().map(|l| kept_count(l.len(), k) as u64).sum();
    let ubn: u64 = if config.ubn {
        plan.stages
            .iter()
            .filter(|s| s.folded)
            .map(|s| 2 * s.repeat.norm_channels().iter().sum::<usize>() as u64 * s.repeats as u64)
            .sum()
    } else {
        0
    };
    let norms = plan.norms(config);
    Ok(ParamCount {
        dense,
        surviving,
        ubn,
        mask_bits: dense,
        running_stats: norms.iter().map(|n| 2 * n.channels as u64).sum(),
        masked_layers: layers.len(),
        norm_layers: norms.len(),
    })
}
