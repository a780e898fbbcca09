use crate::error::{Error, Result};
use crate::model::block::{BlockConvs, BlockNorms, Bottleneck, Stage, StageBody};
use crate::model::config::{ArchConfig, Stem};
use crate::model::plan::{LayerSpec, NetPlan};
use crate::ops::{
    global_avgpool, global_avgpool_grad, maxpool2d, maxpool2d_grad, relu, relu_grad, sgd_step, BatchNorm,
    BnCache, Mode, SgdParams,
};
use crate::rng::{init_scores, init_weights, streams, InitKind, InitSpec, RngStream};
use crate::supermask::{DensityReport, MaskedLayer, Trainable};
use crate::tensor::{Fnv64, Scalar, Tensor};

#[derive(Clone, Debug)]
struct NetCache<T> {
    x: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_act: Tensor<T>,
    pool: Option<Vec<usize>>,
    body_shape: Vec<usize>,
    features: Tensor<T>,
}

/// An executable (folded) ResNet whose masked layers draw their weights and
/// scores from per-layer random streams of one seed.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ArchConfig,
    seed: u64,
    pub stem: MaskedLayer<T>,
    pub stem_bn: BatchNorm<T>,
    pub stages: Vec<Stage<T>>,
    pub fc: MaskedLayer<T>,
    cache: Option<NetCache<T>>,
}

/// Initial weights and scores of layer `index` (declaration order).
pub fn init_layer<T: Scalar>(
    config: &ArchConfig,
    seed: u64,
    index: usize,
    spec: &LayerSpec,
) -> Result<MaskedLayer<T>> {
    if config.init == InitKind::KaimingUniformScores {
        return Err(Error::Config("kaiming_uniform_scores is a score init, not a weight init".into()));
    }
    let fan_in = spec.fan_in();
    let weights = init_weights(
        &InitSpec::relu(config.init, fan_in),
        &spec.shape,
        &mut RngStream::new(seed, streams::weights(index)),
    )?;
    let scores = init_scores(&spec.shape, fan_in, &mut RngStream::new(seed, streams::scores(index)))?;
    let trainable = if config.method.uses_supermask() {
        Trainable::Scores
    } else {
        Trainable::Weights
    };
    MaskedLayer::new(
        spec.name.clone(),
        spec.kind,
        trainable,
        config.effective_k_permille(),
        weights,
        scores,
    )
}

fn take<I: Iterator>(it: &mut I, what: &str) -> Result<I::Item> {
    it.next()
        .ok_or_else(|| Error::Config(format!("layer plan ran out of {}", what)))
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate_buildable()?;
        let plan = NetPlan::new(config)?;
        let mut layers = plan
            .layers()
            .iter()
            .enumerate()
            .map(|(i, spec)| init_layer(config, seed, i, spec))
            .collect::<Result<Vec<MaskedLayer<T>>>>()?
            .into_iter();
        let mut norms = plan
            .norms(config)
            .into_iter()
            .map(|n| BatchNorm::<T>::new(n.channels, n.affine));

        let stem = take(&mut layers, "layers")?;
        let stem_bn = take(&mut norms, "norms")?;
        let mut convs = |shortcut: bool| -> Result<BlockConvs<T>> {
            Ok(BlockConvs {
                conv1: take(&mut layers, "layers")?,
                conv2: take(&mut layers, "layers")?,
                conv3: take(&mut layers, "layers")?,
                shortcut: if shortcut { Some(take(&mut layers, "layers")?) } else { None },
            })
        };
        let mut stage_convs = Vec::new();
        for sp in &plan.stages {
            let projection = convs(sp.projection.shortcut.is_some())?;
            let body = if sp.folded {
                vec![convs(false)?]
            } else {
                (0..sp.repeats).map(|_| convs(false)).collect::<Result<Vec<_>>>()?
            };
            stage_convs.push((projection, body));
        }
        let fc = take(&mut layers, "layers")?;

        let mut block_norms = |shortcut: bool| -> Result<BlockNorms<T>> {
            Ok(BlockNorms {
                bn1: take(&mut norms, "norms")?,
                bn2: take(&mut norms, "norms")?,
                bn3: take(&mut norms, "norms")?,
                shortcut: if shortcut { Some(take(&mut norms, "norms")?) } else { None },
            })
        };
        let mut stages = Vec::with_capacity(4);
        for (sp, (pconvs, body_convs)) in plan.stages.iter().zip(stage_convs) {
            let projection = Bottleneck {
                norms: block_norms(pconvs.shortcut.is_some())?,
                convs: pconvs,
            };
            let body = if sp.folded {
                let sets = if config.ubn { sp.repeats } else { 1 };
                StageBody::Folded {
                    convs: body_convs.into_iter().next().expect("one shared block"),
                    norms: (0..sets).map(|_| block_norms(false)).collect::<Result<Vec<_>>>()?,
                    iterations: sp.repeats,
                }
            } else {
                StageBody::Plain(
                    body_convs
                        .into_iter()
                        .map(|c| Ok(Bottleneck { convs: c, norms: block_norms(false)? }))
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            stages.push(Stage::new(sp.index, projection, body)?);
        }
        Ok(Model {
            config: config.clone(),
            seed,
            stem,
            stem_bn,
            stages,
            fc,
            cache: None,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Distinct masked layers in declaration order.
    pub fn masked_layers(&self) -> Vec<&MaskedLayer<T>> {
        let mut out = vec![&self.stem];
        for s in &self.stages {
            out.extend(s.layers());
        }
        out.push(&self.fc);
        out
    }

    pub fn masked_layers_mut(&mut self) -> Vec<&mut MaskedLayer<T>> {
        let mut out = vec![&mut self.stem];
        for s in &mut self.stages {
            out.extend(s.layers_mut());
        }
        out.push(&mut self.fc);
        out
    }

    /// Every BN layer in declaration order.
    pub fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out = vec![&self.stem_bn];
        for s in &self.stages {
            out.extend(s.norms());
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = vec![&mut self.stem_bn];
        for s in &mut self.stages {
            out.extend(s.norms_mut());
        }
        out
    }

    pub fn refresh_masks(&mut self) -> Result<()> {
        for l in self.masked_layers_mut() {
            l.refresh()?;
        }
        Ok(())
    }

    /// Logits for NCHW `images`. Train mode normalizes with batch statistics
    /// and keeps the intermediates for [`Model::backward`].
    pub fn forward(&mut self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.refresh_masks()?;
        self.cache = None;
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape(
                "model",
                format!("images {:?}, model expects [N, {}, H, W]", s, self.config.in_channels),
            ));
        }
        let (h, stem_bn) = self.stem_bn.forward(&self.stem.forward(images)?, mode)?;
        let stem_act = relu(&h);
        let (mut h, pool) = if self.config.stem == Stem::Imagenet {
            let (p, arg) = maxpool2d(&stem_act, 3, 2, 1)?;
            (p, Some(arg))
        } else {
            (stem_act.clone(), None)
        };
        for st in &mut self.stages {
            h = st.forward(&h, mode)?;
        }
        let body_shape = h.shape().to_vec();
        let features = global_avgpool(&h)?;
        let logits = self.fc.forward(&features)?;
        if mode == Mode::Train {
            self.cache = Some(NetCache {
                x: images.clone(),
                stem_bn,
                stem_act,
                pool,
                body_shape,
                features,
            });
        }
        Ok(logits)
    }

    /// Backpropagates `grad_logits` through the last train-mode forward,
    /// accumulating gradients in every layer.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("backward without a train-mode forward".into()))?;
        let d = self.fc.backward(&cache.features, grad_logits)?;
        let mut d = global_avgpool_grad(&d, &cache.body_shape)?;
        for st in self.stages.iter_mut().rev() {
            d = st.backward(&d)?;
        }
        if let Some(arg) = &cache.pool {
            d = maxpool2d_grad(&d, arg, cache.stem_act.shape())?;
        }
        let d = relu_grad(&d, &cache.stem_act)?;
        let d = self.stem_bn.backward(&d, &cache.stem_bn)?;
        self.stem.backward(&cache.x, &d)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for l in self.masked_layers_mut() {
            l.zero_grad();
        }
        for bn in self.batch_norms_mut() {
            bn.zero_grad();
        }
    }

    /// One SGD step on the trainable set: scores (supermask methods) or
    /// weights, plus every affine BN.
    pub fn step(&mut self, hp: SgdParams) {
        for l in self.masked_layers_mut() {
            l.step(hp);
        }
        for bn in self.batch_norms_mut() {
            if bn.state.affine {
                sgd_step(&mut bn.state.gamma, &bn.grad_gamma, &mut bn.vel_gamma, hp);
                sgd_step(&mut bn.state.beta, &bn.grad_beta, &mut bn.vel_beta, hp);
            }
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        for s in &mut self.stages {
            s.clear_cache();
        }
    }

    /// FNV-1a over the little-endian bytes of every weight tensor.
    pub fn weights_checksum(&self) -> u64 {
        let mut h = Fnv64::default();
        for l in self.masked_layers() {
            h.update(&l.weights().to_le_bytes());
        }
        h.finish()
    }

    pub fn scores_checksum(&self) -> u64 {
        let mut h = Fnv64::default();
        for l in self.masked_layers() {
            h.update(&l.scores().to_le_bytes());
        }
        h.finish()
    }

    pub fn density_report(&self) -> DensityReport {
        DensityReport::from_layers(self.masked_layers())
    }
}
