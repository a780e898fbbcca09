//! Bottleneck blocks and (optionally folded) stages.

use crate::error::{Error, Result};
use crate::ops::{relu, relu_grad, BatchNorm, BnCache, Mode};
use crate::supermask::MaskedLayer;
use crate::tensor::{Scalar, Tensor};

/// The masked convs of one bottleneck: 1×1, 3×3 (strided), 1×1, and the
/// optional 1×1 projection shortcut.
#[derive(Clone, Debug)]
pub struct BlockConvs<T = f32> {
    pub conv1: MaskedLayer<T>,
    pub conv2: MaskedLayer<T>,
    pub conv3: MaskedLayer<T>,
    pub shortcut: Option<MaskedLayer<T>>,
}

impl<T: Scalar> BlockConvs<T> {
    pub fn layers(&self) -> impl Iterator<Item = &MaskedLayer<T>> {
        [&self.conv1, &self.conv2, &self.conv3]
            .into_iter()
            .chain(self.shortcut.as_ref())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut MaskedLayer<T>> {
        [&mut self.conv1, &mut self.conv2, &mut self.conv3]
            .into_iter()
            .chain(self.shortcut.as_mut())
    }
}

/// The BN layer following each conv of a bottleneck.
#[derive(Clone, Debug)]
pub struct BlockNorms<T = f32> {
    pub bn1: BatchNorm<T>,
    pub bn2: BatchNorm<T>,
    pub bn3: BatchNorm<T>,
    pub shortcut: Option<BatchNorm<T>>,
}

impl<T: Scalar> BlockNorms<T> {
    pub fn norms(&self) -> impl Iterator<Item = &BatchNorm<T>> {
        [&self.bn1, &self.bn2, &self.bn3]
            .into_iter()
            .chain(self.shortcut.as_ref())
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm<T>> {
        [&mut self.bn1, &mut self.bn2, &mut self.bn3]
            .into_iter()
            .chain(self.shortcut.as_mut())
    }
}

/// Forward intermediates of one block application.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    x: Tensor<T>,
    bn1: BnCache<T>,
    a1: Tensor<T>,
    bn2: BnCache<T>,
    a2: Tensor<T>,
    bn3: BnCache<T>,
    shortcut: Option<BnCache<T>>,
    out: Tensor<T>,
}

/// `relu(bn3(conv3(relu(bn2(conv2(relu(bn1(conv1 x))))))) + shortcut(x))`.
/// Returns the cache only in train mode.
pub fn block_forward<T: Scalar>(
    convs: &BlockConvs<T>,
    norms: &mut BlockNorms<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BlockCache<T>>)> {
    if convs.shortcut.is_some() != norms.shortcut.is_some() {
        return Err(Error::Config("shortcut conv and norm must come together".into()));
    }
    let (h, c1) = norms.bn1.forward(&convs.conv1.forward(x)?, mode)?;
    let a1 = relu(&h);
    let (h, c2) = norms.bn2.forward(&convs.conv2.forward(&a1)?, mode)?;
    let a2 = relu(&h);
    let (mut sum, c3) = norms.bn3.forward(&convs.conv3.forward(&a2)?, mode)?;
    let csc = match (&convs.shortcut, &mut norms.shortcut) {
        (Some(conv), Some(bn)) => {
            let (s, c) = bn.forward(&conv.forward(x)?, mode)?;
            sum.add_assign(&s)?;
            Some(c)
        }
        _ => {
            sum.add_assign(x)?;
            None
        }
    };
    let out = relu(&sum);
    let cache = (mode == Mode::Train).then(|| BlockCache {
        x: x.clone(),
        bn1: c1,
        a1,
        bn2: c2,
        a2,
        bn3: c3,
        shortcut: csc,
        out: out.clone(),
    });
    Ok((out, cache))
}

/// Accumulates conv and BN parameter gradients; returns the input gradient.
pub fn block_backward<T: Scalar>(
    convs: &mut BlockConvs<T>,
    norms: &mut BlockNorms<T>,
    cache: &BlockCache<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dsum = relu_grad(dy, &cache.out)?;
    let d = norms.bn3.backward(&dsum, &cache.bn3)?;
    let d = convs.conv3.backward(&cache.a2, &d)?;
    let d = relu_grad(&d, &cache.a2)?;
    let d = norms.bn2.backward(&d, &cache.bn2)?;
    let d = convs.conv2.backward(&cache.a1, &d)?;
    let d = relu_grad(&d, &cache.a1)?;
    let d = norms.bn1.backward(&d, &cache.bn1)?;
    let mut dx = convs.conv1.backward(&cache.x, &d)?;
    match (&mut convs.shortcut, &mut norms.shortcut, &cache.shortcut) {
        (Some(conv), Some(bn), Some(c)) => {
            let d = bn.backward(&dsum, c)?;
            dx.add_assign(&conv.backward(&cache.x, &d)?)?;
        }
        _ => dx.add_assign(&dsum)?,
    }
    Ok(dx)
}

#[derive(Clone, Debug)]
pub struct Bottleneck<T = f32> {
    pub convs: BlockConvs<T>,
    pub norms: BlockNorms<T>,
}

#[derive(Clone, Debug)]
pub enum StageBody<T = f32> {
    /// Independent blocks, each with its own weights.
    Plain(Vec<Bottleneck<T>>),
    /// One weight-shared block iterated `iterations` times. `norms` holds one
    /// BN set per iteration (UBN) or a single set shared by all iterations.
    Folded {
        convs: BlockConvs<T>,
        norms: Vec<BlockNorms<T>>,
        iterations: usize,
    },
}

/// Projection block followed by the stage body.
#[derive(Clone, Debug)]
pub struct Stage<T = f32> {
    /// 1-based.
    pub index: usize,
    pub projection: Bottleneck<T>,
    pub body: StageBody<T>,
    cache: Vec<BlockCache<T>>,
}

impl<T: Scalar> Stage<T> {
    pub fn new(index: usize, projection: Bottleneck<T>, body: StageBody<T>) -> Result<Self> {
        if let StageBody::Folded {
            norms, iterations, ..
        } = &body
        {
            if *iterations == 0 || (norms.len() != 1 && norms.len() != *iterations) {
                return Err(Error::Config(format!(
                    "stage {}: {} norm sets for {} iterations",
                    index,
                    norms.len(),
                    iterations
                )));
            }
        }
        Ok(Stage {
            index,
            projection,
            body,
            cache: Vec::new(),
        })
    }

    pub fn is_folded(&self) -> bool {
        matches!(self.body, StageBody::Folded { .. })
    }

    /// Blocks executed after the projection block.
    pub fn iterations(&self) -> usize {
        match &self.body {
            StageBody::Plain(blocks) => blocks.len(),
            StageBody::Folded { iterations, .. } => *iterations,
        }
    }

    /// Per-iteration norms of a folded stage.
    pub fn ubn(&self) -> Option<&[BlockNorms<T>]> {
        match &self.body {
            StageBody::Folded { norms, .. } => Some(norms),
            StageBody::Plain(_) => None,
        }
    }

    pub fn ubn_mut(&mut self) -> Option<&mut [BlockNorms<T>]> {
        match &mut self.body {
            StageBody::Folded { norms, .. } => Some(norms),
            StageBody::Plain(_) => None,
        }
    }

    /// Distinct masked layers in declaration order.
    pub fn layers(&self) -> Vec<&MaskedLayer<T>> {
        let mut out: Vec<&MaskedLayer<T>> = self.projection.convs.layers().collect();
        match &self.body {
            StageBody::Plain(blocks) => blocks.iter().for_each(|b| out.extend(b.convs.layers())),
            StageBody::Folded { convs, .. } => out.extend(convs.layers()),
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut MaskedLayer<T>> {
        let mut out: Vec<&mut MaskedLayer<T>> = self.projection.convs.layers_mut().collect();
        match &mut self.body {
            StageBody::Plain(blocks) => blocks
                .iter_mut()
                .for_each(|b| out.extend(b.convs.layers_mut())),
            StageBody::Folded { convs, .. } => out.extend(convs.layers_mut()),
        }
        out
    }

    pub fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out: Vec<&BatchNorm<T>> = self.projection.norms.norms().collect();
        match &self.body {
            StageBody::Plain(blocks) => blocks.iter().for_each(|b| out.extend(b.norms.norms())),
            StageBody::Folded { norms, .. } => norms.iter().for_each(|n| out.extend(n.norms())),
        }
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out: Vec<&mut BatchNorm<T>> = self.projection.norms.norms_mut().collect();
        match &mut self.body {
            StageBody::Plain(blocks) => blocks
                .iter_mut()
                .for_each(|b| out.extend(b.norms.norms_mut())),
            StageBody::Folded { norms, .. } => norms.iter_mut().for_each(|n| out.extend(n.norms_mut())),
        }
        out
    }

    /// Runs the projection block once, then the body. Train mode keeps the
    /// intermediates for [`Stage::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.cache.clear();
        let keep = mode == Mode::Train;
        let (mut h, c) = block_forward(&self.projection.convs, &mut self.projection.norms, x, mode)?;
        let mut caches = Vec::new();
        caches.extend(c);
        match &mut self.body {
            StageBody::Plain(blocks) => {
                for b in blocks.iter_mut() {
                    let (y, c) = block_forward(&b.convs, &mut b.norms, &h, mode)?;
                    caches.extend(c);
                    h = y;
                }
            }
            StageBody::Folded {
                convs,
                norms,
                iterations,
            } => {
                let shared = norms.len() == 1;
                for i in 0..*iterations {
                    let set = &mut norms[if shared { 0 } else { i }];
                    let (y, c) = block_forward(convs, set, &h, mode)?;
                    caches.extend(c);
                    h = y;
                }
            }
        }
        if keep {
            self.cache = caches;
        }
        Ok(h)
    }

    /// Backward through the last train-mode forward. Folded iterations
    /// accumulate into the same conv gradient buffers, so shared score
    /// gradients come out summed over iterations.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let expected = 1 + self.iterations();
        if self.cache.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "stage {} backward without a train-mode forward",
                self.index
            )));
        }
        let caches = std::mem::take(&mut self.cache);
        let mut d = dy.clone();
        match &mut self.body {
            StageBody::Plain(blocks) => {
                for (b, c) in blocks.iter_mut().zip(&caches[1..]).rev() {
                    d = block_backward(&mut b.convs, &mut b.norms, c, &d)?;
                }
            }
            StageBody::Folded { convs, norms, .. } => {
                let shared = norms.len() == 1;
                for (i, c) in caches[1..].iter().enumerate().rev() {
                    let set = &mut norms[if shared { 0 } else { i }];
                    d = block_backward(convs, set, c, &d)?;
                }
            }
        }
        block_backward(&mut self.projection.convs, &mut self.projection.norms, &caches[0], &d)
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
