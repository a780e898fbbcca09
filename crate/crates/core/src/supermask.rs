//! Edge-popup supermasks: per-layer top-k score selection, the masked forward
//! pass and straight-through score gradients.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::{conv2d, conv2d_grad, linear, linear_grad, sgd_step, SgdParams};
use crate::tensor::{Scalar, Tensor};

/// Number of connections kept by a layer of `n` weights at density `k_permille`.
pub fn kept_count(n: usize, k_permille: u16) -> usize {
    (n as u128 * k_permille as u128 / 1000) as usize
}

/// Binary mask over a weight tensor, row-major (OIHW) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Supermask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Supermask {
    pub fn ones(shape: &[usize]) -> Self {
        Supermask {
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::shape(
                "supermask",
                format!("{} bits for shape {:?}", bits.len(), shape),
            ));
        }
        Ok(Supermask {
            shape: shape.to_vec(),
            bits,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Tensor::from_vec(&self.shape, data).expect("mask shape")
    }

    /// One bit per element; element `i` lands in byte `i / 8`, bit `i % 8`
    /// (least significant first).
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Format(format!(
                "mask for {} elements needs {} bytes, got {}",
                n,
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let bits = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Supermask {
            shape: shape.to_vec(),
            bits,
        })
    }
}

/// Selects the `floor(k·n)` largest scores; ties go to the lower flat index.
pub fn topk_mask<T: Scalar>(scores: &Tensor<T>, k_permille: u16) -> Result<Supermask> {
    if k_permille == 0 || k_permille > 1000 {
        return Err(Error::InvalidArgument(format!(
            "density {} permille outside (0, 1000]",
            k_permille
        )));
    }
    let n = scores.len();
    let m = kept_count(n, k_permille);
    if m == 0 {
        return Err(Error::InvalidArgument(format!(
            "density {} permille keeps no connection of a {}-element layer",
            k_permille, n
        )));
    }
    if m == n {
        return Ok(Supermask::ones(scores.shape()));
    }
    let s = scores.data();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let cmp = |a: &u32, b: &u32| -> Ordering {
        s[*b as usize]
            .as_f64()
            .total_cmp(&s[*a as usize].as_f64())
            .then(a.cmp(b))
    };
    order.select_nth_unstable_by(m - 1, cmp);
    let mut bits = vec![false; n];
    for &i in &order[..m] {
        bits[i as usize] = true;
    }
    Ok(Supermask {
        shape: scores.shape().to_vec(),
        bits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize, pad: usize },
    Linear,
}

/// What a layer learns: its supermask scores (weights frozen) or its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Trainable {
    Scores,
    Weights,
}

/// A conv or linear layer with frozen weights, trainable scores, and the
/// derived supermask.
///
/// The mask and effective weights are derived state: they are recomputed
/// from the scores whenever the layer is marked stale.
#[derive(Clone, Debug)]
pub struct MaskedLayer<T = f32> {
    pub name: String,
    pub kind: LayerKind,
    pub trainable: Trainable,
    pub k_permille: u16,
    weights: Tensor<T>,
    scores: Tensor<T>,
    velocity: Tensor<T>,
    grad: Vec<f64>,
    mask: Supermask,
    effective: Tensor<T>,
    stale: bool,
}

impl<T: Scalar> MaskedLayer<T> {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        trainable: Trainable,
        k_permille: u16,
        weights: Tensor<T>,
        scores: Tensor<T>,
    ) -> Result<Self> {
        weights.check_same_shape("masked_layer", &scores)?;
        let k_permille = match trainable {
            Trainable::Scores => k_permille,
            Trainable::Weights => 1000,
        };
        let mut layer = MaskedLayer {
            name: name.into(),
            kind,
            trainable,
            k_permille,
            velocity: Tensor::zeros(weights.shape()),
            grad: vec![0.0; weights.len()],
            mask: Supermask::ones(weights.shape()),
            effective: weights.clone(),
            weights,
            scores,
            stale: true,
        };
        layer.refresh()?;
        Ok(layer)
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn scores(&self) -> &Tensor<T> {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut Tensor<T> {
        self.stale = true;
        &mut self.scores
    }

    pub fn mask(&self) -> &Supermask {
        &self.mask
    }

    pub fn effective_weights(&self) -> &Tensor<T> {
        &self.effective
    }

    pub fn velocity(&self) -> &Tensor<T> {
        &self.velocity
    }

    /// Accumulated gradient with respect to the effective weights.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    pub fn mark_stale(&mut self) {
        self.stale = true;
    }

    /// Recomputes mask and effective weights if the scores (or weights) moved.
    pub fn refresh(&mut self) -> Result<()> {
        if !self.stale {
            return Ok(());
        }
        if self.trainable == Trainable::Scores {
            self.mask = topk_mask(&self.scores, self.k_permille)?;
            self.effective = self.weights.mul(&self.mask.to_tensor())?;
        } else {
            self.effective = self.weights.clone();
        }
        self.stale = false;
        Ok(())
    }

    /// Installs an externally supplied mask (e.g. read from a model file).
    /// The mask stays in force until the scores are next changed.
    pub fn set_mask(&mut self, mask: Supermask) -> Result<()> {
        if mask.shape() != self.weights.shape() {
            return Err(Error::shape(
                "set_mask",
                format!("mask {:?} vs weights {:?}", mask.shape(), self.weights.shape()),
            ));
        }
        self.effective = self.weights.mul(&mask.to_tensor())?;
        self.mask = mask;
        self.stale = false;
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        debug_assert!(!self.stale, "forward on a stale mask");
        masked_forward(self.kind, &self.effective, input)
    }

    /// Accumulates the effective-weight gradient and returns the input gradient.
    pub fn backward(&mut self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, gw) = match self.kind {
            LayerKind::Conv { stride, pad } => conv2d_grad(upstream, input, &self.effective, stride, pad)?,
            LayerKind::Linear => linear_grad(upstream, input, &self.effective)?,
        };
        for (a, v) in self.grad.iter_mut().zip(gw.data()) {
            *a += v.as_f64();
        }
        Ok(gx)
    }

    /// Straight-through score gradient `∂L/∂w_eff ⊙ w` for every position,
    /// masked or not.
    pub fn score_grad(&self) -> Vec<f64> {
        self.grad
            .iter()
            .zip(self.weights.data())
            .map(|(g, w)| g * w.as_f64())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|v| *v = 0.0);
    }

    /// One SGD step on whatever this layer trains.
    pub fn step(&mut self, hp: SgdParams) {
        match self.trainable {
            Trainable::Scores => {
                let g = self.score_grad();
                sgd_step(self.scores.data_mut(), &g, self.velocity.data_mut(), hp);
            }
            Trainable::Weights => {
                sgd_step(self.weights.data_mut(), &self.grad, self.velocity.data_mut(), hp);
            }
        }
        self.stale = true;
    }

    /// Replaces the weights wholesale (weight-learning checkpoint restore).
    pub fn set_weights(&mut self, weights: Tensor<T>) -> Result<()> {
        self.weights.check_same_shape("set_weights", &weights)?;
        self.weights = weights;
        self.stale = true;
        Ok(())
    }

    /// Replaces the scores wholesale (checkpoint restore).
    pub fn set_scores(&mut self, scores: Tensor<T>) -> Result<()> {
        self.scores.check_same_shape("set_scores", &scores)?;
        self.scores = scores;
        self.stale = true;
        Ok(())
    }
}

/// Conv or linear layer applied with `effective` weights (= weights ⊙ mask).
pub fn masked_forward<T: Scalar>(kind: LayerKind, effective: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    match kind {
        LayerKind::Conv { stride, pad } => conv2d(input, effective, stride, pad),
        LayerKind::Linear => linear(input, effective),
    }
}

/// Straight-through gradient of `sum(upstream ⊙ layer(input))` with respect
/// to the scores, for a layer whose mask is fixed at its current value.
pub fn score_grad<T: Scalar>(layer: &MaskedLayer<T>, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let gw = match layer.kind {
        LayerKind::Conv { stride, pad } => conv2d_grad(upstream, input, layer.effective_weights(), stride, pad)?.1,
        LayerKind::Linear => linear_grad(upstream, input, layer.effective_weights())?.1,
    };
    gw.mul(layer.weights())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerDensity {
    pub name: String,
    pub n: usize,
    pub ones: usize,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityReport {
    pub layers: Vec<LayerDensity>,
    pub total_n: usize,
    pub total_ones: usize,
}

impl DensityReport {
    pub fn from_layers<'a, T: Scalar>(layers: impl IntoIterator<Item = &'a MaskedLayer<T>>) -> Self {
        let layers: Vec<LayerDensity> = layers
            .into_iter()
            .map(|l| {
                let ones = l.mask().popcount();
                LayerDensity {
                    name: l.name.clone(),
                    n: l.len(),
                    ones,
                    density: ones as f64 / l.len() as f64,
                }
            })
            .collect();
        DensityReport {
            total_n: layers.iter().map(|l| l.n).sum(),
            total_ones: layers.iter().map(|l| l.ones).sum(),
            layers,
        }
    }
}
