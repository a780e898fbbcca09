//! Batch normalization over the channel axis of NCHW tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel parameters and running statistics of one BN layer.
///
/// When `affine` is false, `gamma` stays at 1 and `beta` at 0 and neither
/// receives gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerState<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub affine: bool,
}

impl<T: Scalar> BnLayerState<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        BnLayerState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            affine,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Intermediates needed by the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    mode: Mode,
    shape: Vec<usize>,
}

fn check_input<T: Scalar>(input: &Tensor<T>, channels: usize) -> Result<(usize, usize, usize)> {
    let s = input.shape();
    if s.len() < 2 || s[1] != channels {
        return Err(Error::shape(
            "batchnorm",
            format!("input {:?} does not have {} channels", s, channels),
        ));
    }
    let spatial: usize = s[2..].iter().product();
    Ok((s[0], s[1], spatial))
}

/// Forward pass. Train mode normalizes with batch statistics and updates the
/// running averages; eval mode uses the running averages.
pub fn batchnorm<T: Scalar>(
    input: &Tensor<T>,
    state: &mut BnLayerState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, hw) = check_input(input, state.channels())?;
    let m = n * hw;
    if mode == Mode::Train && m < 2 {
        return Err(Error::shape(
            "batchnorm",
            format!("train mode needs at least 2 values per channel, got {}", m),
        ));
    }
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![0.0f64; c];

    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    for &v in &x[base..base + hw] {
                        sum += v.as_f64();
                    }
                }
                let mean = sum / m as f64;
                let mut sq = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    for &v in &x[base..base + hw] {
                        let d = v.as_f64() - mean;
                        sq += d * d;
                    }
                }
                let var = sq / m as f64;
                let mom = state.momentum;
                let unbiased = var * m as f64 / (m - 1) as f64;
                state.running_mean[ch] =
                    T::from_f64((1.0 - mom) * state.running_mean[ch].as_f64() + mom * mean);
                state.running_var[ch] =
                    T::from_f64((1.0 - mom) * state.running_var[ch].as_f64() + mom * unbiased);
                (mean, var)
            }
            Mode::Eval => (
                state.running_mean[ch].as_f64(),
                state.running_var[ch].as_f64(),
            ),
        };
        let istd = 1.0 / (var + state.eps).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (state.gamma[ch].as_f64(), state.beta[ch].as_f64());
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i].as_f64() - mean) * istd;
                xhat[i] = T::from_f64(xh);
                out[i] = T::from_f64(if state.affine { g * xh + b } else { xh });
            }
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        mode,
        shape: input.shape().to_vec(),
    };
    Ok((Tensor::from_vec(input.shape(), out)?, cache))
}

/// Gradient with respect to the input plus per-channel `(dgamma, dbeta)`.
/// The parameter gradients are all zero for non-affine layers.
pub fn batchnorm_grad<T: Scalar>(
    upstream: &Tensor<T>,
    cache: &BnCache<T>,
    state: &BnLayerState<T>,
) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>)> {
    if upstream.shape() != cache.shape.as_slice() {
        return Err(Error::shape(
            "batchnorm_grad",
            format!("upstream {:?} vs cached {:?}", upstream.shape(), cache.shape),
        ));
    }
    let (n, c, hw) = check_input(upstream, state.channels())?;
    let m = (n * hw) as f64;
    let dy = upstream.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];

    for ch in 0..c {
        let g = if state.affine {
            state.gamma[ch].as_f64()
        } else {
            1.0
        };
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let d = dy[i].as_f64();
                sum_dy += d;
                sum_dy_xhat += d * cache.xhat[i].as_f64();
            }
        }
        if state.affine {
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
        }
        let istd = cache.inv_std[ch];
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let d = dy[i].as_f64();
                let v = match cache.mode {
                    Mode::Train => {
                        let xh = cache.xhat[i].as_f64();
                        g * istd * (d - sum_dy / m - xh * sum_dy_xhat / m)
                    }
                    Mode::Eval => g * istd * d,
                };
                dx[i] = T::from_f64(v);
            }
        }
    }
    Ok((Tensor::from_vec(upstream.shape(), dx)?, dgamma, dbeta))
}

/// A BN layer together with its gradient accumulators and optimizer state.
#[derive(Clone, Debug)]
pub struct BatchNorm<T = f32> {
    pub state: BnLayerState<T>,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub vel_gamma: Vec<T>,
    pub vel_beta: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        BatchNorm {
            state: BnLayerState::new(channels, affine),
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
            vel_gamma: vec![T::zero(); channels],
            vel_beta: vec![T::zero(); channels],
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        batchnorm(x, &mut self.state, mode)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>, cache: &BnCache<T>) -> Result<Tensor<T>> {
        let (dx, dg, db) = batchnorm_grad(dy, cache, &self.state)?;
        if self.state.affine {
            for (a, v) in self.grad_gamma.iter_mut().zip(dg) {
                *a += v;
            }
            for (a, v) in self.grad_beta.iter_mut().zip(db) {
                *a += v;
            }
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.iter_mut().for_each(|v| *v = 0.0);
        self.grad_beta.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn channels(&self) -> usize {
        self.state.channels()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[2, 1, 2, 2], 3.5);
        let mut st = BnLayerState::new(1, false);
        let (y, _) = batchnorm(&x, &mut st, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(st.running_var[0] >= 0.0);
    }

    #[test]
    fn affine_transform_applies_scale_and_shift() {
        // running_var + eps == 1, so the normalized value is exactly the input.
        let mut st = BnLayerState::<f64>::new(1, true);
        st.gamma[0] = 2.0;
        st.beta[0] = 1.0;
        st.running_mean[0] = 0.0;
        st.running_var[0] = 1.0 - st.eps;
        let x = Tensor::<f64>::from_f64_slice(&[1, 1, 1, 1], &[0.5]).unwrap();
        let (y, _) = batchnorm(&x, &mut st, Mode::Eval).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_f64_slice(&[4, 1, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut st = BnLayerState::new(1, false);
        batchnorm(&x, &mut st, Mode::Train).unwrap();
        assert!((st.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased var of 1..4 is 5/3
        assert!((st.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_does_not_touch_state() {
        let x = Tensor::<f32>::full(&[1, 2, 3, 3], 1.0);
        let mut st = BnLayerState::new(2, true);
        let before = st.clone();
        batchnorm(&x, &mut st, Mode::Eval).unwrap();
        assert_eq!(st, before);
    }

    #[test]
    fn train_mode_needs_two_values() {
        let x = Tensor::<f32>::full(&[1, 2, 1, 1], 1.0);
        let mut st = BnLayerState::new(2, false);
        assert!(batchnorm(&x, &mut st, Mode::Train).is_err());
    }

    #[test]
    fn non_affine_gets_no_parameter_gradient() {
        let x = Tensor::<f64>::from_f64_slice(&[2, 1, 1, 2], &[0.1, -0.4, 0.9, 0.3]).unwrap();
        let mut bn = BatchNorm::<f64>::new(1, false);
        let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
        let dy = Tensor::<f64>::full(&[2, 1, 1, 2], 1.0);
        bn.backward(&dy, &cache).unwrap();
        assert_eq!(bn.grad_gamma, vec![0.0]);
        assert_eq!(bn.grad_beta, vec![0.0]);
        assert_eq!(bn.state.gamma, vec![1.0]);
    }
}
