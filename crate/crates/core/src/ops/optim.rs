//! SGD with momentum and coupled weight decay, and the warmup + cosine
//! learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
///
/// `grad` is taken in `f64` since gradient accumulators are kept at double
/// precision regardless of the storage type.
pub fn sgd_step<T: Scalar>(param: &mut [T], grad: &[f64], velocity: &mut [T], hp: SgdParams) {
    assert_eq!(param.len(), grad.len(), "sgd_step: param/grad length");
    assert_eq!(param.len(), velocity.len(), "sgd_step: param/velocity length");
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let pv = p.as_f64();
        let nv = hp.momentum * v.as_f64() + g + hp.weight_decay * pv;
        *v = T::from_f64(nv);
        *p = T::from_f64(pv - hp.lr * nv);
    }
}

/// Linear warmup from `base_lr / warmup_epochs` up to `base_lr`, then cosine
/// annealing towards zero over the remaining epochs.
pub fn lr_schedule(epoch: usize, total_epochs: usize, base_lr: f64, warmup_epochs: usize) -> Result<f64> {
    if total_epochs <= warmup_epochs {
        return Err(Error::Config(format!(
            "total epochs ({}) must exceed warmup epochs ({})",
            total_epochs, warmup_epochs
        )));
    }
    if epoch >= total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {} outside schedule of {} epochs",
            epoch, total_epochs
        )));
    }
    if epoch < warmup_epochs {
        return Ok(base_lr * (epoch + 1) as f64 / warmup_epochs as f64);
    }
    let t = (epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64;
    Ok(base_lr * 0.5 * (1.0 + (PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut p = [1.0f64, -2.0];
        let mut v = [0.0f64; 2];
        sgd_step(&mut p, &[0.5, 0.25], &mut v, SgdParams { lr: 1.0, momentum: 0.0, weight_decay: 0.0 });
        assert_eq!(p, [0.5, -2.25]);
    }

    #[test]
    fn velocity_decays_geometrically_without_gradient() {
        let mut p = [0.0f64];
        let mut v = [1.0f64];
        let hp = SgdParams { lr: 0.1, momentum: 0.5, weight_decay: 0.0 };
        for i in 1..=4 {
            sgd_step(&mut p, &[0.0], &mut v, hp);
            assert_eq!(v[0], 0.5f64.powi(i));
        }
    }

    #[test]
    fn two_step_hand_trace() {
        let hp = SgdParams { lr: 0.1, momentum: 0.9, weight_decay: 0.0005 };
        let (mut p, mut v) = ([2.0f64], [0.0f64]);
        sgd_step(&mut p, &[0.3], &mut v, hp);
        sgd_step(&mut p, &[-0.1], &mut v, hp);
        // hand trace
        let v1 = 0.9 * 0.0 + 0.3 + 0.0005 * 2.0;
        let p1 = 2.0 - 0.1 * v1;
        let v2 = 0.9 * v1 + -0.1 + 0.0005 * p1;
        let p2 = p1 - 0.1 * v2;
        assert_eq!(v[0], v2);
        assert_eq!(p[0], p2);
        assert!((p2 - 1.952711505).abs() < 1e-8);
    }

    #[test]
    fn schedule_reference_points() {
        assert_eq!(lr_schedule(5, 200, 0.1, 5).unwrap(), 0.1);
        assert!((lr_schedule(0, 200, 0.1, 5).unwrap() - 0.02).abs() < 1e-15);
        let last = lr_schedule(199, 200, 0.1, 5).unwrap();
        let step = 0.1 * 0.5 * (1.0 - (PI / 195.0).cos());
        assert!(last > 0.0 && last <= step + 1e-15);
        assert!((lr_schedule(5 + 195 / 2, 200, 0.1, 5).unwrap() - 0.05).abs() < 1e-3);
        assert!((lr_schedule(55, 105, 0.1, 5).unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_short_runs() {
        assert!(lr_schedule(0, 5, 0.1, 5).is_err());
        assert!(lr_schedule(10, 10, 0.1, 0).is_err());
    }
}
