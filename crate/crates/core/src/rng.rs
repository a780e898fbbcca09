//! Seeded, platform-independent random state.
//!
//! Draws come from Philox4x32-10 keyed by the 64-bit seed. The 128-bit
//! counter is split into a 64-bit stream id (upper half) and a 64-bit draw
//! index (lower half), so every layer owns a disjoint slice of counter space
//! and can be regenerated without replaying the layers before it.
//!
//! Draw accounting:
//! - one `u64` draw = half of a Philox output block
//! - uniform: one draw, top 53 bits
//! - normal: two draws (Box-Muller, cosine branch only)
//! - signed constant: one uniform per element, negative below 0.5

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Identifier of the generator and draw conventions above. Stored in model files.
pub const ALGORITHM_ID: u16 = 1;

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 bijection with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Counter-based random stream: `(seed, stream)` fixes the sequence and
/// `draw_counter` is the position within it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    draw_counter: u64,
    cached: Option<(u64, [u32; 4])>,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream {
            seed,
            stream,
            draw_counter: 0,
            cached: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn algorithm_id(&self) -> u16 {
        ALGORITHM_ID
    }

    pub fn draw_counter(&self) -> u64 {
        self.draw_counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let block = self.draw_counter >> 1;
        let half = (self.draw_counter & 1) as usize;
        let words = match self.cached {
            Some((b, w)) if b == block => w,
            _ => {
                let ctr = [
                    block as u32,
                    (block >> 32) as u32,
                    self.stream as u32,
                    (self.stream >> 32) as u32,
                ];
                let w = philox4x32_10(ctr, [self.seed as u32, (self.seed >> 32) as u32]);
                self.cached = Some((block, w));
                w
            }
        };
        self.draw_counter += 1;
        (words[2 * half] as u64) | ((words[2 * half + 1] as u64) << 32)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; consumes two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Uniform integer in `0..n` (n > 0) by multiply-shift; one draw.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle; `len - 1` draws.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Stream ids reserved for non-parameter randomness. Parameter streams use
/// `2·layer` (weights) and `2·layer + 1` (scores).
pub mod streams {
    const BASE: u64 = 1 << 62;
    pub const SHUFFLE: u64 = BASE;
    pub const AUGMENT: u64 = BASE + (1 << 40);
    pub const DATASET: u64 = BASE + (2 << 40);
    pub const SPLIT: u64 = BASE + (3 << 40);
    pub const PROBE: u64 = BASE + (4 << 40);

    pub fn weights(layer: usize) -> u64 {
        2 * layer as u64
    }

    pub fn scores(layer: usize) -> u64 {
        2 * layer as u64 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    KaimingNormal,
    SignedConstant,
    KaimingUniformScores,
}

impl InitKind {
    pub fn code(self) -> u8 {
        match self {
            InitKind::KaimingNormal => 0,
            InitKind::SignedConstant => 1,
            InitKind::KaimingUniformScores => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(InitKind::KaimingNormal),
            1 => Some(InitKind::SignedConstant),
            2 => Some(InitKind::KaimingUniformScores),
            _ => None,
        }
    }
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    pub kind: InitKind,
    pub fan_in: usize,
    pub gain: f64,
}

impl InitSpec {
    pub fn relu(kind: InitKind, fan_in: usize) -> Self {
        InitSpec {
            kind,
            fan_in,
            gain: RELU_GAIN,
        }
    }

    /// Kaiming-normal standard deviation, `gain / sqrt(fan_in)`.
    pub fn sigma(&self) -> f64 {
        self.gain * (1.0 / self.fan_in as f64).sqrt()
    }
}

/// Fan-in of a weight tensor: product of all but the leading (output) extent.
pub fn fan_in(shape: &[usize]) -> usize {
    shape.iter().skip(1).product()
}

pub fn init_weights<T: Scalar>(spec: &InitSpec, shape: &[usize], rng: &mut RngStream) -> Result<Tensor<T>> {
    if spec.fan_in == 0 {
        return Err(Error::InvalidArgument("fan_in must be positive".into()));
    }
    if shape.len() >= 2 && fan_in(shape) != spec.fan_in {
        return Err(Error::shape(
            "init_weights",
            format!("shape {:?} has fan-in {}, spec says {}", shape, fan_in(shape), spec.fan_in),
        ));
    }
    let n: usize = shape.iter().product();
    let sigma = spec.sigma();
    let data: Vec<T> = match spec.kind {
        InitKind::KaimingNormal => (0..n).map(|_| T::from_f64(sigma * rng.normal())).collect(),
        InitKind::SignedConstant => {
            let pos = T::from_f64(sigma);
            (0..n)
                .map(|_| if rng.uniform() < 0.5 { -pos } else { pos })
                .collect()
        }
        InitKind::KaimingUniformScores => return init_scores(shape, spec.fan_in, rng),
    };
    Tensor::from_vec(shape, data)
}

/// Kaiming-uniform scores on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
pub fn init_scores<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("fan_in must be positive".into()));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(bound * (2.0 * rng.uniform() - 1.0)))
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0; 4], [0; 2]),
            [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344],
                [0xa4093822, 0x299f31d0]
            ),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(7, 3);
            (0..10).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(7, 3);
            (0..10).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = RngStream::new(7, 4);
            (0..10).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn draw_counter_bookkeeping() {
        let mut r = RngStream::new(1, 0);
        r.normal();
        assert_eq!(r.draw_counter(), 2);
        let spec = InitSpec::relu(InitKind::SignedConstant, 9);
        init_weights::<f32>(&spec, &[4, 1, 3, 3], &mut r).unwrap();
        assert_eq!(r.draw_counter(), 2 + 36);
    }

    #[test]
    fn sc_sigma_closed_form() {
        let spec = InitSpec::relu(InitKind::SignedConstant, 64 * 9);
        let sigma = (2.0f64 / 576.0).sqrt();
        assert!((spec.sigma() - sigma).abs() < 1e-15);
        assert!((sigma - 0.058926).abs() < 1e-6);
        let w: Tensor<f64> = init_weights(&spec, &[8, 64, 3, 3], &mut RngStream::new(3, 0)).unwrap();
        assert!(w.data().iter().all(|v| v.abs() == spec.sigma()));
    }

    #[test]
    fn zero_fan_in_errors() {
        let spec = InitSpec::relu(InitKind::KaimingNormal, 0);
        assert!(init_weights::<f32>(&spec, &[0], &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<usize> = (0..100).collect();
        RngStream::new(5, streams::SHUFFLE).shuffle(&mut v);
        let mut s = v.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
        assert_ne!(v, s);
    }
}
