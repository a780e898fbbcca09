//! Image datasets: CIFAR binary files, synthetic class-conditional blobs,
//! batching, normalization and augmentation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::rng::{streams, RngStream};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

/// Per-channel normalization applied after scaling bytes to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Normalization {
    /// The conventional CIFAR-100 channel statistics.
    fn default() -> Self {
        Normalization {
            mean: vec![0.5071, 0.4865, 0.4409],
            std: vec![0.2673, 0.2564, 0.2762],
        }
    }
}

/// Random crop from a zero-padded image plus horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub crop_pad: usize,
    pub hflip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            crop_pad: 4,
            hflip: true,
        }
    }
}

/// Images kept as raw bytes (NCHW per record) plus integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<usize>,
        shape: [usize; 3],
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let [channels, height, width] = shape;
        if images.len() != labels.len() * channels * height * width {
            return Err(Error::Data(format!(
                "{} image bytes for {} records of {:?}",
                images.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {} outside 0..{}", bad, num_classes)));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn record_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let r = self.record_len();
        &self.images[i * r..(i + 1) * r]
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.record_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            split,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Normalized images `indices` as an NCHW tensor. Train mode with
    /// `augment` applies crop and flip driven by `rng`; eval mode only
    /// normalizes.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        norm: &Normalization,
        mode: Mode,
        augment: Option<(Augment, &mut RngStream)>,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        if norm.mean.len() != self.channels || norm.std.len() != self.channels {
            return Err(Error::Config(format!(
                "normalization has {} means and {} stds for {} channels",
                norm.mean.len(),
                norm.std.len(),
                self.channels
            )));
        }
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * self.record_len());
        for &i in indices {
            for (c, px) in self.image(i).chunks(hw).enumerate() {
                let (m, s) = (norm.mean[c], norm.std[c]);
                data.extend(px.iter().map(|&b| T::from_f64((b as f64 / 255.0 - m) / s)));
            }
        }
        let shape = [indices.len(), self.channels, self.height, self.width];
        let mut x = Tensor::from_vec(&shape, data)?;
        if mode == Mode::Train {
            if let Some((aug, rng)) = augment {
                for n in 0..indices.len() {
                    augment_sample(x.outer_mut(n), [self.channels, self.height, self.width], aug, rng);
                }
            }
        }
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Crop offsets (two draws) then flip (one draw), in that order per sample.
fn augment_sample<T: Scalar>(img: &mut [T], [c, h, w]: [usize; 3], aug: Augment, rng: &mut RngStream) {
    if aug.crop_pad > 0 {
        let dy = rng.below(2 * aug.crop_pad + 1);
        let dx = rng.below(2 * aug.crop_pad + 1);
        let cropped = random_crop(img, [c, h, w], aug.crop_pad, dy, dx);
        img.copy_from_slice(&cropped);
    }
    if aug.hflip && rng.below(2) == 1 {
        hflip(img, [c, h, w]);
    }
}

/// Window at offset `(dy, dx)` of the image zero-padded by `pad` on each side.
pub fn random_crop<T: Scalar>(img: &[T], [c, h, w]: [usize; 3], pad: usize, dy: usize, dx: usize) -> Vec<T> {
    let mut out = vec![T::zero(); img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub fn hflip<T: Scalar>(img: &mut [T], [c, h, w]: [usize; 3]) {
    for row in img[..c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

/// Parses CIFAR binary records: `label_bytes` (1 for CIFAR-10, 2 for
/// CIFAR-100, where the second byte is the fine label) then 3072 image bytes.
pub fn parse_cifar_binary(bytes: &[u8], label_bytes: usize, num_classes: usize) -> Result<Dataset> {
    if !(1..=2).contains(&label_bytes) {
        return Err(Error::Data(format!("label_bytes must be 1 or 2, got {}", label_bytes)));
    }
    let rec = label_bytes + CIFAR_IMAGE_BYTES;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {}-byte records (truncated file?)",
            bytes.len(),
            rec
        )));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        labels.push(r[label_bytes - 1] as usize);
        images.extend_from_slice(&r[label_bytes..]);
    }
    Dataset::new(images, labels, [3, 32, 32], num_classes, Split::Train)
}

pub fn load_cifar_binary(path: &Path, label_bytes: usize, num_classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar_binary(&bytes, label_bytes, num_classes)
}

/// Seeded split into `(train, val)` with `val_count` validation records.
/// Both parts keep the original record order.
pub fn train_val_split(ds: &Dataset, val_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if val_count >= ds.len() {
        return Err(Error::Data(format!(
            "validation size {} leaves no training data out of {}",
            val_count,
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    RngStream::new(seed, streams::SPLIT).shuffle(&mut order);
    let mut val = order[..val_count].to_vec();
    let mut train = order[val_count..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((ds.subset(&train, Split::Train), ds.subset(&val, Split::Val)))
}

/// Parameters of the synthetic class-conditional dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    /// Distance between class means in units of the per-pixel noise σ.
    pub separation: f64,
}

fn three() -> usize {
    3
}

/// Grey levels per unit of noise σ when rendering to bytes.
const PIXEL_SCALE: f64 = 32.0;

/// Smooth unit-norm template per class: a coarse Gaussian grid per channel,
/// bilinearly upsampled.
fn class_templates(seed: u64, spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = RngStream::new(seed, streams::DATASET);
    let (c, s) = (spec.channels, spec.size);
    let g = (s / 2).clamp(2, 4);
    (0..spec.classes)
        .map(|_| {
            let coarse: Vec<f64> = (0..c * g * g).map(|_| rng.normal()).collect();
            let mut t = vec![0.0; c * s * s];
            for ch in 0..c {
                for y in 0..s {
                    let fy = y as f64 * (g - 1) as f64 / (s - 1).max(1) as f64;
                    let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
                    let y1 = (y0 + 1).min(g - 1);
                    for x in 0..s {
                        let fx = x as f64 * (g - 1) as f64 / (s - 1).max(1) as f64;
                        let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                        let x1 = (x0 + 1).min(g - 1);
                        let at = |yy: usize, xx: usize| coarse[(ch * g + yy) * g + xx];
                        t[(ch * s + y) * s + x] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                            + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
                    }
                }
            }
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            t.iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// `n` images of class-conditional Gaussian blobs: sample = class mean +
/// N(0, σ²) per pixel, with class means `separation·σ/√2` along smooth
/// near-orthogonal templates, so means sit about `separation·σ` apart.
/// Class templates depend on `seed` only; samples also on `split`.
pub fn synthetic_dataset(seed: u64, n: usize, spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    if spec.classes == 0 || n < spec.classes {
        return Err(Error::Data(format!("need n >= classes, got {} < {}", n, spec.classes)));
    }
    if spec.size < 2 || spec.channels == 0 {
        return Err(Error::Data("synthetic images need size >= 2 and a channel".into()));
    }
    let templates = class_templates(seed, spec);
    let amp = spec.separation / std::f64::consts::SQRT_2;
    let mut rng = RngStream::new(seed, streams::DATASET + 1 + split.code());
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    let rec = spec.channels * spec.size * spec.size;
    let mut images = Vec::with_capacity(n * rec);
    for &l in &labels {
        for &t in &templates[l] {
            let v = amp * t + rng.normal();
            images.push((128.0 + PIXEL_SCALE * v).round().clamp(0.0, 255.0) as u8);
        }
    }
    Dataset::new(
        images,
        labels,
        [spec.channels, spec.size, spec.size],
        spec.classes,
        split,
    )
}

/// Mean and standard deviation per channel of a dataset scaled to [0, 1].
pub fn channel_stats(ds: &Dataset) -> Normalization {
    let hw = ds.height * ds.width;
    let mut sum = vec![0.0; ds.channels];
    let mut sq = vec![0.0; ds.channels];
    for i in 0..ds.len() {
        for (c, px) in ds.image(i).chunks(hw).enumerate() {
            for &b in px {
                let v = b as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let m = (ds.len() * hw) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| (q / m - mu * mu).max(1e-12).sqrt())
        .collect();
    Normalization { mean, std }
}
