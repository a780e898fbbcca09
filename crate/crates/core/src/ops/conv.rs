//! 2-D convolution (cross-correlation, no bias) via chunked im2col.
//!
//! Every output element is reduced in a fixed order (input rows ascending for
//! the forward pass, output channels ascending for the input gradient, batch
//! then spatial position for the weight gradient), accumulated in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weights: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weights.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weights, got {:?} and {:?}", input, weights),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, wcin, kh, kw) = (weights[0], weights[1], weights[2], weights[3]);
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but weights expect {}", cin, wcin),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Rows of the unfolded input, `Cin·kh·kw`.
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output positions per channel.
    pub fn p(&self) -> usize {
        self.ho * self.wo
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.k() * self.p()) as u64
    }
}

/// Upper bound on unfolded elements held at once; batches are chunked to fit.
const COL_BUDGET: usize = 1 << 22;

fn chunk_len(g: &ConvGeometry) -> usize {
    (COL_BUDGET / (g.k() * g.p()).max(1)).clamp(1, g.n.max(1))
}

/// Unfolds samples `n0..n0+nb` into `col` laid out as [K, nb·P].
fn im2col<T: Scalar>(x: &Tensor<T>, g: &ConvGeometry, n0: usize, nb: usize, col: &mut [f64]) {
    let p = g.p();
    let cols = nb * p;
    for b in 0..nb {
        let sample = x.outer(n0 + b);
        for c in 0..g.cin {
            let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut col[row * cols + b * p..row * cols + (b + 1) * p];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                src[ix as usize].as_f64()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatters `dcol` ([K, nb·P]) back into per-sample input gradients.
fn col2im(dcol: &[f64], g: &ConvGeometry, nb: usize, dx: &mut [f64]) {
    let p = g.p();
    let cols = nb * p;
    let chw = g.cin * g.h * g.w;
    for b in 0..nb {
        let sample = &mut dx[b * chw..(b + 1) * chw];
        for c in 0..g.cin {
            let plane = &mut sample[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &dcol[row * cols + b * p..row * cols + (b + 1) * p];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (s, &v) in acc.iter_mut().zip(x) {
        *s += a * v;
    }
}

/// Dot product over eight interleaved partial sums, combined pairwise. The
/// order is fixed, so results are reproducible.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ac, ar) = a.split_at(a.len() / 8 * 8);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ar.iter().zip(br).enumerate() {
        acc[l] += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Cross-correlation of `input` [N,Cin,H,W] with `weights` [Cout,Cin,kh,kw].
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let w64: Vec<f64> = weights.data().iter().map(|v| v.as_f64()).collect();
    let mut out = Tensor::zeros(&g.output_shape());
    let chunk = chunk_len(&g);
    let mut col = vec![0.0f64; k * p * chunk];
    let mut acc = vec![0.0f64; p * chunk];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let cols = nb * p;
        im2col(input, &g, n0, nb, &mut col);
        for o in 0..g.cout {
            let acc = &mut acc[..cols];
            acc.iter_mut().for_each(|v| *v = 0.0);
            let wrow = &w64[o * k..(o + 1) * k];
            for (r, &wv) in wrow.iter().enumerate() {
                // Zero weights contribute exactly +0.0; skipping them is bit-exact.
                if wv != 0.0 {
                    axpy(acc, wv, &col[r * cols..(r + 1) * cols]);
                }
            }
            for b in 0..nb {
                let dst = &mut out.outer_mut(n0 + b)[o * p..(o + 1) * p];
                for (d, &a) in dst.iter_mut().zip(&acc[b * p..(b + 1) * p]) {
                    *d = T::from_f64(a);
                }
            }
        }
        n0 += nb;
    }
    Ok(out)
}

/// Gradients of `sum(upstream ⊙ conv2d(input, weights))` with respect to the
/// input and the weights.
pub fn conv2d_grad<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, pad)?;
    if upstream.shape() != g.output_shape() {
        return Err(Error::shape(
            "conv2d_grad",
            format!(
                "upstream {:?} does not match output {:?}",
                upstream.shape(),
                g.output_shape()
            ),
        ));
    }
    let (k, p) = (g.k(), g.p());
    let chw = g.cin * g.h * g.w;
    let w64: Vec<f64> = weights.data().iter().map(|v| v.as_f64()).collect();
    let mut grad_in = Tensor::zeros(input.shape());
    let mut gw = vec![0.0f64; g.cout * k];
    let chunk = chunk_len(&g);
    let mut col = vec![0.0f64; k * p * chunk];
    let mut dcol = vec![0.0f64; k * p * chunk];
    let mut dy = vec![0.0f64; p * chunk];
    let mut dx = vec![0.0f64; chw * chunk];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let cols = nb * p;
        im2col(input, &g, n0, nb, &mut col);
        let dcol = &mut dcol[..k * cols];
        dcol.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..g.cout {
            let dyo = &mut dy[..cols];
            for b in 0..nb {
                let src = &upstream.outer(n0 + b)[o * p..(o + 1) * p];
                for (d, s) in dyo[b * p..(b + 1) * p].iter_mut().zip(src) {
                    *d = s.as_f64();
                }
            }
            let dyo = &dy[..cols];
            let wrow = &w64[o * k..(o + 1) * k];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv != 0.0 {
                    axpy(&mut dcol[r * cols..(r + 1) * cols], wv, dyo);
                }
            }
            let gwo = &mut gw[o * k..(o + 1) * k];
            for (r, gv) in gwo.iter_mut().enumerate() {
                *gv += dot(dyo, &col[r * cols..(r + 1) * cols]);
            }
        }
        let dx = &mut dx[..nb * chw];
        dx.iter_mut().for_each(|v| *v = 0.0);
        col2im(dcol, &g, nb, dx);
        for b in 0..nb {
            for (d, &s) in grad_in
                .outer_mut(n0 + b)
                .iter_mut()
                .zip(&dx[b * chw..(b + 1) * chw])
            {
                *d = T::from_f64(s);
            }
        }
        n0 += nb;
    }
    let grad_w = Tensor::from_vec(weights.shape(), gw.into_iter().map(T::from_f64).collect())?;
    Ok((grad_in, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f64>::from_f64_slice(
            &[1, 2, 3, 3],
            &(0..18).map(|v| v as f64 * 0.5 - 3.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // o=0, i=0, centre
        w.data_mut()[18 + 9 + 4] = 1.0; // o=1, i=1, centre
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::<f64>::full(&[2, 3, 5, 5], 0.7);
        let w = Tensor::<f64>::full(&[4, 3, 3, 3], -0.2);
        let up = Tensor::<f64>::zeros(&[2, 4, 3, 3]);
        let (gi, gw) = conv2d_grad(&up, &x, &w, 2, 1).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn rejects_zero_stride() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        assert!(conv2d(&x, &w, 0, 0).is_err());
    }
}
