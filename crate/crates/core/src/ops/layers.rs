//! Bias-free linear layer, pooling and ReLU, each with its gradient.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `logits[n,k] = Σ_f weights[k,f] · input[n,f]`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, k) = linear_dims(input, weights)?;
    let x = input.data();
    let w = weights.data();
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let xi = &x[i * f..(i + 1) * f];
        for j in 0..k {
            let wj = &w[j * f..(j + 1) * f];
            let mut acc = 0.0f64;
            for (a, b) in xi.iter().zip(wj) {
                acc += a.as_f64() * b.as_f64();
            }
            out.push(T::from_f64(acc));
        }
    }
    Tensor::from_vec(&[n, k], out)
}

/// Returns `(grad_input, grad_weights)` for `sum(upstream ⊙ linear(input, weights))`.
pub fn linear_grad<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, f, k) = linear_dims(input, weights)?;
    if upstream.shape() != [n, k] {
        return Err(Error::shape(
            "linear_grad",
            format!("upstream {:?}, expected [{}, {}]", upstream.shape(), n, k),
        ));
    }
    let x = input.data();
    let w = weights.data();
    let dy = upstream.data();
    let mut gx = vec![0.0f64; n * f];
    let mut gw = vec![0.0f64; k * f];
    for i in 0..n {
        for j in 0..k {
            let d = dy[i * k + j].as_f64();
            let wj = &w[j * f..(j + 1) * f];
            for (g, &wv) in gx[i * f..(i + 1) * f].iter_mut().zip(wj) {
                *g += d * wv.as_f64();
            }
            let xi = &x[i * f..(i + 1) * f];
            for (g, &xv) in gw[j * f..(j + 1) * f].iter_mut().zip(xi) {
                *g += d * xv.as_f64();
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, f], gx.into_iter().map(T::from_f64).collect())?,
        Tensor::from_vec(&[k, f], gw.into_iter().map(T::from_f64).collect())?,
    ))
}

fn linear_dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (is, ws) = (input.shape(), weights.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] {
        return Err(Error::shape(
            "linear",
            format!("input {:?} incompatible with weights {:?}", is, ws),
        ));
    }
    Ok((is[0], is[1], ws[0]))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// ReLU gradient expressed through the forward *output*: positive outputs pass.
pub fn relu_grad<T: Scalar>(upstream: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.check_same_shape("relu_grad", output)?;
    let data = upstream
        .data()
        .iter()
        .zip(output.data())
        .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_vec(upstream.shape(), data)
}

fn nchw<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected NCHW input, got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Mean over the spatial axes: [N,C,H,W] -> [N,C].
pub fn global_avgpool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("global_avgpool", input)?;
    let hw = h * w;
    let out = input
        .data()
        .chunks(hw)
        .map(|plane| T::from_f64(plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64))
        .collect();
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avgpool_grad<T: Scalar>(upstream: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    if input_shape.len() != 4 || upstream.shape() != &input_shape[..2] {
        return Err(Error::shape(
            "global_avgpool_grad",
            format!("upstream {:?} vs input {:?}", upstream.shape(), input_shape),
        ));
    }
    let hw = input_shape[2] * input_shape[3];
    let mut data = Vec::with_capacity(upstream.len() * hw);
    for &d in upstream.data() {
        let v = T::from_f64(d.as_f64() / hw as f64);
        data.extend(std::iter::repeat_n(v, hw));
    }
    Tensor::from_vec(input_shape, data)
}

/// Max pooling with implicit -inf padding. Returns the output and the flat
/// argmax index of each output element (first maximum wins on ties).
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = nchw("maxpool2d", input)?;
    if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
        return Err(Error::shape(
            "maxpool2d",
            format!("kernel {} stride {} pad {} on {}x{}", kernel, stride, pad, h, w),
        ));
    }
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(usize, T)> = None;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best.is_none_or(|(_, b)| x[idx] > b) {
                            best = Some((idx, x[idx]));
                        }
                    }
                }
                let (idx, v) = best.expect("window overlaps the input");
                out.push(v);
                arg.push(idx);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, arg))
}

pub fn maxpool2d_grad<T: Scalar>(
    upstream: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::shape(
            "maxpool2d_grad",
            format!("{} upstream values for {} windows", upstream.len(), argmax.len()),
        ));
    }
    let mut gx = vec![0.0f64; input_shape.iter().product()];
    for (&d, &i) in upstream.data().iter().zip(argmax) {
        gx[i] += d.as_f64();
    }
    Tensor::from_vec(input_shape, gx.into_iter().map(T::from_f64).collect())
}
