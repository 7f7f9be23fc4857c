//! Elementwise activations and the softmax across a stack of scale tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu_fwd(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_vec_unchecked(x.shape(), data)
}

/// Gradient is zero at and below the kink.
pub fn relu_bwd(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::from_vec_unchecked(x.shape(), data)
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_fwd(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| sigmoid(v)).collect();
    Tensor::from_vec_unchecked(x.shape(), data)
}

pub fn sigmoid_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &d)| d * s * (1.0 - s))
        .collect();
    Tensor::from_vec_unchecked(y.shape(), data)
}

fn check_stack(xs: &[&Tensor]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Shape("empty scale stack".into()));
    }
    let s = xs[0].shape();
    if xs.iter().any(|t| t.shape() != s) {
        return Err(Error::Shape("scale stack tensors must share one shape".into()));
    }
    Ok(())
}

/// Softmax across the K stack entries at every (batch, channel, position)
/// coordinate. Output entries sum to 1 along the stack axis.
pub fn softmax_scales_fwd(xs: &[&Tensor]) -> Result<Vec<Tensor>> {
    check_stack(xs)?;
    let numel = xs[0].numel();
    let k = xs.len();
    let mut outs: Vec<Tensor> = xs.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut e = vec![0.0f64; k];
    for p in 0..numel {
        let mut mx = f64::NEG_INFINITY;
        for t in xs {
            mx = mx.max(t.data()[p]);
        }
        let mut sum = 0.0;
        for (kk, t) in xs.iter().enumerate() {
            let v = (t.data()[p] - mx).exp();
            e[kk] = v;
            sum += v;
        }
        for kk in 0..k {
            outs[kk].data_mut()[p] = e[kk] / sum;
        }
    }
    Ok(outs)
}

pub fn softmax_scales_bwd(ys: &[&Tensor], dys: &[Tensor]) -> Vec<Tensor> {
    let numel = ys[0].numel();
    let k = ys.len();
    let mut dxs: Vec<Tensor> = ys.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for p in 0..numel {
        let mut dot = 0.0;
        for kk in 0..k {
            dot += dys[kk].data()[p] * ys[kk].data()[p];
        }
        for kk in 0..k {
            dxs[kk].data_mut()[p] = ys[kk].data()[p] * (dys[kk].data()[p] - dot);
        }
    }
    dxs
}
