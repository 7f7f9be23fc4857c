//! Batch normalization kernels.
//!
//! Train mode normalizes with exact full-batch per-channel statistics
//! computed in two passes (mean, then variance), so a direct two-pass oracle
//! reproduces the output to rounding error. Eval mode applies the stored
//! running statistics as a per-channel affine map.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Below this element count the thread-pool dispatch costs more than the
/// normalization itself.
const MIN_PAR_ELEMS: usize = 1 << 17;

fn check_bn_args(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    let c = x.shape().c;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(format!(
            "batchnorm scale/shift must have {} entries, got {}/{}",
            c,
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok(())
}

/// Per-channel mean and (biased) variance over the (batch, height, width)
/// extent, computed in two passes. Channels are independent and processed
/// in parallel; the per-channel accumulation order is fixed.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let hw = s.h * s.w;
    let m = (s.n * hw) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    let per_channel = |c: usize, mean_c: &mut f64, var_c: &mut f64| {
        let mut acc = 0.0;
        for n in 0..s.n {
            let base = (n * s.c + c) * hw;
            acc += x.data()[base..base + hw].iter().sum::<f64>();
        }
        let mu = acc / m;
        let mut acc = 0.0;
        for n in 0..s.n {
            let base = (n * s.c + c) * hw;
            acc += x.data()[base..base + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        *mean_c = mu;
        *var_c = acc / m;
    };
    if x.numel() < MIN_PAR_ELEMS {
        for c in 0..s.c {
            let (mut mu, mut va) = (0.0, 0.0);
            per_channel(c, &mut mu, &mut va);
            mean[c] = mu;
            var[c] = va;
        }
    } else {
        mean.par_iter_mut()
            .zip(var.par_iter_mut())
            .enumerate()
            .for_each(|(c, (mean_c, var_c))| per_channel(c, mean_c, var_c));
    }
    (mean, var)
}

pub fn batchnorm_train_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    check_bn_args(x, gamma, beta)?;
    let s = x.shape();
    if s.n * s.h * s.w < 2 {
        return Err(Error::Param(
            "batchnorm train mode needs at least 2 elements per channel".into(),
        ));
    }
    let (mean, var) = channel_stats(x);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let y = affine_apply(x, gamma, beta, &mean, &inv_std);
    Ok((y, mean, var))
}

/// Per-channel affine normalization with explicit statistics (eval path).
pub fn batchnorm_affine_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
) -> Result<Tensor> {
    check_bn_args(x, gamma, beta)?;
    if mean.len() != x.shape().c || inv_std.len() != x.shape().c {
        return Err(Error::Shape("running statistics length mismatch".into()));
    }
    Ok(affine_apply(x, gamma, beta, mean, inv_std))
}

fn affine_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], inv_std: &[f64]) -> Tensor {
    let s = x.shape();
    let hw = s.h * s.w;
    let mut y = Tensor::zeros(s);
    let plane_apply = |plane: usize, dst: &mut [f64]| {
        let c = plane % s.c;
        let (g, b, mu, is) = (gamma.data()[c], beta.data()[c], mean[c], inv_std[c]);
        let src = &x.data()[plane * hw..(plane + 1) * hw];
        for (d, v) in dst.iter_mut().zip(src) {
            *d = g * (v - mu) * is + b;
        }
    };
    if x.numel() < MIN_PAR_ELEMS {
        for (plane, dst) in y.data_mut().chunks_mut(hw).enumerate() {
            plane_apply(plane, dst);
        }
    } else {
        y.data_mut().par_chunks_mut(hw).enumerate().for_each(|(plane, dst)| plane_apply(plane, dst));
    }
    y
}

/// Gradient of batch normalization.
///
/// In train mode the statistics depend on the input, which adds the two
/// mean-correction terms; in eval mode the statistics are constants and the
/// map is a plain per-channel affine function.
pub fn batchnorm_bwd(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    dy: &Tensor,
    train: bool,
) -> (Tensor, Tensor, Tensor) {
    let s = x.shape();
    let hw = s.h * s.w;
    let m = (s.n * hw) as f64;
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::new(1, s.c, 1, 1).expect("nonzero channels"));
    let mut dbeta = Tensor::zeros(dgamma.shape());

    // s1 = sum(dy), s2 = sum(dy * xhat) per channel.
    let mut sums = vec![(0.0f64, 0.0f64); s.c];
    let channel_sums = |c: usize, s1: &mut f64, s2: &mut f64| {
        let (mu, is) = (mean[c], inv_std[c]);
        for n in 0..s.n {
            let base = (n * s.c + c) * hw;
            for p in 0..hw {
                let d = dy.data()[base + p];
                *s1 += d;
                *s2 += d * (x.data()[base + p] - mu) * is;
            }
        }
    };
    if x.numel() < MIN_PAR_ELEMS {
        for (c, e) in sums.iter_mut().enumerate() {
            channel_sums(c, &mut e.0, &mut e.1);
        }
    } else {
        sums.par_iter_mut().enumerate().for_each(|(c, (s1, s2))| channel_sums(c, s1, s2));
    }
    for c in 0..s.c {
        dgamma.data_mut()[c] = sums[c].1;
        dbeta.data_mut()[c] = sums[c].0;
    }
    let plane_dx = |plane: usize, dst: &mut [f64]| {
        let c = plane % s.c;
        let (g, mu, is) = (gamma.data()[c], mean[c], inv_std[c]);
        let (s1, s2) = sums[c];
        let base = plane * hw;
        for p in 0..hw {
            let d = dy.data()[base + p];
            dst[p] = if train {
                let xhat = (x.data()[base + p] - mu) * is;
                g * is * (d - s1 / m - xhat * s2 / m)
            } else {
                g * is * d
            };
        }
    };
    if x.numel() < MIN_PAR_ELEMS {
        for (plane, dst) in dx.data_mut().chunks_mut(hw).enumerate() {
            plane_dx(plane, dst);
        }
    } else {
        dx.data_mut().par_chunks_mut(hw).enumerate().for_each(|(plane, dst)| plane_dx(plane, dst));
    }
    (dx, dgamma, dbeta)
}
