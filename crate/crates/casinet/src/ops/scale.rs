//! Scale-interaction kernels: per-position dot products between embedded
//! scale features, row-wise normalization of the resulting K x K affinity
//! logits, the weighted combination of the scale stack, and the attention
//! fusion used by scale adaptation.
//!
//! Layout convention: a per-position K x K matrix is stored as a
//! (N, K*K, H, W) tensor with channel index `k * K + m`, where `k` is the
//! target scale (row) and `m` the source scale (column).

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Dot products above this magnitude make exp() useless downstream.
pub const DOT_OVERFLOW_LIMIT: f64 = 500.0;

fn check_same_stack(xs: &[&Tensor], what: &str) -> Result<Shape> {
    if xs.is_empty() {
        return Err(Error::Shape(format!("{what}: empty stack")));
    }
    let s = xs[0].shape();
    if xs.iter().any(|t| t.shape() != s) {
        return Err(Error::Shape(format!("{what}: stack tensors must share one shape")));
    }
    Ok(s)
}

/// `out[n, k*K+m, i, j] = <thetas[k][n,:,i,j], phis[m][n,:,i,j]>`.
pub fn scale_dot_fwd(thetas: &[&Tensor], phis: &[&Tensor]) -> Result<Tensor> {
    let s = check_same_stack(thetas, "scale_dot thetas")?;
    let sp = check_same_stack(phis, "scale_dot phis")?;
    if s != sp || thetas.len() != phis.len() {
        return Err(Error::Shape("scale_dot: theta/phi stacks must match".into()));
    }
    let k = thetas.len();
    let (ce, hw) = (s.c, s.h * s.w);
    let mut out = Tensor::zeros(Shape::new(s.n, k * k, s.h, s.w)?);
    for n in 0..s.n {
        for (kk, th) in thetas.iter().enumerate() {
            for (mm, ph) in phis.iter().enumerate() {
                let row = &mut out.data_mut()[(n * k * k + kk * k + mm) * hw..][..hw];
                for c in 0..ce {
                    let tr = &th.data()[(n * ce + c) * hw..][..hw];
                    let pr = &ph.data()[(n * ce + c) * hw..][..hw];
                    for p in 0..hw {
                        row[p] += tr[p] * pr[p];
                    }
                }
                for &dot in row.iter() {
                    if dot.abs() > DOT_OVERFLOW_LIMIT {
                        return Err(Error::AffinityOverflow(dot.abs()));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn scale_dot_bwd(thetas: &[&Tensor], phis: &[&Tensor], dy: &Tensor) -> (Vec<Tensor>, Vec<Tensor>) {
    let s = thetas[0].shape();
    let k = thetas.len();
    let (ce, hw) = (s.c, s.h * s.w);
    let mut dth: Vec<Tensor> = thetas.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut dph: Vec<Tensor> = phis.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for n in 0..s.n {
        for kk in 0..k {
            for mm in 0..k {
                let g = &dy.data()[(n * k * k + kk * k + mm) * hw..][..hw];
                for c in 0..ce {
                    let base = (n * ce + c) * hw;
                    let ph = &phis[mm].data()[base..base + hw];
                    let th = &thetas[kk].data()[base..base + hw];
                    let dt = &mut dth[kk].data_mut()[base..base + hw];
                    for p in 0..hw {
                        dt[p] += g[p] * ph[p];
                    }
                    let dp = &mut dph[mm].data_mut()[base..base + hw];
                    for p in 0..hw {
                        dp[p] += g[p] * th[p];
                    }
                }
            }
        }
    }
    (dth, dph)
}

/// Softmax over the source axis `m` within each target row `k` of the
/// per-position affinity logits. Rows of the output sum to 1.
pub fn row_softmax_fwd(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.c != k * k {
        return Err(Error::Shape(format!(
            "row_softmax expects {} channels for K={k}, got {}",
            k * k,
            s.c
        )));
    }
    let hw = s.h * s.w;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for kk in 0..k {
            for p in 0..hw {
                let mut mx = f64::NEG_INFINITY;
                for mm in 0..k {
                    mx = mx.max(x.data()[(n * k * k + kk * k + mm) * hw + p]);
                }
                let mut sum = 0.0;
                for mm in 0..k {
                    let e = (x.data()[(n * k * k + kk * k + mm) * hw + p] - mx).exp();
                    out.data_mut()[(n * k * k + kk * k + mm) * hw + p] = e;
                    sum += e;
                }
                for mm in 0..k {
                    out.data_mut()[(n * k * k + kk * k + mm) * hw + p] /= sum;
                }
            }
        }
    }
    Ok(out)
}

pub fn row_softmax_bwd(y: &Tensor, dy: &Tensor, k: usize) -> Tensor {
    let s = y.shape();
    let hw = s.h * s.w;
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for kk in 0..k {
            for p in 0..hw {
                let mut dot = 0.0;
                for mm in 0..k {
                    let idx = (n * k * k + kk * k + mm) * hw + p;
                    dot += dy.data()[idx] * y.data()[idx];
                }
                for mm in 0..k {
                    let idx = (n * k * k + kk * k + mm) * hw + p;
                    dx.data_mut()[idx] = y.data()[idx] * (dy.data()[idx] - dot);
                }
            }
        }
    }
    dx
}

/// Per-position weighted average of the stack under row-normalized weights:
/// `out_k[n,c,i,j] = sum_m weights[n,k*K+m,i,j] * xs[m][n,c,i,j]`.
pub fn scale_mix_fwd(weights: &Tensor, xs: &[&Tensor]) -> Result<Vec<Tensor>> {
    let s = check_same_stack(xs, "scale_mix")?;
    let k = xs.len();
    let ws = weights.shape();
    if ws.c != k * k || ws.n != s.n || ws.h != s.h || ws.w != s.w {
        return Err(Error::Shape(format!(
            "scale_mix: weights {} incompatible with stack of {} x {}",
            ws, k, s
        )));
    }
    let hw = s.h * s.w;
    let mut outs: Vec<Tensor> = (0..k).map(|_| Tensor::zeros(s)).collect();
    for n in 0..s.n {
        for kk in 0..k {
            for (mm, x) in xs.iter().enumerate() {
                let wbase = (n * k * k + kk * k + mm) * hw;
                for c in 0..s.c {
                    let base = (n * s.c + c) * hw;
                    let o = &mut outs[kk].data_mut()[base..base + hw];
                    let xv = &x.data()[base..base + hw];
                    let wv = &weights.data()[wbase..wbase + hw];
                    for p in 0..hw {
                        o[p] += wv[p] * xv[p];
                    }
                }
            }
        }
    }
    Ok(outs)
}

pub fn scale_mix_bwd(weights: &Tensor, xs: &[&Tensor], dys: &[Tensor]) -> (Tensor, Vec<Tensor>) {
    let s = xs[0].shape();
    let k = xs.len();
    let hw = s.h * s.w;
    let mut dw = Tensor::zeros(weights.shape());
    let mut dxs: Vec<Tensor> = (0..k).map(|_| Tensor::zeros(s)).collect();
    for n in 0..s.n {
        for kk in 0..k {
            for (mm, x) in xs.iter().enumerate() {
                let wbase = (n * k * k + kk * k + mm) * hw;
                for c in 0..s.c {
                    let base = (n * s.c + c) * hw;
                    let dy = &dys[kk].data()[base..base + hw];
                    let xv = &x.data()[base..base + hw];
                    let wv = &weights.data()[wbase..wbase + hw];
                    let dxm = &mut dxs[mm].data_mut()[base..base + hw];
                    let dwv = &mut dw.data_mut()[wbase..wbase + hw];
                    for p in 0..hw {
                        dwv[p] += dy[p] * xv[p];
                        dxm[p] += wv[p] * dy[p];
                    }
                }
            }
        }
    }
    (dw, dxs)
}

/// Attention fusion `out = (1/K) * sum_k alpha_k * x_k`. Each `alpha_k` has
/// either the stack's channel count or one channel broadcast over channels.
pub fn scale_combine_fwd(alphas: &[&Tensor], xs: &[&Tensor]) -> Result<Tensor> {
    let s = check_same_stack(xs, "scale_combine")?;
    if alphas.len() != xs.len() {
        return Err(Error::Shape("scale_combine: one attention tensor per scale".into()));
    }
    let hw = s.h * s.w;
    for a in alphas {
        let ash = a.shape();
        if ash.n != s.n || ash.h != s.h || ash.w != s.w || (ash.c != s.c && ash.c != 1) {
            return Err(Error::Shape(format!(
                "scale_combine: attention shape {} incompatible with stack {}",
                ash, s
            )));
        }
    }
    let inv_k = 1.0 / xs.len() as f64;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for (a, x) in alphas.iter().zip(xs) {
            let shared = a.shape().c == 1;
            for c in 0..s.c
            {
                let base = (n * s.c + c) * hw;
                let abase = if shared { n * hw } else { base };
                let o = &mut out.data_mut()[base..base + hw];
                let xv = &x.data()[base..base + hw];
                let av = &a.data()[abase..abase + hw];
                for p in 0..hw {
                    o[p] += inv_k * av[p] * xv[p];
                }
            }
        }
    }
    Ok(out)
}

pub fn scale_combine_bwd(alphas: &[&Tensor], xs: &[&Tensor], dy: &Tensor) -> (Vec<Tensor>, Vec<Tensor>) {
    let s = xs[0].shape();
    let hw = s.h * s.w;
    let inv_k = 1.0 / xs.len() as f64;
    let mut dal: Vec<Tensor> = alphas.iter().map(|a| Tensor::zeros(a.shape())).collect();
    let mut dxs: Vec<Tensor> = xs.iter().map(|x| Tensor::zeros(x.shape())).collect();
    for n in 0..s.n {
        for (kk, (a, x)) in alphas.iter().zip(xs).enumerate() {
            let shared = a.shape().c == 1;
            for c in 0..s.c {
                let base = (n * s.c + c) * hw;
                let abase = if shared { n * hw } else { base };
                let dyv = &dy.data()[base..base + hw];
                let xv = &x.data()[base..base + hw];
                let av = &a.data()[abase..abase + hw];
                let dxv = &mut dxs[kk].data_mut()[base..base + hw];
                for p in 0..hw {
                    dxv[p] += inv_k * av[p] * dyv[p];
                }
                let dav = &mut dal[kk].data_mut()[abase..abase + hw];
                for p in 0..hw {
                    dav[p] += inv_k * xv[p] * dyv[p];
                }
            }
        }
    }
    (dal, dxs)
}
