//! Shared test oracles: brute-force per-position implementations that stay
//! independent of the library's vectorized kernels and tape.

#![allow(dead_code)]

use casinet::aspp::ScaleStack;
use casinet::csi::CsiParams;
use casinet::rng::Rng;
use casinet::tape::Mode;
use casinet::tensor::{Shape, Tensor};

/// Brute-force result: refined stack plus the raw and normalized affinities
/// indexed (n, i, j, target k, source m).
pub struct CsiOracleResult {
    pub refined: Vec<Tensor>,
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl CsiOracleResult {
    pub fn idx(&self, n: usize, i: usize, j: usize, k: usize, m: usize) -> usize {
        (((n * self.h + i) * self.w + j) * self.k + k) * self.k + m
    }
}

/// Per-position 1x1 convolution by explicit matrix-vector products.
fn oracle_conv1x1(x: &Tensor, w: &Tensor) -> Tensor {
    let s = x.shape();
    let cout = w.shape().n;
    let mut out = Tensor::zeros(Shape::new(s.n, cout, s.h, s.w).unwrap());
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ci in 0..s.c {
                        acc += w.get(co, ci, 0, 0) * x.get(n, ci, i, j);
                    }
                    out.set(n, co, i, j, acc);
                }
            }
        }
    }
    out
}

/// Literal two-pass batch normalization plus ReLU.
fn oracle_bn_relu(x: &Tensor, layer: &casinet::layers::BnLayer, mode: Mode) -> Tensor {
    let s = x.shape();
    let m = (s.n * s.h * s.w) as f64;
    let gamma = layer.gamma.borrow().value.clone();
    let beta = layer.beta.borrow().value.clone();
    let mut out = Tensor::zeros(s);
    for c in 0..s.c {
        let (mu, var) = match mode {
            Mode::Train => {
                let mut mu = 0.0;
                for n in 0..s.n {
                    for i in 0..s.h {
                        for j in 0..s.w {
                            mu += x.get(n, c, i, j);
                        }
                    }
                }
                mu /= m;
                let mut var = 0.0;
                for n in 0..s.n {
                    for i in 0..s.h {
                        for j in 0..s.w {
                            var += (x.get(n, c, i, j) - mu).powi(2);
                        }
                    }
                }
                (mu, var / m)
            }
            Mode::Eval => (layer.running_mean.borrow()[c], layer.running_var.borrow()[c]),
        };
        let inv = 1.0 / (var + layer.eps).sqrt();
        for n in 0..s.n {
            for i in 0..s.h {
                for j in 0..s.w {
                    let v = gamma.data()[c] * (x.get(n, c, i, j) - mu) * inv + beta.data()[c];
                    out.set(n, c, i, j, v.max(0.0));
                }
            }
        }
    }
    out
}

/// One-hot scale-index concatenation done by hand.
fn oracle_embed_input(x: &Tensor, index: usize, k_total: usize, enabled: bool) -> Tensor {
    if !enabled {
        return x.clone();
    }
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c + k_total, s.h, s.w).unwrap());
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                for c in 0..s.c {
                    out.set(n, c, i, j, x.get(n, c, i, j));
                }
                out.set(n, s.c + index, i, j, 1.0);
            }
        }
    }
    out
}

/// Direct per-position evaluation of the whole interaction: embeddings,
/// exponential dot-product affinities, row normalization, weighted average.
pub fn csi_oracle(stack: &ScaleStack, params: &CsiParams, mode: Mode) -> CsiOracleResult {
    let s = stack.shape();
    let k = params.k;

    let mut thetas = Vec::with_capacity(k);
    let mut phis = Vec::with_capacity(k);
    for (idx, x) in stack.scales.iter().enumerate() {
        let e = oracle_embed_input(x, idx, k, params.scale_index);
        let th_layer = params.theta_for(idx);
        let ph_layer = params.phi_for(idx);
        thetas.push(oracle_bn_relu(
            &oracle_conv1x1(&e, &th_layer.conv.w.borrow().value),
            &th_layer.bn,
            mode,
        ));
        phis.push(oracle_bn_relu(
            &oracle_conv1x1(&e, &ph_layer.conv.w.borrow().value),
            &ph_layer.bn,
            mode,
        ));
    }

    let ce = thetas[0].shape().c;
    let mut result = CsiOracleResult {
        refined: (0..k).map(|_| Tensor::zeros(s)).collect(),
        values: vec![0.0; s.n * s.h * s.w * k * k],
        normalized: vec![0.0; s.n * s.h * s.w * k * k],
        k,
        h: s.h,
        w: s.w,
    };
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                for kk in 0..k {
                    let mut row = vec![0.0; k];
                    for (mm, row_v) in row.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for c in 0..ce {
                            dot += thetas[kk].get(n, c, i, j) * phis[mm].get(n, c, i, j);
                        }
                        *row_v = dot.exp();
                    }
                    let norm: f64 = row.iter().sum();
                    for mm in 0..k {
                        let idx = result.idx(n, i, j, kk, mm);
                        result.values[idx] = row[mm];
                        result.normalized[idx] = row[mm] / norm;
                    }
                    for c in 0..s.c {
                        let mut acc = 0.0;
                        for mm in 0..k {
                            acc += (row[mm] / norm) * stack.scales[mm].get(n, c, i, j);
                        }
                        let out_idx = s.at(n, c, i, j);
                        result.refined[kk].data_mut()[out_idx] = acc;
                    }
                }
            }
        }
    }
    if params.residual {
        for (r, x) in result.refined.iter_mut().zip(&stack.scales) {
            for (a, b) in r.data_mut().iter_mut().zip(x.data()) {
                *a += b;
            }
        }
    }
    result
}

pub fn rand_stack(k: usize, n: usize, c: usize, h: usize, w: usize, seed: u64) -> ScaleStack {
    let scales = (0..k)
        .map(|i| {
            Tensor::randn(Shape::new(n, c, h, w).unwrap(), &mut Rng::new(seed + i as u64), 1.0)
                .unwrap()
        })
        .collect();
    ScaleStack::new(scales, vec![1; k]).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
