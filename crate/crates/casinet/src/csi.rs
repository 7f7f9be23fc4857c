//! Contextual scale interaction: a per-position non-local operation across
//! the K scales of the stack.
//!
//! Each scale feature (optionally concatenated with one-hot scale-index
//! planes) is embedded by a 1x1 conv -> BN -> ReLU pair, one pair per scale
//! (or a single shared pair). At every spatial position the affinity between
//! target scale k and source scale m is the exponential of the embedded dot
//! product; rows are normalized to sum to 1 and the refined feature is the
//! weighted average of the scale features under those weights, i.e. a convex
//! combination per channel.

use crate::aspp::ScaleStack;
use crate::error::{Error, Result};
use crate::layers::{BnLayer, Conv1x1Layer};
use crate::ops;
use crate::rng::Rng;
use crate::tape::{Mode, SharedParam, Tape, ValId};
use crate::tensor::{Shape, Tensor};

/// One embedding function: 1x1 conv -> BN -> ReLU, channel-halving.
pub struct EmbedLayer {
    pub conv: Conv1x1Layer,
    pub bn: BnLayer,
}

impl EmbedLayer {
    pub(crate) fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<EmbedLayer> {
        let bn = BnLayer::new(&format!("{name}.bn"), cout)?;
        // Start the affinities flat: a small post-BN scale keeps the initial
        // dot products near zero, so every row opens close to uniform and the
        // interaction strength is learned rather than imposed by random
        // embeddings.
        bn.gamma.borrow_mut().value.data_mut().fill(0.2);
        Ok(EmbedLayer {
            conv: Conv1x1Layer::new(&format!("{name}.conv"), cin, cout, false, rng)?,
            bn,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: ValId, mode: Mode) -> Result<ValId> {
        let c = self.conv.forward(tape, x)?;
        let n = self.bn.forward(tape, c, mode)?;
        Ok(tape.relu(n))
    }
}

/// Interaction parameters: per-scale theta/phi embedding pairs, or a single
/// shared pair when `shared` is set.
pub struct CsiParams {
    pub theta: Vec<EmbedLayer>,
    pub phi: Vec<EmbedLayer>,
    pub k: usize,
    pub scale_index: bool,
    pub shared: bool,
    pub residual: bool,
}

impl CsiParams {
    pub fn new(
        k: usize,
        channels: usize,
        scale_index: bool,
        shared: bool,
        residual: bool,
        rng: &mut Rng,
    ) -> Result<CsiParams> {
        if k == 0 {
            return Err(Error::Config("interaction needs at least one scale".into()));
        }
        let cin = channels + if scale_index { k } else { 0 };
        let cembed = cin / 2;
        if cembed == 0 {
            return Err(Error::Config(format!(
                "embedding width (floor({cin}/2)) must be positive"
            )));
        }
        let groups = if shared { 1 } else { k };
        let mut theta = Vec::with_capacity(groups);
        let mut phi = Vec::with_capacity(groups);
        for g in 0..groups {
            let suffix = if shared { "shared".to_string() } else { format!("s{g}") };
            theta.push(EmbedLayer::new(&format!("csi.theta.{suffix}"), cin, cembed, rng)?);
            phi.push(EmbedLayer::new(&format!("csi.phi.{suffix}"), cin, cembed, rng)?);
        }
        Ok(CsiParams { theta, phi, k, scale_index, shared, residual })
    }

    pub fn theta_for(&self, scale: usize) -> &EmbedLayer {
        if self.shared { &self.theta[0] } else { &self.theta[scale] }
    }

    pub fn phi_for(&self, scale: usize) -> &EmbedLayer {
        if self.shared { &self.phi[0] } else { &self.phi[scale] }
    }

    pub fn params(&self) -> Vec<SharedParam> {
        let mut ps = Vec::new();
        for e in self.theta.iter().chain(&self.phi) {
            ps.extend(e.conv.params());
            ps.extend(e.bn.params());
        }
        ps
    }
}

/// One-hot scale-index planes: channel `index` is all ones, the other
/// `k_total - 1` channels all zeros, broadcast over the spatial extent.
pub fn scale_index_planes(n: usize, k_total: usize, index: usize, h: usize, w: usize) -> Result<Tensor> {
    if index >= k_total {
        return Err(Error::Param(format!("scale index {index} out of range (K={k_total})")));
    }
    let mut t = Tensor::zeros(Shape::new(n, k_total, h, w)?);
    let hw = h * w;
    for b in 0..n {
        let base = (b * k_total + index) * hw;
        t.data_mut()[base..base + hw].fill(1.0);
    }
    Ok(t)
}

/// Embedding input for scale `index`: the feature map with one-hot index
/// planes concatenated when the scale-index prior is enabled, the feature
/// map unchanged otherwise.
pub fn embed_with_scale_index(x: &Tensor, index: usize, k_total: usize, enabled: bool) -> Result<Tensor> {
    if index >= k_total {
        return Err(Error::Param(format!("scale index {index} out of range (K={k_total})")));
    }
    if !enabled {
        return Ok(x.clone());
    }
    let s = x.shape();
    let planes = scale_index_planes(s.n, k_total, index, s.h, s.w)?;
    ops::basic::concat_channels_fwd(&[x, &planes])
}

fn embed_input_on(tape: &mut Tape, x: ValId, index: usize, params: &CsiParams) -> Result<ValId> {
    if index >= params.k {
        return Err(Error::Param(format!("scale index {index} out of range (K={})", params.k)));
    }
    if !params.scale_index {
        return Ok(x);
    }
    let s = tape.value(x).shape();
    let planes = scale_index_planes(s.n, params.k, index, s.h, s.w)?;
    let pid = tape.input(planes);
    tape.concat_channels(&[x, pid])
}

/// Per-position affinities across scales: raw values r = exp(dot) and the
/// row-normalized combination weights. Indexed (n, i, j, target k, source m).
#[derive(Debug, Clone)]
pub struct AffinityField {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl AffinityField {
    #[inline]
    fn idx(&self, n: usize, i: usize, j: usize, k: usize, m: usize) -> usize {
        (((n * self.h + i) * self.w + j) * self.k + k) * self.k + m
    }

    pub fn value(&self, n: usize, i: usize, j: usize, k: usize, m: usize) -> f64 {
        self.values[self.idx(n, i, j, k, m)]
    }

    pub fn weight(&self, n: usize, i: usize, j: usize, k: usize, m: usize) -> f64 {
        self.normalized[self.idx(n, i, j, k, m)]
    }

    /// Spatial map of the normalized weight from source scale `m` to target
    /// scale `k` for one image, in row-major (h, w) order.
    pub fn raster(&self, n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h * self.w);
        for i in 0..self.h {
            for j in 0..self.w {
                out.push(self.weight(n, i, j, k, m));
            }
        }
        out
    }
}

/// Internal: run the embeddings and return the (N, K*K, H, W) dot-product
/// logits together with the tape ids of the embedded tensors.
fn affinity_logits_on(
    tape: &mut Tape,
    stack: &[ValId],
    params: &CsiParams,
    mode: Mode,
) -> Result<ValId> {
    let k = params.k;
    if stack.len() != k {
        return Err(Error::Shape(format!("stack has {} scales, params expect {k}", stack.len())));
    }
    let mut thetas = Vec::with_capacity(k);
    let mut phis = Vec::with_capacity(k);
    for (idx, &x) in stack.iter().enumerate() {
        let e = embed_input_on(tape, x, idx, params)?;
        thetas.push(params.theta_for(idx).forward(tape, e, mode)?);
        phis.push(params.phi_for(idx).forward(tape, e, mode)?);
    }
    tape.scale_dot(&thetas, &phis)
}

/// Tape-recorded interaction forward: embed, affinity, row-normalize,
/// weighted combination; differentiable end to end.
pub fn csi_forward_on(
    tape: &mut Tape,
    stack: &[ValId],
    params: &CsiParams,
    mode: Mode,
) -> Result<Vec<ValId>> {
    let logits = affinity_logits_on(tape, stack, params, mode)?;
    let weights = tape.row_softmax(logits, params.k)?;
    let mut outs = tape.scale_mix(weights, stack)?;
    if params.residual {
        for (o, &x) in outs.iter_mut().zip(stack) {
            *o = tape.add(*o, x)?;
        }
    }
    Ok(outs)
}

/// Value-level interaction forward.
pub fn csi_forward(stack: &ScaleStack, params: &CsiParams, mode: Mode) -> Result<ScaleStack> {
    let mut tape = Tape::new();
    let ids: Vec<ValId> = stack.scales.iter().map(|t| tape.input(t.clone())).collect();
    let outs = csi_forward_on(&mut tape, &ids, params, mode)?;
    let scales = outs.iter().map(|&id| tape.value(id).clone()).collect();
    ScaleStack::new(scales, stack.dilations.clone())
}

/// Affinities of the stack under the given parameters. Raw values are
/// strictly positive; each normalized row sums to 1.
pub fn compute_affinity(stack: &ScaleStack, params: &CsiParams, mode: Mode) -> Result<AffinityField> {
    let mut tape = Tape::new();
    let ids: Vec<ValId> = stack.scales.iter().map(|t| tape.input(t.clone())).collect();
    let logits_id = affinity_logits_on(&mut tape, &ids, params, mode)?;
    let logits = tape.value(logits_id);

    let s = stack.shape();
    let k = params.k;
    let hw = s.h * s.w;
    let mut field = AffinityField {
        n: s.n,
        h: s.h,
        w: s.w,
        k,
        values: vec![0.0; s.n * hw * k * k],
        normalized: vec![0.0; s.n * hw * k * k],
    };
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                let p = i * s.w + j;
                for kk in 0..k {
                    let mut row_sum = 0.0;
                    for mm in 0..k {
                        let dot = logits.data()[(n * k * k + kk * k + mm) * hw + p];
                        let r = dot.exp();
                        let idx = field.idx(n, i, j, kk, mm);
                        field.values[idx] = r;
                        row_sum += r;
                    }
                    for mm in 0..k {
                        let idx = field.idx(n, i, j, kk, mm);
                        field.normalized[idx] = field.values[idx] / row_sum;
                    }
                }
            }
        }
    }
    Ok(field)
}

/// Refined stack under precomputed combination weights:
/// `out_k = sum_m weight[k,m] * x_m` per position and channel.
pub fn csi_refine(stack: &ScaleStack, aff: &AffinityField) -> Result<ScaleStack> {
    let s = stack.shape();
    if aff.n != s.n || aff.h != s.h || aff.w != s.w || aff.k != stack.k() {
        return Err(Error::Shape(format!(
            "affinity field ({},{},{},K={}) does not match stack {} of K={}",
            aff.n,
            aff.h,
            aff.w,
            aff.k,
            s,
            stack.k()
        )));
    }
    let k = stack.k();
    let mut out: Vec<Tensor> = (0..k).map(|_| Tensor::zeros(s)).collect();
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                for kk in 0..k {
                    for mm in 0..k {
                        let w = aff.weight(n, i, j, kk, mm);
                        for c in 0..s.c {
                            let v = w * stack.scales[mm].get(n, c, i, j);
                            let idx = s.at(n, c, i, j);
                            out[kk].data_mut()[idx] += v;
                        }
                    }
                }
            }
        }
    }
    ScaleStack::new(out, stack.dilations.clone())
}
