//! Scale adaptation: per-position, per-channel, per-scale attention over the
//! refined stack, followed by averaged weighted fusion.
//!
//! The K scale vectors at a position are concatenated, squeezed through a
//! bottleneck (1x1 conv -> BN -> ReLU, shrink rate r), and expanded by one
//! head per scale (1x1 conv -> BN). Sigmoid gives each (position, scale,
//! channel) an independent gate in (0, 1): the attention mass over scales is
//! deliberately not constrained to sum to 1. The softmax ablation restores
//! that constraint; the channel-shared ablation gives each head a single
//! output channel broadcast over the feature channels.

use crate::aspp::ScaleStack;
use crate::config::SaActivation;
use crate::error::{Error, Result};
use crate::layers::{BnLayer, Conv1x1Layer};
use crate::ops;
use crate::rng::Rng;
use crate::tape::{Mode, SharedParam, Tape, ValId};
use crate::tensor::{Shape, Tensor};

pub struct SaParams {
    pub bottleneck_conv: Conv1x1Layer,
    pub bottleneck_bn: BnLayer,
    pub heads: Vec<(Conv1x1Layer, BnLayer)>,
    pub k: usize,
    pub activation: SaActivation,
    pub channel_shared: bool,
}

impl SaParams {
    pub fn new(
        k: usize,
        channels: usize,
        reduction: usize,
        activation: SaActivation,
        channel_shared: bool,
        rng: &mut Rng,
    ) -> Result<SaParams> {
        if k == 0 {
            return Err(Error::Config("attention needs at least one scale".into()));
        }
        let concat = k * channels;
        let mid = concat / reduction;
        if mid == 0 {
            return Err(Error::Config(format!(
                "bottleneck width floor({concat}/{reduction}) must be positive"
            )));
        }
        let head_out = if channel_shared { 1 } else { channels };
        let mut heads = Vec::with_capacity(k);
        for i in 0..k {
            let bn = BnLayer::new(&format!("sa.head{i}.bn"), head_out)?;
            // Open all gates near 1/2: a small post-BN scale keeps the
            // initial pre-sigmoid activations close to zero instead of
            // gating features with random attention.
            bn.gamma.borrow_mut().value.data_mut().fill(0.2);
            heads.push((
                Conv1x1Layer::new(&format!("sa.head{i}.conv"), mid, head_out, false, rng)?,
                bn,
            ));
        }
        Ok(SaParams {
            bottleneck_conv: Conv1x1Layer::new("sa.bottleneck.conv", concat, mid, false, rng)?,
            bottleneck_bn: BnLayer::new("sa.bottleneck.bn", mid)?,
            heads,
            k,
            activation,
            channel_shared,
        })
    }

    pub fn params(&self) -> Vec<SharedParam> {
        let mut ps = self.bottleneck_conv.params();
        ps.extend(self.bottleneck_bn.params());
        for (c, b) in &self.heads {
            ps.extend(c.params());
            ps.extend(b.params());
        }
        ps
    }
}

/// Per-position, per-scale, per-channel attention values. Each tensor has
/// the stack's channel count, or a single channel in channel-shared mode.
#[derive(Debug, Clone)]
pub struct AttentionField {
    pub alphas: Vec<Tensor>,
}

impl AttentionField {
    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    /// Attention for (image, scale, channel, position), resolving the
    /// channel broadcast of shared mode.
    pub fn at(&self, n: usize, k: usize, c: usize, i: usize, j: usize) -> f64 {
        let a = &self.alphas[k];
        let cc = if a.shape().c == 1 { 0 } else { c };
        a.get(n, cc, i, j)
    }

    /// Mean over channels of scale k's attention map, one plane per image.
    pub fn channel_mean(&self, k: usize) -> Tensor {
        let a = &self.alphas[k];
        let s = a.shape();
        let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w).expect("valid"));
        for n in 0..s.n {
            for i in 0..s.h {
                for j in 0..s.w {
                    let mut acc = 0.0;
                    for c in 0..s.c {
                        acc += a.get(n, c, i, j);
                    }
                    out.set(n, 0, i, j, acc / s.c as f64);
                }
            }
        }
        out
    }
}

/// Tape-recorded attention: returns one alpha id per scale.
pub fn sa_attention_on(
    tape: &mut Tape,
    stack: &[ValId],
    params: &SaParams,
    mode: Mode,
) -> Result<Vec<ValId>> {
    if stack.len() != params.k {
        return Err(Error::Shape(format!(
            "stack has {} scales, attention expects {}",
            stack.len(),
            params.k
        )));
    }
    let s = tape.concat_channels(stack)?;
    let z = params.bottleneck_conv.forward(tape, s)?;
    let z = params.bottleneck_bn.forward(tape, z, mode)?;
    let z = tape.relu(z);
    let mut raw = Vec::with_capacity(params.k);
    for (conv, bn) in &params.heads {
        let h = conv.forward(tape, z)?;
        raw.push(bn.forward(tape, h, mode)?);
    }
    match params.activation {
        SaActivation::Sigmoid => Ok(raw.into_iter().map(|r| tape.sigmoid(r)).collect()),
        SaActivation::Softmax => tape.softmax_over_scales(&raw),
    }
}

/// Tape-recorded attention + fusion producing the fused feature map.
pub fn sa_forward_on(
    tape: &mut Tape,
    stack: &[ValId],
    params: &SaParams,
    mode: Mode,
) -> Result<ValId> {
    let alphas = sa_attention_on(tape, stack, params, mode)?;
    tape.scale_combine(&alphas, stack)
}

/// Value-level attention.
pub fn sa_attention(stack: &ScaleStack, params: &SaParams, mode: Mode) -> Result<AttentionField> {
    let mut tape = Tape::new();
    let ids: Vec<ValId> = stack.scales.iter().map(|t| tape.input(t.clone())).collect();
    let alphas = sa_attention_on(&mut tape, &ids, params, mode)?;
    Ok(AttentionField {
        alphas: alphas.iter().map(|&id| tape.value(id).clone()).collect(),
    })
}

/// Value-level fusion: `fused = (1/K) * sum_k alpha_k * s_k`.
pub fn sa_fuse(stack: &ScaleStack, field: &AttentionField) -> Result<Tensor> {
    if field.k() != stack.k() {
        return Err(Error::Shape(format!(
            "attention field K={} does not match stack K={}",
            field.k(),
            stack.k()
        )));
    }
    let alphas: Vec<&Tensor> = field.alphas.iter().collect();
    let scales: Vec<&Tensor> = stack.scales.iter().collect();
    ops::scale::scale_combine_fwd(&alphas, &scales)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_stack(k: usize, n: usize, c: usize, h: usize, w: usize, seed: u64) -> ScaleStack {
        let scales = (0..k)
            .map(|i| {
                Tensor::randn(Shape::new(n, c, h, w).unwrap(), &mut Rng::new(seed + i as u64), 1.0)
                    .unwrap()
            })
            .collect();
        ScaleStack::new(scales, vec![1; k]).unwrap()
    }

    fn zero_all_convs(params: &SaParams) {
        params.bottleneck_conv.w.borrow_mut().value.data_mut().fill(0.0);
        for (c, _) in &params.heads {
            c.w.borrow_mut().value.data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_parameters_give_exact_half_attention() {
        let stack = rand_stack(5, 2, 4, 3, 3, 90);
        let params =
            SaParams::new(5, 4, 4, SaActivation::Sigmoid, false, &mut Rng::new(91)).unwrap();
        zero_all_convs(&params);
        let field = sa_attention(&stack, &params, Mode::Train).unwrap();
        for a in &field.alphas {
            assert!(a.data().iter().all(|&v| v == 0.5), "sigmoid(0) must be exactly 0.5");
        }
        // Sum over scales is K/2, not 1: the sum-to-1 constraint is relaxed.
        let sum: f64 = (0..5).map(|k| field.at(0, k, 0, 0, 0)).sum();
        assert!((sum - 2.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_mode_sums_to_one() {
        let stack = rand_stack(4, 1, 3, 3, 3, 100);
        let params =
            SaParams::new(4, 3, 4, SaActivation::Softmax, false, &mut Rng::new(101)).unwrap();
        let field = sa_attention(&stack, &params, Mode::Train).unwrap();
        for n in 0..1 {
            for c in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        let sum: f64 = (0..4).map(|k| field.at(n, k, c, i, j)).sum();
                        assert!((sum - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_identical_heads_give_uniform_attention() {
        let stack = rand_stack(5, 1, 3, 2, 2, 110);
        let params =
            SaParams::new(5, 3, 4, SaActivation::Softmax, false, &mut Rng::new(111)).unwrap();
        // Copy head 0's parameters into every head.
        let w0 = params.heads[0].0.w.borrow().value.clone();
        for (c, _) in &params.heads[1..] {
            c.w.borrow_mut().value = w0.clone();
        }
        let field = sa_attention(&stack, &params, Mode::Train).unwrap();
        for a in &field.alphas {
            assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn channel_shared_is_constant_across_channels() {
        let stack = rand_stack(3, 1, 6, 3, 3, 120);
        let params =
            SaParams::new(3, 6, 4, SaActivation::Sigmoid, true, &mut Rng::new(121)).unwrap();
        let field = sa_attention(&stack, &params, Mode::Train).unwrap();
        for a in &field.alphas {
            assert_eq!(a.shape().c, 1);
        }
        // And fusion still works via broadcast.
        let fused = sa_fuse(&stack, &field).unwrap();
        assert_eq!(fused.shape(), stack.shape());
    }

    #[test]
    fn full_mode_is_channel_adaptive() {
        // There exist inputs where attention differs across channels at one
        // (position, scale).
        let stack = rand_stack(3, 1, 6, 3, 3, 130);
        let params =
            SaParams::new(3, 6, 4, SaActivation::Sigmoid, false, &mut Rng::new(131)).unwrap();
        let field = sa_attention(&stack, &params, Mode::Train).unwrap();
        let mut any_differ = false;
        for c in 1..6 {
            if (field.at(0, 0, c, 1, 1) - field.at(0, 0, 0, 1, 1)).abs() > 1e-9 {
                any_differ = true;
            }
        }
        assert!(any_differ, "channel-adaptive attention must vary across channels");
    }

    #[test]
    fn constant_half_attention_halves_the_mean() {
        let stack = rand_stack(4, 1, 3, 2, 2, 140);
        let params =
            SaParams::new(4, 3, 4, SaActivation::Sigmoid, false, &mut Rng::new(141)).unwrap();
        zero_all_convs(&params);
        let field = sa_attention(&stack, &params, Mode::Train).unwrap();
        let fused = sa_fuse(&stack, &field).unwrap();
        for p in 0..fused.numel() {
            let mean: f64 = stack.scales.iter().map(|t| t.data()[p]).sum::<f64>() / 4.0;
            assert!((fused.data()[p] - 0.5 * mean).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_attention_selects_single_scale() {
        let stack = rand_stack(4, 1, 3, 2, 2, 150);
        let shape = stack.shape();
        let mut alphas = vec![Tensor::zeros(shape); 4];
        alphas[2] = Tensor::full(shape, 1.0).unwrap();
        let field = AttentionField { alphas };
        let fused = sa_fuse(&stack, &field).unwrap();
        for p in 0..fused.numel() {
            assert!((fused.data()[p] - stack.scales[2].data()[p] / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_magnitude_bounded_by_stack_max() {
        let stack = rand_stack(5, 1, 4, 3, 3, 160);
        let params =
            SaParams::new(5, 4, 4, SaActivation::Sigmoid, false, &mut Rng::new(161)).unwrap();
        let field = sa_attention(&stack, &params, Mode::Train).unwrap();
        let fused = sa_fuse(&stack, &field).unwrap();
        for p in 0..fused.numel() {
            let max_abs = stack.scales.iter().map(|t| t.data()[p].abs()).fold(0.0, f64::max);
            assert!(fused.data()[p].abs() <= max_abs + 1e-12);
        }
    }

    #[test]
    fn per_position_oracle_matches() {
        // With BN pinned to identity (eval mode) the whole attention path is
        // per-position: concat -> matvec -> ReLU -> matvec -> sigmoid.
        let k = 3;
        let c = 4;
        let stack = rand_stack(k, 1, c, 3, 3, 170);
        let params =
            SaParams::new(k, c, 4, SaActivation::Sigmoid, false, &mut Rng::new(171)).unwrap();
        params.bottleneck_bn.set_identity();
        for (_, bn) in &params.heads {
            bn.set_identity();
        }
        let field = sa_attention(&stack, &params, Mode::Eval).unwrap();

        let mid = (k * c) / 4;
        let wb = params.bottleneck_conv.w.borrow().value.clone();
        for i in 0..3 {
            for j in 0..3 {
                // concat
                let mut s = Vec::with_capacity(k * c);
                for t in &stack.scales {
                    for cc in 0..c {
                        s.push(t.get(0, cc, i, j));
                    }
                }
                // bottleneck matvec + relu
                let mut z = vec![0.0; mid];
                for o in 0..mid {
                    let mut acc = 0.0;
                    for (ii, sv) in s.iter().enumerate() {
                        acc += wb.get(o, ii, 0, 0) * sv;
                    }
                    z[o] = acc.max(0.0);
                }
                // heads + sigmoid
                for (kk, (conv, _)) in params.heads.iter().enumerate() {
                    let wh = conv.w.borrow().value.clone();
                    for cc in 0..c {
                        let mut acc = 0.0;
                        for (o, zv) in z.iter().enumerate() {
                            acc += wh.get(cc, o, 0, 0) * zv;
                        }
                        let want = crate::ops::activation::sigmoid(acc);
                        let got = field.at(0, kk, cc, i, j);
                        assert!((got - want).abs() < 1e-12, "k={kk} c={cc}: {got} vs {want}");
                    }
                }
            }
        }
    }
}
