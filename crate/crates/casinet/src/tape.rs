//! Reverse-mode differentiation over a Wengert tape.
//!
//! A [`Tape`] records every operation of a forward pass together with the
//! value ids it consumed and produced. [`Tape::backward`] replays the record
//! in exact reverse execution order, accumulating vector-Jacobian products
//! into per-value gradient slots. Parameters are registered as leaves and
//! their gradients copied back out with [`Tape::grads_to_params`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::labels::Labels;
use crate::ops;
use crate::tensor::{Shape, Tensor};

/// Index of a value on the tape.
pub type ValId = usize;

/// Forward-pass mode. Batch normalization reads batch statistics in `Train`
/// and stored running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

static NEXT_PARAM_UID: AtomicU64 = AtomicU64::new(0);

/// A trainable tensor with its gradient accumulator.
#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether the optimizer applies weight decay to this parameter.
    /// Off for batch-norm scale/shift.
    pub decay: bool,
    uid: u64,
}

pub type SharedParam = Rc<RefCell<Param>>;

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> SharedParam {
        let grad = Tensor::zeros(value.shape());
        Rc::new(RefCell::new(Param {
            name: name.into(),
            value,
            grad,
            decay,
            uid: NEXT_PARAM_UID.fetch_add(1, Ordering::Relaxed),
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Weighted cross-entropy settings resolved to concrete values.
#[derive(Debug, Clone)]
pub struct CeSettings {
    /// One positive weight per class.
    pub class_weights: Vec<f64>,
    /// Fraction of highest-loss pixels kept for averaging; 1.0 disables OHEM.
    pub keep_fraction: f64,
    pub ignore_label: u8,
}

enum Op {
    Conv2d { x: ValId, w: ValId, b: Option<ValId>, dilation: usize, out: ValId },
    Conv1x1 { x: ValId, w: ValId, b: Option<ValId>, out: ValId },
    BatchNorm { x: ValId, gamma: ValId, beta: ValId, out: ValId, mean: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu { x: ValId, out: ValId },
    Sigmoid { x: ValId, out: ValId },
    SoftmaxScales { xs: Vec<ValId>, outs: Vec<ValId> },
    ConcatChannels { xs: Vec<ValId>, out: ValId },
    Add { a: ValId, b: ValId, out: ValId },
    Mul { a: ValId, b: ValId, out: ValId },
    Scale { x: ValId, c: f64, out: ValId },
    SpatialMean { x: ValId, out: ValId },
    SumAll { x: ValId, out: ValId },
    AvgPool2 { x: ValId, out: ValId },
    UpsampleBilinear { x: ValId, factor: usize, out: ValId },
    ScaleDot { thetas: Vec<ValId>, phis: Vec<ValId>, out: ValId },
    RowSoftmax { x: ValId, k: usize, out: ValId },
    ScaleMix { weights: ValId, xs: Vec<ValId>, outs: Vec<ValId> },
    ScaleCombine { alphas: Vec<ValId>, xs: Vec<ValId>, out: ValId },
    CeLoss { logits: ValId, labels: Labels, settings: CeSettings, kept: Vec<u32>, weight_sum: f64, out: ValId },
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    /// Whether a gradient must be propagated to this value. False for plain
    /// inputs (images, constant planes); backward skips work for them.
    needs: Vec<bool>,
    ops: Vec<Op>,
    param_leaves: Vec<(SharedParam, ValId)>,
    param_ids: HashMap<u64, ValId>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, t: Tensor, needs: bool) -> ValId {
        self.vals.push(t);
        self.grads.push(None);
        self.needs.push(needs);
        self.vals.len() - 1
    }

    fn push_checked(&mut self, t: Tensor, needs: bool, op: &'static str) -> Result<ValId> {
        if !t.is_finite() {
            return Err(Error::NonFinite(op.into()));
        }
        Ok(self.push(t, needs))
    }

    fn any_needs(&self, ids: &[ValId]) -> bool {
        ids.iter().any(|&id| self.needs[id])
    }

    /// Register a non-parameter, non-differentiated input (images, constant
    /// planes). No gradient is computed for it.
    pub fn input(&mut self, t: Tensor) -> ValId {
        self.push(t, false)
    }

    /// Register a differentiated leaf that is not a parameter; its gradient
    /// remains readable through [`Tape::grad`] after backward.
    pub fn leaf(&mut self, t: Tensor) -> ValId {
        self.push(t, true)
    }

    /// Register a parameter leaf, snapshotting its current value. Repeated
    /// registration of the same parameter returns the same id.
    pub fn param(&mut self, p: &SharedParam) -> ValId {
        let uid = p.borrow().uid;
        if let Some(&id) = self.param_ids.get(&uid) {
            return id;
        }
        let id = self.push(p.borrow().value.clone(), true);
        self.param_ids.insert(uid, id);
        self.param_leaves.push((Rc::clone(p), id));
        id
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.vals[id]
    }

    /// Gradient of a value after `backward`. Interior gradients are consumed
    /// as the sweep passes their producing operation; leaf gradients (inputs
    /// and parameters) remain readable.
    pub fn grad(&self, id: ValId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    // ── recorded operations ──────────────────────────────────────────

    pub fn conv2d(&mut self, x: ValId, w: ValId, b: Option<ValId>, dilation: usize) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.conv2d");
        let y = ops::conv::conv2d_fwd(
            &self.vals[x],
            &self.vals[w],
            b.map(|b| &self.vals[b]),
            dilation,
        )?;
        let needs = self.needs[x] || self.needs[w] || b.map_or(false, |b| self.needs[b]);
        let out = self.push_checked(y, needs, "conv2d")?;
        self.ops.push(Op::Conv2d { x, w, b, dilation, out });
        Ok(out)
    }

    pub fn conv1x1(&mut self, x: ValId, w: ValId, b: Option<ValId>) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.conv1x1");
        let y = ops::conv::conv1x1_fwd(&self.vals[x], &self.vals[w], b.map(|b| &self.vals[b]))?;
        let needs = self.needs[x] || self.needs[w] || b.map_or(false, |b| self.needs[b]);
        let out = self.push_checked(y, needs, "conv1x1")?;
        self.ops.push(Op::Conv1x1 { x, w, b, out });
        Ok(out)
    }

    /// Train-mode batch normalization with exact full-batch statistics.
    /// Returns the output id plus the per-channel batch mean and variance so
    /// the owning layer can update its running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        eps: f64,
    ) -> Result<(ValId, Vec<f64>, Vec<f64>)> {
        let _t = crate::profile::OpTimer::new("fwd.batchnorm_train");
        let (y, mean, var) =
            ops::norm::batchnorm_train_fwd(&self.vals[x], &self.vals[gamma], &self.vals[beta], eps)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let needs = self.any_needs(&[x, gamma, beta]);
        let out = self.push_checked(y, needs, "batchnorm")?;
        self.ops.push(Op::BatchNorm { x, gamma, beta, out, mean: mean.clone(), inv_std, train: true });
        Ok((out, mean, var))
    }

    /// Eval-mode batch normalization with stored running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.batchnorm_eval");
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let y = ops::norm::batchnorm_affine_fwd(
            &self.vals[x],
            &self.vals[gamma],
            &self.vals[beta],
            running_mean,
            &inv_std,
        )?;
        let needs = self.any_needs(&[x, gamma, beta]);
        let out = self.push_checked(y, needs, "batchnorm")?;
        self.ops.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            mean: running_mean.to_vec(),
            inv_std,
            train: false,
        });
        Ok(out)
    }

    pub fn relu(&mut self, x: ValId) -> ValId {
        let _t = crate::profile::OpTimer::new("fwd.relu");
        let y = ops::activation::relu_fwd(&self.vals[x]);
        let out = self.push(y, self.needs[x]);
        self.ops.push(Op::Relu { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: ValId) -> ValId {
        let _t = crate::profile::OpTimer::new("fwd.sigmoid");
        let y = ops::activation::sigmoid_fwd(&self.vals[x]);
        let out = self.push(y, self.needs[x]);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    /// Softmax across a stack of same-shaped tensors, taken at every
    /// (batch, channel, position) coordinate independently.
    pub fn softmax_over_scales(&mut self, xs: &[ValId]) -> Result<Vec<ValId>> {
        let _t = crate::profile::OpTimer::new("fwd.softmax_over_scales");
        let tensors: Vec<&Tensor> = xs.iter().map(|&id| &self.vals[id]).collect();
        let ys = ops::activation::softmax_scales_fwd(&tensors)?;
        let needs = self.any_needs(xs);
        let outs: Vec<ValId> = ys.into_iter().map(|y| self.push(y, needs)).collect();
        self.ops.push(Op::SoftmaxScales { xs: xs.to_vec(), outs: outs.clone() });
        Ok(outs)
    }

    pub fn concat_channels(&mut self, xs: &[ValId]) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.concat_channels");
        let tensors: Vec<&Tensor> = xs.iter().map(|&id| &self.vals[id]).collect();
        let y = ops::basic::concat_channels_fwd(&tensors)?;
        let out = self.push(y, self.any_needs(xs));
        self.ops.push(Op::ConcatChannels { xs: xs.to_vec(), out });
        Ok(out)
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.add");
        let y = ops::basic::add_fwd(&self.vals[a], &self.vals[b])?;
        let out = self.push_checked(y, self.any_needs(&[a, b]), "add")?;
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.mul");
        let y = ops::basic::mul_fwd(&self.vals[a], &self.vals[b])?;
        let out = self.push_checked(y, self.any_needs(&[a, b]), "mul")?;
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: ValId, c: f64) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.scale");
        if !c.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let data = self.vals[x].data().iter().map(|v| c * v).collect();
        let y = Tensor::from_vec_unchecked(self.vals[x].shape(), data);
        let out = self.push_checked(y, self.needs[x], "scale")?;
        self.ops.push(Op::Scale { x, c, out });
        Ok(out)
    }

    pub fn spatial_mean(&mut self, x: ValId) -> ValId {
        let _t = crate::profile::OpTimer::new("fwd.spatial_mean");
        let y = ops::basic::spatial_mean_fwd(&self.vals[x]);
        let out = self.push(y, self.needs[x]);
        self.ops.push(Op::SpatialMean { x, out });
        out
    }

    pub fn sum_all(&mut self, x: ValId) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.sum_all");
        let y = ops::basic::sum_all_fwd(&self.vals[x]);
        let out = self.push_checked(y, self.needs[x], "sum_all")?;
        self.ops.push(Op::SumAll { x, out });
        Ok(out)
    }

    pub fn avg_pool2(&mut self, x: ValId) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.avg_pool2");
        let y = ops::basic::avgpool2_fwd(&self.vals[x])?;
        let out = self.push(y, self.needs[x]);
        self.ops.push(Op::AvgPool2 { x, out });
        Ok(out)
    }

    pub fn upsample_bilinear(&mut self, x: ValId, factor: usize) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.upsample_bilinear");
        let y = ops::basic::upsample_bilinear_fwd(&self.vals[x], factor)?;
        let out = self.push(y, self.needs[x]);
        self.ops.push(Op::UpsampleBilinear { x, factor, out });
        Ok(out)
    }

    /// Per-position dot products between embedded scale features:
    /// `out[n, k*K+m, i, j] = <theta_k, phi_m>` over the embedded channels.
    pub fn scale_dot(&mut self, thetas: &[ValId], phis: &[ValId]) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.scale_dot");
        let th: Vec<&Tensor> = thetas.iter().map(|&id| &self.vals[id]).collect();
        let ph: Vec<&Tensor> = phis.iter().map(|&id| &self.vals[id]).collect();
        let y = ops::scale::scale_dot_fwd(&th, &ph)?;
        let needs = self.any_needs(thetas) || self.any_needs(phis);
        let out = self.push_checked(y, needs, "scale_dot")?;
        self.ops.push(Op::ScaleDot { thetas: thetas.to_vec(), phis: phis.to_vec(), out });
        Ok(out)
    }

    /// Softmax over the source-scale axis of a (N, K*K, H, W) logit tensor,
    /// normalizing each target-scale row of the per-position affinity matrix.
    pub fn row_softmax(&mut self, x: ValId, k: usize) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.row_softmax");
        let y = ops::scale::row_softmax_fwd(&self.vals[x], k)?;
        let out = self.push(y, self.needs[x]);
        self.ops.push(Op::RowSoftmax { x, k, out });
        Ok(out)
    }

    /// Weighted per-position combination of the scale stack:
    /// `out_k = sum_m weights[k*K+m] * x_m`, weights broadcast over channels.
    pub fn scale_mix(&mut self, weights: ValId, xs: &[ValId]) -> Result<Vec<ValId>> {
        let _t = crate::profile::OpTimer::new("fwd.scale_mix");
        let tensors: Vec<&Tensor> = xs.iter().map(|&id| &self.vals[id]).collect();
        let ys = ops::scale::scale_mix_fwd(&self.vals[weights], &tensors)?;
        let needs = self.needs[weights] || self.any_needs(xs);
        let mut outs = Vec::with_capacity(ys.len());
        for y in ys {
            outs.push(self.push_checked(y, needs, "scale_mix")?);
        }
        self.ops.push(Op::ScaleMix { weights, xs: xs.to_vec(), outs: outs.clone() });
        Ok(outs)
    }

    /// Attention-weighted fusion: `out = (1/K) * sum_k alpha_k * x_k`.
    /// Each `alpha_k` has either the full channel count or a single channel
    /// broadcast across channels.
    pub fn scale_combine(&mut self, alphas: &[ValId], xs: &[ValId]) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.scale_combine");
        let al: Vec<&Tensor> = alphas.iter().map(|&id| &self.vals[id]).collect();
        let xt: Vec<&Tensor> = xs.iter().map(|&id| &self.vals[id]).collect();
        let y = ops::scale::scale_combine_fwd(&al, &xt)?;
        let needs = self.any_needs(alphas) || self.any_needs(xs);
        let out = self.push_checked(y, needs, "scale_combine")?;
        self.ops.push(Op::ScaleCombine { alphas: alphas.to_vec(), xs: xs.to_vec(), out });
        Ok(out)
    }

    /// Weighted cross-entropy over scored pixels with optional hard-example
    /// selection. Produces a scalar.
    pub fn ce_loss(&mut self, logits: ValId, labels: &Labels, settings: &CeSettings) -> Result<ValId> {
        let _t = crate::profile::OpTimer::new("fwd.ce_loss");
        let (loss, kept, weight_sum) =
            ops::loss::ce_fwd(&self.vals[logits], labels, settings)?;
        let out = self.push_checked(
            Tensor::from_vec(Shape::new(1, 1, 1, 1)?, vec![loss])?,
            self.needs[logits],
            "ce_loss",
        )?;
        self.ops.push(Op::CeLoss {
            logits,
            labels: labels.clone(),
            settings: settings.clone(),
            kept,
            weight_sum,
            out,
        });
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits the recorded operations in
    /// exact reverse execution order.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if self.vals[loss].numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got {}",
                self.vals[loss].shape()
            )));
        }
        self.grads[loss] = Some(Tensor::from_vec(Shape::new(1, 1, 1, 1)?, vec![1.0])?);

        let Tape { vals, grads, needs, ops, .. } = self;
        for op in ops.iter().rev() {
            let _t = crate::profile::OpTimer::new(op_name(op));
            backward_op(op, vals, grads, needs)?;
        }
        Ok(())
    }

    /// Accumulate tape gradients into the registered parameters.
    pub fn grads_to_params(&self) -> Result<()> {
        for (p, id) in &self.param_leaves {
            if let Some(g) = &self.grads[*id] {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter {}",
                        p.borrow().name
                    )));
                }
                let mut p = p.borrow_mut();
                for (pg, tg) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *pg += tg;
                }
            }
        }
        Ok(())
    }
}

fn accum(needs: &[bool], grads: &mut [Option<Tensor>], id: ValId, shape: Shape, delta: &[f64]) {
    if !needs[id] {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => {
            let mut g = Tensor::zeros(shape);
            g.data_mut().copy_from_slice(delta);
            grads[id] = Some(g);
        }
    }
}

/// Like `accum` but takes ownership, moving the tensor into an empty slot.
fn accum_owned(needs: &[bool], grads: &mut [Option<Tensor>], id: ValId, delta: Tensor) {
    if !needs[id] {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => grads[id] = Some(delta),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Conv2d { .. } => "bwd.conv2d",
        Op::Conv1x1 { .. } => "bwd.conv1x1",
        Op::BatchNorm { .. } => "bwd.batchnorm",
        Op::Relu { .. } => "bwd.relu",
        Op::Sigmoid { .. } => "bwd.sigmoid",
        Op::SoftmaxScales { .. } => "bwd.softmax_scales",
        Op::ConcatChannels { .. } => "bwd.concat",
        Op::Add { .. } => "bwd.add",
        Op::Mul { .. } => "bwd.mul",
        Op::Scale { .. } => "bwd.scale",
        Op::SpatialMean { .. } => "bwd.spatial_mean",
        Op::SumAll { .. } => "bwd.sum_all",
        Op::AvgPool2 { .. } => "bwd.avgpool",
        Op::UpsampleBilinear { .. } => "bwd.upsample",
        Op::ScaleDot { .. } => "bwd.scale_dot",
        Op::RowSoftmax { .. } => "bwd.row_softmax",
        Op::ScaleMix { .. } => "bwd.scale_mix",
        Op::ScaleCombine { .. } => "bwd.scale_combine",
        Op::CeLoss { .. } => "bwd.ce_loss",
    }
}

fn backward_op(
    op: &Op,
    vals: &[Tensor],
    grads: &mut [Option<Tensor>],
    needs: &[bool],
) -> Result<()> {
    match op {
        Op::Conv2d { x, w, b, dilation, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let (dx, dw, db) =
                ops::conv::conv2d_bwd(&vals[*x], &vals[*w], &dy, *dilation, needs[*x])?;
            if needs[*x] {
                accum_owned(needs, grads, *x, dx);
            }
            accum_owned(needs, grads, *w, dw);
            if let Some(b) = b {
                accum(needs, grads, *b, vals[*b].shape(), db.data());
            }
        }
        Op::Conv1x1 { x, w, b, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let (dx, dw, db) = ops::conv::conv1x1_bwd(&vals[*x], &vals[*w], &dy, needs[*x])?;
            if needs[*x] {
                accum_owned(needs, grads, *x, dx);
            }
            accum_owned(needs, grads, *w, dw);
            if let Some(b) = b {
                accum(needs, grads, *b, vals[*b].shape(), db.data());
            }
        }
        Op::BatchNorm { x, gamma, beta, out, mean, inv_std, train } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let (dx, dgamma, dbeta) =
                ops::norm::batchnorm_bwd(&vals[*x], &vals[*gamma], mean, inv_std, &dy, *train);
            accum_owned(needs, grads, *x, dx);
            accum_owned(needs, grads, *gamma, dgamma);
            accum_owned(needs, grads, *beta, dbeta);
        }
        Op::Relu { x, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let dx = ops::activation::relu_bwd(&vals[*x], &dy);
            accum_owned(needs, grads, *x, dx);
        }
        Op::Sigmoid { x, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let dx = ops::activation::sigmoid_bwd(&vals[*out], &dy);
            accum_owned(needs, grads, *x, dx);
        }
        Op::SoftmaxScales { xs, outs } => {
            if outs.iter().all(|&o| grads[o].is_none()) {
                return Ok(());
            }
            let shape = vals[xs[0]].shape();
            let dys: Vec<Tensor> = outs
                .iter()
                .map(|&o| grads[o].take().unwrap_or_else(|| Tensor::zeros(shape)))
                .collect();
            let ys: Vec<&Tensor> = outs.iter().map(|&o| &vals[o]).collect();
            let dxs = ops::activation::softmax_scales_bwd(&ys, &dys);
            for (xid, dx) in xs.iter().zip(dxs) {
                accum_owned(needs, grads, *xid, dx);
            }
        }
        Op::ConcatChannels { xs, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let shapes: Vec<Shape> = xs.iter().map(|&id| vals[id].shape()).collect();
            let dxs = ops::basic::concat_channels_bwd(&dy, &shapes);
            for (xid, dx) in xs.iter().zip(dxs) {
                accum_owned(needs, grads, *xid, dx);
            }
        }
        Op::Add { a, b, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            accum(needs, grads, *a, vals[*a].shape(), dy.data());
            accum_owned(needs, grads, *b, dy);
        }
        Op::Mul { a, b, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let da: Vec<f64> = dy.data().iter().zip(vals[*b].data()).map(|(d, v)| d * v).collect();
            let db: Vec<f64> = dy.data().iter().zip(vals[*a].data()).map(|(d, v)| d * v).collect();
            accum(needs, grads, *a, vals[*a].shape(), &da);
            accum(needs, grads, *b, vals[*b].shape(), &db);
        }
        Op::Scale { x, c, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let dx: Vec<f64> = dy.data().iter().map(|d| c * d).collect();
            accum(needs, grads, *x, vals[*x].shape(), &dx);
        }
        Op::SpatialMean { x, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let dx = ops::basic::spatial_mean_bwd(vals[*x].shape(), &dy);
            accum_owned(needs, grads, *x, dx);
        }
        Op::SumAll { x, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let g = dy.scalar();
            let dx = vec![g; vals[*x].numel()];
            accum(needs, grads, *x, vals[*x].shape(), &dx);
        }
        Op::AvgPool2 { x, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let dx = ops::basic::avgpool2_bwd(vals[*x].shape(), &dy);
            accum_owned(needs, grads, *x, dx);
        }
        Op::UpsampleBilinear { x, factor, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let dx = ops::basic::upsample_bilinear_bwd(vals[*x].shape(), &dy, *factor);
            accum_owned(needs, grads, *x, dx);
        }
        Op::ScaleDot { thetas, phis, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let th: Vec<&Tensor> = thetas.iter().map(|&id| &vals[id]).collect();
            let ph: Vec<&Tensor> = phis.iter().map(|&id| &vals[id]).collect();
            let (dth, dph) = ops::scale::scale_dot_bwd(&th, &ph, &dy);
            for (id, d) in thetas.iter().zip(dth) {
                accum_owned(needs, grads, *id, d);
            }
            for (id, d) in phis.iter().zip(dph) {
                accum_owned(needs, grads, *id, d);
            }
        }
        Op::RowSoftmax { x, k, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let dx = ops::scale::row_softmax_bwd(&vals[*out], &dy, *k);
            accum_owned(needs, grads, *x, dx);
        }
        Op::ScaleMix { weights, xs, outs } => {
            if outs.iter().all(|&o| grads[o].is_none()) {
                return Ok(());
            }
            let shape = vals[xs[0]].shape();
            let dys: Vec<Tensor> = outs
                .iter()
                .map(|&o| grads[o].take().unwrap_or_else(|| Tensor::zeros(shape)))
                .collect();
            let xt: Vec<&Tensor> = xs.iter().map(|&id| &vals[id]).collect();
            let (dw, dxs) = ops::scale::scale_mix_bwd(&vals[*weights], &xt, &dys);
            accum_owned(needs, grads, *weights, dw);
            for (id, d) in xs.iter().zip(dxs) {
                accum_owned(needs, grads, *id, d);
            }
        }
        Op::ScaleCombine { alphas, xs, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let al: Vec<&Tensor> = alphas.iter().map(|&id| &vals[id]).collect();
            let xt: Vec<&Tensor> = xs.iter().map(|&id| &vals[id]).collect();
            let (dal, dxs) = ops::scale::scale_combine_bwd(&al, &xt, &dy);
            for (id, d) in alphas.iter().zip(dal) {
                accum_owned(needs, grads, *id, d);
            }
            for (id, d) in xs.iter().zip(dxs) {
                accum_owned(needs, grads, *id, d);
            }
        }
        Op::CeLoss { logits, labels, settings, kept, weight_sum, out } => {
            let Some(dy) = grads[*out].take() else { return Ok(()) };
            let dx = ops::loss::ce_bwd(&vals[*logits], labels, settings, kept, *weight_sum, dy.scalar());
            accum_owned(needs, grads, *logits, dx);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Tensor {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3).unwrap(), data).unwrap()
    }

    #[test]
    fn add_and_mul_chain() {
        // out = sum(a * b + a); da = b + 1, db = a.
        let mut tape = Tape::new();
        let a = tape.leaf(t((1, 1, 1, 2), vec![3.0, -2.0]));
        let b = tape.leaf(t((1, 1, 1, 2), vec![5.0, 4.0]));
        let prod = tape.mul(a, b).unwrap();
        let s = tape.add(prod, a).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[6.0, 5.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn param_reuse_accumulates_once_per_leaf() {
        let mut tape = Tape::new();
        let p = Param::new("p", t((1, 1, 1, 1), vec![2.0]), true);
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        // loss = p * p  =>  dp = 2p = 4
        let sq = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.grads_to_params().unwrap();
        assert_eq!(p.borrow().grad.data(), &[4.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(Shape::new(1, 1, 2, 2).unwrap()));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn disconnected_params_get_no_gradient() {
        let mut tape = Tape::new();
        let p = Param::new("unused", Tensor::randn(
            Shape::new(1, 1, 1, 3).unwrap(), &mut Rng::new(1), 1.0).unwrap(), true);
        let _ = tape.param(&p);
        let x = tape.input(t((1, 1, 1, 1), vec![1.0]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        tape.grads_to_params().unwrap();
        assert!(p.borrow().grad.data().iter().all(|&g| g == 0.0));
    }
}
