//! Dilated-convolution pyramid: K parallel 3x3 branches at different
//! dilation rates over one backbone feature map, each conv -> BN -> ReLU,
//! all shape-preserving. The image-level pooling branch of the classic
//! pyramid is intentionally absent.

use crate::error::{Error, Result};
use crate::layers::{BnLayer, Conv2dLayer};
use crate::rng::Rng;
use crate::tape::{Mode, SharedParam, Tape, ValId};
use crate::tensor::{Shape, Tensor};

/// Ordered list of K same-shaped feature maps, one per branch.
#[derive(Debug, Clone)]
pub struct ScaleStack {
    pub scales: Vec<Tensor>,
    pub dilations: Vec<usize>,
}

impl ScaleStack {
    pub fn new(scales: Vec<Tensor>, dilations: Vec<usize>) -> Result<ScaleStack> {
        if scales.is_empty() {
            return Err(Error::Shape("scale stack must be non-empty".into()));
        }
        if scales.len() != dilations.len() {
            return Err(Error::Shape(format!(
                "{} scales but {} dilations",
                scales.len(),
                dilations.len()
            )));
        }
        let s = scales[0].shape();
        if scales.iter().any(|t| t.shape() != s) {
            return Err(Error::Shape("scale stack tensors must share one shape".into()));
        }
        Ok(ScaleStack { scales, dilations })
    }

    pub fn k(&self) -> usize {
        self.scales.len()
    }

    pub fn shape(&self) -> Shape {
        self.scales[0].shape()
    }
}

pub struct AsppBranch {
    pub conv: Conv2dLayer,
    pub bn: BnLayer,
}

/// Per-branch parameters; no sharing across branches.
pub struct AsppParams {
    pub branches: Vec<AsppBranch>,
    pub dilations: Vec<usize>,
}

impl AsppParams {
    pub fn new(cin: usize, cout: usize, dilations: &[usize], rng: &mut Rng) -> Result<AsppParams> {
        if dilations.is_empty() {
            return Err(Error::Config("pyramid needs at least one branch".into()));
        }
        let mut branches = Vec::with_capacity(dilations.len());
        for (i, &d) in dilations.iter().enumerate() {
            if d == 0 {
                return Err(Error::Config("dilation must be positive".into()));
            }
            branches.push(AsppBranch {
                conv: Conv2dLayer::new(&format!("aspp.branch{i}.conv"), cin, cout, d, false, rng)?,
                bn: BnLayer::new(&format!("aspp.branch{i}.bn"), cout)?,
            });
        }
        Ok(AsppParams { branches, dilations: dilations.to_vec() })
    }

    pub fn params(&self) -> Vec<SharedParam> {
        let mut ps = Vec::new();
        for b in &self.branches {
            ps.extend(b.conv.params());
            ps.extend(b.bn.params());
        }
        ps
    }
}

/// Tape-recorded pyramid forward; returns one value id per branch.
pub fn aspp_forward_on(
    tape: &mut Tape,
    feature: ValId,
    params: &AsppParams,
    mode: Mode,
) -> Result<Vec<ValId>> {
    let mut out = Vec::with_capacity(params.branches.len());
    for b in &params.branches {
        let c = b.conv.forward(tape, feature)?;
        let n = b.bn.forward(tape, c, mode)?;
        out.push(tape.relu(n));
    }
    Ok(out)
}

/// Value-level pyramid forward.
pub fn aspp_forward(feature: &Tensor, params: &AsppParams, mode: Mode) -> Result<ScaleStack> {
    let mut tape = Tape::new();
    let x = tape.input(feature.clone());
    let ids = aspp_forward_on(&mut tape, x, params, mode)?;
    let scales = ids.iter().map(|&id| tape.value(id).clone()).collect();
    ScaleStack::new(scales, params.dilations.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::randn(Shape::new(n, c, h, w).unwrap(), &mut Rng::new(seed), 1.0).unwrap()
    }

    #[test]
    fn default_dilations_give_five_branches() {
        let dil = [1, 6, 12, 24, 36];
        let params = AsppParams::new(8, 6, &dil, &mut Rng::new(3)).unwrap();
        let x = rand(1, 8, 8, 8, 4);
        let stack = aspp_forward(&x, &params, Mode::Train).unwrap();
        assert_eq!(stack.k(), 5);
        assert_eq!(stack.dilations, dil);
        // Shape invariance across branches regardless of dilation.
        for t in &stack.scales {
            assert_eq!(t.shape(), Shape::new(1, 6, 8, 8).unwrap());
        }
    }

    #[test]
    fn zero_input_zero_beta_gives_zero_stack() {
        let params = AsppParams::new(4, 3, &[1, 2], &mut Rng::new(5)).unwrap();
        let x = Tensor::zeros(Shape::new(2, 4, 6, 6).unwrap());
        let stack = aspp_forward(&x, &params, Mode::Train).unwrap();
        for t in &stack.scales {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn branch_matches_standalone_composition() {
        // Branch k equals an independently composed conv -> BN -> ReLU with
        // the same parameters and dilation.
        let params = AsppParams::new(5, 4, &[1, 3, 7], &mut Rng::new(6)).unwrap();
        let x = rand(2, 5, 6, 6, 7);
        let stack = aspp_forward(&x, &params, Mode::Train).unwrap();

        for (i, b) in params.branches.iter().enumerate() {
            let mut tape = Tape::new();
            let xid = tape.input(x.clone());
            let c = b.conv.forward(&mut tape, xid).unwrap();
            let n = b.bn.forward(&mut tape, c, Mode::Train).unwrap();
            let r = tape.relu(n);
            for (a, o) in stack.scales[i].data().iter().zip(tape.value(r).data()) {
                assert!((a - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn branch_independence() {
        let params = AsppParams::new(3, 4, &[1, 2, 4], &mut Rng::new(8)).unwrap();
        let x = rand(1, 3, 6, 6, 9);
        let before = aspp_forward(&x, &params, Mode::Eval).unwrap();
        // Perturb branch 1's kernel only.
        params.branches[1].conv.w.borrow_mut().value.data_mut()[0] += 0.5;
        let after = aspp_forward(&x, &params, Mode::Eval).unwrap();
        assert_eq!(before.scales[0].data(), after.scales[0].data());
        assert_ne!(before.scales[1].data(), after.scales[1].data());
        assert_eq!(before.scales[2].data(), after.scales[2].data());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let params = AsppParams::new(4, 3, &[1], &mut Rng::new(5)).unwrap();
        let x = rand(1, 7, 4, 4, 1);
        assert!(aspp_forward(&x, &params, Mode::Train).is_err());
    }
}
