//! Interaction-module properties checked against the brute-force oracle:
//! oracle equivalence across the embedding configurations, permutation
//! equivariance, convexity, and normalization, plus property-based checks
//! over random stacks.

mod common;

use casinet::aspp::ScaleStack;
use casinet::csi::{compute_affinity, csi_forward, CsiParams};
use casinet::rng::Rng;
use casinet::tape::Mode;
use casinet::tensor::{Shape, Tensor};
use common::{csi_oracle, max_abs_diff, rand_stack};
use proptest::prelude::*;

#[test]
fn oracle_equivalence_across_configs() {
    // K up to 5, C = 8, N = 2, H = W = 6, all four embedding configurations.
    for (scale_index, shared) in [(true, false), (false, false), (true, true), (false, true)] {
        let stack = rand_stack(5, 2, 8, 6, 6, 900);
        let params = CsiParams::new(5, 8, scale_index, shared, false, &mut Rng::new(901)).unwrap();
        let fast = csi_forward(&stack, &params, Mode::Train).unwrap();
        let oracle = csi_oracle(&stack, &params, Mode::Train);
        for (f, o) in fast.scales.iter().zip(&oracle.refined) {
            let d = max_abs_diff(f, o);
            assert!(d < 1e-10, "index={scale_index} shared={shared}: diff {d}");
        }
    }
}

#[test]
fn oracle_equivalence_eval_mode_after_warmup() {
    // A train-mode pass populates the running statistics; eval mode must
    // then agree with the oracle reading the same statistics.
    let stack = rand_stack(3, 2, 4, 5, 5, 910);
    let params = CsiParams::new(3, 4, true, false, false, &mut Rng::new(911)).unwrap();
    csi_forward(&stack, &params, Mode::Train).unwrap();
    let fast = csi_forward(&stack, &params, Mode::Eval).unwrap();
    let oracle = csi_oracle(&stack, &params, Mode::Eval);
    for (f, o) in fast.scales.iter().zip(&oracle.refined) {
        assert!(max_abs_diff(f, o) < 1e-10);
    }
}

#[test]
fn affinity_matches_oracle_values() {
    let stack = rand_stack(4, 1, 6, 4, 4, 920);
    let params = CsiParams::new(4, 6, true, false, false, &mut Rng::new(921)).unwrap();
    let aff = compute_affinity(&stack, &params, Mode::Train).unwrap();
    let oracle = csi_oracle(&stack, &params, Mode::Train);
    for n in 0..1 {
        for i in 0..4 {
            for j in 0..4 {
                for kk in 0..4 {
                    for mm in 0..4 {
                        let a = aff.value(n, i, j, kk, mm);
                        let o = oracle.values[oracle.idx(n, i, j, kk, mm)];
                        assert!((a - o).abs() <= 1e-10 * o.max(1.0), "{a} vs {o}");
                        let aw = aff.weight(n, i, j, kk, mm);
                        let ow = oracle.normalized[oracle.idx(n, i, j, kk, mm)];
                        assert!((aw - ow).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

/// Permuting the scale order of inputs together with the per-scale
/// embeddings and the one-hot index columns permutes the outputs
/// identically.
#[test]
fn scale_permutation_equivariance() {
    let k = 4;
    let c = 5;
    let perm = [2usize, 0, 3, 1];
    let stack = rand_stack(k, 2, c, 3, 3, 930);
    let params = CsiParams::new(k, c, true, false, false, &mut Rng::new(931)).unwrap();

    // Permuted model: scale slot s holds what was at perm[s], with the
    // index-plane columns of each embedding kernel permuted the same way.
    let permuted_stack = ScaleStack::new(
        perm.iter().map(|&p| stack.scales[p].clone()).collect(),
        vec![1; k],
    )
    .unwrap();
    let permuted = CsiParams::new(k, c, true, false, false, &mut Rng::new(931)).unwrap();
    for slot in 0..k {
        let src = perm[slot];
        for (dst_layer, src_layer) in [
            (&permuted.theta[slot], &params.theta[src]),
            (&permuted.phi[slot], &params.phi[src]),
        ] {
            let mut w = src_layer.conv.w.borrow().value.clone();
            // feature columns stay; index columns are permuted by perm
            let ws = w.shape();
            let orig = w.clone();
            for co in 0..ws.n {
                for (new_idx, &old_idx) in perm.iter().enumerate() {
                    let v = orig.get(co, c + old_idx, 0, 0);
                    w.set(co, c + new_idx, 0, 0, v);
                }
            }
            dst_layer.conv.w.borrow_mut().value = w;
            dst_layer.bn.gamma.borrow_mut().value = src_layer.bn.gamma.borrow().value.clone();
            dst_layer.bn.beta.borrow_mut().value = src_layer.bn.beta.borrow().value.clone();
        }
    }

    let base = csi_forward(&stack, &params, Mode::Train).unwrap();
    let perm_out = csi_forward(&permuted_stack, &permuted, Mode::Train).unwrap();
    for slot in 0..k {
        let d = max_abs_diff(&perm_out.scales[slot], &base.scales[perm[slot]]);
        assert!(d < 1e-12, "slot {slot}: diff {d}");
    }
}

#[test]
fn csi_gradcheck_small() {
    // Finite-difference check through the full interaction on a small stack.
    let k = 3;
    let c = 3;
    let params = CsiParams::new(k, c, true, false, false, &mut Rng::new(940)).unwrap();
    let inputs: Vec<Tensor> = (0..k)
        .map(|i| {
            Tensor::randn(Shape::new(1, c, 6, 6).unwrap(), &mut Rng::new(941 + i as u64), 1.0)
                .unwrap()
        })
        .collect();
    let all_params = params.params();
    let report = casinet::gradcheck::gradcheck(
        |needs_grad| {
            let mut tape = casinet::tape::Tape::new();
            let ids: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
            let outs = casinet::csi::csi_forward_on(&mut tape, &ids, &params, Mode::Train)?;
            // scalar: sum of all refined outputs
            let mut total = tape.sum_all(outs[0])?;
            for &o in &outs[1..] {
                let s = tape.sum_all(o)?;
                total = tape.add(total, s)?;
            }
            if needs_grad {
                tape.backward(total)?;
                tape.grads_to_params()?;
            }
            Ok(tape.value(total).scalar())
        },
        &all_params,
        1e-5,
        60,
        7,
    )
    .unwrap();
    assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rows_sum_to_one_and_outputs_convex(seed in 0u64..5000, k in 2usize..6) {
        let c = 4;
        let stack = rand_stack(k, 1, c, 3, 3, seed);
        let params = CsiParams::new(k, c, true, false, false, &mut Rng::new(seed + 1)).unwrap();
        let aff = compute_affinity(&stack, &params, Mode::Train).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for kk in 0..k {
                    let sum: f64 = (0..k).map(|mm| aff.weight(0, i, j, kk, mm)).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                    for mm in 0..k {
                        prop_assert!(aff.value(0, i, j, kk, mm) > 0.0);
                    }
                }
            }
        }
        let out = csi_forward(&stack, &params, Mode::Train).unwrap();
        for ch in 0..c {
            for i in 0..3 {
                for j in 0..3 {
                    let lo = stack.scales.iter().map(|t| t.get(0, ch, i, j)).fold(f64::INFINITY, f64::min);
                    let hi = stack.scales.iter().map(|t| t.get(0, ch, i, j)).fold(f64::NEG_INFINITY, f64::max);
                    for t in &out.scales {
                        let v = t.get(0, ch, i, j);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn identical_scales_are_fixed_points(seed in 0u64..5000) {
        let base = Tensor::randn(Shape::new(1, 3, 4, 4).unwrap(), &mut Rng::new(seed), 1.0).unwrap();
        let stack = ScaleStack::new(vec![base.clone(); 4], vec![1; 4]).unwrap();
        let params = CsiParams::new(4, 3, true, false, false, &mut Rng::new(seed + 1)).unwrap();
        let out = csi_forward(&stack, &params, Mode::Train).unwrap();
        for t in &out.scales {
            prop_assert!(max_abs_diff(t, &base) < 1e-10);
        }
    }
}
