use casinet::labels::Labels;
use casinet::ops::*;
use casinet::rng::Rng;
use casinet::tape::CeSettings;
use casinet::tensor::{Shape, Tensor};
use std::time::Instant;

fn t(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::randn(Shape::new(n, c, h, w).unwrap(), &mut Rng::new(seed), 0.5).unwrap()
}

fn bench(name: &str, reps: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..reps { f(); }
    eprintln!("{name}: {:.2} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1000.0);
}

fn main() {
    let reps = 20;
    // backbone convs
    let x1 = t(8, 3, 64, 64, 1); let w1 = t(16, 3, 3, 3, 2);
    bench("conv1 fwd (3->16@64)", reps, || { conv::conv2d_fwd(&x1, &w1, None, 1).unwrap(); });
    let dy1 = t(8, 16, 64, 64, 3);
    bench("conv1 bwd", reps, || { conv::conv2d_bwd(&x1, &w1, &dy1, 1).unwrap(); });

    let x2 = t(8, 16, 32, 32, 4); let w2 = t(32, 16, 3, 3, 5);
    bench("conv2 fwd (16->32@32)", reps, || { conv::conv2d_fwd(&x2, &w2, None, 1).unwrap(); });
    let dy2 = t(8, 32, 32, 32, 6);
    bench("conv2 bwd", reps, || { conv::conv2d_bwd(&x2, &w2, &dy2, 1).unwrap(); });

    let x3 = t(8, 48, 16, 16, 7); let w3 = t(32, 48, 3, 3, 8);
    bench("aspp conv fwd (48->32@16)", reps, || { conv::conv2d_fwd(&x3, &w3, None, 6).unwrap(); });
    let dy3 = t(8, 32, 16, 16, 9);
    bench("aspp conv bwd", reps, || { conv::conv2d_bwd(&x3, &w3, &dy3, 6).unwrap(); });

    // bn at full res
    let g = Tensor::full(Shape::new(1, 16, 1, 1).unwrap(), 1.0).unwrap();
    let b = Tensor::zeros(Shape::new(1, 16, 1, 1).unwrap());
    bench("bn fwd (8x16x64x64)", reps, || { norm::batchnorm_train_fwd(&x1_16(), &g, &b, 1e-5).unwrap(); });
    let x16 = x1_16();
    let (_, mean, var) = norm::batchnorm_train_fwd(&x16, &g, &b, 1e-5).unwrap();
    let inv: Vec<f64> = var.iter().map(|v| 1.0/(v+1e-5).sqrt()).collect();
    bench("bn bwd (8x16x64x64)", reps, || { norm::batchnorm_bwd(&x16, &g, &mean, &inv, &dy1, true); });

    // activations
    bench("relu fwd (8x16x64x64)", reps, || { activation::relu_fwd(&x16); });
    bench("sigmoid fwd (8x32x16x16)", reps, || { activation::sigmoid_fwd(&dy3); });

    // upsample + loss
    let logits_small = t(8, 4, 16, 16, 11);
    bench("upsample x4 fwd (8x4x16->64)", reps, || { basic::upsample_bilinear_fwd(&logits_small, 4).unwrap(); });
    let dy_up = t(8, 4, 64, 64, 12);
    bench("upsample x4 bwd", reps, || { basic::upsample_bilinear_bwd(logits_small.shape(), &dy_up, 4); });

    let logits = t(8, 4, 64, 64, 13);
    let labels = Labels::new(8, 64, 64, (0..8*64*64).map(|i| (i % 4) as u8).collect()).unwrap();
    let settings = CeSettings { class_weights: vec![1.0; 4], keep_fraction: 1.0, ignore_label: 255 };
    bench("ce fwd (8x4x64x64)", reps, || { loss::ce_fwd(&logits, &labels, &settings).unwrap(); });
    let (_, kept, wsum) = loss::ce_fwd(&logits, &labels, &settings).unwrap();
    bench("ce bwd", reps, || { loss::ce_bwd(&logits, &labels, &settings, &kept, wsum, 1.0); });

    // scale ops at CSI shapes
    let th: Vec<Tensor> = (0..5).map(|i| t(8, 18, 16, 16, 20+i)).collect();
    let thr: Vec<&Tensor> = th.iter().collect();
    bench("scale_dot fwd (K=5,Ce=18)", reps, || { scale::scale_dot_fwd(&thr, &thr).unwrap(); });
    let dlog = t(8, 25, 16, 16, 30);
    bench("scale_dot bwd", reps, || { scale::scale_dot_bwd(&thr, &thr, &dlog); });
    let wts = scale::row_softmax_fwd(&dlog, 5).unwrap();
    bench("row_softmax fwd", reps, || { scale::row_softmax_fwd(&dlog, 5).unwrap(); });
    let xs: Vec<Tensor> = (0..5).map(|i| t(8, 32, 16, 16, 40+i)).collect();
    let xsr: Vec<&Tensor> = xs.iter().collect();
    bench("scale_mix fwd (K=5,C=32)", reps, || { scale::scale_mix_fwd(&wts, &xsr).unwrap(); });
    let dys: Vec<Tensor> = (0..5).map(|i| t(8, 32, 16, 16, 50+i)).collect();
    bench("scale_mix bwd", reps, || { scale::scale_mix_bwd(&wts, &xsr, &dys); });

    // 1x1 convs at SA shapes
    let cat = t(8, 160, 16, 16, 60); let wbott = t(40, 160, 1, 1, 61);
    bench("sa bottleneck conv fwd (160->40@16)", reps, || { conv::conv1x1_fwd(&cat, &wbott, None).unwrap(); });
    let dyb = t(8, 40, 16, 16, 62);
    bench("sa bottleneck conv bwd", reps, || { conv::conv1x1_bwd(&cat, &wbott, &dyb).unwrap(); });

    fn x1_16() -> Tensor { t(8, 16, 64, 64, 100) }
}
