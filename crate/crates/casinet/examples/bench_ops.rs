use casinet::config::ModelConfig;
use casinet::data::{generate_split, SceneSpec};
use casinet::labels::Labels;
use casinet::model::SegModel;
use casinet::tape::{CeSettings, Mode, Tape};
use std::time::Instant;

fn main() {
    let spec = SceneSpec::default();
    let (train_set, _, _) = generate_split(&spec, 8, 1).unwrap();
    let cfg = ModelConfig::default();
    let model = SegModel::new(&cfg, 1).unwrap();

    // batch of 8
    let s = train_set[0].image.shape();
    let mut images = casinet::tensor::Tensor::zeros(casinet::tensor::Shape::new(8, 3, s.h, s.w).unwrap());
    let chw = 3 * s.h * s.w;
    for b in 0..8 {
        images.data_mut()[b*chw..(b+1)*chw].copy_from_slice(train_set[b].image.data());
    }
    let labels = {
        let refs: Vec<&Labels> = train_set[..8].iter().map(|t| &t.labels).collect();
        Labels::stack(&refs).unwrap()
    };
    let settings = CeSettings { class_weights: vec![1.0; 4], keep_fraction: 1.0, ignore_label: 255 };

    // forward only
    let t0 = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let img = tape.input(images.clone());
        let (logits, aux) = model.forward(&mut tape, img, Mode::Train).unwrap();
        let main = tape.ce_loss(logits, &labels, &settings).unwrap();
        let aux = tape.ce_loss(aux, &labels, &settings).unwrap();
        let w = tape.scale(aux, 0.4).unwrap();
        let _ = tape.add(main, w).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    // forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let img = tape.input(images.clone());
        let (logits, aux) = model.forward(&mut tape, img, Mode::Train).unwrap();
        let main = tape.ce_loss(logits, &labels, &settings).unwrap();
        let aux = tape.ce_loss(aux, &labels, &settings).unwrap();
        let w = tape.scale(aux, 0.4).unwrap();
        let total = tape.add(main, w).unwrap();
        tape.backward(total).unwrap();
        tape.grads_to_params().unwrap();
        for p in model.params() { p.borrow_mut().zero_grad(); }
    }
    let full = t0.elapsed().as_secs_f64() / reps as f64;
    eprintln!("forward: {:.1} ms; forward+backward: {:.1} ms", fwd*1000.0, full*1000.0);
    eprintln!("per-op totals over {} full iterations:\n{}", reps, casinet::profile::report());
}
