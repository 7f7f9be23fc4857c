use casinet::config::ModelConfig;
use casinet::data::{generate_split, SceneSpec};
use casinet::model::SegModel;
use casinet::optim::OptimConfig;
use casinet::train::{train, LossConfig, TrainOptions};
use std::time::Instant;

fn main() {
    let spec = SceneSpec::default();
    let (train_set, val_set, _) = generate_split(&spec, 200, 50).unwrap();
    for (name, use_aspp, use_csi, use_sa) in [
        ("fcn", false, false, false),
        ("aspp_only", true, false, false),
        ("casinet", true, true, true),
    ] {
        let cfg = ModelConfig { use_aspp, use_csi, use_sa, ..ModelConfig::default() };
        let model = SegModel::new(&cfg, 1).unwrap();
        let optim = OptimConfig::default();
        let opts = TrainOptions { eval_interval: 500, seed: 1, ..TrainOptions::default() };
        let t0 = Instant::now();
        let r = train(&model, &train_set, &val_set, &LossConfig::default(), &optim, &opts).unwrap();
        eprintln!(
            "{name}: mIoU {:.4} (pixel acc {:.4}) in {:.0}s; log: {:?}",
            r.final_metrics.miou,
            r.final_metrics.pixel_acc,
            t0.elapsed().as_secs_f64(),
            r.log.iter().map(|l| (l.iter, (l.val_miou * 1000.0).round() / 1000.0)).collect::<Vec<_>>()
        );
    }
}
