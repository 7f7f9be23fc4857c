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
        ("casinet", true, true, true),
        ("aspp_only", true, false, false),
        ("fcn", false, false, false),
    ] {
        let cfg = ModelConfig { use_aspp, use_csi, use_sa, ..ModelConfig::default() };
        let model = SegModel::new(&cfg, 1).unwrap();
        let optim = OptimConfig { total_iters: 30, ..OptimConfig::default() };
        let opts = TrainOptions { eval_interval: 1000, ..TrainOptions::default() };
        let t0 = Instant::now();
        let r = train(&model, &train_set, &val_set, &LossConfig::default(), &optim, &opts).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        eprintln!(
            "{name}: {:.1} ms/iter (params {}, last loss {:.3}) -> 2000 iters ~ {:.1}s",
            dt / 30.0 * 1000.0,
            model.param_count(),
            r.final_loss,
            dt / 30.0 * 2000.0
        );
    }
}
