//! Training-loop properties: loss decreases on the synthetic task, the
//! optimizer/schedule contracts hold end to end, and evaluation metrics are
//! reproducible.

use casinet::config::ModelConfig;
use casinet::data::{generate_split, SceneSpec};
use casinet::model::SegModel;
use casinet::optim::OptimConfig;
use casinet::train::{evaluate, train, LossConfig, TrainOptions};

fn small_scene() -> SceneSpec {
    SceneSpec { image_size: 32, ..SceneSpec::default() }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        k: 3,
        dilations: vec![1, 4, 8],
        branch_channels: 8,
        backbone_channels: 12,
        ..ModelConfig::default()
    }
}

#[test]
fn training_decreases_smoothed_loss_three_seeds() {
    let (train_set, val_set, _) = generate_split(&small_scene(), 32, 8).unwrap();
    let optim = OptimConfig { total_iters: 120, base_lr: 0.01, ..OptimConfig::default() };
    for seed in [1, 2, 3] {
        let model = SegModel::new(&small_model(), seed).unwrap();
        let opts = TrainOptions {
            batch_size: 8,
            eval_interval: 1000,
            seed,
            ..TrainOptions::default()
        };
        let result =
            train(&model, &train_set, &val_set, &LossConfig::default(), &optim, &opts).unwrap();
        let n = result.losses.len();
        let head = &result.losses[..n / 10];
        let tail = &result.losses[n - n / 10..];
        let head_mean = head.iter().sum::<f64>() / head.len() as f64;
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            tail_mean < head_mean,
            "seed {seed}: last-10% mean {tail_mean} not below first-10% mean {head_mean}"
        );
    }
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let (train_set, val_set, _) = generate_split(&small_scene(), 16, 4).unwrap();
    let optim = OptimConfig { total_iters: 20, ..OptimConfig::default() };
    let opts = TrainOptions { batch_size: 4, eval_interval: 10, seed: 5, ..TrainOptions::default() };

    let run = || {
        let model = SegModel::new(&small_model(), 5).unwrap();
        train(&model, &train_set, &val_set, &LossConfig::default(), &optim, &opts).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    assert_eq!(a.final_metrics, b.final_metrics);
    for (x, y) in a.losses.iter().zip(&b.losses) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let (train_set, val_set, _) = generate_split(&small_scene(), 16, 4).unwrap();
    let optim = OptimConfig { total_iters: 12, ..OptimConfig::default() };
    let opts = TrainOptions { batch_size: 8, eval_interval: 100, seed: 9, ..TrainOptions::default() };

    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let model = SegModel::new(&small_model(), 9).unwrap();
            train(&model, &train_set, &val_set, &LossConfig::default(), &optim, &opts).unwrap()
        })
    };
    let single = run(1);
    let multi = run(2);
    assert!(
        (single.final_loss - multi.final_loss).abs() <= 1e-10,
        "single {} vs multi {}",
        single.final_loss,
        multi.final_loss
    );
    assert_eq!(single.final_metrics, multi.final_metrics);
}

#[test]
fn evaluation_is_pure() {
    let (train_set, val_set, _) = generate_split(&small_scene(), 8, 4).unwrap();
    let model = SegModel::new(&small_model(), 3).unwrap();
    let optim = OptimConfig { total_iters: 10, ..OptimConfig::default() };
    let opts = TrainOptions { batch_size: 4, eval_interval: 100, seed: 3, ..TrainOptions::default() };
    train(&model, &train_set, &val_set, &LossConfig::default(), &optim, &opts).unwrap();
    let a = evaluate(&model, &val_set, 4, 255).unwrap();
    let b = evaluate(&model, &val_set, 4, 255).unwrap();
    assert_eq!(a, b);
    // batch size must not change eval results (eval-mode statistics)
    let c = evaluate(&model, &val_set, 1, 255).unwrap();
    assert!((a.miou - c.miou).abs() < 1e-12);
}

#[test]
fn log_rows_written_at_eval_interval() {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("log.csv");
    let (train_set, val_set, _) = generate_split(&small_scene(), 8, 4).unwrap();
    let model = SegModel::new(&small_model(), 4).unwrap();
    let optim = OptimConfig { total_iters: 30, ..OptimConfig::default() };
    let opts = TrainOptions {
        batch_size: 4,
        eval_interval: 10,
        seed: 4,
        log_csv: Some(log_path.clone()),
        ..TrainOptions::default()
    };
    let result =
        train(&model, &train_set, &val_set, &LossConfig::default(), &optim, &opts).unwrap();
    assert_eq!(result.log.len(), 3);
    let text = std::fs::read_to_string(&log_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "iter,lr,train_loss,val_miou");
    assert_eq!(lines.count(), 3);
    assert_eq!(result.log.last().unwrap().iter, 30);
}
