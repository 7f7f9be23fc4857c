//! The operations behind the CLI subcommands, callable in-process.

use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{self, SegSample};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, GradCheckReport};
use crate::metrics::MetricsReport;
use crate::model::{build_baseline_variants, SegModel};
use crate::pnm;
use crate::runconfig::RunConfig;
use crate::tape::{CeSettings, Mode, Tape};
use crate::tensor::{Shape, Tensor};
use crate::train::{evaluate, train, TrainOptions, TrainResult};

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("this command needs the {key} key")))
}

fn write_metrics(dir: &Path, metrics: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(metrics)?;
    text.push('\n');
    std::fs::write(dir.join("metrics.json"), text)?;
    Ok(())
}

/// Generate the dataset into `data_dir` and record the resolved config there.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = require(&cfg.data_dir, "data_dir")?;
    let (mut train, val, used_spec) =
        data::generate_split(&cfg.scene, cfg.train_count, cfg.val_count)?;
    train.extend(val);
    data::save_dataset(dir, &train, &used_spec)?;
    cfg.write_resolved(dir)?;
    Ok(())
}

fn load_split(cfg: &RunConfig) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let dir = require(&cfg.data_dir, "data_dir")?;
    let (samples, _) = data::load_dataset(dir)?;
    let needed = cfg.train_count + cfg.val_count;
    if samples.len() < needed {
        return Err(Error::Config(format!(
            "dataset has {} samples, run needs {needed}",
            samples.len()
        )));
    }
    let train = samples[..cfg.train_count].to_vec();
    let val = samples[cfg.train_count..needed].to_vec();
    Ok((train, val))
}

fn train_opts(cfg: &RunConfig, log_csv: Option<PathBuf>) -> TrainOptions {
    TrainOptions {
        batch_size: cfg.batch_size,
        eval_interval: cfg.eval_interval,
        seed: cfg.seed,
        augment_hflip: true,
        log_csv,
    }
}

/// Train on the dataset in `data_dir`; writes checkpoint, training log,
/// metrics, and the resolved config under `out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainResult> {
    let out = require(&cfg.out, "out")?.to_path_buf();
    let (train_set, val_set) = load_split(cfg)?;
    let model = SegModel::new(&cfg.model, cfg.seed)?;
    let result = train(
        &model,
        &train_set,
        &val_set,
        &cfg.loss,
        &cfg.optim,
        &train_opts(cfg, Some(out.join("train_log.csv"))),
    )?;
    save_checkpoint(out.join("checkpoint"), &model)?;
    write_metrics(&out, &result.final_metrics)?;
    cfg.write_resolved(&out)?;
    Ok(result)
}

/// Evaluate a checkpoint on the validation split; refuses a checkpoint whose
/// stored configuration disagrees with the requested model flags.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let out = require(&cfg.out, "out")?.to_path_buf();
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let model = load_checkpoint(ckpt, &cfg.model)?;
    let (_, val_set) = load_split(cfg)?;
    let metrics = evaluate(&model, &val_set, cfg.batch_size, cfg.loss.ignore_label)?;
    write_metrics(&out, &metrics)?;
    cfg.write_resolved(&out)?;
    Ok(metrics)
}

/// The ablation grid: the four module combinations plus one row per design
/// switch, trained with paired seeds on one dataset.
pub fn ablation_variants(cfg: &RunConfig) -> Vec<(String, crate::config::ModelConfig)> {
    let mut variants = build_baseline_variants(&cfg.model);
    {
        let mut c = cfg.model.clone();
        c.use_aspp = true;
        c.use_csi = true;
        c.use_sa = false;
        c.scale_index = false;
        variants.push(("csi_no_scale_index".into(), c));
    }
    {
        let mut c = cfg.model.clone();
        c.use_aspp = true;
        c.use_csi = true;
        c.use_sa = false;
        c.shared_embedding = true;
        variants.push(("csi_shared_embedding".into(), c));
    }
    {
        let mut c = cfg.model.clone();
        c.use_aspp = true;
        c.use_csi = false;
        c.use_sa = true;
        c.sa_activation = crate::config::SaActivation::Softmax;
        variants.push(("sa_softmax".into(), c));
    }
    {
        let mut c = cfg.model.clone();
        c.use_aspp = true;
        c.use_csi = false;
        c.use_sa = true;
        c.sa_channel_shared = true;
        variants.push(("sa_channel_shared".into(), c));
    }
    variants
}

/// Train every ablation variant under the same seed and dataset; writes
/// `ablation.csv` with one `variant,miou` row each.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<(String, f64)>> {
    let out = require(&cfg.out, "out")?.to_path_buf();
    let (train_set, val_set) = load_split(cfg)?;
    let mut rows = Vec::new();
    for (name, model_cfg) in ablation_variants(cfg) {
        let model = SegModel::new(&model_cfg, cfg.seed)?;
        let result = train(&model, &train_set, &val_set, &cfg.loss, &cfg.optim, &train_opts(cfg, None))?;
        rows.push((name, result.final_metrics.miou));
    }
    std::fs::create_dir_all(&out)?;
    let mut csv = String::from("variant,miou\n");
    for (name, miou) in &rows {
        csv.push_str(&format!("{name},{miou}\n"));
    }
    std::fs::write(out.join("ablation.csv"), csv)?;
    cfg.write_resolved(&out)?;
    Ok(rows)
}

/// Write the channel-averaged attention rasters (one per scale) and the
/// K x K affinity rasters for one image under a trained checkpoint. Returns
/// (attention raster count, affinity raster count).
pub fn cmd_dump_attention(cfg: &RunConfig) -> Result<(usize, usize)> {
    let out = require(&cfg.out, "out")?.to_path_buf();
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let image_path = require(&cfg.image, "image")?;
    let model = load_checkpoint(ckpt, &cfg.model)?;
    let image = pnm::load_image(image_path)?;
    let inspection = model.inspect(&image)?;

    let affinity = inspection
        .affinity
        .as_ref()
        .ok_or_else(|| Error::Config("dump-attention needs use_csi=true".into()))?;
    let attention = inspection
        .attention
        .as_ref()
        .ok_or_else(|| Error::Config("dump-attention needs use_sa=true".into()))?;

    std::fs::create_dir_all(&out)?;
    let k = affinity.k;
    for target in 0..k {
        for source in 0..k {
            let raster = affinity.raster(0, target, source);
            pnm::write_pgm(
                out.join(format!("affinity_k{target}_m{source}.pgm")),
                affinity.w,
                affinity.h,
                &pnm::quantize_unit(&raster),
            )?;
        }
    }
    for scale in 0..attention.k() {
        let mean = attention.channel_mean(scale);
        let s = mean.shape();
        pnm::write_pgm(
            out.join(format!("attention_k{scale}.pgm")),
            s.w,
            s.h,
            &pnm::quantize_unit(mean.data()),
        )?;
    }
    cfg.write_resolved(&out)?;
    Ok((attention.k(), k * k))
}

/// Gradient-check the configured model end to end (forward + loss) on a
/// small random input; writes the line-oriented report under `out`.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    let out = require(&cfg.out, "out")?.to_path_buf();
    let model = SegModel::new(&cfg.model, cfg.seed)?;
    let params = model.params();

    let mut rng = crate::rng::Rng::derive(cfg.seed, "gradcheck.input");
    let image = Tensor::randn(Shape::new(1, 3, 8, 8)?, &mut rng, 1.0)?;
    let mut labels = crate::labels::Labels::zeros(1, 8, 8);
    for (i, l) in labels.data_mut().iter_mut().enumerate() {
        *l = (i % cfg.model.num_classes) as u8;
    }
    let settings = CeSettings {
        class_weights: vec![1.0; cfg.model.num_classes],
        keep_fraction: 1.0,
        ignore_label: cfg.loss.ignore_label,
    };
    let aux_weight = cfg.model.aux_weight;

    let report = gradcheck(
        |needs_grad| {
            let mut tape = Tape::new();
            let img = tape.input(image.clone());
            let (logits, aux) = model.forward(&mut tape, img, Mode::Train)?;
            let main = tape.ce_loss(logits, &labels, &settings)?;
            let aux = tape.ce_loss(aux, &labels, &settings)?;
            let weighted = tape.scale(aux, aux_weight)?;
            let total = tape.add(main, weighted)?;
            if needs_grad {
                tape.backward(total)?;
                tape.grads_to_params()?;
            }
            Ok(tape.value(total).scalar())
        },
        &params,
        1e-5,
        40,
        cfg.seed,
    )?;

    std::fs::create_dir_all(&out)?;
    let mut buf = Vec::new();
    report.write_lines(&mut buf)?;
    let summary = format!(
        "max_rel_err {:.3e} over {} coordinates\n",
        report.max_rel_err(),
        report.entries.len()
    );
    buf.extend_from_slice(summary.as_bytes());
    std::fs::write(out.join("gradcheck.txt"), buf)?;
    cfg.write_resolved(&out)?;

    if !report.passes(1e-4) {
        let worst = report.worst().expect("nonempty report");
        return Err(Error::Param(format!(
            "gradient check failed: {} coord {} rel_err {:.3e}",
            worst.param, worst.coord, worst.rel_err
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_grid_has_documented_rows() {
        let cfg = RunConfig::default();
        let names: Vec<String> = ablation_variants(&cfg).into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec![
                "aspp_only",
                "aspp_csi",
                "aspp_sa",
                "casinet",
                "csi_no_scale_index",
                "csi_shared_embedding",
                "sa_softmax",
                "sa_channel_shared",
            ]
        );
    }

    #[test]
    fn commands_require_their_paths() {
        let cfg = RunConfig::default();
        assert!(cmd_gen_data(&cfg).is_err());
        assert!(cmd_train(&cfg).is_err());
        assert!(cmd_eval(&cfg).is_err());
        assert!(cmd_dump_attention(&cfg).is_err());
    }
}
