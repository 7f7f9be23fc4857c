//! Training loop: class-balanced cross-entropy with auxiliary supervision,
//! momentum SGD under the poly schedule, periodic validation, and CSV/JSON
//! artifacts.

use std::io::Write;
use std::path::PathBuf;

use crate::config::parse;
use crate::data::{flip_image_horizontal, SegSample};
use crate::error::{Error, Result};
use crate::labels::Labels;
use crate::metrics::{argmax_predictions, ConfusionMatrix, MetricsReport};
use crate::model::SegModel;
use crate::optim::{poly_lr, OptimConfig, Sgd};
use crate::rng::Rng;
use crate::tape::{CeSettings, Mode, Tape};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum ClassWeights {
    /// Inverse pixel frequency from the training set, mean-normalized and
    /// clipped to [0.1, 10].
    Auto,
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub class_weights: ClassWeights,
    pub ohem_keep_fraction: f64,
    pub ignore_label: u8,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { class_weights: ClassWeights::Auto, ohem_keep_fraction: 1.0, ignore_label: 255 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if let ClassWeights::Given(ws) = &self.class_weights {
            if ws.iter().any(|&w| !(w > 0.0)) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        if !(self.ohem_keep_fraction > 0.0 && self.ohem_keep_fraction <= 1.0) {
            return Err(Error::Config("ohem_keep_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let cw = match &self.class_weights {
            ClassWeights::Auto => "auto".to_string(),
            ClassWeights::Given(ws) => {
                ws.iter().map(|w| format!("{w}")).collect::<Vec<_>>().join(",")
            }
        };
        vec![
            ("class_weights".into(), cw),
            ("ohem_keep_fraction".into(), format!("{}", self.ohem_keep_fraction)),
            ("ignore_label".into(), self.ignore_label.to_string()),
        ]
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "class_weights" => {
                self.class_weights = if value == "auto" {
                    ClassWeights::Auto
                } else {
                    let ws = value
                        .split(',')
                        .map(|s| parse::<f64>("class_weights", s.trim()))
                        .collect::<Result<Vec<_>>>()?;
                    ClassWeights::Given(ws)
                };
            }
            "ohem_keep_fraction" => self.ohem_keep_fraction = parse(key, value)?,
            "ignore_label" => self.ignore_label = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Concrete per-class weights for a training set.
    pub fn resolve_weights(&self, train: &[SegSample], num_classes: usize) -> Result<Vec<f64>> {
        match &self.class_weights {
            ClassWeights::Given(ws) => {
                if ws.len() != num_classes {
                    return Err(Error::Config(format!(
                        "{} class weights given for {} classes",
                        ws.len(),
                        num_classes
                    )));
                }
                Ok(ws.clone())
            }
            ClassWeights::Auto => {
                let freq = crate::data::class_frequencies(train, num_classes);
                let inv: Vec<f64> = freq
                    .iter()
                    .map(|&c| if c == 0 { f64::INFINITY } else { 1.0 / c as f64 })
                    .collect();
                let finite: Vec<f64> = inv.iter().copied().filter(|v| v.is_finite()).collect();
                if finite.is_empty() {
                    return Err(Error::Config("no class pixels in training set".into()));
                }
                let mean = finite.iter().sum::<f64>() / finite.len() as f64;
                Ok(inv
                    .iter()
                    .map(|&v| if v.is_finite() { (v / mean).clamp(0.1, 10.0) } else { 10.0 })
                    .collect())
            }
        }
    }
}

/// Combined objective: `main + aux_weight * aux`.
pub fn total_loss(main: f64, aux: f64, aux_weight: f64) -> Result<f64> {
    if !(aux_weight >= 0.0) {
        return Err(Error::Param("aux_weight must be non-negative".into()));
    }
    Ok(main + aux_weight * aux)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub augment_hflip: bool,
    /// Optional CSV log destination, one `iter,lr,train_loss,val_miou` row
    /// per evaluation.
    pub log_csv: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 8,
            eval_interval: 200,
            seed: 0,
            augment_hflip: true,
            log_csv: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Per-iteration total loss.
    pub losses: Vec<f64>,
    pub log: Vec<LogRow>,
    pub final_metrics: MetricsReport,
    pub final_loss: f64,
}

fn stack_batch(samples: &[&SegSample], flips: &[bool]) -> Result<(Tensor, Labels)> {
    let s = samples[0].image.shape();
    let mut images = Tensor::zeros(Shape::new(samples.len(), s.c, s.h, s.w)?);
    let mut label_refs: Vec<Labels> = Vec::with_capacity(samples.len());
    let chw = s.c * s.h * s.w;
    for (b, (sample, &flip)) in samples.iter().zip(flips).enumerate() {
        let img = if flip { flip_image_horizontal(&sample.image) } else { sample.image.clone() };
        images.data_mut()[b * chw..(b + 1) * chw].copy_from_slice(img.data());
        label_refs.push(if flip { sample.labels.flipped_horizontal() } else { sample.labels.clone() });
    }
    let refs: Vec<&Labels> = label_refs.iter().collect();
    Ok((images, Labels::stack(&refs)?))
}

/// Run the model over a dataset in eval mode and compute metrics.
pub fn evaluate(
    model: &SegModel,
    set: &[SegSample],
    batch_size: usize,
    ignore_label: u8,
) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut cm = ConfusionMatrix::new(model.cfg.num_classes);
    for chunk in set.chunks(batch_size.max(1)) {
        let samples: Vec<&SegSample> = chunk.iter().collect();
        let flips = vec![false; samples.len()];
        let (images, labels) = stack_batch(&samples, &flips)?;
        let mut tape = Tape::new();
        let img = tape.input(images);
        let (logits, _) = model.forward(&mut tape, img, Mode::Eval)?;
        let preds = argmax_predictions(tape.value(logits));
        cm.update(&preds, &labels, ignore_label)?;
    }
    let (per_class_iou, miou) = cm.miou()?;
    let pixel_acc = cm.pixel_accuracy()?;
    Ok(MetricsReport { per_class_iou, miou, pixel_acc })
}

/// Train a model in place. Deterministic for a fixed (options, config,
/// dataset) triple.
pub fn train(
    model: &SegModel,
    train_set: &[SegSample],
    val_set: &[SegSample],
    loss_cfg: &LossConfig,
    optim_cfg: &OptimConfig,
    opts: &TrainOptions,
) -> Result<TrainResult> {
    loss_cfg.validate()?;
    optim_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    let settings = CeSettings {
        class_weights: loss_cfg.resolve_weights(train_set, model.cfg.num_classes)?,
        keep_fraction: loss_cfg.ohem_keep_fraction,
        ignore_label: loss_cfg.ignore_label,
    };
    let params = model.params();
    let mut sgd = Sgd::new(&params, optim_cfg);
    let mut order_rng = Rng::derive(opts.seed, "batch.order");
    let mut aug_rng = Rng::derive(opts.seed, "augment");

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    let mut losses = Vec::with_capacity(optim_cfg.total_iters);
    let mut log: Vec<LogRow> = Vec::new();
    let mut csv: Option<std::io::BufWriter<std::fs::File>> = match &opts.log_csv {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            writeln!(f, "iter,lr,train_loss,val_miou")?;
            Some(f)
        }
        None => None,
    };

    let mut interval_losses: Vec<f64> = Vec::new();
    let mut final_metrics: Option<MetricsReport> = None;

    for iter in 0..optim_cfg.total_iters {
        // Assemble the next batch, reshuffling at epoch boundaries.
        let mut samples = Vec::with_capacity(opts.batch_size);
        let mut flips = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor >= order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            samples.push(&train_set[order[cursor]]);
            flips.push(opts.augment_hflip && aug_rng.next_f64() < 0.5);
            cursor += 1;
        }
        let (images, labels) = stack_batch(&samples, &flips)?;

        let mut tape = Tape::new();
        let img = tape.input(images);
        let (logits, aux_logits) = model.forward(&mut tape, img, Mode::Train)?;
        let main = tape.ce_loss(logits, &labels, &settings)?;
        let aux = tape.ce_loss(aux_logits, &labels, &settings)?;
        let weighted_aux = tape.scale(aux, model.cfg.aux_weight)?;
        let total = tape.add(main, weighted_aux)?;
        tape.backward(total)?;
        tape.grads_to_params()?;

        let lr = poly_lr(iter, optim_cfg)?;
        sgd.step(&params, lr)?;
        sgd.zero_grads(&params);

        let loss_value = tape.value(total).scalar();
        losses.push(loss_value);
        interval_losses.push(loss_value);

        let is_eval_point = (iter + 1) % opts.eval_interval.max(1) == 0
            || iter + 1 == optim_cfg.total_iters;
        if is_eval_point && !val_set.is_empty() {
            let metrics = evaluate(model, val_set, opts.batch_size, loss_cfg.ignore_label)?;
            let mean_loss =
                interval_losses.iter().sum::<f64>() / interval_losses.len() as f64;
            interval_losses.clear();
            let row = LogRow { iter: iter + 1, lr, train_loss: mean_loss, val_miou: metrics.miou };
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{},{},{},{}", row.iter, row.lr, row.train_loss, row.val_miou)?;
            }
            log.push(row);
            final_metrics = Some(metrics);
        }
    }
    if let Some(f) = csv.as_mut() {
        f.flush()?;
    }

    let final_metrics = match final_metrics {
        Some(m) => m,
        None => evaluate(model, val_set, opts.batch_size, loss_cfg.ignore_label)?,
    };
    Ok(TrainResult {
        final_loss: *losses.last().expect("at least one iteration"),
        losses,
        log,
        final_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SceneSpec};

    #[test]
    fn total_loss_uses_aux_weight() {
        assert!((total_loss(1.0, 0.5, 0.4).unwrap() - 1.2).abs() < 1e-15);
        assert_eq!(total_loss(2.0, 123.0, 0.0).unwrap(), 2.0);
        assert_eq!(total_loss(0.0, 0.0, 0.4).unwrap(), 0.0);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn auto_weights_are_clipped_inverse_frequency() {
        let spec = SceneSpec { image_size: 32, ..SceneSpec::default() };
        let set = generate(&spec, 8).unwrap();
        let cfg = LossConfig::default();
        let ws = cfg.resolve_weights(&set, 4).unwrap();
        assert_eq!(ws.len(), 4);
        assert!(ws.iter().all(|&w| (0.1..=10.0).contains(&w)));
        // Background dominates, so its weight is the smallest.
        let min = ws.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(ws[0], min);
    }

    #[test]
    fn given_weights_must_match_class_count() {
        let spec = SceneSpec { image_size: 16, ..SceneSpec::default() };
        let set = generate(&spec, 2).unwrap();
        let cfg = LossConfig {
            class_weights: ClassWeights::Given(vec![1.0, 2.0]),
            ..LossConfig::default()
        };
        assert!(cfg.resolve_weights(&set, 4).is_err());
    }
}
