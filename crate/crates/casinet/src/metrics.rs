//! Confusion-matrix accumulation and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Labels;
use crate::tensor::Tensor;

/// Rows index ground truth, columns index prediction. Pixels carrying the
/// ignore label are not counted.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, truth: u8, pred: u8) {
        self.counts[truth as usize * self.num_classes + pred as usize] += 1;
    }

    pub fn update(&mut self, pred: &Labels, truth: &Labels, ignore_label: u8) -> Result<()> {
        if pred.n != truth.n || pred.h != truth.h || pred.w != truth.w {
            return Err(Error::Shape("prediction/truth label maps differ in shape".into()));
        }
        for (p, t) in pred.data().iter().zip(truth.data()) {
            if *t == ignore_label {
                continue;
            }
            if (*t as usize) >= self.num_classes || (*p as usize) >= self.num_classes {
                return Err(Error::Param(format!(
                    "label out of range: truth {t}, pred {p}, classes {}",
                    self.num_classes
                )));
            }
            self.record(*t, *p);
        }
        Ok(())
    }

    /// From a hand-built matrix, row-major with rows = ground truth.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<ConfusionMatrix> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape("confusion matrix size mismatch".into()));
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    /// Per-class intersection-over-union and their mean. Classes that never
    /// occur (zero denominator) are excluded from the mean and reported as
    /// None.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        if self.total() == 0 {
            return Err(Error::AllPixelsIgnored);
        }
        let mut per_class = Vec::with_capacity(self.num_classes);
        let mut sum = 0.0;
        let mut counted = 0usize;
        for c in 0..self.num_classes {
            let tp = self.count(c, c);
            let fp: u64 = (0..self.num_classes).filter(|&t| t != c).map(|t| self.count(t, c)).sum();
            let fneg: u64 = (0..self.num_classes).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
            let denom = tp + fp + fneg;
            if denom == 0 {
                per_class.push(None);
            } else {
                let iou = tp as f64 / denom as f64;
                per_class.push(Some(iou));
                sum += iou;
                counted += 1;
            }
        }
        if counted == 0 {
            return Err(Error::AllPixelsIgnored);
        }
        Ok((per_class, sum / counted as f64))
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::AllPixelsIgnored);
        }
        let correct: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        Ok(correct as f64 / total as f64)
    }
}

/// Final evaluation artifact written as JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
}

/// Argmax over the class axis; ties resolve to the lowest class index.
pub fn argmax_predictions(logits: &Tensor) -> Labels {
    let s = logits.shape();
    let hw = s.h * s.w;
    let mut out = Labels::zeros(s.n, s.h, s.w);
    for n in 0..s.n {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..s.c {
                let v = logits.data()[(n * s.c + c) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.data_mut()[n * hw + p] = best as u8;
        }
    }
    out
}
