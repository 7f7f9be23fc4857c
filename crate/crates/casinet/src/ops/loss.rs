//! Weighted softmax cross-entropy over scored pixels, with optional
//! hard-example selection: when `keep_fraction < 1`, only the highest-loss
//! fraction of pixels enters the average.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::labels::Labels;
use crate::tape::CeSettings;
use crate::tensor::Tensor;

/// Per-pixel weighted negative log-softmax. Returns the per-pixel weighted
/// loss and weight for scored pixels, or None for ignored ones.
fn pixel_loss(
    logits: &Tensor,
    labels: &Labels,
    settings: &CeSettings,
    n: usize,
    i: usize,
    j: usize,
) -> Result<Option<(f64, f64)>> {
    let s = logits.shape();
    let y = labels.get(n, i, j);
    if y == settings.ignore_label {
        return Ok(None);
    }
    if y as usize >= s.c {
        return Err(Error::Param(format!(
            "label {y} out of range for {} classes",
            s.c
        )));
    }
    let hw = s.h * s.w;
    let p = i * s.w + j;
    let mut mx = f64::NEG_INFINITY;
    for c in 0..s.c {
        mx = mx.max(logits.data()[(n * s.c + c) * hw + p]);
    }
    let mut lse = 0.0;
    for c in 0..s.c {
        lse += (logits.data()[(n * s.c + c) * hw + p] - mx).exp();
    }
    let lse = mx + lse.ln();
    let nll = lse - logits.data()[(n * s.c + y as usize) * hw + p];
    let w = settings.class_weights[y as usize];
    Ok(Some((w * nll, w)))
}

/// Forward pass. Returns (loss, kept flat pixel indices ascending, sum of
/// kept class weights). With `keep_fraction >= 1` every scored pixel is kept
/// in pixel order, so the plain weighted mean is the identical code path.
pub fn ce_fwd(logits: &Tensor, labels: &Labels, settings: &CeSettings) -> Result<(f64, Vec<u32>, f64)> {
    let s = logits.shape();
    if labels.n != s.n || labels.h != s.h || labels.w != s.w {
        return Err(Error::Shape(format!(
            "labels {}x{}x{} do not match logits {}",
            labels.n, labels.h, labels.w, s
        )));
    }
    if settings.class_weights.len() != s.c {
        return Err(Error::Param(format!(
            "need {} class weights, got {}",
            s.c,
            settings.class_weights.len()
        )));
    }
    if !(settings.keep_fraction > 0.0 && settings.keep_fraction <= 1.0) {
        return Err(Error::Param(format!(
            "keep fraction must be in (0, 1], got {}",
            settings.keep_fraction
        )));
    }

    // (flat pixel index, weighted loss, weight) for every scored pixel,
    // gathered per image in parallel and flattened in image order.
    let per_image: Vec<Result<Vec<(u32, f64, f64)>>> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let mut acc = Vec::new();
            for i in 0..s.h {
                for j in 0..s.w {
                    if let Some((wl, w)) = pixel_loss(logits, labels, settings, n, i, j)? {
                        let flat = ((n * s.h + i) * s.w + j) as u32;
                        acc.push((flat, wl, w));
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut scored: Vec<(u32, f64, f64)> = Vec::new();
    for part in per_image {
        scored.extend(part?);
    }
    if scored.is_empty() {
        return Err(Error::AllPixelsIgnored);
    }

    if settings.keep_fraction < 1.0 {
        let k = ((settings.keep_fraction * scored.len() as f64).ceil() as usize)
            .clamp(1, scored.len());
        // Highest weighted loss first; ties broken by pixel index so the
        // selection is a total order.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored.sort_by_key(|e| e.0);
    }

    let mut loss_sum = 0.0;
    let mut weight_sum = 0.0;
    let mut kept = Vec::with_capacity(scored.len());
    for (flat, wl, w) in &scored {
        loss_sum += wl;
        weight_sum += w;
        kept.push(*flat);
    }
    Ok((loss_sum / weight_sum, kept, weight_sum))
}

/// Gradient w.r.t. logits: `w_y * (softmax - onehot) / weight_sum` on kept
/// pixels, zero elsewhere. The selection itself is treated as constant.
pub fn ce_bwd(
    logits: &Tensor,
    labels: &Labels,
    settings: &CeSettings,
    kept: &[u32],
    weight_sum: f64,
    upstream: f64,
) -> Tensor {
    let s = logits.shape();
    let hw = s.h * s.w;
    let mut dx = Tensor::zeros(s);
    let g = upstream / weight_sum;
    let logit_data = logits.data();
    // kept is ascending, so each image's pixels form one contiguous run.
    dx.data_mut()
        .par_chunks_mut(s.c * hw)
        .enumerate()
        .for_each(|(n, dx_n)| {
            let lo = kept.partition_point(|&f| (f as usize) < n * hw);
            let hi = kept.partition_point(|&f| (f as usize) < (n + 1) * hw);
            for &flat in &kept[lo..hi] {
                let flat = flat as usize;
                let p = flat % hw;
                let y = labels.data()[flat] as usize;
                let w = settings.class_weights[y];
                let mut mx = f64::NEG_INFINITY;
                for c in 0..s.c {
                    mx = mx.max(logit_data[(n * s.c + c) * hw + p]);
                }
                let mut sum = 0.0;
                for c in 0..s.c {
                    sum += (logit_data[(n * s.c + c) * hw + p] - mx).exp();
                }
                for c in 0..s.c {
                    let soft = (logit_data[(n * s.c + c) * hw + p] - mx).exp() / sum;
                    let onehot = if c == y { 1.0 } else { 0.0 };
                    dx_n[c * hw + p] = g * w * (soft - onehot);
                }
            }
        });
    dx
}
