//! Central-difference verification of analytic gradients.
//!
//! For a scalar-valued forward function and a set of parameters, compares
//! the tape gradient against (f(p+h) - f(p-h)) / 2h per sampled coordinate,
//! reporting the relative error |a - n| / max(1, |a|, |n|).

use std::io::Write;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::SharedParam;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap())
    }

    /// Line-oriented text form: `param_name coord analytic numeric rel_err`.
    pub fn write_lines<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            writeln!(
                w,
                "{} {} {:.12e} {:.12e} {:.3e}",
                e.param, e.coord, e.analytic, e.numeric, e.rel_err
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Check the gradients produced by `f` against central differences.
///
/// `f(true)` must run forward and backward, accumulating gradients into the
/// parameters (which arrive zeroed); `f(false)` only needs the loss value.
/// Coordinates are sampled without replacement, at most `max_coords` per
/// parameter tensor.
pub fn gradcheck<F>(
    mut f: F,
    params: &[SharedParam],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(bool) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Param(format!("step size must be positive, got {h}")));
    }
    for p in params {
        p.borrow_mut().zero_grad();
    }
    let base = f(true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("gradcheck base loss".into()));
    }
    let analytic: Vec<Tensor> = params.iter().map(|p| p.borrow().grad.clone()).collect();

    let mut rng = Rng::new(seed);
    let mut report = GradCheckReport::default();
    for (pidx, p) in params.iter().enumerate() {
        let numel = p.borrow().value.numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if numel > max_coords {
            rng.shuffle(&mut coords);
            coords.truncate(max_coords);
            coords.sort_unstable();
        }
        let name = p.borrow().name.clone();
        for coord in coords {
            let orig = p.borrow().value.data()[coord];
            p.borrow_mut().value.data_mut()[coord] = orig + h;
            let lp = f(false)?;
            p.borrow_mut().value.data_mut()[coord] = orig - h;
            let lm = f(false)?;
            p.borrow_mut().value.data_mut()[coord] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::NonFinite(format!("gradcheck perturbation of {name}")));
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[pidx].data()[coord];
            report.entries.push(GradCheckEntry {
                param: name.clone(),
                coord,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    Ok(report)
}
