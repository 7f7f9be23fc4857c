//! SGD with momentum and decoupled-from-BN weight decay, plus the poly
//! learning-rate schedule.

use crate::config::parse;
use crate::error::{Error, Result};
use crate::tape::SharedParam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            total_iters: 2000,
            poly_power: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::Config("poly_power must be positive".into()));
        }
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("base_lr".into(), format!("{}", self.base_lr)),
            ("momentum".into(), format!("{}", self.momentum)),
            ("weight_decay".into(), format!("{}", self.weight_decay)),
            ("total_iters".into(), self.total_iters.to_string()),
            ("poly_power".into(), format!("{}", self.poly_power)),
        ]
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "base_lr" => self.base_lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "total_iters" => self.total_iters = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Poly schedule: `base_lr * (1 - iter/total)^power`.
pub fn poly_lr(iter: usize, cfg: &OptimConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::Param(format!(
            "iteration {iter} beyond total_iters {}",
            cfg.total_iters
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.total_iters as f64;
    Ok(cfg.base_lr * frac.powf(cfg.poly_power))
}

/// Momentum SGD: `v = momentum * v + grad + wd * param; param -= lr * v`.
/// Weight decay skips parameters flagged as decay-exempt (batch-norm
/// scale/shift).
pub struct Sgd {
    velocity: Vec<Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: &[SharedParam], cfg: &OptimConfig) -> Sgd {
        Sgd {
            velocity: params.iter().map(|p| Tensor::zeros(p.borrow().value.shape())).collect(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &[SharedParam], lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Param(format!("learning rate must be non-negative, got {lr}")));
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let mut guard = p.borrow_mut();
            if !guard.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", guard.name)));
            }
            let wd = if guard.decay { self.weight_decay } else { 0.0 };
            let crate::tape::Param { value, grad, .. } = &mut *guard;
            for ((vel, g), val) in v.data_mut().iter_mut().zip(grad.data()).zip(value.data_mut()) {
                *vel = self.momentum * *vel + g + wd * *val;
                *val -= lr * *vel;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self, params: &[SharedParam]) {
        for p in params {
            p.borrow_mut().zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Param;
    use crate::tensor::Shape;

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        let cfg = OptimConfig::default();
        assert_eq!(poly_lr(0, &cfg).unwrap(), 0.01);
        assert_eq!(poly_lr(cfg.total_iters, &cfg).unwrap(), 0.0);
        let mid = poly_lr(cfg.total_iters / 2, &cfg).unwrap();
        assert!((mid - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 0.0053589).abs() < 1e-6);
        assert!(poly_lr(cfg.total_iters + 1, &cfg).is_err());
    }

    #[test]
    fn poly_lr_strictly_decreasing() {
        let cfg = OptimConfig { total_iters: 100, ..OptimConfig::default() };
        let mut prev = f64::INFINITY;
        for it in 0..=100 {
            let lr = poly_lr(it, &cfg).unwrap();
            assert!(lr < prev, "not strictly decreasing at {it}");
            prev = lr;
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let p = Param::new(
            "p",
            Tensor::from_vec(Shape::new(1, 1, 1, 2).unwrap(), vec![1.0, -2.0]).unwrap(),
            true,
        );
        p.borrow_mut().grad.data_mut().copy_from_slice(&[10.0, -3.0]);
        let params = vec![p.clone()];
        let mut sgd = Sgd::new(&params, &OptimConfig::default());
        sgd.step(&params, 0.0).unwrap();
        assert_eq!(p.borrow().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn plain_gradient_descent_step() {
        // momentum 0, wd 0: p <- p - lr * g; hand-computed scalar step.
        let p = Param::new(
            "p",
            Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![2.0]).unwrap(),
            true,
        );
        p.borrow_mut().grad.data_mut()[0] = 0.5;
        let params = vec![p.clone()];
        let cfg = OptimConfig { momentum: 0.0, weight_decay: 0.0, ..OptimConfig::default() };
        let mut sgd = Sgd::new(&params, &cfg);
        sgd.step(&params, 0.1).unwrap();
        assert!((p.borrow().value.data()[0] - 1.95).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(p) = p^2, grad = 2p: |p| decreases monotonically to < 1e-3 in
        // 100 steps.
        let p = Param::new(
            "p",
            Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![1.0]).unwrap(),
            true,
        );
        let params = vec![p.clone()];
        let cfg = OptimConfig { momentum: 0.0, weight_decay: 0.0, ..OptimConfig::default() };
        let mut sgd = Sgd::new(&params, &cfg);
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let val = p.borrow().value.data()[0];
            p.borrow_mut().grad.data_mut()[0] = 2.0 * val;
            sgd.step(&params, 0.1).unwrap();
            let now = p.borrow().value.data()[0].abs();
            assert!(now < prev, "|p| must decrease monotonically");
            prev = now;
            p.borrow_mut().zero_grad();
        }
        assert!(prev < 1e-3, "final |p| = {prev}");
    }

    #[test]
    fn decay_exempt_params_skip_weight_decay() {
        let decayed = Param::new(
            "w",
            Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![1.0]).unwrap(),
            true,
        );
        let exempt = Param::new(
            "bn.gamma",
            Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![1.0]).unwrap(),
            false,
        );
        let params = vec![decayed.clone(), exempt.clone()];
        let cfg = OptimConfig { momentum: 0.0, weight_decay: 0.1, ..OptimConfig::default() };
        let mut sgd = Sgd::new(&params, &cfg);
        sgd.step(&params, 1.0).unwrap();
        assert!((decayed.borrow().value.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(exempt.borrow().value.data()[0], 1.0);
    }

    #[test]
    fn non_finite_grad_rejected() {
        let p = Param::new(
            "p",
            Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![1.0]).unwrap(),
            true,
        );
        p.borrow_mut().grad.data_mut()[0] = f64::NAN;
        let params = vec![p];
        let mut sgd = Sgd::new(&params, &OptimConfig::default());
        assert!(sgd.step(&params, 0.1).is_err());
    }
}
