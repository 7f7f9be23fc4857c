//! Parameterized building blocks shared by the model components.

use std::cell::RefCell;

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Mode, Param, SharedParam, Tape, ValId};
use crate::tensor::{Shape, Tensor};

/// Dilated 3x3 convolution with He-normal initialization.
pub struct Conv2dLayer {
    pub w: SharedParam,
    pub b: Option<SharedParam>,
    pub dilation: usize,
}

impl Conv2dLayer {
    pub fn new(name: &str, cin: usize, cout: usize, dilation: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let stddev = (2.0 / (cin * 9) as f64).sqrt();
        let w = Param::new(
            format!("{name}.w"),
            Tensor::randn(Shape::new(cout, cin, 3, 3)?, rng, stddev)?,
            true,
        );
        let b = if bias {
            Some(Param::new(format!("{name}.b"), Tensor::zeros(Shape::new(1, cout, 1, 1)?), true))
        } else {
            None
        };
        Ok(Conv2dLayer { w, b, dilation })
    }

    pub fn forward(&self, tape: &mut Tape, x: ValId) -> Result<ValId> {
        let w = tape.param(&self.w);
        let b = self.b.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.dilation)
    }

    pub fn params(&self) -> Vec<SharedParam> {
        let mut ps = vec![self.w.clone()];
        if let Some(b) = &self.b {
            ps.push(b.clone());
        }
        ps
    }
}

/// Per-position linear map over channels (1x1 convolution).
pub struct Conv1x1Layer {
    pub w: SharedParam,
    pub b: Option<SharedParam>,
}

impl Conv1x1Layer {
    pub fn new(name: &str, cin: usize, cout: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let stddev = (2.0 / cin as f64).sqrt();
        let w = Param::new(
            format!("{name}.w"),
            Tensor::randn(Shape::new(cout, cin, 1, 1)?, rng, stddev)?,
            true,
        );
        let b = if bias {
            Some(Param::new(format!("{name}.b"), Tensor::zeros(Shape::new(1, cout, 1, 1)?), true))
        } else {
            None
        };
        Ok(Conv1x1Layer { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, x: ValId) -> Result<ValId> {
        let w = tape.param(&self.w);
        let b = self.b.as_ref().map(|b| tape.param(b));
        tape.conv1x1(x, w, b)
    }

    pub fn params(&self) -> Vec<SharedParam> {
        let mut ps = vec![self.w.clone()];
        if let Some(b) = &self.b {
            ps.push(b.clone());
        }
        ps
    }
}

/// Batch normalization layer owning its running statistics.
///
/// Train mode normalizes with exact full-batch statistics and folds them
/// into the running estimates with momentum; eval mode applies the stored
/// estimates. Scale/shift parameters are exempt from weight decay.
pub struct BnLayer {
    pub gamma: SharedParam,
    pub beta: SharedParam,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnLayer {
    pub fn new(name: &str, c: usize) -> Result<Self> {
        Ok(BnLayer {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(Shape::new(1, c, 1, 1)?, 1.0)?, false),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(Shape::new(1, c, 1, 1)?), false),
            running_mean: RefCell::new(vec![0.0; c]),
            running_var: RefCell::new(vec![1.0; c]),
            momentum: 0.9,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: ValId, mode: Mode) -> Result<ValId> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        match mode {
            Mode::Train => {
                let (out, mean, var) = tape.batchnorm_train(x, gamma, beta, self.eps)?;
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                for c in 0..mean.len() {
                    rm[c] = self.momentum * rm[c] + (1.0 - self.momentum) * mean[c];
                    rv[c] = self.momentum * rv[c] + (1.0 - self.momentum) * var[c];
                }
                Ok(out)
            }
            Mode::Eval => tape.batchnorm_eval(
                x,
                gamma,
                beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                self.eps,
            ),
        }
    }

    pub fn params(&self) -> Vec<SharedParam> {
        vec![self.gamma.clone(), self.beta.clone()]
    }

    /// Pin the statistics and affine parameters so that eval-mode forward is
    /// exactly the identity (used by fixtures that need to see through the
    /// layer).
    pub fn set_identity(&self) {
        self.running_mean.borrow_mut().fill(0.0);
        self.running_var.borrow_mut().fill(1.0 - self.eps);
        self.gamma.borrow_mut().value.data_mut().fill(1.0);
        self.beta.borrow_mut().value.data_mut().fill(0.0);
    }
}
