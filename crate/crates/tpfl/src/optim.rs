//! Optimizers for the prompt parameters.
//!
//! Plain SGD exists for analytically checkable tests (one step is exactly
//! `p − lr·g`); Adam with an optional cosine learning-rate schedule over the
//! global rounds is the training default. Optimizer state is created fresh
//! for every client update, since prompts are re-initialized from the global
//! state each round and stale moments would refer to parameters that no
//! longer exist.

use crate::diffgraph::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl OptimKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheduler {
    Constant,
    Cosine,
}

impl Scheduler {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Scheduler::Constant),
            "cosine" => Ok(Scheduler::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown scheduler '{other}' (expected none or cosine)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheduler::Constant => "none",
            Scheduler::Cosine => "cosine",
        }
    }

    /// Learning rate for a 1-based round out of `total` rounds: full rate on
    /// round 1, half-cosine decay toward zero by the end.
    pub fn lr(&self, alpha: f64, round: usize, total: usize) -> f64 {
        match self {
            Scheduler::Constant => alpha,
            Scheduler::Cosine => {
                let t = (round - 1) as f64 / total.max(1) as f64;
                alpha * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer state.
pub enum Optimizer {
    Sgd,
    Adam {
        m: Tensor,
        v: Tensor,
        t: usize,
    },
}

impl Optimizer {
    pub fn new(kind: OptimKind, shape: &[usize]) -> Self {
        match kind {
            OptimKind::Sgd => Optimizer::Sgd,
            OptimKind::Adam => Optimizer::Adam {
                m: Tensor::zeros(shape),
                v: Tensor::zeros(shape),
                t: 0,
            },
        }
    }

    /// One in-place update of `param` against `grad`.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        match self {
            Optimizer::Sgd => {
                for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for ((p, g), (mi, vi)) in param
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                {
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}
