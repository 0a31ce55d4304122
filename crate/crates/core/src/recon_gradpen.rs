//! Gradient-penalty reconstruction: with θ* fixed, drive the training
//! gradient of the candidate data to zero,
//!
//! ```text
//! min_x  ‖∇_θE(x, y; θ*)‖²
//! ```
//!
//! The x-gradient of the penalty is `2·(∇ₓ∇_θE)ᵀ ∇_θE`, which is one
//! [`mixed_vjp`] with `p = 2·∇_θE`. Subgradients are used, so ReLU models are
//! accepted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{grad_theta, mixed_vjp, Dataset, DiffMode, LossSpec, ModelSpec, ParamVector};
use crate::numcore::{dot, sq_dist, Matrix};
use crate::recon_bilevel::{Method, ReconResult, StopReason, TraceRow};
use crate::trainer::{train_from, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradPenConfig {
    pub lr: f64,
    pub momentum: f64,
    pub iters: usize,
    /// Stop once `‖∇ₓ penalty‖ ≤ stop_tol · N · K`.
    pub stop_tol: f64,
    /// Factor applied to `lr` when a step would increase the penalty.
    pub backoff: f64,
    /// Clip x to [0, 1] after every step.
    pub project_box: bool,
    /// Training run used to report `θ(x_rec)` and its distance to θ*.
    pub final_lower: TrainConfig,
}

impl Default for GradPenConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            iters: 2000,
            stop_tol: 1e-12,
            backoff: 0.5,
            project_box: false,
            final_lower: TrainConfig::default(),
        }
    }
}

impl GradPenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.backoff > 0.0 && self.backoff < 1.0) {
            return Err(Error::Config(format!("backoff must lie in (0, 1), got {}", self.backoff)));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::Config(format!("stop_tol must be positive, got {}", self.stop_tol)));
        }
        self.final_lower.validate()
    }
}

/// `‖∇_θE(x, y; θ*)‖²`
pub fn penalty(spec: &ModelSpec, theta_star: &ParamVector, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    let g = grad_theta(spec, theta_star, data, loss)?;
    let v = dot(g.as_slice(), g.as_slice());
    if !v.is_finite() {
        return Err(Error::Numeric("gradient penalty is not finite".into()));
    }
    Ok(v)
}

/// Penalty and its x-gradient.
pub fn penalty_grad(
    spec: &ModelSpec,
    theta_star: &ParamVector,
    data: &Dataset,
    loss: &LossSpec,
    mode: DiffMode,
) -> Result<(f64, Matrix)> {
    let g = grad_theta(spec, theta_star, data, loss)?;
    let value = dot(g.as_slice(), g.as_slice());
    if !value.is_finite() {
        return Err(Error::Numeric("gradient penalty is not finite".into()));
    }
    let p = ParamVector::from_flat(spec, g.as_slice().iter().map(|v| 2.0 * v).collect())?;
    let grad = mixed_vjp(spec, theta_star, data, loss, &p, mode)?;
    Ok((value, grad))
}

/// Heavy-ball descent on the penalty from `x0`, labels `y` fixed. A step
/// that raises the penalty is rejected, the velocity reset and `lr` shrunk.
pub fn reconstruct_gradpen(
    spec: &ModelSpec,
    theta_star: &ParamVector,
    y: &[f64],
    x0: &Matrix,
    loss: &LossSpec,
    cfg: &GradPenConfig,
) -> Result<ReconResult> {
    spec.validate()?;
    loss.validate()?;
    cfg.validate()?;
    if !theta_star.matches(spec) {
        return Err(Error::Shape("θ* does not match the model".into()));
    }
    if x0.cols() != spec.input_dim || x0.rows() != y.len() {
        return Err(Error::Shape(format!("x0 is {:?}, expected ({}, {})", x0.shape(), y.len(), spec.input_dim)));
    }
    let mode = DiffMode::Subgradient;
    let (n, k) = x0.shape();
    let mut data = Dataset::new(x0.clone(), y.to_vec())?;
    let mut lr = cfg.lr;
    let lr_floor = cfg.lr * 1e-12;
    let mut velocity = Matrix::zeros(n, k);
    let (mut value, mut grad) = penalty_grad(spec, theta_star, &data, loss, mode)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut stalled = false;
    let mut iters = 0;

    while iters < cfg.iters {
        let grad_norm = grad.frobenius_norm();
        trace.push(TraceRow { iter: iters, objective: value, grad_norm, theta_dist: f64::NAN, step: lr });
        if grad_norm <= cfg.stop_tol * (n * k) as f64 {
            converged = true;
            break;
        }
        let mut v_new = velocity.scale(cfg.momentum);
        v_new.axpy(-lr, &grad)?;
        let mut x_new = data.inputs.add(&v_new)?;
        if cfg.project_box {
            x_new.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
        let trial = data.with_inputs(x_new)?;
        match penalty_grad(spec, theta_star, &trial, loss, mode) {
            Ok((v2, g2)) if v2 <= value => {
                data = trial;
                velocity = v_new;
                value = v2;
                grad = g2;
            }
            Ok(_) | Err(Error::Numeric(_)) => {
                lr *= cfg.backoff;
                velocity = Matrix::zeros(n, k);
                if lr <= lr_floor {
                    stalled = true;
                    break;
                }
            }
            Err(e) => return Err(e),
        }
        iters += 1;
    }

    let report = train_from(spec, &data, loss, &cfg.final_lower, theta_star.clone())?;
    let theta_dist = sq_dist(report.theta_star.as_slice(), theta_star.as_slice());
    if let Some(last) = trace.last_mut() {
        last.theta_dist = theta_dist;
    }
    Ok(ReconResult {
        method: Method::GradPen,
        x_rec: data.inputs,
        theta_final: report.theta_star,
        theta_dist,
        trace,
        converged,
        stop_reason: match (converged, stalled) {
            (true, _) => StopReason::Converged,
            (false, true) => StopReason::Stalled,
            _ => StopReason::MaxIters,
        },
        iters,
        settings: serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    })
}
