//! Full-batch training of θ: heavy-ball gradient descent, finished off by
//! line-searched Newton-CG steps on smooth models so that the returned point
//! is stationary to a tight tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{hvp_theta, value_and_grad, Dataset, DiffMode, LossSpec, ModelSpec, ParamVector};
use crate::numcore::{axpy, conjugate_gradient, dot, norm2, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaInit {
    /// Every weight drawn independently from U(0, 1).
    UniformStd,
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Gradient-descent iterations.
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
    pub theta_init: ThetaInit,
    /// Newton-CG steps allowed after (or instead of) gradient descent; only
    /// used for twice-differentiable models.
    pub newton_steps: usize,
    /// Gradient norm below which gradient descent hands over to Newton-CG.
    pub newton_switch: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            max_iters: 20_000,
            grad_tol: 1e-8,
            seed: 0,
            theta_init: ThetaInit::UniformStd,
            newton_steps: 500,
            newton_switch: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config(format!("grad_tol must be positive, got {}", self.grad_tol)));
        }
        if let ThetaInit::Gaussian { sigma } = self.theta_init {
            if !(sigma > 0.0) {
                return Err(Error::Config(format!("init sigma must be positive, got {sigma}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub theta_star: ParamVector,
    pub final_grad_norm: f64,
    /// Gradient-descent iterations plus Newton steps.
    pub iters_used: usize,
    pub newton_steps_used: usize,
    pub converged: bool,
    /// Energy before the first update and after every accepted update.
    pub energy_trace: Vec<f64>,
}

pub fn init_theta(spec: &ModelSpec, cfg: &TrainConfig) -> ParamVector {
    let mut rng = RngStream::for_stage(cfg.seed, "theta_init", 0);
    let flat = match cfg.theta_init {
        ThetaInit::UniformStd => rng.uniform_vec(spec.param_count()),
        ThetaInit::Gaussian { sigma } => rng.normal_vec(spec.param_count()).into_iter().map(|v| sigma * v).collect(),
    };
    ParamVector::from_flat(spec, flat).expect("length derived from spec")
}

/// Trains from the seeded initialization in `cfg`.
pub fn train(spec: &ModelSpec, data: &Dataset, loss: &LossSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    train_from(spec, data, loss, cfg, init_theta(spec, cfg))
}

/// Trains from a given starting point.
///
/// Non-convergence is reported through [`TrainReport::converged`]; a
/// non-finite energy aborts with [`Error::Numeric`].
pub fn train_from(
    spec: &ModelSpec,
    data: &Dataset,
    loss: &LossSpec,
    cfg: &TrainConfig,
    theta0: ParamVector,
) -> Result<TrainReport> {
    spec.validate()?;
    loss.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let use_newton = spec.is_smooth() && cfg.newton_steps > 0;
    let handover = if use_newton { cfg.newton_switch.max(cfg.grad_tol) } else { cfg.grad_tol };

    let mut theta = theta0;
    let (mut e, mut g) = value_and_grad(spec, &theta, data, loss)?;
    let mut trace = vec![e];
    let mut velocity = vec![0.0; theta.len()];
    let mut iters = 0;
    let mut gnorm = norm2(g.as_slice());

    while gnorm > handover && iters < cfg.max_iters {
        for (v, gi) in velocity.iter_mut().zip(g.as_slice()) {
            *v = cfg.momentum * *v - cfg.lr * gi;
        }
        axpy(theta.as_mut_slice(), 1.0, &velocity);
        (e, g) = value_and_grad(spec, &theta, data, loss).map_err(|err| diverged(err, iters))?;
        gnorm = norm2(g.as_slice());
        trace.push(e);
        iters += 1;
    }

    let mut newton_used = 0;
    if use_newton && gnorm > cfg.grad_tol {
        let polished = newton_polish(spec, data, loss, theta, cfg.grad_tol, cfg.newton_steps, &mut trace)?;
        theta = polished.theta;
        gnorm = polished.grad_norm;
        newton_used = polished.steps;
    }

    Ok(TrainReport {
        theta_star: theta,
        final_grad_norm: gnorm,
        iters_used: iters + newton_used,
        newton_steps_used: newton_used,
        converged: gnorm <= cfg.grad_tol,
        energy_trace: trace,
    })
}

fn diverged(err: Error, iters: usize) -> Error {
    match err {
        Error::Numeric(msg) => Error::Numeric(format!("training diverged at iteration {iters}: {msg}")),
        other => other,
    }
}

pub(crate) struct Polished {
    pub theta: ParamVector,
    pub grad_norm: f64,
    pub steps: usize,
}

/// Inexact Newton with Armijo backtracking. Directions come from CG on exact
/// Hessian-vector products; if CG meets negative curvature the last CG
/// iterate (or steepest descent) is used instead.
pub(crate) fn newton_polish(
    spec: &ModelSpec,
    data: &Dataset,
    loss: &LossSpec,
    mut theta: ParamVector,
    grad_tol: f64,
    max_steps: usize,
    trace: &mut Vec<f64>,
) -> Result<Polished> {
    let (mut e, mut g) = value_and_grad(spec, &theta, data, loss)?;
    let mut gnorm = norm2(g.as_slice());
    let mut steps = 0;
    while gnorm > grad_tol && steps < max_steps {
        let forcing = gnorm.sqrt().min(0.5);
        let rhs: Vec<f64> = g.as_slice().iter().map(|v| -v).collect();
        let apply = |d: &[f64]| -> Result<Vec<f64>> {
            let dv = ParamVector::from_flat(spec, d.to_vec())?;
            Ok(hvp_theta(spec, &theta, data, loss, &dv, DiffMode::Bilevel)?.into_vec())
        };
        let cg = conjugate_gradient(apply, &rhs, 2 * theta.len() + 10, forcing)?;
        let mut dir = cg.x;
        let mut slope = dot(&dir, g.as_slice());
        if !(slope < 0.0) {
            dir = rhs;
            slope = -gnorm * gnorm;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand = theta.clone();
            axpy(cand.as_mut_slice(), t, &dir);
            if let Ok((ec, gc)) = value_and_grad(spec, &cand, data, loss) {
                let gcn = norm2(gc.as_slice());
                // energy differences vanish in roundoff near the optimum; a
                // smaller gradient is then the acceptance signal
                if ec <= e + 1e-4 * t * slope || (ec <= e + 1e-12 * e.abs() && gcn < gnorm) {
                    accepted = Some((cand, ec, gc, gcn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, ec, gc, gcn)) = accepted else {
            break;
        };
        theta = cand;
        e = ec;
        g = gc;
        gnorm = gcn;
        trace.push(e);
        steps += 1;
    }
    Ok(Polished { theta, grad_norm: gnorm, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, grad_theta, Activation};
    use crate::numcore::{solve_spd, Matrix};

    fn ridge_solution(data: &Dataset, rho: f64) -> Vec<f64> {
        let xb = data.augmented();
        let n = data.len() as f64;
        let mut a = xb.transpose().matmul(&xb).unwrap().scale(1.0 / n);
        for i in 0..a.rows() {
            a.set(i, i, a.get(i, i) + rho);
        }
        let rhs: Vec<f64> = (0..xb.cols())
            .map(|j| (0..data.len()).map(|i| xb.get(i, j) * data.labels[i]).sum::<f64>() / n)
            .collect();
        solve_spd(&a, &rhs).unwrap()
    }

    #[test]
    fn mse_affine_matches_ridge_normal_equations() {
        let mut rng = RngStream::new(21, 0);
        let data = Dataset::new(rng.uniform_matrix(20, 5), rng.normal_vec(20)).unwrap();
        let spec = ModelSpec::affine(5);
        let loss = LossSpec::mse(1e-2);
        let cfg = TrainConfig { seed: 3, ..TrainConfig::default() };
        let report = train(&spec, &data, &loss, &cfg).unwrap();
        assert!(report.converged);
        let want = ridge_solution(&data, 1e-2);
        for (a, b) in report.theta_star.as_slice().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(report.energy_trace.last().unwrap() <= report.energy_trace.first().unwrap());
    }

    #[test]
    fn single_logistic_sample_is_fit() {
        let spec = ModelSpec::affine(3);
        let data = Dataset::binary(Matrix::from_rows(&[vec![0.2, 0.7, 0.4]]).unwrap(), vec![-1.0]).unwrap();
        let loss = LossSpec::logistic(1e-3);
        let report = train(&spec, &data, &loss, &TrainConfig::default()).unwrap();
        assert!(report.converged);
        assert!(report.final_grad_norm <= 1e-8);
        let z = forward(&spec, &report.theta_star, &data.inputs).unwrap();
        assert!(z[0] < 0.0);
    }

    #[test]
    fn gradient_descent_only_path() {
        // no Newton: plain heavy-ball must still reach a loose tolerance
        let mut rng = RngStream::new(22, 0);
        let data = Dataset::new(rng.uniform_matrix(10, 3), rng.normal_vec(10)).unwrap();
        let spec = ModelSpec::affine(3);
        let loss = LossSpec::mse(0.1);
        let cfg = TrainConfig { newton_steps: 0, grad_tol: 1e-6, lr: 0.1, ..TrainConfig::default() };
        let report = train(&spec, &data, &loss, &cfg).unwrap();
        assert!(report.converged, "grad norm {}", report.final_grad_norm);
        assert_eq!(report.newton_steps_used, 0);
    }

    #[test]
    fn smooth_one_hidden_reaches_tight_tolerance() {
        let mut rng = RngStream::new(23, 0);
        let x = rng.uniform_matrix(6, 4);
        let labels = vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let data = Dataset::binary(x, labels).unwrap();
        let spec = ModelSpec::one_hidden(4, 8, Activation::SOFTPLUS_20);
        let loss = LossSpec::logistic(1e-3);
        let cfg = TrainConfig { lr: 0.01, theta_init: ThetaInit::Gaussian { sigma: 0.3 }, ..TrainConfig::default() };
        let report = train(&spec, &data, &loss, &cfg).unwrap();
        assert!(report.converged, "grad norm {}", report.final_grad_norm);
        let g = grad_theta(&spec, &report.theta_star, &data, &loss).unwrap();
        assert!(norm2(g.as_slice()) <= 1e-8);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = RngStream::new(24, 0);
        let data = Dataset::binary(rng.uniform_matrix(6, 4), vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0]).unwrap();
        let spec = ModelSpec::affine(4);
        let loss = LossSpec::logistic(1e-4);
        let a = train(&spec, &data, &loss, &TrainConfig::default()).unwrap();
        let b = train(&spec, &data, &loss, &TrainConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = RngStream::new(25, 0);
        let data = Dataset::new(rng.uniform_matrix(5, 3).scale(100.0), rng.normal_vec(5)).unwrap();
        let spec = ModelSpec::affine(3);
        let cfg = TrainConfig { lr: 10.0, newton_steps: 0, ..TrainConfig::default() };
        let err = train(&spec, &data, &LossSpec::mse(0.0), &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn config_validation() {
        let spec = ModelSpec::affine(1);
        let data = Dataset::binary(Matrix::zeros(1, 1), vec![1.0]).unwrap();
        let loss = LossSpec::logistic(0.0);
        for cfg in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { grad_tol: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(train(&spec, &data, &loss, &cfg), Err(Error::Config(_))));
        }
    }
}
