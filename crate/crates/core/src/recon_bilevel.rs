//! Bilevel reconstruction by implicit differentiation.
//!
//! The attack looks for inputs `x` whose trained parameters `θ(x)` match the
//! released `θ*`:
//!
//! ```text
//! min_x  l(θ*, θ(x)) = ½‖θ(x) − θ*‖²   s.t.  θ(x) ∈ argmin_θ E(x, y; θ)
//! ```
//!
//! Each outer iteration
//!
//! 1. re-solves the lower problem, `θᵏ⁺¹ = argmin_θ E(xᵏ, y; θ)`, warm-started;
//! 2. computes `pᵏ⁺¹ = (∇²_θE + μI)⁻¹ ∇l` by conjugate gradients on exact
//!    Hessian-vector products, where `∇l = θ* − θᵏ⁺¹` is the gradient of `l`
//!    in its first argument;
//! 3. steps `xᵏ⁺¹ = xᵏ − η a(xᵏ)` with `a(xᵏ) = ∇ₓ⟨∇_θE(xᵏ, y; θᵏ⁺¹), pᵏ⁺¹⟩`.
//!
//! By the implicit function theorem `a(x)` is exactly `∇ₓ l(θ*, θ(x))` when
//! `μ = 0` and the lower problem is solved exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{hvp_theta, mixed_vjp, Dataset, DiffMode, LossSpec, ModelSpec, ParamVector};
use crate::numcore::{conjugate_gradient, norm2, sq_dist, Matrix};
use crate::trainer::{train_from, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bilevel,
    #[serde(rename = "gradpen")]
    GradPen,
}

/// Upper-level loss comparing `θ(x)` with `θ*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperLoss {
    /// `½‖θ − θ*‖²`
    #[default]
    HalfSqDist,
}

impl UpperLoss {
    pub fn value(self, theta_star: &[f64], theta: &[f64]) -> f64 {
        match self {
            UpperLoss::HalfSqDist => 0.5 * sq_dist(theta, theta_star),
        }
    }

    /// Gradient in the first argument, `θ* − θ`.
    pub fn grad_first(self, theta_star: &[f64], theta: &[f64]) -> Vec<f64> {
        match self {
            UpperLoss::HalfSqDist => theta_star.iter().zip(theta).map(|(s, t)| s - t).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    /// `None` means `2·P + 20` for `P` parameters; exact arithmetic would
    /// need `P`, rounding needs some slack.
    pub max_iters: Option<usize>,
    /// Relative residual target.
    pub tol: f64,
    /// Damping μ added to the Hessian diagonal.
    pub damping: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self { max_iters: None, tol: 1e-8, damping: 1e-6 }
    }
}

/// Where the first lower-level solve starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerStart {
    /// From the released weights θ*.
    #[default]
    ThetaStar,
    /// From the seeded initialization in the lower [`TrainConfig`].
    Init,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub method: Method,
    /// Initial upper-level step size η.
    pub eta: f64,
    /// η is multiplied by this after an accepted step; rejected steps
    /// (upper loss increased) halve it. `1.0` keeps η fixed after backoffs.
    pub eta_growth: f64,
    pub outer_iters: usize,
    pub upper_loss: UpperLoss,
    pub lower: TrainConfig,
    pub lower_start: LowerStart,
    pub cg: CgConfig,
    /// Stop once `‖a(x)‖ ≤ stop_tol · N · K`.
    pub stop_tol: f64,
    /// Also stop once the upper loss is at most this.
    pub upper_tol: f64,
    /// Clip x to [0, 1] after every step.
    pub project_box: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            method: Method::Bilevel,
            eta: 0.01,
            eta_growth: 1.0,
            outer_iters: 20_000,
            upper_loss: UpperLoss::HalfSqDist,
            lower: TrainConfig::default(),
            lower_start: LowerStart::ThetaStar,
            cg: CgConfig::default(),
            stop_tol: 1e-8,
            upper_tol: 1e-10,
            project_box: false,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.eta_growth >= 1.0) {
            return Err(Error::Config(format!("eta_growth must be >= 1, got {}", self.eta_growth)));
        }
        if !(self.cg.damping >= 0.0) {
            return Err(Error::Config(format!("CG damping must be >= 0, got {}", self.cg.damping)));
        }
        if !(self.cg.tol > 0.0) {
            return Err(Error::Config(format!("CG tolerance must be positive, got {}", self.cg.tol)));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::Config(format!("stop_tol must be positive, got {}", self.stop_tol)));
        }
        if !(self.upper_tol >= 0.0) {
            return Err(Error::Config(format!("upper_tol must be >= 0, got {}", self.upper_tol)));
        }
        self.lower.validate()
    }
}

/// Why an iterative reconstruction returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The gradient or objective met its tolerance.
    Converged,
    MaxIters,
    /// No step of any admissible size decreased the objective.
    Stalled,
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Upper loss for the bilevel attack, gradient penalty for the other.
    pub objective: f64,
    /// Norm of the x-gradient.
    pub grad_norm: f64,
    pub theta_dist: f64,
    pub step: f64,
}

pub const TRACE_CSV_HEADER: [&str; 5] = ["iter", "upper_loss", "grad_norm", "theta_dist", "step"];

pub fn trace_csv_rows(trace: &[TraceRow]) -> Vec<Vec<String>> {
    trace
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                r.objective.to_string(),
                r.grad_norm.to_string(),
                r.theta_dist.to_string(),
                r.step.to_string(),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconResult {
    pub method: Method,
    pub x_rec: Matrix,
    pub theta_final: ParamVector,
    /// `‖θ* − θ_final‖²`
    pub theta_dist: f64,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub iters: usize,
    /// Effective solver settings, for the run manifest.
    pub settings: serde_json::Value,
}

/// Iterate of the bilevel scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x_k: Matrix,
    /// `θ(x_k)`
    pub theta_k: ParamVector,
    pub p_k: ParamVector,
    pub a_k: Matrix,
    pub upper_loss_trace: Vec<f64>,
}

/// `θ(x)`, warm-started. Fails unless the returned point meets
/// `lower.grad_tol`, since implicit differentiation is meaningless otherwise.
pub fn solve_lower(
    spec: &ModelSpec,
    data: &Dataset,
    loss: &LossSpec,
    lower: &TrainConfig,
    theta_warm: &ParamVector,
) -> Result<ParamVector> {
    let report = train_from(spec, data, loss, lower, theta_warm.clone())?;
    if !report.converged {
        return Err(Error::NotConverged {
            solver: "lower-level solve",
            iters: report.iters_used,
            residual: report.final_grad_norm,
            tol: lower.grad_tol,
        });
    }
    Ok(report.theta_star)
}

/// Solves `(∇²_θE + μI) p = g` by matrix-free conjugate gradients.
pub fn inv_hvp(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    loss: &LossSpec,
    g: &ParamVector,
    cg: &CgConfig,
) -> Result<ParamVector> {
    if g.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("inv_hvp right-hand side is not finite".into()));
    }
    let max_iters = cg.max_iters.unwrap_or(2 * theta.len() + 20);
    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let pv = ParamVector::from_flat(spec, v.to_vec())?;
        let mut hv = hvp_theta(spec, theta, data, loss, &pv, DiffMode::Bilevel)?.into_vec();
        crate::numcore::axpy(&mut hv, cg.damping, v);
        Ok(hv)
    };
    let out = conjugate_gradient(apply, g.as_slice(), max_iters, cg.tol)?;
    if out.negative_curvature {
        return Err(Error::Numeric(format!(
            "CG breakdown: non-positive curvature at iteration {} (increase the damping μ = {})",
            out.iters, cg.damping
        )));
    }
    if !out.converged {
        return Err(Error::NotConverged {
            solver: "conjugate gradients",
            iters: out.iters,
            residual: out.residual / norm2(g.as_slice()).max(f64::MIN_POSITIVE),
            tol: cg.tol,
        });
    }
    ParamVector::from_flat(spec, out.x)
}

/// Hypergradient `a(x)` at a lower-level solution `theta_x = θ(x)`.
///
/// Returns `(a, p)`.
pub fn hypergradient(
    spec: &ModelSpec,
    theta_star: &ParamVector,
    data: &Dataset,
    loss: &LossSpec,
    theta_x: &ParamVector,
    upper: UpperLoss,
    cg: &CgConfig,
) -> Result<(Matrix, ParamVector)> {
    let g = ParamVector::from_flat(spec, upper.grad_first(theta_star.as_slice(), theta_x.as_slice()))?;
    let p = inv_hvp(spec, theta_x, data, loss, &g, cg)?;
    let a = mixed_vjp(spec, theta_x, data, loss, &p, DiffMode::Bilevel)?;
    if !a.is_finite() {
        return Err(Error::Numeric("hypergradient is not finite".into()));
    }
    Ok((a, p))
}

/// Runs the bilevel attack from `x0` with labels `y` fixed.
pub fn reconstruct(
    spec: &ModelSpec,
    theta_star: &ParamVector,
    y: &[f64],
    x0: &Matrix,
    loss: &LossSpec,
    cfg: &ReconConfig,
) -> Result<ReconResult> {
    let mut solver = BilevelSolver::new(spec, theta_star, y, x0, loss, cfg)?;
    while solver.iters < cfg.outer_iters && !solver.converged && !solver.stalled {
        solver.step()?;
    }
    Ok(solver.finish())
}

/// Stateful driver of the bilevel iteration; [`reconstruct`] runs it to
/// completion.
pub struct BilevelSolver<'a> {
    spec: &'a ModelSpec,
    theta_star: &'a ParamVector,
    loss: &'a LossSpec,
    cfg: &'a ReconConfig,
    data: Dataset,
    state: SolverState,
    eta: f64,
    trace: Vec<TraceRow>,
    iters: usize,
    converged: bool,
    stalled: bool,
}

impl<'a> BilevelSolver<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        theta_star: &'a ParamVector,
        y: &[f64],
        x0: &Matrix,
        loss: &'a LossSpec,
        cfg: &'a ReconConfig,
    ) -> Result<Self> {
        spec.validate()?;
        loss.validate()?;
        cfg.validate()?;
        if !spec.is_smooth() {
            return Err(Error::Nonsmooth("bilevel reconstruction"));
        }
        if !theta_star.matches(spec) {
            return Err(Error::Shape("θ* does not match the model".into()));
        }
        if x0.cols() != spec.input_dim || x0.rows() != y.len() {
            return Err(Error::Shape(format!(
                "x0 is {:?}, expected ({}, {})",
                x0.shape(),
                y.len(),
                spec.input_dim
            )));
        }
        let data = Dataset::new(x0.clone(), y.to_vec())?;
        let start = match cfg.lower_start {
            LowerStart::ThetaStar => theta_star.clone(),
            LowerStart::Init => crate::trainer::init_theta(spec, &cfg.lower),
        };
        let theta_k = solve_lower(spec, &data, loss, &cfg.lower, &start)?;
        let l = cfg.upper_loss.value(theta_star.as_slice(), theta_k.as_slice());
        let state = SolverState {
            x_k: x0.clone(),
            p_k: ParamVector::zeros(spec),
            a_k: Matrix::zeros(x0.rows(), x0.cols()),
            theta_k,
            upper_loss_trace: vec![l],
        };
        Ok(Self {
            spec,
            theta_star,
            loss,
            cfg,
            data,
            state,
            eta: cfg.eta,
            trace: Vec::new(),
            iters: 0,
            converged: false,
            stalled: false,
        })
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    fn upper(&self, theta: &ParamVector) -> f64 {
        self.cfg.upper_loss.value(self.theta_star.as_slice(), theta.as_slice())
    }

    /// One outer iteration: hypergradient at `x_k`, then a step on x that
    /// does not increase the upper loss.
    pub fn step(&mut self) -> Result<()> {
        let (spec, loss, cfg) = (self.spec, self.loss, self.cfg);
        let l = *self.state.upper_loss_trace.last().expect("trace starts non-empty");
        let (a, p) = hypergradient(spec, self.theta_star, &self.data, loss, &self.state.theta_k, cfg.upper_loss, &cfg.cg)?;
        let a_norm = a.frobenius_norm();
        self.trace.push(TraceRow { iter: self.iters, objective: l, grad_norm: a_norm, theta_dist: 2.0 * l, step: self.eta });
        self.state.a_k = a;
        self.state.p_k = p;
        let (n, k) = self.data.inputs.shape();
        if a_norm <= cfg.stop_tol * (n * k) as f64 || l <= cfg.upper_tol {
            self.converged = true;
            return Ok(());
        }

        let floor = cfg.eta * 1e-12;
        loop {
            let mut x_new = self.state.x_k.clone();
            x_new.axpy(-self.eta, &self.state.a_k)?;
            if cfg.project_box {
                x_new.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
            let trial = self.data.with_inputs(x_new)?;
            match solve_lower(spec, &trial, loss, &cfg.lower, &self.state.theta_k) {
                Ok(theta_new) => {
                    let l_new = self.upper(&theta_new);
                    if l_new <= l {
                        self.state.x_k = trial.inputs.clone();
                        self.data = trial;
                        self.state.theta_k = theta_new;
                        self.state.upper_loss_trace.push(l_new);
                        self.eta *= cfg.eta_growth;
                        break;
                    }
                }
                Err(Error::NotConverged { .. } | Error::Numeric(_)) if self.eta > floor => {}
                Err(e) => return Err(e),
            }
            self.eta *= 0.5;
            if self.eta <= floor {
                // no step of any admissible size decreases the upper loss
                self.stalled = true;
                break;
            }
        }
        self.iters += 1;
        Ok(())
    }

    pub fn finish(self) -> ReconResult {
        let theta_dist = 2.0 * self.state.upper_loss_trace.last().copied().unwrap_or(0.0);
        ReconResult {
            method: Method::Bilevel,
            x_rec: self.state.x_k,
            theta_final: self.state.theta_k,
            theta_dist,
            trace: self.trace,
            converged: self.converged,
            stop_reason: if self.converged {
                StopReason::Converged
            } else if self.stalled {
                StopReason::Stalled
            } else {
                StopReason::MaxIters
            },
            iters: self.iters,
            settings: serde_json::to_value(self.cfg).unwrap_or(serde_json::Value::Null),
        }
    }
}
