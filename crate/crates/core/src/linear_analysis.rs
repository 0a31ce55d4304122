//! Linear-model analysis of the reconstruction problem.
//!
//! For an affine model `f(x) = ⟨w, x⟩ + b` trained on `E = 𝓛(X̄θ, Y)/N + ρ/2‖θ‖²`
//! with `X̄ = [X 1]`, optimality reads `X̄ᵀ∇𝓛(X̄θ*, Y)/N + ρθ* = 0`: only
//! `L·N` scalar conditions tie the `N·K` unknown inputs to θ*. This module
//! measures that residual, counts the equations, and builds datasets that
//! satisfy optimality without resembling the training data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, logit_input_grad, Dataset, LossSpec, ModelSpec, ParamVector};
use crate::numcore::{dot, norm2, rank, Matrix};
use crate::recon_gradpen::penalty;

/// Default logit margin for the collapse construction; `ln(1 + e⁻²⁰) ≈ 2e-9`.
pub const COLLAPSE_MARGIN: f64 = 20.0;
/// Penalty a collapse dataset must reach to be returned.
pub const COLLAPSE_PENALTY_BOUND: f64 = 1e-12;

fn affine_parts<'a>(theta: &'a ParamVector, k: usize) -> Result<(&'a [f64], f64)> {
    if theta.num_layers() != 1 || theta.weights(0).len() != k || theta.bias(0).len() != 1 {
        return Err(Error::Config(format!(
            "an affine model with {k} inputs and a scalar output is required, got {} parameters in {} layers",
            theta.len(),
            theta.num_layers()
        )));
    }
    Ok((theta.weights(0), theta.bias(0)[0]))
}

/// `‖X̄ᵀ∇𝓛(X̄θ*, Y)/N + ρθ*‖₂`, assembled directly from the affine layout.
pub fn check_stationarity(data: &Dataset, theta_star: &ParamVector, loss: &LossSpec) -> Result<f64> {
    loss.validate()?;
    let k = data.dim();
    let (w, b) = affine_parts(theta_star, k)?;
    let n = data.len() as f64;
    let mut r: Vec<f64> = theta_star.as_slice().iter().map(|t| loss.weight_decay * t).collect();
    for (x, &y) in data.inputs.row_iter().zip(&data.labels) {
        let d = loss.d1(dot(w, x) + b, y) / n;
        for (rj, xj) in r[..k].iter_mut().zip(x) {
            *rj += d * xj;
        }
        r[k] += d;
    }
    let v = norm2(&r);
    if !v.is_finite() {
        return Err(Error::Numeric("stationarity residual is not finite".into()));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderdeterminationReport {
    /// `L·N`
    pub n_equations: usize,
    /// `N·K`
    pub n_unknowns: usize,
    /// `N − rank(X̄)` when the inputs are known, `max(0, N − (K+1))` otherwise.
    pub kernel_dim_lower_bound: usize,
    /// Stationarity residual, when an instance was supplied.
    pub residual: Option<f64>,
}

/// A concrete affine instance for [`underdetermination_report`].
#[derive(Debug, Clone, Copy)]
pub struct Instance<'a> {
    pub data: &'a Dataset,
    pub theta_star: &'a ParamVector,
    pub loss: &'a LossSpec,
}

pub fn underdetermination_report(n: usize, k: usize, l: usize, instance: Option<Instance<'_>>) -> Result<UnderdeterminationReport> {
    if n == 0 || k == 0 || l == 0 {
        return Err(Error::Config(format!("dimensions must be positive, got N={n}, K={k}, L={l}")));
    }
    let generic = n.saturating_sub(k + 1);
    let (kernel, residual) = match instance {
        None => (generic, None),
        Some(inst) => {
            if inst.data.len() != n || inst.data.dim() != k {
                return Err(Error::Shape(format!(
                    "instance is {}×{}, report asked for N={n}, K={k}",
                    inst.data.len(),
                    inst.data.dim()
                )));
            }
            let kernel = n - rank(&inst.data.augmented(), 1e-10);
            (kernel, Some(check_stationarity(inst.data, inst.theta_star, inst.loss)?))
        }
    };
    Ok(UnderdeterminationReport { n_equations: l * n, n_unknowns: n * k, kernel_dim_lower_bound: kernel, residual })
}

/// Rows `xᵢ = (yᵢ − b)·w/‖w‖²`, optionally shifted by the component of
/// `offset` orthogonal to `w`, so that `⟨w, xᵢ⟩ + b = yᵢ`.
pub fn construct_interpolating_inputs(theta_star: &ParamVector, y: &[f64], offset: Option<&Matrix>) -> Result<Matrix> {
    if theta_star.num_layers() != 1 || theta_star.bias(0).len() != 1 {
        return Err(Error::Config("an affine model with a scalar output is required".into()));
    }
    let w = theta_star.weights(0);
    let b = theta_star.bias(0)[0];
    let k = w.len();
    if let Some(o) = offset {
        if o.shape() != (y.len(), k) {
            return Err(Error::Shape(format!("offset is {:?}, expected ({}, {k})", o.shape(), y.len())));
        }
    }
    let ww = dot(w, w);
    let mut x = Matrix::zeros(y.len(), k);
    if ww == 0.0 {
        if let Some(bad) = y.iter().find(|&&yi| yi != b) {
            return Err(Error::Numeric(format!("w = 0: the model outputs {b} everywhere and cannot fit label {bad}")));
        }
    } else {
        for (i, &yi) in y.iter().enumerate() {
            let s = (yi - b) / ww;
            for (xj, wj) in x.row_mut(i).iter_mut().zip(w) {
                *xj = s * wj;
            }
        }
    }
    if let (Some(o), true) = (offset, ww > 0.0) {
        for i in 0..y.len() {
            let oi = o.row(i);
            let c = dot(oi, w) / ww;
            for ((xj, oj), wj) in x.row_mut(i).iter_mut().zip(oi).zip(w) {
                *xj += oj - c * wj;
            }
        }
    }
    Ok(x)
}

/// Moves `x` until `y·f(x) ≥ margin`, stepping along the logit gradient.
pub fn push_to_margin(spec: &ModelSpec, theta: &ParamVector, x: &[f64], y: f64, margin: f64) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    let target = margin + 1e-6 * (1.0 + margin.abs());
    for _ in 0..200 {
        let m = y * logit(spec, theta, &x)?;
        if m >= margin {
            return Ok(x);
        }
        let g = logit_input_grad(spec, theta, &x)?;
        let gg = dot(&g, &g);
        if gg == 0.0 || !gg.is_finite() {
            return Err(Error::Numeric(format!("logit is flat at the seed; margin stuck at {m}")));
        }
        // linear extrapolation, halved until the margin actually improves
        let mut s = y * (target - m) / gg;
        loop {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + s * b).collect();
            if y * logit(spec, theta, &trial)? > m {
                x = trial;
                break;
            }
            s *= 0.5;
            if s.abs() < 1e-300 {
                return Err(Error::Numeric(format!("margin search stalled at {m}")));
            }
        }
    }
    let m = y * logit(spec, theta, &x)?;
    Err(Error::Numeric(format!("margin search did not reach {margin}; achieved {m}")))
}

fn logit(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<f64> {
    Ok(forward(spec, theta, &Matrix::from_vec(1, x.len(), x.to_vec())?)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collapse {
    pub data: Dataset,
    /// `y·f(x_seed)`
    pub margin: f64,
    /// Gradient penalty of `data` under the loss it was verified with.
    pub penalty: f64,
}

/// `n` copies of `x_seed` labelled `y_target`. The seed must already be
/// classified with `y·f ≥ margin_min`, and the resulting penalty under `loss`
/// must not exceed [`COLLAPSE_PENALTY_BOUND`].
pub fn construct_collapse(
    x_seed: &[f64],
    spec: &ModelSpec,
    theta_star: &ParamVector,
    y_target: f64,
    n: usize,
    loss: &LossSpec,
    margin_min: f64,
) -> Result<Collapse> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("collapse needs at least one row".into()));
    }
    if x_seed.len() != spec.input_dim {
        return Err(Error::Shape(format!("seed has {} entries, model expects {}", x_seed.len(), spec.input_dim)));
    }
    let margin = y_target * logit(spec, theta_star, x_seed)?;
    if !(margin >= margin_min) {
        return Err(Error::Numeric(format!("insufficient margin: achieved {margin}, need {margin_min}")));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|_| x_seed.to_vec()).collect();
    let data = Dataset::new(Matrix::from_rows(&rows)?, vec![y_target; n])?;
    let p = penalty(spec, theta_star, &data, loss)?;
    if p > COLLAPSE_PENALTY_BOUND {
        return Err(Error::Numeric(format!(
            "collapse penalty {p:e} exceeds {COLLAPSE_PENALTY_BOUND:e} at margin {margin}"
        )));
    }
    Ok(Collapse { data, margin, penalty: p })
}
