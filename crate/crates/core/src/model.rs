//! Scalar-output classifiers and their training energy
//!
//! ```text
//! E(x, y; θ) = (1/N) Σᵢ ℓ(Φ(xᵢ; θ), yᵢ) + (ρ/2)‖θ‖²
//! ```
//!
//! with analytic first derivatives in θ and in x, exact Hessian-vector
//! products in θ, and the mixed product `∇ₓ⟨∇_θE, p⟩`.
//!
//! Second-order quantities come from one forward-over-reverse pass (the
//! R-operator): differentiating backpropagation along a parameter direction
//! `v` yields both `∇²_θE·v` and, by symmetry of mixed partials,
//! `∇ₓ⟨∇_θE, v⟩`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{axpy, dot, Matrix};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `(1/β)·ln(1 + exp(β t))`; tends to ReLU as β grows.
    Softplus { beta: f64 },
}

impl Activation {
    /// Default smooth surrogate for ReLU.
    pub const SOFTPLUS_20: Activation = Activation::Softplus { beta: 20.0 };

    #[inline]
    pub fn value(self, t: f64) -> f64 {
        match self {
            Activation::Relu => t.max(0.0),
            Activation::Softplus { beta } => {
                let u = beta * t;
                if u > 0.0 {
                    t + (-u).exp().ln_1p() / beta
                } else {
                    u.exp().ln_1p() / beta
                }
            }
        }
    }

    #[inline]
    pub fn d1(self, t: f64) -> f64 {
        match self {
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus { beta } => sigmoid(beta * t),
        }
    }

    #[inline]
    pub fn d2(self, t: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Softplus { beta } => {
                let s = sigmoid(beta * t);
                beta * s * (1.0 - s)
            }
        }
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, Activation::Softplus { .. })
    }
}

#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Affine,
    OneHidden { hidden: usize },
    /// Hidden widths of a fully connected network; the output layer is linear.
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_dim: usize,
    pub output_dim: usize,
    /// `None` exactly for [`Arch::Affine`].
    pub activation: Option<Activation>,
}

impl ModelSpec {
    pub fn affine(input_dim: usize) -> Self {
        Self { arch: Arch::Affine, input_dim, output_dim: 1, activation: None }
    }

    pub fn one_hidden(input_dim: usize, hidden: usize, activation: Activation) -> Self {
        Self { arch: Arch::OneHidden { hidden }, input_dim, output_dim: 1, activation: Some(activation) }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        Self { arch: Arch::Mlp { hidden }, input_dim, output_dim: 1, activation: Some(activation) }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        match &self.arch {
            Arch::Affine => Vec::new(),
            Arch::OneHidden { hidden } => vec![*hidden],
            Arch::Mlp { hidden } => hidden.clone(),
        }
    }

    /// `(fan_in, fan_out)` of every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(self.hidden_widths());
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if self.output_dim != 1 {
            return Err(Error::Config(format!(
                "only scalar-output binary classifiers are supported, got output_dim {}",
                self.output_dim
            )));
        }
        if self.hidden_widths().iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        match (&self.arch, self.activation) {
            (Arch::Affine, Some(_)) => Err(Error::Config("affine models have no activation".into())),
            (Arch::Affine, None) => Ok(()),
            (_, None) => Err(Error::Config("networks with hidden layers need an activation".into())),
            (_, Some(Activation::Softplus { beta })) if !(beta > 0.0) => {
                Err(Error::Config(format!("softplus beta must be positive, got {beta}")))
            }
            _ => Ok(()),
        }
    }

    /// Twice continuously differentiable in θ and x.
    pub fn is_smooth(&self) -> bool {
        self.activation.map_or(true, Activation::is_smooth)
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.arch, Arch::Affine)
    }

    fn activation_or_identity(&self) -> Activation {
        // hidden layers always carry an activation once validated
        self.activation.unwrap_or(Activation::Relu)
    }
}

/// Flattened parameters. Layer `l` is stored as its weight matrix
/// (`fan_out × fan_in`, row-major) followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    dims: Vec<(usize, usize)>,
    flat: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self { dims: spec.layer_dims(), flat: vec![0.0; spec.param_count()] }
    }

    pub fn from_flat(spec: &ModelSpec, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, model needs {}",
                flat.len(),
                spec.param_count()
            )));
        }
        Ok(Self { dims: spec.layer_dims(), flat })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.flat
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    fn offsets(&self, layer: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for &(i, o) in &self.dims[..layer] {
            off += i * o + o;
        }
        let (i, o) = self.dims[layer];
        (off, off + i * o, off + i * o + o)
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (a, b, _) = self.offsets(layer);
        &self.flat[a..b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b, c) = self.offsets(layer);
        &self.flat[b..c]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let (a, b, _) = self.offsets(layer);
        &mut self.flat[a..b]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b, c) = self.offsets(layer);
        &mut self.flat[b..c]
    }

    pub fn matches(&self, spec: &ModelSpec) -> bool {
        self.dims == spec.layer_dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `ln(1 + exp(−y z))`, labels in {−1, +1}.
    Logistic,
    /// `½(z − y)²`
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub weight_decay: f64,
}

impl LossSpec {
    pub fn logistic(weight_decay: f64) -> Self {
        Self { kind: LossKind::Logistic, weight_decay }
    }

    pub fn mse(weight_decay: f64) -> Self {
        Self { kind: LossKind::Mse, weight_decay }
    }

    /// The same loss without the weight-decay term.
    pub fn data_term(self) -> Self {
        Self { weight_decay: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    #[inline]
    pub fn value(&self, z: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => {
                let t = y * z;
                if t > 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                }
            }
            LossKind::Mse => 0.5 * (z - y) * (z - y),
        }
    }

    /// dℓ/dz
    #[inline]
    pub fn d1(&self, z: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => -y * sigmoid(-y * z),
            LossKind::Mse => z - y,
        }
    }

    /// d²ℓ/dz²
    #[inline]
    pub fn d2(&self, z: f64, y: f64) -> f64 {
        match self.kind {
            LossKind::Logistic => {
                let t = y * z;
                y * y * sigmoid(t) * sigmoid(-t)
            }
            LossKind::Mse => 1.0,
        }
    }
}

/// Inputs `N × K` and scalar targets (±1 for classification).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<f64>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!("{} input rows but {} labels", inputs.rows(), labels.len())));
        }
        Ok(Self { inputs, labels })
    }

    /// Like [`Dataset::new`] but requires labels in {−1, +1}.
    pub fn binary(inputs: Matrix, labels: Vec<f64>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::Config(format!("binary labels must be ±1, found {bad}")));
        }
        Self::new(inputs, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn augmented(&self) -> Matrix {
        self.inputs.augmented()
    }

    /// Same labels, different inputs.
    pub fn with_inputs(&self, inputs: Matrix) -> Result<Self> {
        Self::new(inputs, self.labels.clone())
    }

    pub fn has_duplicate_rows(&self) -> bool {
        let n = self.len();
        (0..n).any(|i| {
            (i + 1..n).any(|j| self.labels[i] == self.labels[j] && self.inputs.row(i) == self.inputs.row(j))
        })
    }
}

/// Whether second derivatives may be taken through a nonsmooth activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffMode {
    /// Implicit differentiation: requires a twice-differentiable model.
    Bilevel,
    /// ReLU allowed, with derivative 0 at the kink and zero curvature.
    Subgradient,
}

impl DiffMode {
    fn check(self, spec: &ModelSpec, op: &'static str) -> Result<()> {
        if self == DiffMode::Bilevel && !spec.is_smooth() {
            return Err(Error::Nonsmooth(op));
        }
        Ok(())
    }
}

fn check_inputs(spec: &ModelSpec, theta: &ParamVector, x: &Matrix) -> Result<()> {
    if !theta.matches(spec) {
        return Err(Error::Shape(format!(
            "parameters of length {} do not match model with {} parameters",
            theta.len(),
            spec.param_count()
        )));
    }
    if x.cols() != spec.input_dim {
        return Err(Error::Shape(format!("inputs have {} columns, model expects {}", x.cols(), spec.input_dim)));
    }
    Ok(())
}

fn check_data(spec: &ModelSpec, theta: &ParamVector, data: &Dataset) -> Result<()> {
    check_inputs(spec, theta, &data.inputs)?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok(())
}

/// Activations of one sample, kept for the backward passes.
struct Trace {
    /// Pre-activations per layer; the last one is the scalar logit.
    pre: Vec<Vec<f64>>,
    /// Layer inputs; `post[0]` is the sample itself.
    post: Vec<Vec<f64>>,
}

impl Trace {
    fn logit(&self) -> f64 {
        self.pre.last().map_or(0.0, |z| z[0])
    }
}

fn forward_sample(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Trace {
    let act = spec.activation_or_identity();
    let nl = theta.num_layers();
    let mut pre = Vec::with_capacity(nl);
    let mut post = Vec::with_capacity(nl);
    post.push(x.to_vec());
    for l in 0..nl {
        let w = theta.weights(l);
        let b = theta.bias(l);
        let input = &post[l];
        let fan_in = input.len();
        let z: Vec<f64> = b.iter().enumerate().map(|(o, bo)| bo + dot(&w[o * fan_in..(o + 1) * fan_in], input)).collect();
        if l + 1 < nl {
            post.push(z.iter().map(|&t| act.value(t)).collect());
        }
        pre.push(z);
    }
    Trace { pre, post }
}

/// `out += Wᵀ δ` for a `fan_out × fan_in` weight block.
fn add_transpose_product(out: &mut [f64], w: &[f64], delta: &[f64]) {
    let fan_in = out.len();
    for (o, d) in delta.iter().enumerate() {
        if *d != 0.0 {
            axpy(out, *d, &w[o * fan_in..(o + 1) * fan_in]);
        }
    }
}

/// `G += δ aᵀ` into a row-major weight-gradient block.
fn add_outer(g: &mut [f64], delta: &[f64], a: &[f64]) {
    let fan_in = a.len();
    for (o, d) in delta.iter().enumerate() {
        if *d != 0.0 {
            axpy(&mut g[o * fan_in..(o + 1) * fan_in], *d, a);
        }
    }
}

/// Backpropagates `seed = ∂E/∂logit`, accumulating into `grad` (if given)
/// and returning `∂E/∂x`.
fn backward_sample(
    spec: &ModelSpec,
    theta: &ParamVector,
    trace: &Trace,
    seed: f64,
    mut grad: Option<&mut ParamVector>,
) -> Vec<f64> {
    let act = spec.activation_or_identity();
    let nl = theta.num_layers();
    let mut delta = vec![seed];
    for l in (0..nl).rev() {
        if let Some(g) = grad.as_deref_mut() {
            add_outer(g.weights_mut(l), &delta, &trace.post[l]);
            axpy(g.bias_mut(l), 1.0, &delta);
        }
        let mut da = vec![0.0; trace.post[l].len()];
        add_transpose_product(&mut da, theta.weights(l), &delta);
        if l == 0 {
            return da;
        }
        delta = da.iter().zip(&trace.pre[l - 1]).map(|(d, &z)| d * act.d1(z)).collect();
    }
    unreachable!("networks have at least one layer")
}

/// Directional derivative of backpropagation along parameter direction `v`.
///
/// Returns the contribution of one sample to `R{∇_θE}` (accumulated into
/// `hv` when given) and returns `R{∇ₓE}`.
fn r_backward_sample(
    spec: &ModelSpec,
    theta: &ParamVector,
    v: &ParamVector,
    trace: &Trace,
    loss: &LossSpec,
    y: f64,
    inv_n: f64,
    mut hv: Option<&mut ParamVector>,
) -> Vec<f64> {
    let act = spec.activation_or_identity();
    let nl = theta.num_layers();

    // R-forward: tangents of pre-activations and layer inputs (x is fixed)
    let mut r_pre: Vec<Vec<f64>> = Vec::with_capacity(nl);
    let mut r_post: Vec<Vec<f64>> = Vec::with_capacity(nl);
    r_post.push(vec![0.0; spec.input_dim]);
    for l in 0..nl {
        let w = theta.weights(l);
        let vw = v.weights(l);
        let vb = v.bias(l);
        let a = &trace.post[l];
        let ra = &r_post[l];
        let fan_in = a.len();
        let rz: Vec<f64> = (0..vb.len())
            .map(|o| {
                let row = o * fan_in..(o + 1) * fan_in;
                vb[o] + dot(&vw[row.clone()], a) + dot(&w[row], ra)
            })
            .collect();
        if l + 1 < nl {
            r_post.push(rz.iter().zip(&trace.pre[l]).map(|(r, &z)| r * act.d1(z)).collect());
        }
        r_pre.push(rz);
    }

    let f = trace.logit();
    let rf = r_pre[nl - 1][0];
    let mut delta = vec![loss.d1(f, y) * inv_n];
    let mut r_delta = vec![loss.d2(f, y) * rf * inv_n];
    for l in (0..nl).rev() {
        if let Some(h) = hv.as_deref_mut() {
            add_outer(h.weights_mut(l), &r_delta, &trace.post[l]);
            add_outer(h.weights_mut(l), &delta, &r_post[l]);
            axpy(h.bias_mut(l), 1.0, &r_delta);
        }
        let fan_in = trace.post[l].len();
        let mut da = vec![0.0; fan_in];
        add_transpose_product(&mut da, theta.weights(l), &delta);
        let mut r_da = vec![0.0; fan_in];
        add_transpose_product(&mut r_da, v.weights(l), &delta);
        add_transpose_product(&mut r_da, theta.weights(l), &r_delta);
        if l == 0 {
            return r_da;
        }
        let z = &trace.pre[l - 1];
        let rz = &r_pre[l - 1];
        r_delta = (0..fan_in).map(|j| act.d2(z[j]) * rz[j] * da[j] + act.d1(z[j]) * r_da[j]).collect();
        delta = (0..fan_in).map(|j| act.d1(z[j]) * da[j]).collect();
    }
    unreachable!("networks have at least one layer")
}

/// Logits `Φ(xᵢ; θ)` for every row of `x`.
pub fn forward(spec: &ModelSpec, theta: &ParamVector, x: &Matrix) -> Result<Vec<f64>> {
    check_inputs(spec, theta, x)?;
    Ok(x.row_iter().map(|row| forward_sample(spec, theta, row).logit()).collect())
}

/// Mean loss plus `(ρ/2)‖θ‖²`.
/// `∂f(x; θ)/∂x` for a single input row, with the ReLU subgradient at 0.
pub fn logit_input_grad(spec: &ModelSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_inputs(spec, theta, &Matrix::from_vec(1, x.len(), x.to_vec())?)?;
    let trace = forward_sample(spec, theta, x);
    Ok(backward_sample(spec, theta, &trace, 1.0, None))
}

pub fn energy(spec: &ModelSpec, theta: &ParamVector, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    check_data(spec, theta, data)?;
    let logits = forward(spec, theta, &data.inputs)?;
    let mut total = 0.0;
    for (z, y) in logits.iter().zip(&data.labels) {
        total += loss.value(*z, *y);
    }
    let e = total / data.len() as f64 + 0.5 * loss.weight_decay * dot(theta.as_slice(), theta.as_slice());
    if !e.is_finite() {
        return Err(Error::Numeric(format!("energy evaluated to {e}")));
    }
    Ok(e)
}

/// `∇_θE`
pub fn grad_theta(spec: &ModelSpec, theta: &ParamVector, data: &Dataset, loss: &LossSpec) -> Result<ParamVector> {
    check_data(spec, theta, data)?;
    let inv_n = 1.0 / data.len() as f64;
    let mut g = ParamVector::zeros(spec);
    for (row, &y) in data.inputs.row_iter().zip(&data.labels) {
        let trace = forward_sample(spec, theta, row);
        backward_sample(spec, theta, &trace, loss.d1(trace.logit(), y) * inv_n, Some(&mut g));
    }
    axpy(g.as_mut_slice(), loss.weight_decay, theta.as_slice());
    finite_or_err(g.as_slice(), "grad_theta")?;
    Ok(g)
}

/// Energy and `∇_θE` from a single pass over the data.
pub fn value_and_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    loss: &LossSpec,
) -> Result<(f64, ParamVector)> {
    check_data(spec, theta, data)?;
    let inv_n = 1.0 / data.len() as f64;
    let mut g = ParamVector::zeros(spec);
    let mut total = 0.0;
    for (row, &y) in data.inputs.row_iter().zip(&data.labels) {
        let trace = forward_sample(spec, theta, row);
        let z = trace.logit();
        total += loss.value(z, y);
        backward_sample(spec, theta, &trace, loss.d1(z, y) * inv_n, Some(&mut g));
    }
    let e = total * inv_n + 0.5 * loss.weight_decay * dot(theta.as_slice(), theta.as_slice());
    axpy(g.as_mut_slice(), loss.weight_decay, theta.as_slice());
    if !e.is_finite() {
        return Err(Error::Numeric(format!("energy evaluated to {e}")));
    }
    finite_or_err(g.as_slice(), "grad_theta")?;
    Ok((e, g))
}

/// `∇ₓE`, one row per sample.
pub fn grad_x(spec: &ModelSpec, theta: &ParamVector, data: &Dataset, loss: &LossSpec, mode: DiffMode) -> Result<Matrix> {
    mode.check(spec, "grad_x")?;
    check_data(spec, theta, data)?;
    let inv_n = 1.0 / data.len() as f64;
    let mut out = Matrix::zeros(data.len(), spec.input_dim);
    for (i, (row, &y)) in data.inputs.row_iter().zip(&data.labels).enumerate() {
        let trace = forward_sample(spec, theta, row);
        let gx = backward_sample(spec, theta, &trace, loss.d1(trace.logit(), y) * inv_n, None);
        out.row_mut(i).copy_from_slice(&gx);
    }
    finite_or_err(out.as_slice(), "grad_x")?;
    Ok(out)
}

/// `∇²_θE · v` (full Hessian: Gauss-Newton and curvature terms).
pub fn hvp_theta(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    loss: &LossSpec,
    v: &ParamVector,
    mode: DiffMode,
) -> Result<ParamVector> {
    mode.check(spec, "hvp_theta")?;
    check_data(spec, theta, data)?;
    check_direction(spec, v)?;
    let inv_n = 1.0 / data.len() as f64;
    let mut hv = ParamVector::zeros(spec);
    for (row, &y) in data.inputs.row_iter().zip(&data.labels) {
        let trace = forward_sample(spec, theta, row);
        r_backward_sample(spec, theta, v, &trace, loss, y, inv_n, Some(&mut hv));
    }
    axpy(hv.as_mut_slice(), loss.weight_decay, v.as_slice());
    finite_or_err(hv.as_slice(), "hvp_theta")?;
    Ok(hv)
}

/// `∇ₓ⟨∇_θE(x, y; θ), p⟩` with `p` held fixed, one row per sample.
pub fn mixed_vjp(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    loss: &LossSpec,
    p: &ParamVector,
    mode: DiffMode,
) -> Result<Matrix> {
    mode.check(spec, "mixed_vjp")?;
    check_data(spec, theta, data)?;
    check_direction(spec, p)?;
    let inv_n = 1.0 / data.len() as f64;
    let mut out = Matrix::zeros(data.len(), spec.input_dim);
    for (i, (row, &y)) in data.inputs.row_iter().zip(&data.labels).enumerate() {
        let trace = forward_sample(spec, theta, row);
        let rx = r_backward_sample(spec, theta, p, &trace, loss, y, inv_n, None);
        out.row_mut(i).copy_from_slice(&rx);
    }
    finite_or_err(out.as_slice(), "mixed_vjp")?;
    Ok(out)
}

fn check_direction(spec: &ModelSpec, v: &ParamVector) -> Result<()> {
    if !v.matches(spec) {
        return Err(Error::Shape(format!(
            "direction of length {} does not match model with {} parameters",
            v.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

fn finite_or_err(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced non-finite values")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{fd_grad, fd_hvp, matvec, rel_error, RngStream};

    fn random_instance(rng: &mut RngStream, spec: &ModelSpec, n: usize, loss: LossKind) -> (ParamVector, Dataset) {
        let theta = ParamVector::from_flat(spec, rng.normal_vec(spec.param_count()).iter().map(|v| 0.5 * v).collect()).unwrap();
        let x = rng.uniform_matrix(n, spec.input_dim);
        let labels = (0..n)
            .map(|_| match loss {
                LossKind::Logistic => {
                    if rng.uniform() < 0.5 {
                        -1.0
                    } else {
                        1.0
                    }
                }
                LossKind::Mse => rng.normal(),
            })
            .collect();
        (theta, Dataset::new(x, labels).unwrap())
    }

    #[test]
    fn affine_forward_hand_values() {
        let spec = ModelSpec::affine(2);
        let theta = ParamVector::from_flat(&spec, vec![3.0, -1.0, 0.5]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(forward(&spec, &theta, &x).unwrap(), vec![1.5]);

        let theta = ParamVector::from_flat(&spec, vec![0.0, 0.0, -2.5]).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, 0.9], vec![1.0, 0.0]]).unwrap();
        assert_eq!(forward(&spec, &theta, &x).unwrap(), vec![-2.5, -2.5]);
    }

    #[test]
    fn one_hidden_zero_weights_give_output_bias() {
        let spec = ModelSpec::one_hidden(3, 4, Activation::Relu);
        let mut theta = ParamVector::zeros(&spec);
        theta.bias_mut(1)[0] = 0.75;
        let x = RngStream::new(1, 1).uniform_matrix(5, 3);
        assert!(forward(&spec, &theta, &x).unwrap().iter().all(|&z| z == 0.75));
    }

    #[test]
    fn views_alias_flat_storage() {
        let spec = ModelSpec::one_hidden(2, 3, Activation::Relu);
        let mut theta = ParamVector::zeros(&spec);
        assert_eq!(theta.len(), 2 * 3 + 3 + 3 + 1);
        theta.weights_mut(1)[2] = 9.0;
        theta.bias_mut(0)[1] = 4.0;
        assert_eq!(theta.as_slice()[6 + 1], 4.0);
        assert_eq!(theta.as_slice()[9 + 2], 9.0);
        assert_eq!(theta.bias(1).len(), 1);
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::affine(3).validate().is_ok());
        let mut bad = ModelSpec::affine(3);
        bad.activation = Some(Activation::Relu);
        assert!(bad.validate().is_err());
        assert!(ModelSpec::one_hidden(3, 0, Activation::Relu).validate().is_err());
        assert!(ModelSpec::one_hidden(3, 2, Activation::Softplus { beta: 0.0 }).validate().is_err());
        let mut multi = ModelSpec::affine(3);
        multi.output_dim = 2;
        assert!(multi.validate().is_err());
        assert_eq!(ModelSpec::mlp(4, vec![3, 2], Activation::Relu).param_count(), 4 * 3 + 3 + 3 * 2 + 2 + 2 + 1);
    }

    #[test]
    fn energy_reference_values() {
        let spec = ModelSpec::affine(2);
        let theta = ParamVector::zeros(&spec);
        let data = Dataset::binary(Matrix::from_rows(&[vec![0.1, 0.2], vec![0.5, 0.9]]).unwrap(), vec![1.0, -1.0]).unwrap();
        let e = energy(&spec, &theta, &data, &LossSpec::logistic(0.0)).unwrap();
        assert!((e - std::f64::consts::LN_2).abs() < 1e-15);

        // perfect fit under Mse
        let theta = ParamVector::from_flat(&spec, vec![1.0, -1.0, 0.25]).unwrap();
        let x = Matrix::from_rows(&[vec![0.2, 0.4], vec![0.7, 0.1]]).unwrap();
        let y = forward(&spec, &theta, &x).unwrap();
        let data = Dataset::new(x, y).unwrap();
        assert_eq!(energy(&spec, &theta, &data, &LossSpec::mse(0.0)).unwrap(), 0.0);
        assert!(grad_theta(&spec, &theta, &data, &LossSpec::mse(0.0)).unwrap().as_slice().iter().all(|g| *g == 0.0));
        let gx = grad_x(&spec, &theta, &data, &LossSpec::mse(0.0), DiffMode::Bilevel).unwrap();
        assert!(gx.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn energy_matches_independent_formula() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..20 {
            let spec = ModelSpec::one_hidden(5, 4, Activation::SOFTPLUS_20);
            let (theta, data) = random_instance(&mut rng, &spec, 6, LossKind::Logistic);
            let rho = 0.3;
            // direct re-implementation: explicit hidden layer then log(1+exp(-yz))
            let t = theta.as_slice();
            let mut total = 0.0;
            for (i, &y) in data.labels.iter().enumerate() {
                let x = data.inputs.row(i);
                let mut z = t[20 + 4 + 4];
                for h in 0..4 {
                    let pre: f64 = (0..5).map(|k| t[h * 5 + k] * x[k]).sum::<f64>() + t[20 + h];
                    z += t[24 + h] * (1.0 + (20.0 * pre).exp()).ln() / 20.0;
                }
                total += (1.0 + (-y * z).exp()).ln();
            }
            let want = total / 6.0 + 0.5 * rho * t.iter().map(|v| v * v).sum::<f64>();
            let got = energy(&spec, &theta, &data, &LossSpec::logistic(rho)).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn weight_decay_adds_rho_theta() {
        let mut rng = RngStream::new(12, 0);
        let spec = ModelSpec::one_hidden(4, 3, Activation::SOFTPLUS_20);
        let (theta, data) = random_instance(&mut rng, &spec, 5, LossKind::Logistic);
        let g0 = grad_theta(&spec, &theta, &data, &LossSpec::logistic(0.0)).unwrap();
        let g1 = grad_theta(&spec, &theta, &data, &LossSpec::logistic(0.7)).unwrap();
        for ((a, b), t) in g1.as_slice().iter().zip(g0.as_slice()).zip(theta.as_slice()) {
            assert!((a - b - 0.7 * t).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_grad_x_closed_form() {
        let mut rng = RngStream::new(13, 0);
        let spec = ModelSpec::affine(6);
        let (theta, data) = random_instance(&mut rng, &spec, 4, LossKind::Logistic);
        let loss = LossSpec::logistic(1e-3);
        let gx = grad_x(&spec, &theta, &data, &loss, DiffMode::Bilevel).unwrap();
        let z = forward(&spec, &theta, &data.inputs).unwrap();
        for i in 0..4 {
            let s = loss.d1(z[i], data.labels[i]) / 4.0;
            for k in 0..6 {
                assert!((gx.get(i, k) - s * theta.weights(0)[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mse_affine_hessian_closed_form() {
        let mut rng = RngStream::new(14, 0);
        for _ in 0..10 {
            let k = 1 + rng.below(8);
            let spec = ModelSpec::affine(k);
            let (theta, data) = random_instance(&mut rng, &spec, 5, LossKind::Mse);
            let rho = 0.05;
            let xb = data.augmented();
            let mut h = xb.transpose().matmul(&xb).unwrap().scale(1.0 / 5.0);
            for i in 0..=k {
                h.set(i, i, h.get(i, i) + rho);
            }
            let v = ParamVector::from_flat(&spec, rng.normal_vec(k + 1)).unwrap();
            let want = matvec(&h, v.as_slice()).unwrap();
            let got = hvp_theta(&spec, &theta, &data, &LossSpec::mse(rho), &v, DiffMode::Bilevel).unwrap();
            assert!(rel_error(got.as_slice(), &want, 1e-12) < 1e-12);
            let zero = ParamVector::zeros(&spec);
            let hz = hvp_theta(&spec, &theta, &data, &LossSpec::mse(rho), &zero, DiffMode::Bilevel).unwrap();
            assert!(hz.as_slice().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn mse_affine_mixed_hand_derivation() {
        // K=2, N=1: ⟨∇_θE, p⟩ = (x̄·θ − y)(x̄·p) + ρ⟨θ,p⟩,
        // so ∇ₓ = (x̄·p)·w + (x̄·θ − y)·p_w
        let spec = ModelSpec::affine(2);
        let theta = ParamVector::from_flat(&spec, vec![0.5, -1.5, 0.25]).unwrap();
        let p = ParamVector::from_flat(&spec, vec![2.0, 1.0, -1.0]).unwrap();
        let x = vec![0.3, 0.8];
        let data = Dataset::new(Matrix::from_vec(1, 2, x.clone()).unwrap(), vec![0.4]).unwrap();
        let r = 0.3 * 0.5 - 0.8 * 1.5 + 0.25 - 0.4;
        let xp = 0.3 * 2.0 + 0.8 * 1.0 - 1.0;
        let want = [xp * 0.5 + r * 2.0, xp * -1.5 + r * 1.0];
        let got = mixed_vjp(&spec, &theta, &data, &LossSpec::mse(0.1), &p, DiffMode::Bilevel).unwrap();
        assert!((got.get(0, 0) - want[0]).abs() < 1e-14 && (got.get(0, 1) - want[1]).abs() < 1e-14);
        let zero = ParamVector::zeros(&spec);
        let gz = mixed_vjp(&spec, &theta, &data, &LossSpec::mse(0.1), &zero, DiffMode::Bilevel).unwrap();
        assert!(gz.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn second_order_rejects_relu_in_bilevel_mode() {
        let spec = ModelSpec::one_hidden(3, 2, Activation::Relu);
        let theta = ParamVector::zeros(&spec);
        let data = Dataset::binary(Matrix::zeros(2, 3), vec![1.0, -1.0]).unwrap();
        let loss = LossSpec::logistic(0.0);
        assert!(matches!(hvp_theta(&spec, &theta, &data, &loss, &theta, DiffMode::Bilevel), Err(Error::Nonsmooth(_))));
        assert!(mixed_vjp(&spec, &theta, &data, &loss, &theta, DiffMode::Bilevel).is_err());
        assert!(grad_x(&spec, &theta, &data, &loss, DiffMode::Bilevel).is_err());
        assert!(mixed_vjp(&spec, &theta, &data, &loss, &theta, DiffMode::Subgradient).is_ok());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = RngStream::new(15, 0);
        let specs = [
            ModelSpec::affine(7),
            ModelSpec::one_hidden(6, 5, Activation::SOFTPLUS_20),
            ModelSpec::mlp(5, vec![4, 3], Activation::Softplus { beta: 3.0 }),
        ];
        for spec in &specs {
            for kind in [LossKind::Logistic, LossKind::Mse] {
                let loss = LossSpec { kind, weight_decay: 0.01 };
                let (theta, data) = random_instance(&mut rng, spec, 4, kind);
                let g = grad_theta(spec, &theta, &data, &loss).unwrap();
                let e = |t: &[f64]| energy(spec, &ParamVector::from_flat(spec, t.to_vec()).unwrap(), &data, &loss).unwrap();
                let fd = fd_grad(e, theta.as_slice(), 1e-6).unwrap();
                assert!(rel_error(g.as_slice(), &fd, 1e-8) < 1e-6, "{spec:?} {kind:?}");

                let v = ParamVector::from_flat(spec, rng.normal_vec(spec.param_count())).unwrap();
                let hv = hvp_theta(spec, &theta, &data, &loss, &v, DiffMode::Bilevel).unwrap();
                let gfun = |t: &[f64]| {
                    grad_theta(spec, &ParamVector::from_flat(spec, t.to_vec()).unwrap(), &data, &loss).unwrap().into_vec()
                };
                let fdh = fd_hvp(gfun, theta.as_slice(), v.as_slice(), 1e-5).unwrap();
                assert!(rel_error(hv.as_slice(), &fdh, 1e-8) < 1e-5, "{spec:?} {kind:?}");
            }
        }
    }

    #[test]
    fn hvp_is_symmetric() {
        let mut rng = RngStream::new(16, 0);
        let spec = ModelSpec::one_hidden(5, 6, Activation::SOFTPLUS_20);
        let (theta, data) = random_instance(&mut rng, &spec, 4, LossKind::Logistic);
        let loss = LossSpec::logistic(1e-4);
        let u = ParamVector::from_flat(&spec, rng.normal_vec(spec.param_count())).unwrap();
        let v = ParamVector::from_flat(&spec, rng.normal_vec(spec.param_count())).unwrap();
        let hu = hvp_theta(&spec, &theta, &data, &loss, &u, DiffMode::Bilevel).unwrap();
        let hv = hvp_theta(&spec, &theta, &data, &loss, &v, DiffMode::Bilevel).unwrap();
        let a = dot(u.as_slice(), hv.as_slice());
        let b = dot(v.as_slice(), hu.as_slice());
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn softplus_approaches_relu() {
        let sp = Activation::Softplus { beta: 50.0 };
        let mut worst: f64 = 0.0;
        for i in 0..=2000 {
            let t = -5.0 + i as f64 * 0.005;
            if t.abs() >= 0.2 {
                worst = worst.max((sp.value(t) - Activation::Relu.value(t)).abs());
            }
        }
        assert!(worst <= 1e-4, "max deviation {worst}");
    }

    #[test]
    fn logistic_saturates_for_confident_logits() {
        let loss = LossSpec::logistic(0.0);
        for z in [20.0, 35.0, 100.0, 800.0] {
            assert!(loss.value(z, 1.0) <= 1e-8);
            assert!(loss.value(-z, -1.0) <= 1e-8);
        }
        assert!(loss.value(-800.0, 1.0).is_finite());
    }

    #[test]
    fn descent_along_negative_gradient() {
        let mut rng = RngStream::new(17, 0);
        for _ in 0..20 {
            let spec = ModelSpec::one_hidden(4, 3, Activation::SOFTPLUS_20);
            let (theta, data) = random_instance(&mut rng, &spec, 5, LossKind::Logistic);
            let loss = LossSpec::logistic(1e-3);
            let e0 = energy(&spec, &theta, &data, &loss).unwrap();
            let g = grad_theta(&spec, &theta, &data, &loss).unwrap();
            let mut t = theta.clone();
            axpy(t.as_mut_slice(), -1e-4, g.as_slice());
            assert!(energy(&spec, &t, &data, &loss).unwrap() <= e0);
        }
    }
}
