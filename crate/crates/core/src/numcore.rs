//! Dense linear algebra on `f64`, seeded random streams and finite-difference
//! oracles.
//!
//! Everything here is deliberately plain: row-major storage, naive loops in a
//! fixed summation order, so results are bit-reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "storage of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has length {}, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Selects the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Appends a constant column of ones (the bias-augmented view).
    pub fn augmented(&self) -> Matrix {
        let c = self.cols + 1;
        Matrix::from_fn(self.rows, c, |i, j| if j < self.cols { self.get(i, j) } else { 1.0 })
    }

    fn check_same(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        Ok(Matrix { rows: self.rows, cols: self.cols, data: add(&self.data, &other.data) })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        Ok(Matrix { rows: self.rows, cols: self.cols, data: sub(&self.data, &other.data) })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        axpy(&mut self.data, s, &other.data);
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense product `A v`.
pub fn matvec(a: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if a.cols != v.len() {
        return Err(Error::Shape(format!(
            "matvec: matrix has {} columns, vector has length {}",
            a.cols,
            v.len()
        )));
    }
    Ok(a.row_iter().map(|r| dot(r, v)).collect())
}

/// `Aᵀ v`
pub fn matvec_t(a: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if a.rows != v.len() {
        return Err(Error::Shape(format!(
            "matvec_t: matrix has {} rows, vector has length {}",
            a.rows,
            v.len()
        )));
    }
    let mut out = vec![0.0; a.cols];
    for (r, &s) in a.row_iter().zip(v) {
        axpy(&mut out, s, r);
    }
    Ok(out)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!("matmul: {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
}

#[inline]
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (a, b) in y.iter_mut().zip(x) {
        *a += s * b;
    }
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(Error::Shape(format!("solve_spd: {:?} with rhs {}", a.shape(), b.len())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) {
            return Err(Error::Numeric(format!("solve_spd: matrix not positive definite at pivot {j}")));
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    let mut z = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            z[i] -= l.get(i, k) * z[k];
        }
        z[i] /= l.get(i, i);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            z[i] -= l.get(k, i) * z[k];
        }
        z[i] /= l.get(i, i);
    }
    Ok(z)
}

/// Numerical rank by Gaussian elimination with full pivoting.
///
/// Pivots below `tol * max|a_ij|` count as zero.
pub fn rank(a: &Matrix, tol: f64) -> usize {
    let mut m = a.clone();
    let (rows, cols) = m.shape();
    let scale = norm_inf(m.as_slice());
    if scale == 0.0 {
        return 0;
    }
    let mut r = 0;
    let mut col_used = vec![false; cols];
    while r < rows.min(cols) {
        let mut best = (0.0, 0, 0);
        for i in r..rows {
            for (j, used) in col_used.iter().enumerate() {
                if !used && m.get(i, j).abs() > best.0 {
                    best = (m.get(i, j).abs(), i, j);
                }
            }
        }
        if best.0 <= tol * scale {
            break;
        }
        let (_, pi, pj) = best;
        for j in 0..cols {
            let t = m.get(r, j);
            m.set(r, j, m.get(pi, j));
            m.set(pi, j, t);
        }
        col_used[pj] = true;
        let piv = m.get(r, pj);
        for i in r + 1..rows {
            let f = m.get(i, pj) / piv;
            if f != 0.0 {
                for j in 0..cols {
                    let v = m.get(i, j) - f * m.get(r, j);
                    m.set(i, j, v);
                }
            }
        }
        r += 1;
    }
    r
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iters: usize,
    /// True residual `‖b − A x‖` at return.
    pub residual: f64,
    pub converged: bool,
    /// Set when a direction with `dᵀAd ≤ 0` was met; `x` is the last iterate
    /// before it.
    pub negative_curvature: bool,
}

/// Conjugate gradients for `A x = b` with `A` given only as a product.
///
/// Stops once the true residual satisfies `‖b − A x‖ ≤ rel_tol·‖b‖`. The
/// recursive residual is re-anchored against the true one whenever it claims
/// convergence, so floating-point drift cannot produce a false success.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], max_iters: usize, rel_tol: f64) -> Result<CgOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = norm2(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgOutcome { x, iters: 0, residual: 0.0, converged: true, negative_curvature: false });
    }
    let target = rel_tol * b_norm;
    let mut r = b.to_vec();
    let mut d = r.clone();
    let mut rr = dot(&r, &r);
    let mut iters = 0;
    while iters < max_iters {
        let ad = apply(&d)?;
        let curv = dot(&d, &ad);
        if !curv.is_finite() {
            return Err(Error::Numeric("conjugate gradients met a non-finite curvature".into()));
        }
        if curv <= 0.0 {
            let residual = norm2(&sub(b, &apply(&x)?));
            return Ok(CgOutcome { x, iters, residual, converged: false, negative_curvature: true });
        }
        let alpha = rr / curv;
        axpy(&mut x, alpha, &d);
        axpy(&mut r, -alpha, &ad);
        iters += 1;
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            r = sub(b, &apply(&x)?);
            let true_rr = dot(&r, &r);
            if true_rr.sqrt() <= target {
                return Ok(CgOutcome { x, iters, residual: true_rr.sqrt(), converged: true, negative_curvature: false });
            }
            // restart from the re-anchored residual
            d = r.clone();
            rr = true_rr;
            continue;
        }
        let beta = rr_new / rr;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
        rr = rr_new;
    }
    let residual = norm2(&sub(b, &apply(&x)?));
    Ok(CgOutcome { x, iters, residual, converged: residual <= target, negative_curvature: false })
}

/// Default central-difference step: `1e-5 * (1 + ‖x‖∞)`.
pub fn default_fd_step(x: &[f64]) -> f64 {
    1e-5 * (1.0 + norm_inf(x))
}

/// Central-difference gradient of a scalar function.
pub fn fd_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value at coordinate {i}")));
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference directional derivative of a vector function,
/// `(g(θ + h v) − g(θ − h v)) / 2h`. Applied to a gradient it approximates a
/// Hessian-vector product.
pub fn fd_hvp<G>(g: G, theta: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if theta.len() != v.len() {
        return Err(Error::Shape(format!("fd_hvp: point {} vs direction {}", theta.len(), v.len())));
    }
    let mut tp = theta.to_vec();
    axpy(&mut tp, h, v);
    let mut tm = theta.to_vec();
    axpy(&mut tm, -h, v);
    let gp = g(&tp);
    let gm = g(&tm);
    if gp.iter().chain(&gm).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite gradient evaluation in fd_hvp".into()));
    }
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

/// Relative error `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    norm2(&sub(a, b)) / norm2(b).max(floor)
}

/// Reproducible random stream addressed by `(master_seed, stream_id)`.
///
/// Backed by ChaCha8: the master seed is expanded to a 256-bit key with the
/// PCG32-based `seed_from_u64`, and the stream id selects ChaCha's 64-bit
/// stream counter. Uniform `f64`s come from the top 53 bits of a `u64`;
/// normals use the ziggurat sampler of `rand_distr`. None of these depend on
/// platform or thread scheduling.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self { master_seed, stream_id, rng }
    }

    /// Stream for a named pipeline stage and run index.
    pub fn for_stage(master_seed: u64, stage: &str, run_index: u64) -> Self {
        Self::new(master_seed, stream_id(stage, run_index))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform())
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| sigma * self.normal())
    }

    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// Stable 64-bit stream id from a stage name and run index (SHA-256 prefix).
pub fn stream_id(stage: &str, run_index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0u8]);
    h.update(run_index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
