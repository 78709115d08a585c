//! Regularized quadratic objectives `J̃(w) = ½(w − w*)ᵀH(w − w*) + Ω(w)` and their exact
//! minimizers, checked against plain gradient descent.
//!
//! Matrices are dense, row-major `d × d` slices.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::write_records;

/// Off-diagonal Frobenius norm at which Jacobi iteration stops.
pub const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
/// Eigenvalues above this negative floor are treated as rounding and clamped to zero.
pub const EIGEN_FLOOR: f64 = -1e-12;

/// Eigendecomposition `H = Q Λ Qᵀ`; column `i` of `q` is the eigenvector of `values[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub q: Vec<f64>,
}

fn off_diagonal_norm(a: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += a[i * d + j] * a[i * d + j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi rotations on a symmetric matrix.
pub fn jacobi_eigen(h: &[f64], d: usize) -> Result<Eigen> {
    if h.len() != d * d {
        return Err(Error::Shape(format!("matrix has {} entries, expected {}", h.len(), d * d)));
    }
    for i in 0..d {
        for j in 0..i {
            let (x, y) = (h[i * d + j], h[j * d + i]);
            if (x - y).abs() > 1e-12 * x.abs().max(y.abs()).max(1.0) {
                return Err(Error::InvalidArgument(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entry".into()));
    }
    let mut a = h.to_vec();
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    let mut sweeps = 0;
    while off_diagonal_norm(&a, d) >= JACOBI_TOL {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Divergence(format!("Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")));
        }
        sweeps += 1;
        for p in 0..d {
            for r in p + 1..d {
                let apr = a[p * d + r];
                if apr == 0.0 {
                    continue;
                }
                let theta = (a[r * d + r] - a[p * d + p]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akr) = (a[k * d + p], a[k * d + r]);
                    a[k * d + p] = c * akp - s * akr;
                    a[k * d + r] = s * akp + c * akr;
                }
                for k in 0..d {
                    let (apk, ark) = (a[p * d + k], a[r * d + k]);
                    a[p * d + k] = c * apk - s * ark;
                    a[r * d + k] = s * apk + c * ark;
                }
                for k in 0..d {
                    let (qkp, qkr) = (q[k * d + p], q[k * d + r]);
                    q[k * d + p] = c * qkp - s * qkr;
                    q[k * d + r] = s * qkp + c * qkr;
                }
            }
        }
    }
    let values = (0..d).map(|i| a[i * d + i]).collect();
    Ok(Eigen { values, q })
}

pub fn mat_vec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum()).collect()
}

/// `Qᵀ v`
fn project(q: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|k| q[k * d + i] * v[k]).sum()).collect()
}

/// `Q c`
fn unproject(q: &[f64], d: usize, c: &[f64]) -> Vec<f64> {
    (0..d).map(|k| (0..d).map(|i| q[k * d + i] * c[i]).sum()).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    pub d: usize,
    pub h: Vec<f64>,
    pub w_star: Vec<f64>,
    pub w0: Vec<f64>,
    pub eigen: Eigen,
}

impl QuadraticModel {
    pub fn new(h: Vec<f64>, w_star: Vec<f64>, w0: Vec<f64>) -> Result<Self> {
        let d = w_star.len();
        if w0.len() != d {
            return Err(Error::Shape(format!("w* has length {d}, w0 has length {}", w0.len())));
        }
        let mut eigen = jacobi_eigen(&h, d)?;
        for v in &mut eigen.values {
            if *v < EIGEN_FLOOR {
                return Err(Error::InvalidArgument(format!("matrix is not positive semidefinite: eigenvalue {v}")));
            }
            *v = v.max(0.0);
        }
        Ok(Self { d, h, w_star, w0, eigen })
    }

    /// `H = AᵀA/d` with standard normal `A`; `w*` and `w0` standard normal.
    pub fn random(d: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_psd(d, &mut rng);
        let mut normal = |n: usize| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
        let w_star = normal(d);
        let w0 = normal(d);
        Self::new(h, w_star, w0)
    }

    pub fn with_reference(&self, w0: Vec<f64>) -> Result<Self> {
        if w0.len() != self.d {
            return Err(Error::Shape(format!("reference has length {}, expected {}", w0.len(), self.d)));
        }
        Ok(Self { w0, ..self.clone() })
    }

    /// `‖QΛQᵀ − H‖_max` and `‖QᵀQ − I‖_max`.
    pub fn eigen_errors(&self) -> (f64, f64) {
        let d = self.d;
        let q = &self.eigen.q;
        let (mut recon, mut orth) = (0.0f64, 0.0f64);
        for i in 0..d {
            for j in 0..d {
                let r: f64 = (0..d).map(|k| q[i * d + k] * self.eigen.values[k] * q[j * d + k]).sum();
                recon = recon.max((r - self.h[i * d + j]).abs());
                let o: f64 = (0..d).map(|k| q[k * d + i] * q[k * d + j]).sum();
                orth = orth.max((o - f64::from(i == j)).abs());
            }
        }
        (recon, orth)
    }

    /// Gradient of `½(w − w*)ᵀH(w − w*) + (α/2)‖w − r‖²`.
    pub fn gradient(&self, w: &[f64], alpha: f64, reference: &[f64]) -> Vec<f64> {
        let diff: Vec<f64> = w.iter().zip(&self.w_star).map(|(a, b)| a - b).collect();
        let hd = mat_vec(&self.h, self.d, &diff);
        hd.iter().zip(w.iter().zip(reference)).map(|(g, (wi, ri))| g + alpha * (wi - ri)).collect()
    }

    fn objective(&self, w: &[f64], alpha: f64, reference: &[f64]) -> f64 {
        let diff: Vec<f64> = w.iter().zip(&self.w_star).map(|(a, b)| a - b).collect();
        let hd = mat_vec(&self.h, self.d, &diff);
        let quad: f64 = diff.iter().zip(&hd).map(|(a, b)| a * b).sum();
        let pull: f64 = w.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
        0.5 * quad + 0.5 * alpha * pull
    }

    /// `‖H(w − w*) + α(w − w0)‖_∞`
    pub fn stationarity_residual(&self, w: &[f64], alpha: f64) -> f64 {
        self.gradient(w, alpha, &self.w0).iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

pub fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(rng)).collect();
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let v = (0..d).map(|k| a[k * d + i] * a[k * d + j]).sum::<f64>() / d as f64;
            h[i * d + j] = v;
            h[j * d + i] = v;
        }
    }
    h
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be finite and nonnegative, got {alpha}")));
    }
    Ok(())
}

/// Minimizer of the quadratic plus `(α/2)‖w − r‖²`, computed in the eigenbasis.
fn eigen_minimizer(model: &QuadraticModel, alpha: f64, reference: &[f64]) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    let d = model.d;
    let ps = project(&model.eigen.q, d, &model.w_star);
    let pr = project(&model.eigen.q, d, reference);
    let lmax = model.eigen.values.iter().cloned().fold(0.0, f64::max);
    let mut c = vec![0.0; d];
    for i in 0..d {
        let l = model.eigen.values[i];
        if alpha == 0.0 && l <= 1e-12 * lmax.max(1.0) {
            return Err(Error::Singular(format!("H is singular (eigenvalue {l}) and alpha is 0")));
        }
        c[i] = (l * ps[i] + alpha * pr[i]) / (l + alpha);
    }
    Ok(unproject(&model.eigen.q, d, &c))
}

/// Closed-form minimizer of the quadratic plus `(α/2)‖w − w0‖²`:
/// `Qᵀw̃ = (Λ + αI)⁻¹(ΛQᵀw* + αQᵀw0)`.
pub fn analytic_sp_minimizer(model: &QuadraticModel, alpha: f64) -> Result<Vec<f64>> {
    eigen_minimizer(model, alpha, &model.w0)
}

/// Per eigendirection, the weights `(λ/(λ+α), α/(λ+α))` on `w*` and `w0`.
pub fn mixing_coefficients(model: &QuadraticModel, alpha: f64) -> Result<Vec<(f64, f64)>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    Ok(model.eigen.values.iter().map(|&l| (l / (l + alpha), alpha / (l + alpha))).collect())
}

/// One eigendirection of the plain weight-decay minimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaleRow {
    pub lambda: f64,
    pub scale: f64,
    /// `(Qᵀw_L2)_i` where `w_L2` solves `(H + αI)w = Hw*` by elimination.
    pub projected: f64,
    /// `scale · (Qᵀw*)_i`
    pub predicted: f64,
}

/// Compare the weight-decay minimizer, obtained by a linear solve that does not use the
/// eigendecomposition, against the per-direction rescaling `λ/(λ+α)` of `w*`.
pub fn l2_rescaling_check(model: &QuadraticModel, alpha: f64) -> Result<Vec<RescaleRow>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let d = model.d;
    let mut a = model.h.clone();
    for i in 0..d {
        a[i * d + i] += alpha;
    }
    let w = solve_linear(a, mat_vec(&model.h, d, &model.w_star), d)?;
    let proj_w = project(&model.eigen.q, d, &w);
    let proj_star = project(&model.eigen.q, d, &model.w_star);
    Ok((0..d)
        .map(|i| {
            let l = model.eigen.values[i];
            let scale = l / (l + alpha);
            RescaleRow { lambda: l, scale, projected: proj_w[i], predicted: scale * proj_star[i] }
        })
        .collect())
}

/// Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>, d: usize) -> Result<Vec<f64>> {
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs()))
            .expect("nonempty range");
        if a[pivot * d + col].abs() < 1e-300 {
            return Err(Error::Singular(format!("zero pivot in column {col}")));
        }
        if pivot != col {
            for k in 0..d {
                a.swap(pivot * d + k, col * d + k);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..d {
            let f = a[row * d + col] / a[col * d + col];
            if f == 0.0 {
                continue;
            }
            for k in col..d {
                a[row * d + k] -= f * a[col * d + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; d];
    for row in (0..d).rev() {
        let s: f64 = (row + 1..d).map(|k| a[row * d + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * d + row];
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QuadraticPenalty {
    L2,
    L2Sp,
}

/// Outcome of a gradient-descent run on the regularized quadratic.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentResult {
    pub w: Vec<f64>,
    pub iterations: usize,
    pub step: f64,
    pub halvings: usize,
}

const GRAD_TOL: f64 = 1e-12;
const MAX_HALVINGS: usize = 60;
const MAX_DESCENT_ITERS: usize = 5_000_000;

/// Full-batch gradient descent from `start` until the gradient norm drops below 1e-12.
/// A run whose objective increases is restarted with half the step, at most 60 times.
pub fn gradient_descent(
    model: &QuadraticModel,
    alpha: f64,
    reference: &[f64],
    start: &[f64],
    initial_step: f64,
) -> Result<DescentResult> {
    check_alpha(alpha)?;
    let mut step = initial_step;
    for halvings in 0..=MAX_HALVINGS {
        let mut w = start.to_vec();
        let mut f = model.objective(&w, alpha, reference);
        let mut diverged = false;
        for it in 0..MAX_DESCENT_ITERS {
            let g = model.gradient(&w, alpha, reference);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < GRAD_TOL {
                return Ok(DescentResult { w, iterations: it, step, halvings });
            }
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= step * gi;
            }
            let f_next = model.objective(&w, alpha, reference);
            // Allow rounding-level increases near the optimum.
            if !f_next.is_finite() || f_next > f + 1e-12 * f.abs().max(1.0) {
                diverged = true;
                break;
            }
            f = f_next;
        }
        if !diverged {
            return Err(Error::Divergence(format!(
                "gradient descent did not reach gradient norm {GRAD_TOL} in {MAX_DESCENT_ITERS} iterations"
            )));
        }
        step *= 0.5;
    }
    Err(Error::Divergence(format!("objective still increasing after {MAX_HALVINGS} step halvings")))
}

/// Gershgorin bound on the largest eigenvalue of `H + αI`.
pub fn gershgorin_bound(model: &QuadraticModel, alpha: f64) -> f64 {
    let d = model.d;
    (0..d).map(|i| (0..d).map(|j| model.h[i * d + j].abs()).sum::<f64>()).fold(0.0, f64::max) + alpha
}

/// Minimize numerically from a random start and return `‖numeric − analytic‖_∞`.
pub fn empirical_descent_check(model: &QuadraticModel, alpha: f64, kind: QuadraticPenalty, seed: u64) -> Result<f64> {
    let reference = match kind {
        QuadraticPenalty::L2 => vec![0.0; model.d],
        QuadraticPenalty::L2Sp => model.w0.clone(),
    };
    let analytic = eigen_minimizer(model, alpha, &reference)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: Vec<f64> = (0..model.d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let step = 1.0 / gershgorin_bound(model, alpha).max(f64::MIN_POSITIVE);
    let run = gradient_descent(model, alpha, &reference, &start, step)?;
    Ok(max_abs_diff(&run.w, &analytic))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub d: usize,
    pub alpha: f64,
    pub residual: f64,
    pub min_coeff: f64,
    pub max_coeff: f64,
}

/// One random model per trial, of dimension `1..=max_d`, with `alphas[trial % len]`. The residual
/// is `‖descent − closed form‖_∞` for the starting-point penalty; the coefficient columns are the
/// extreme mixing weights.
pub fn run_trials(trials: usize, max_d: usize, alphas: &[f64], seed: u64) -> Result<Vec<TrialRow>> {
    if max_d == 0 || alphas.is_empty() {
        return Err(Error::InvalidArgument("need max_d ≥ 1 and at least one alpha".into()));
    }
    let mut rows = Vec::with_capacity(trials);
    for trial in 0..trials {
        let d = 1 + (seed.wrapping_add(trial as u64).wrapping_mul(2_654_435_761) % max_d as u64) as usize;
        let model_seed = seed.wrapping_mul(1_000_003).wrapping_add(trial as u64);
        let model = QuadraticModel::random(d, model_seed)?;
        let alpha = alphas[trial % alphas.len()];
        let residual = empirical_descent_check(&model, alpha, QuadraticPenalty::L2Sp, model_seed)?;
        let coeffs = mixing_coefficients(&model, alpha)?;
        let all = coeffs.iter().flat_map(|&(a, b)| [a, b]);
        let min_coeff = all.clone().fold(f64::INFINITY, f64::min);
        let max_coeff = all.fold(f64::NEG_INFINITY, f64::max);
        rows.push(TrialRow { trial, d, alpha, residual, min_coeff, max_coeff });
    }
    Ok(rows)
}

pub fn write_trials_csv(rows: &[TrialRow], path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), rows)
}
