//! Scalar resolvents `s_mu` and the tabulated resolvent family `S(t)`.
//!
//! `s_mu` solves `s' + mu (b * s) = 0`, `s(0) = 1`. The stepper works with the
//! integrated form `s(t) = 1 - mu (B * s)(t)`, `B(t) = int_0^t b`, and uses
//! product integration: `s` is piecewise linear on the grid and each hat
//! function is integrated exactly against `B`. The kernel enters only
//! through its iterated primitives, so the `t^(rho-2)` singularity never
//! meets a quadrature rule. Stiff modes (`mu B(dt) > 1`) switch to a
//! piecewise-constant, right-endpoint rule.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::MemoryKernel;
use crate::quad::GaussLegendre;
use crate::spectral::SpectralOperator;

const MODULE: &str = "resolvent";

/// Table entries may exceed one in modulus by at most this much.
pub const BOUND_TOLERANCE: f64 = 1e-6;

/// Modes with `mu B(dt)` above this switch to the L-stable rule.
pub const STIFF_THRESHOLD: f64 = 1.0;

/// Product-integration weights for one `(kernel, dt, n_steps)` triple.
///
/// `near[l]` multiplies the grid value closer to the evaluation time on
/// the `l`-th subinterval counted backwards, `far[l]` the other one.
#[derive(Debug, Clone)]
pub struct ProductWeights {
    pub dt: f64,
    near: Vec<f64>,
    far: Vec<f64>,
    /// `combined[l] = far[l-1] + near[l]` for `l >= 1`
    combined: Vec<f64>,
    /// `rect[l] = near[l] + far[l]`, the piecewise-constant weights
    rect: Vec<f64>,
}

impl ProductWeights {
    pub fn new(k: &MemoryKernel, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain(MODULE, format!("dt must be positive, got {dt}")));
        }
        let horizon = dt * n_steps as f64;
        if horizon > k.horizon() * (1.0 + 1e-12) {
            return Err(Error::range(
                MODULE,
                format!("grid horizon {horizon} exceeds the kernel table ({})", k.horizon()),
            ));
        }
        let mut near = vec![0.0; n_steps.max(1)];
        let mut far = vec![0.0; n_steps.max(1)];
        let [_, p1h, p2h] = k.primitives(dt)?;
        near[0] = p2h / dt;
        far[0] = p1h - p2h / dt;
        let gl = GaussLegendre::new(10);
        let theta: Vec<f64> = gl.nodes.iter().map(|x| 0.5 * (x + 1.0)).collect();
        let w: Vec<f64> = gl.weights.iter().map(|x| 0.5 * x).collect();
        for l in 1..n_steps {
            let a = l as f64 * dt;
            let (mut wn, mut wf) = (0.0, 0.0);
            for (th, wi) in theta.iter().zip(&w) {
                let s = (a + th * dt).min(k.horizon());
                let b = k.primitives(s)?[0];
                wn += wi * b * (1.0 - th);
                wf += wi * b * th;
            }
            near[l] = wn * dt;
            far[l] = wf * dt;
        }
        let mut combined = vec![0.0; n_steps.max(1)];
        for l in 1..n_steps {
            combined[l] = far[l - 1] + near[l];
        }
        if near.iter().chain(&far).any(|v| !v.is_finite()) {
            return Err(Error::numeric(MODULE, "non-finite product-integration weight"));
        }
        let rect = near.iter().zip(&far).map(|(a, b)| a + b).collect();
        Ok(Self { dt, near, far, combined, rect })
    }

    pub fn n_steps(&self) -> usize {
        self.near.len()
    }

    /// Whether `mu` is stiff on this grid, i.e. `mu B(dt) > 1`.
    pub fn is_stiff(&self, mu: f64) -> bool {
        mu * self.rect[0] > STIFF_THRESHOLD
    }

    /// March `s_mu` over `n_steps` steps into `out` (length `n_steps + 1`).
    ///
    /// Non-stiff modes use piecewise-linear `s` (second order). The linear
    /// rule is not L-stable: for `mu B(dt) -> inf` its first step tends to
    /// `-rho`. Stiff modes therefore use piecewise-constant `s` taken at the
    /// right end of each interval, whose first step `1 / (1 + mu B(dt))`
    /// decays correctly.
    pub fn solve_into(&self, mu: f64, out: &mut [f64]) -> Result<()> {
        let n_steps = out.len() - 1;
        assert!(n_steps <= self.near.len());
        out[0] = 1.0;
        if mu == 0.0 {
            out.iter_mut().for_each(|v| *v = 1.0);
            return Ok(());
        }
        if self.is_stiff(mu) {
            let denom = 1.0 + mu * self.rect[0];
            for n in 1..=n_steps {
                let conv: f64 = out[1..n].iter().zip(self.rect[1..n].iter().rev()).map(|(s, c)| s * c).sum();
                let v = (1.0 - mu * conv) / denom;
                if !v.is_finite() {
                    return Err(Error::numeric(MODULE, format!("non-finite resolvent value at step {n} (mu={mu})")));
                }
                out[n] = v;
            }
            return Ok(());
        }
        let denom = 1.0 + mu * self.near[0];
        for n in 1..=n_steps {
            // sum_{i=1}^{n-1} s_i combined[n-i]
            let conv: f64 = out[1..n]
                .iter()
                .zip(self.combined[1..n].iter().rev())
                .map(|(s, c)| s * c)
                .sum();
            let rhs = 1.0 - mu * (out[0] * self.far[n - 1] + conv);
            let v = rhs / denom;
            if !v.is_finite() {
                return Err(Error::numeric(MODULE, format!("non-finite resolvent value at step {n} (mu={mu})")));
            }
            out[n] = v;
        }
        Ok(())
    }
}

/// `s_mu(t_n)`, `n = 0..=n_steps`.
pub fn solve_scalar_resolvent(k: &MemoryKernel, mu: f64, dt: f64, n_steps: usize) -> Result<Vec<f64>> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::domain(MODULE, format!("mu must be nonnegative, got {mu}")));
    }
    let w = ProductWeights::new(k, dt, n_steps)?;
    let mut out = vec![0.0; n_steps + 1];
    w.solve_into(mu, &mut out)?;
    Ok(out)
}

/// `s_{mu_k}(t_n)` for all retained modes, stored row-major per mode.
#[derive(Debug, Clone)]
pub struct ResolventTable {
    mu: Vec<f64>,
    dt: f64,
    n_steps: usize,
    values: Vec<f64>,
}

impl ResolventTable {
    pub fn build(k: &MemoryKernel, op: &SpectralOperator, dt: f64, n_steps: usize) -> Result<Self> {
        Self::from_eigenvalues(k, op.eigenvalues(), dt, n_steps)
    }

    pub fn from_eigenvalues(k: &MemoryKernel, mu: &[f64], dt: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::domain(MODULE, "at least one step is required"));
        }
        let weights = ProductWeights::new(k, dt, n_steps)?;
        let width = n_steps + 1;
        let mut values = vec![0.0; mu.len() * width];
        values
            .par_chunks_mut(width)
            .zip(mu.par_iter())
            .enumerate()
            .try_for_each(|(idx, (row, &m))| {
                weights.solve_into(m, row).map_err(|e| {
                    Error::numeric(MODULE, format!("mode {} (mu={m}) failed: {e}", idx + 1))
                })
            })?;
        let table = Self { mu: mu.to_vec(), dt, n_steps, values };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        for (k, row) in self.values.chunks(self.n_steps + 1).enumerate() {
            if let Some((n, v)) = row.iter().enumerate().find(|(_, v)| v.abs() > 1.0 + BOUND_TOLERANCE) {
                return Err(Error::numeric(
                    MODULE,
                    format!("|s| = {} > 1 at mode {} step {n}; refine dt", v.abs(), k + 1),
                ));
            }
        }
        Ok(())
    }

    pub fn modes(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.n_steps + 1;
        &self.values[k * w..(k + 1) * w]
    }

    pub fn value(&self, k: usize, n: usize) -> f64 {
        self.values[k * (self.n_steps + 1) + n]
    }

    /// Grid position of `t`: index of the left node and the interpolation
    /// fraction. Times within `1e-12` relative of a node snap to it.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let horizon = self.horizon();
        if !(t >= 0.0) || t > horizon * (1.0 + 1e-12) {
            return Err(Error::range(MODULE, format!("t={t} is outside the table range [0, {horizon}]")));
        }
        let x = (t / self.dt).min(self.n_steps as f64);
        let n = x.floor();
        let frac = x - n;
        let n = n as usize;
        if n >= self.n_steps {
            return Ok((self.n_steps, 0.0));
        }
        if frac < 1e-12 {
            return Ok((n, 0.0));
        }
        if frac > 1.0 - 1e-12 {
            return Ok((n + 1, 0.0));
        }
        Ok((n, frac))
    }

    /// `s_{mu_k}(t)` with linear interpolation between nodes.
    pub fn at(&self, k: usize, t: f64) -> Result<f64> {
        let (n, f) = self.locate(t)?;
        let row = self.row(k);
        Ok(if f == 0.0 { row[n] } else { row[n] + f * (row[n + 1] - row[n]) })
    }

    /// `S(t) v`, componentwise.
    pub fn apply(&self, t: f64, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.modes() {
            return Err(Error::domain(MODULE, "vector length does not match the number of modes"));
        }
        let (n, f) = self.locate(t)?;
        Ok(v
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let row = self.row(k);
                let s = if f == 0.0 { row[n] } else { row[n] + f * (row[n + 1] - row[n]) };
                s * x
            })
            .collect())
    }

    /// `max |s(t_{n+1}) - 2 s(t_n) + s(t_{n-1})| / 8`, the linear interpolation
    /// error estimate of the table.
    pub fn interpolation_error_estimate(&self) -> f64 {
        (0..self.modes())
            .flat_map(|k| {
                let row = self.row(k);
                (1..self.n_steps).map(move |n| (row[n + 1] - 2.0 * row[n] + row[n - 1]).abs() / 8.0)
            })
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PositivityReport {
    pub mu: f64,
    pub omega: f64,
    pub min_value: f64,
    pub at_beta: f64,
    pub passed: bool,
}

pub const POSITIVITY_TOLERANCE: f64 = 1e-10;

/// Minimum of `2 Re 1/(omega + i beta + mu bhat(omega + i beta))` over `betas`
/// for an arbitrary transform `bhat`.
pub fn positivity_check_with<F>(bhat: F, mu: f64, omega: f64, betas: &[f64]) -> Result<PositivityReport>
where
    F: Fn(Complex64) -> Result<Complex64>,
{
    if !(omega > 0.0) {
        return Err(Error::domain(MODULE, format!("omega must be positive, got {omega}")));
    }
    let mut min_value = f64::INFINITY;
    let mut at_beta = 0.0;
    for &beta in betas {
        let lambda = Complex64::new(omega, beta);
        let v = 2.0 * (1.0 / (lambda + mu * bhat(lambda)?)).re;
        if v < min_value {
            min_value = v;
            at_beta = beta;
        }
    }
    Ok(PositivityReport { mu, omega, min_value, at_beta, passed: min_value >= -POSITIVITY_TOLERANCE })
}

pub fn positive_definiteness_check(k: &MemoryKernel, mu: f64, omega: f64, betas: &[f64]) -> Result<PositivityReport> {
    positivity_check_with(|l| k.laplace_transform(l), mu, omega, betas)
}

/// Symmetric beta grid: zero plus `+-` a log grid on `[lo, hi]`.
pub fn symmetric_beta_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let pos = crate::kernel::log_grid(lo, hi, n);
    let mut out: Vec<f64> = pos.iter().rev().map(|b| -b).collect();
    out.push(0.0);
    out.extend(pos);
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub alpha: f64,
    pub slope: f64,
    pub r_squared: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub points: usize,
}

/// Least-squares line through `(x_i, y_i)`: `(slope, intercept, r^2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

fn fit_envelope<F>(table: &ResolventTable, alpha: f64, t_min: f64, t_max: f64, points: usize, value: F) -> Result<SlopeFit>
where
    F: Fn(&[f64], usize) -> f64,
{
    if !(t_min > 0.0 && t_max > t_min) || t_max > table.horizon() {
        return Err(Error::domain(MODULE, "fit window must satisfy 0 < t_min < t_max <= horizon"));
    }
    let mut idx: Vec<usize> = crate::kernel::log_grid(t_min, t_max, points)
        .iter()
        .map(|t| ((t / table.dt()).round() as usize).clamp(1, table.n_steps() - 1))
        .collect();
    idx.dedup();
    if idx.len() < 3 {
        return Err(Error::domain(MODULE, "fit window holds fewer than three grid points; refine dt"));
    }
    let weights: Vec<f64> = table.mu().iter().map(|m| m.powf(alpha)).collect();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &n in &idx {
        let mut best = (0.0, 0usize);
        for k in 0..table.modes() {
            let v = weights[k] * value(table.row(k), n).abs();
            if v > best.0 {
                best = (v, k);
            }
        }
        if best.1 + 1 == table.modes() && table.modes() > 1 {
            return Err(Error::TruncationInsufficient { modes: table.modes(), time: n as f64 * table.dt() });
        }
        xs.push((n as f64 * table.dt()).ln());
        ys.push(best.0.ln());
    }
    let (slope, _, r_squared) = linear_fit(&xs, &ys);
    Ok(SlopeFit { alpha, slope, r_squared, t_min, t_max, points: xs.len() })
}

/// Log-log slope of `N(t) = max_k mu_k^alpha |s_{mu_k}(t)|` on `[t_min, t_max]`.
pub fn smoothing_exponent_fit(table: &ResolventTable, alpha: f64, t_min: f64, t_max: f64, points: usize) -> Result<SlopeFit> {
    fit_envelope(table, alpha, t_min, t_max, points, |row, n| row[n])
}

/// Same fit for the central-difference derivative `max_k mu_k^alpha |s'_{mu_k}(t)|`.
pub fn derivative_exponent_fit(table: &ResolventTable, alpha: f64, t_min: f64, t_max: f64, points: usize) -> Result<SlopeFit> {
    let dt = table.dt();
    fit_envelope(table, alpha, t_min, t_max, points, |row, n| (row[n + 1] - row[n - 1]) / (2.0 * dt))
}

/// Fit window for the smoothing estimate: `t_max` with `mu_1 t^rho = 0.05`
/// keeps every sampled time in the small-time regime, `t_min = t_max / 100`
/// gives two decades, and `dt = t_min / 20` resolves the lower end.
pub fn smoothing_window(mu_1: f64, rho: f64) -> (f64, f64, f64) {
    let t_max = (0.05 / mu_1).powf(1.0 / rho);
    let t_min = t_max / 100.0;
    (t_min, t_max, t_min / 20.0)
}
