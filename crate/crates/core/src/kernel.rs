//! Scalar memory kernels `b(t)`.
//!
//! Two representations are supported: the power-exponential model
//! `b(t) = t^(rho-2) e^(-eta t) / Gamma(rho-1)` with its closed-form Laplace
//! transform `(lambda + eta)^(1-rho)`, and a tabulated kernel interpolated
//! log-log between grid points (piecewise power law) with power-law
//! extrapolation toward `t = 0`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;
use statrs::function::gamma::{gamma, gamma_lr};

use crate::error::{Error, Result};
use crate::quad::GaussLegendre;

const MODULE: &str = "kernel";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    ModelPowerExp,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MemoryKernel {
    ModelPowerExp { rho: f64, eta: f64 },
    Tabulated(TabulatedKernel),
}

/// One interpolation piece of a tabulated kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Piece {
    /// `b(t) = c * t^p`
    Power { c: f64, p: f64 },
    /// `b(t) = c0 + c1 * t`
    Linear { c0: f64, c1: f64 },
}

impl Piece {
    fn eval(&self, t: f64) -> f64 {
        match *self {
            Piece::Power { c, p } => c * t.powf(p),
            Piece::Linear { c0, c1 } => c0 + c1 * t,
        }
    }

    /// `int_a^b tau^j b(tau) dtau`
    fn moment(&self, j: i32, a: f64, b: f64) -> f64 {
        match *self {
            Piece::Power { c, p } => {
                let q = p + j as f64 + 1.0;
                if q.abs() < 1e-12 {
                    c * (b / a).ln()
                } else {
                    c * (b.powf(q) - a.powf(q)) / q
                }
            }
            Piece::Linear { c0, c1 } => {
                let j1 = (j + 1) as f64;
                let j2 = (j + 2) as f64;
                c0 * (b.powi(j + 1) - a.powi(j + 1)) / j1 + c1 * (b.powi(j + 2) - a.powi(j + 2)) / j2
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedKernel {
    times: Vec<f64>,
    values: Vec<f64>,
    head: Piece,
    pieces: Vec<Piece>,
    /// cumulative moments `int_0^{t_i} tau^j b` for j = 0, 1, 2
    cumulative: [Vec<f64>; 3],
}

impl TabulatedKernel {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn piece_at(&self, t: f64) -> Result<(usize, Piece)> {
        let last = *self.times.last().expect("nonempty");
        if t > last {
            return Err(Error::range(
                MODULE,
                format!("t={t} beyond the tabulated range (max {last}); extrapolation is disallowed"),
            ));
        }
        if t <= self.times[0] {
            return Ok((0, self.head));
        }
        let i = self.times.partition_point(|&x| x < t);
        Ok((i, self.pieces[i - 1]))
    }

    /// Local power-law exponent of the kernel near zero.
    pub fn head_exponent(&self) -> f64 {
        match self.head {
            Piece::Power { p, .. } => p,
            Piece::Linear { .. } => 0.0,
        }
    }
}

fn fit_piece(t0: f64, b0: f64, t1: f64, b1: f64) -> Piece {
    if b0 > 0.0 && b1 > 0.0 {
        let p = (b1 / b0).ln() / (t1 / t0).ln();
        let c = b0 / t0.powf(p);
        Piece::Power { c, p }
    } else {
        let c1 = (b1 - b0) / (t1 - t0);
        Piece::Linear { c0: b0 - c1 * t0, c1 }
    }
}

impl MemoryKernel {
    /// The model kernel `Gamma(rho-1)^-1 t^(rho-2) e^(-eta t)`.
    pub fn model(rho: f64, eta: f64) -> Result<Self> {
        if !(rho > 1.0 && rho < 2.0) {
            return Err(Error::domain(MODULE, format!("model kernel needs 1 < rho < 2, got {rho}")));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::domain(MODULE, format!("model kernel needs eta >= 0, got {eta}")));
        }
        Ok(MemoryKernel::ModelPowerExp { rho, eta })
    }

    /// A kernel given by samples on a strictly increasing grid of positive times.
    pub fn tabulated(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::domain(MODULE, "table columns have different lengths"));
        }
        if times.len() < 2 {
            return Err(Error::domain(MODULE, "a tabulated kernel needs at least two points"));
        }
        if times[0] <= 0.0 {
            return Err(Error::domain(MODULE, "tabulated times must be strictly positive"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain(MODULE, "tabulated times must be strictly increasing"));
        }
        if times.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::domain(MODULE, "tabulated kernel contains non-finite entries"));
        }
        let pieces: Vec<Piece> = (0..times.len() - 1)
            .map(|i| fit_piece(times[i], values[i], times[i + 1], values[i + 1]))
            .collect();
        let head = match pieces[0] {
            Piece::Power { c, p } => {
                if p <= -1.0 {
                    return Err(Error::domain(
                        MODULE,
                        format!("kernel behaves like t^{p:.3} near 0 and is not locally integrable"),
                    ));
                }
                Piece::Power { c, p }
            }
            Piece::Linear { .. } => Piece::Linear { c0: values[0], c1: 0.0 },
        };
        let mut cumulative = [vec![0.0; times.len()], vec![0.0; times.len()], vec![0.0; times.len()]];
        for j in 0..3 {
            let head_part = match head {
                Piece::Power { c, p } => c * times[0].powf(p + j as f64 + 1.0) / (p + j as f64 + 1.0),
                Piece::Linear { .. } => head.moment(j as i32, 0.0, times[0]),
            };
            cumulative[j][0] = head_part;
            for i in 1..times.len() {
                cumulative[j][i] = cumulative[j][i - 1] + pieces[i - 1].moment(j as i32, times[i - 1], times[i]);
            }
        }
        Ok(MemoryKernel::Tabulated(TabulatedKernel { times, values, head, pieces, cumulative }))
    }

    /// Sample `b` on `times` and build a tabulated kernel from it.
    pub fn tabulate(&self, times: &[f64]) -> Result<Self> {
        let values = times.iter().map(|&t| self.eval(t)).collect::<Result<Vec<_>>>()?;
        Self::tabulated(times.to_vec(), values)
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            MemoryKernel::ModelPowerExp { .. } => KernelKind::ModelPowerExp,
            MemoryKernel::Tabulated(_) => KernelKind::Tabulated,
        }
    }

    /// Largest time at which the kernel may be evaluated.
    pub fn horizon(&self) -> f64 {
        match self {
            MemoryKernel::ModelPowerExp { .. } => f64::INFINITY,
            MemoryKernel::Tabulated(tab) => *tab.times.last().expect("nonempty"),
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::domain(MODULE, format!("kernel evaluated at t={t}; t must be positive")));
        }
        match self {
            MemoryKernel::ModelPowerExp { rho, eta } => Ok(t.powf(rho - 2.0) * (-eta * t).exp() / gamma(rho - 1.0)),
            MemoryKernel::Tabulated(tab) => {
                let (_, piece) = tab.piece_at(t)?;
                Ok(piece.eval(t))
            }
        }
    }

    /// Moments `M_j(t) = int_0^t tau^j b(tau) dtau` for j = 0, 1, 2.
    pub fn moments(&self, t: f64) -> Result<[f64; 3]> {
        if t < 0.0 {
            return Err(Error::domain(MODULE, "moments need t >= 0"));
        }
        if t == 0.0 {
            return Ok([0.0; 3]);
        }
        match self {
            MemoryKernel::ModelPowerExp { rho, eta } => {
                let a = rho - 1.0;
                let g = gamma(a);
                let mut out = [0.0; 3];
                for (j, m) in out.iter_mut().enumerate() {
                    let s = a + j as f64;
                    *m = if *eta == 0.0 {
                        t.powf(s) / (g * s)
                    } else {
                        gamma(s) / g * eta.powf(-s) * gamma_lr(s, eta * t)
                    };
                }
                Ok(out)
            }
            MemoryKernel::Tabulated(tab) => {
                let (i, piece) = tab.piece_at(t)?;
                let mut out = [0.0; 3];
                for (j, m) in out.iter_mut().enumerate() {
                    *m = if i == 0 {
                        match piece {
                            Piece::Power { c, p } => {
                                let q = p + j as f64 + 1.0;
                                c * t.powf(q) / q
                            }
                            Piece::Linear { .. } => piece.moment(j as i32, 0.0, t),
                        }
                    } else {
                        tab.cumulative[j][i - 1] + piece.moment(j as i32, tab.times[i - 1], t)
                    };
                }
                Ok(out)
            }
        }
    }

    /// Iterated primitives of `b`: `[B(t), int_0^t B, int_0^t int_0^s B]`,
    /// with `B(t) = int_0^t b`.
    pub fn primitives(&self, t: f64) -> Result<[f64; 3]> {
        let [m0, m1, m2] = self.moments(t)?;
        Ok([m0, t * m0 - m1, 0.5 * (t * t * m0 - 2.0 * t * m1 + m2)])
    }

    /// `b_hat(lambda) = int_0^inf e^(-lambda t) b(t) dt` for `Re lambda > 0`.
    pub fn laplace_transform(&self, lambda: Complex64) -> Result<Complex64> {
        self.laplace_transform_with_residual(lambda).map(|(v, _)| v)
    }

    /// Laplace transform together with a quadrature residual estimate.
    /// Tabulated kernels are taken to vanish beyond the last grid point.
    pub fn laplace_transform_with_residual(&self, lambda: Complex64) -> Result<(Complex64, f64)> {
        if !(lambda.re > 0.0) || !lambda.im.is_finite() {
            return Err(Error::domain(MODULE, format!("Laplace transform needs Re lambda > 0, got {lambda}")));
        }
        match self {
            MemoryKernel::ModelPowerExp { rho, eta } => Ok(((lambda + eta).powf(1.0 - rho), 0.0)),
            MemoryKernel::Tabulated(tab) => tabulated_laplace(tab, lambda),
        }
    }

    /// The model exponent when known in closed form.
    pub fn model_rho(&self) -> Option<f64> {
        match self {
            MemoryKernel::ModelPowerExp { rho, .. } => Some(*rho),
            MemoryKernel::Tabulated(_) => None,
        }
    }
}

fn tabulated_laplace(tab: &TabulatedKernel, lambda: Complex64) -> Result<(Complex64, f64)> {
    thread_local! {
        static RULES: (GaussLegendre, GaussLegendre) = (GaussLegendre::new(10), GaussLegendre::new(20));
    }
    RULES.with(|(low, high)| {
        let mut total = Complex64::new(0.0, 0.0);
        let mut residual = 0.0;

        let t0 = tab.times[0];
        total += match tab.head {
            Piece::Power { c, p } => c * lower_power_integral(p + 1.0, lambda, t0)?,
            Piece::Linear { .. } => linear_laplace(tab.head, lambda, 0.0, t0),
        };

        for (i, piece) in tab.pieces.iter().enumerate() {
            let (a, b) = (tab.times[i], tab.times[i + 1]);
            let contribution = match *piece {
                Piece::Linear { .. } => linear_laplace(*piece, lambda, a, b),
                Piece::Power { c, p } => {
                    if lambda.norm() * (b - a) <= 2.0 && b / a <= 4.0 {
                        let f = |t: f64| (-lambda * t).exp() * (c * t.powf(p));
                        let hi = high.integrate_complex(a, b, f);
                        let lo = low.integrate_complex(a, b, f);
                        residual += (hi - lo).norm();
                        hi
                    } else {
                        // c * lambda^-(p+1) * [Gamma(p+1, lambda a) - Gamma(p+1, lambda b)]
                        let s = p + 1.0;
                        let za = lambda * a;
                        let zb = lambda * b;
                        let diff = upper_gamma(s, za)? - upper_gamma(s, zb)?;
                        c * lambda.powf(-s) * diff
                    }
                }
            };
            total += contribution;
        }
        if !total.re.is_finite() || !total.im.is_finite() {
            return Err(Error::numeric(MODULE, format!("Laplace transform not finite at lambda={lambda}")));
        }
        let scale = total.norm().max(1e-300);
        if residual > 1e-8 * scale + 1e-14 {
            return Err(Error::numeric(
                MODULE,
                format!("Laplace quadrature did not converge at lambda={lambda}: residual {residual:e}"),
            ));
        }
        Ok((total, residual))
    })
}

/// `int_a^b (c0 + c1 t) e^(-lambda t) dt` in closed form.
fn linear_laplace(piece: Piece, lambda: Complex64, a: f64, b: f64) -> Complex64 {
    let Piece::Linear { c0, c1 } = piece else { unreachable!() };
    // antiderivative of (c0 + c1 t) e^{-lt}: -e^{-lt} [ (c0 + c1 t)/l + c1/l^2 ]
    let prim = |t: f64| -(-lambda * t).exp() * ((c0 + c1 * t) / lambda + c1 / (lambda * lambda));
    prim(b) - prim(a)
}

/// `int_0^x t^(s-1) e^(-lambda t) dt = lambda^-s * gamma_lower(s, lambda x)`.
fn lower_power_integral(s: f64, lambda: Complex64, x: f64) -> Result<Complex64> {
    let z = lambda * x;
    let lower = if z.norm() <= 2.0 {
        lower_gamma_series(s, z)
    } else {
        Complex64::new(gamma(s), 0.0) - upper_gamma(s, z)?
    };
    Ok(lambda.powf(-s) * lower)
}

fn lower_gamma_series(s: f64, z: Complex64) -> Complex64 {
    // gamma(s, z) = z^s e^{-z} sum_n z^n / (s (s+1) ... (s+n))
    let mut term = Complex64::new(1.0 / s, 0.0);
    let mut sum = term;
    for n in 1..500 {
        term *= z / (s + n as f64);
        sum += term;
        if term.norm() < 1e-17 * sum.norm() {
            break;
        }
    }
    z.powf(s) * (-z).exp() * sum
}

/// Upper incomplete gamma `Gamma(s, z)` for `|z| > ~1`, `Re z >= 0`, by
/// the Legendre continued fraction (modified Lentz).
fn upper_gamma(s: f64, z: Complex64) -> Result<Complex64> {
    if z.norm() <= 1.0 {
        return Ok(Complex64::new(gamma(s), 0.0) - lower_gamma_series(s, z));
    }
    let tiny = 1e-300;
    let mut b = z + 1.0 - s;
    let mut c = Complex64::new(1.0 / tiny, 0.0);
    let mut d = Complex64::new(1.0, 0.0) / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - s);
        b += 2.0;
        d = b + an * d;
        if d.norm() < tiny {
            d = Complex64::new(tiny, 0.0);
        }
        c = b + an / c;
        if c.norm() < tiny {
            c = Complex64::new(tiny, 0.0);
        }
        d = Complex64::new(1.0, 0.0) / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).norm() < 1e-16 {
            return Ok((-z).exp() * z.powf(s) * h);
        }
    }
    Err(Error::numeric(MODULE, format!("incomplete gamma continued fraction did not converge at z={z}")))
}

/// Result of the sector-parameter search.
#[derive(Debug, Clone, Serialize)]
pub struct SectorEstimate {
    pub rho_hat: f64,
    pub sup_abs_arg: f64,
    pub argmax_re: f64,
    pub argmax_im: f64,
    pub points_per_decade: usize,
}

const SECTOR_OFFSETS: [f64; 3] = [1e-8, 1e-4, 1e-2];
const SECTOR_BETA_MIN: f64 = 1e-4;
const SECTOR_BETA_MAX: f64 = 1e6;
/// Estimates closer than this to 1 or 2 are treated as lying on the boundary.
pub const SECTOR_BOUNDARY_MARGIN: f64 = 1e-3;

/// Search for `1 + (2/pi) sup |arg b_hat(lambda)|` over rays
/// `lambda = delta + i beta`; returns the raw estimate without acceptance.
pub fn sector_search(k: &MemoryKernel) -> Result<SectorEstimate> {
    let decades = (SECTOR_BETA_MAX / SECTOR_BETA_MIN).log10();
    let scan = |per_decade: usize| -> Result<(f64, Complex64)> {
        let n = (decades * per_decade as f64).round() as usize;
        let mut best = (0.0f64, Complex64::new(SECTOR_OFFSETS[0], SECTOR_BETA_MIN));
        for &delta in &SECTOR_OFFSETS {
            for i in 0..=n {
                let beta = SECTOR_BETA_MIN * 10f64.powf(decades * i as f64 / n as f64);
                let lambda = Complex64::new(delta, beta);
                let a = k.laplace_transform(lambda)?.arg().abs();
                if a > best.0 {
                    best = (a, lambda);
                }
            }
        }
        Ok(best)
    };

    let mut per_decade = 8;
    let mut best = scan(per_decade)?;
    loop {
        let next = scan(per_decade * 2)?;
        per_decade *= 2;
        let change = (next.0 - best.0).abs() / next.0.max(1e-300);
        best = next;
        if change < 1e-6 || per_decade >= 256 {
            break;
        }
    }

    // golden-section polish along the winning ray
    let (mut sup, mut arg_lambda) = best;
    let delta = arg_lambda.re;
    let step = 10f64.powf(1.0 / per_decade as f64);
    let (mut lo, mut hi) = (
        (arg_lambda.im / step).max(SECTOR_BETA_MIN).ln(),
        (arg_lambda.im * step).min(SECTOR_BETA_MAX).ln(),
    );
    let f = |lb: f64| -> Result<f64> { Ok(k.laplace_transform(Complex64::new(delta, lb.exp()))?.arg().abs()) };
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let x1 = hi - g * (hi - lo);
        let x2 = lo + g * (hi - lo);
        if f(x1)? >= f(x2)? {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let polished = 0.5 * (lo + hi);
    let val = f(polished)?;
    if val > sup {
        sup = val;
        arg_lambda = Complex64::new(delta, polished.exp());
    }

    Ok(SectorEstimate {
        rho_hat: 1.0 + 2.0 / PI * sup,
        sup_abs_arg: sup,
        argmax_re: arg_lambda.re,
        argmax_im: arg_lambda.im,
        points_per_decade: per_decade,
    })
}

/// Sector parameter `rho_hat in (1, 2)`; kernels whose estimate falls outside
/// the open interval (or within [`SECTOR_BOUNDARY_MARGIN`] of its ends) are rejected.
pub fn sector_parameter(k: &MemoryKernel) -> Result<f64> {
    let est = sector_search(k)?;
    let r = est.rho_hat;
    if !(r > 1.0 + SECTOR_BOUNDARY_MARGIN && r < 2.0 - SECTOR_BOUNDARY_MARGIN) {
        return Err(Error::KernelRejected(format!(
            "sector parameter estimate {r:.8} is not inside (1, 2)"
        )));
    }
    Ok(r)
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityCondition {
    pub name: String,
    pub derivative_order: usize,
    pub passed: bool,
    /// most negative normalized value of the sign-adjusted estimate (>= 0 when clean)
    pub worst_violation: f64,
    pub at_time: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonotonicityReport {
    pub order: usize,
    pub passed: bool,
    pub conditions: Vec<MonotonicityCondition>,
}

pub const MONOTONE_TOLERANCE: f64 = 1e-10;

/// Discrete check of k-monotonicity using divided differences on `grid`.
///
/// For `order = m` the conditions are `(-1)^n b^(n) >= 0` for `n <= m - 2`,
/// then `(-1)^(m-2) b^(m-2)` nonincreasing (order m-1 difference) and convex
/// (order m difference).
pub fn check_k_monotone(k: &MemoryKernel, order: usize, grid: &[f64]) -> Result<MonotonicityReport> {
    if !(2..=4).contains(&order) {
        return Err(Error::config(MODULE, format!("monotonicity order must be 2, 3 or 4, got {order}")));
    }
    if grid.len() < order + 2 {
        return Err(Error::config(
            MODULE,
            format!("grid has {} points; order {order} needs at least {}", grid.len(), order + 2),
        ));
    }
    if grid[0] <= 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(MODULE, "monotonicity grid must be strictly increasing and positive"));
    }
    let values = grid.iter().map(|&t| k.eval(t)).collect::<Result<Vec<_>>>()?;

    let mut conditions = Vec::with_capacity(order + 1);
    let mut dd = values.clone();
    for n in 0..=order {
        if n > 0 {
            dd = (0..dd.len() - 1)
                .map(|i| (dd[i + 1] - dd[i]) / (grid[i + n] - grid[i]))
                .collect();
        }
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        let mut worst = f64::INFINITY;
        let mut at = grid[0];
        for (i, d) in dd.iter().enumerate() {
            let width = if n == 0 { 1.0 } else { grid[i + n] - grid[i] };
            let local = values[i..=i + n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = (local / width.powi(n as i32)).max(f64::MIN_POSITIVE);
            let normalized = sign * d / scale;
            if normalized < worst {
                worst = normalized;
                at = grid[i];
            }
        }
        let name = if n + 2 <= order {
            format!("(-1)^{n} b^({n}) >= 0")
        } else if n + 1 == order {
            format!("(-1)^{m} b^({m}) nonincreasing", m = order - 2)
        } else {
            format!("(-1)^{m} b^({m}) convex", m = order - 2)
        };
        conditions.push(MonotonicityCondition {
            name,
            derivative_order: n,
            passed: worst >= -MONOTONE_TOLERANCE,
            worst_violation: worst.min(0.0),
            at_time: at,
        });
    }
    let passed = conditions.iter().all(|c| c.passed);
    Ok(MonotonicityReport { order, passed, conditions })
}

/// Log-spaced grid helper used by reports and tests.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub kind: KernelKind,
    pub rho_hat: Option<f64>,
    pub sector: Option<SectorEstimate>,
    pub monotonicity: MonotonicityReport,
    pub accepted: bool,
    pub rejection: Option<String>,
}

/// Full acceptance analysis of a kernel (sector parameter + 4-monotonicity).
pub fn analyze(k: &MemoryKernel, grid: &[f64]) -> Result<KernelReport> {
    let monotonicity = check_k_monotone(k, 4, grid)?;
    let (rho_hat, sector, rejection) = match sector_search(k) {
        Ok(est) => {
            let r = est.rho_hat;
            let inside = r > 1.0 + SECTOR_BOUNDARY_MARGIN && r < 2.0 - SECTOR_BOUNDARY_MARGIN;
            let reason = (!inside).then(|| format!("sector parameter estimate {r:.8} is not inside (1, 2)"));
            (Some(r), Some(est), reason)
        }
        Err(e) => (None, None, Some(e.to_string())),
    };
    let rejection = rejection.or_else(|| {
        (!monotonicity.passed).then(|| "kernel is not 4-monotone on the sampled grid".to_string())
    });
    Ok(KernelReport {
        kind: k.kind(),
        rho_hat,
        sector,
        accepted: rejection.is_none(),
        monotonicity,
        rejection,
    })
}
