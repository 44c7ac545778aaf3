//! Monte Carlo ensembles and path diagnostics.
//!
//! Paths run in parallel in fixed-size chunks; every reduction happens in
//! path-index order so summaries are bit-reproducible for a given seed.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::MemoryKernel;
use crate::noise::{path_rng, sample_large_jumps, sample_noise_path, JumpLaw, NoisePath, NoiseSelection, StreamKind};
use crate::resolvent::ResolventTable;
use crate::solver::{CoefficientSet, MildSolutionPath, Solver, SolverConfig, SolverTables};
use crate::spectral::SpectralOperator;
use crate::stats::{Accumulator, MeanEstimate};

const MODULE: &str = "analysis";
const CHUNK: usize = 256;

/// Run `f` on each path index in `0..paths`, returning results in index order.
pub fn run_paths<T, F>(paths: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let mut out = Vec::with_capacity(paths);
    for start in (0..paths).step_by(CHUNK) {
        let end = (start + CHUNK).min(paths);
        let chunk: Vec<Result<T>> = (start..end).into_par_iter().map(|p| f(p as u64)).collect();
        for r in chunk {
            out.push(r?);
        }
    }
    Ok(out)
}

fn with_path<T>(seed: u64, path: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::PathFailed { seed, path, source: Box::new(e) })
}

#[derive(Debug, Clone, Copy)]
pub struct EnsembleOptions {
    pub paths: usize,
    pub seed: u64,
    pub select: NoiseSelection,
    pub q: f64,
    pub alpha_i: f64,
    /// leading modes whose per-time mean is tracked
    pub tracked_modes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub paths: usize,
    pub seed: u64,
    pub q: f64,
    pub alpha_i: f64,
    pub times: Vec<f64>,
    /// per-time mean and variance of `|u(t)|^q` in `H^A_{-alpha_I}`
    pub norm_q_mean: Vec<f64>,
    pub norm_q_var: Vec<f64>,
    /// `E |u(T)|^q` with its standard error
    pub moment: MeanEstimate,
    /// `[n][k]` mean and standard error of the tracked modes
    pub mode_mean: Vec<Vec<f64>>,
    pub mode_se: Vec<Vec<f64>>,
    /// `jump_histogram[j]` = number of paths with `j` large jumps
    pub jump_histogram: Vec<usize>,
    pub blow_ups: usize,
}

struct PathStats {
    norm_q: Vec<f64>,
    modes: Vec<f64>,
    jumps: usize,
}

/// Ensemble of independent paths with per-path seeded streams.
pub fn mc_ensemble(solver: &Solver<'_>, law: &JumpLaw, opts: &EnsembleOptions) -> Result<EnsembleSummary> {
    if opts.paths < 2 {
        return Err(Error::config(MODULE, "an ensemble needs at least 2 paths"));
    }
    let k = solver.modes();
    let tracked = opts.tracked_modes.min(k);
    let horizon = solver.cfg.horizon;
    let weights = solver.op.weights(-opts.alpha_i);
    let n_times = solver.cfg.n_steps() + 1;

    let mut norm_acc = vec![Accumulator::default(); n_times];
    let mut mode_acc = vec![Accumulator::default(); n_times * tracked];
    let mut histogram = Vec::new();

    for start in (0..opts.paths).step_by(CHUNK) {
        let end = (start + CHUNK).min(opts.paths);
        let chunk = run_paths(end - start, |i| {
            let p = start as u64 + i;
            let noise = with_path(opts.seed, p, sample_noise_path(law, horizon, opts.seed, p, opts.select))?;
            let path = with_path(opts.seed, p, solver.step(&noise))?;
            let mut norm_q = Vec::with_capacity(n_times);
            let mut modes = Vec::with_capacity(n_times * tracked);
            for n in 0..n_times {
                let u = path.at(n);
                let nrm = u.iter().zip(&weights).map(|(x, w)| w * x * x).sum::<f64>().sqrt();
                norm_q.push(nrm.powf(opts.q));
                modes.extend_from_slice(&u[..tracked]);
            }
            Ok(PathStats { norm_q, modes, jumps: noise.large.count() })
        })?;
        for s in chunk {
            for (a, v) in norm_acc.iter_mut().zip(&s.norm_q) {
                a.push(*v);
            }
            for (a, v) in mode_acc.iter_mut().zip(&s.modes) {
                a.push(*v);
            }
            if histogram.len() <= s.jumps {
                histogram.resize(s.jumps + 1, 0);
            }
            histogram[s.jumps] += 1;
        }
    }

    let dt = solver.cfg.dt;
    Ok(EnsembleSummary {
        paths: opts.paths,
        seed: opts.seed,
        q: opts.q,
        alpha_i: opts.alpha_i,
        times: (0..n_times).map(|n| n as f64 * dt).collect(),
        norm_q_mean: norm_acc.iter().map(Accumulator::mean).collect(),
        norm_q_var: norm_acc.iter().map(Accumulator::variance).collect(),
        moment: norm_acc[n_times - 1].estimate(),
        mode_mean: mode_acc.chunks(tracked.max(1)).map(|c| c.iter().map(Accumulator::mean).collect()).collect(),
        mode_se: mode_acc.chunks(tracked.max(1)).map(|c| c.iter().map(|a| a.estimate().se).collect()).collect(),
        jump_histogram: histogram,
        blow_ups: 0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Discontinuity {
    pub time: f64,
    pub magnitude: f64,
    pub identity_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CadlagReport {
    pub discontinuities: Vec<Discontinuity>,
    /// largest relative jump-identity error
    pub max_identity_error: f64,
    /// largest grid increment over a step containing no large jump
    pub max_off_jump_increment: f64,
    /// steps without a recorded jump whose increment exceeds the tolerance
    pub hidden: Vec<f64>,
    pub passed: bool,
}

/// Audit the right-continuous structure of a path in `H^A_{-alpha}`.
pub fn cadlag_audit(path: &MildSolutionPath, op: &SpectralOperator, alpha: f64, tolerance: f64) -> CadlagReport {
    let dt = path.dt;
    let mut discontinuities = Vec::new();
    let mut max_identity_error = 0.0f64;
    for j in &path.jumps {
        let inc = op.fractional_norm(&j.increment, 0.0);
        let err: f64 = j
            .right
            .iter()
            .zip(&j.left)
            .zip(&j.increment)
            .map(|((r, l), d)| (r - l - d).powi(2))
            .sum::<f64>()
            .sqrt();
        let rel = if inc > 0.0 { err / inc } else { err };
        max_identity_error = max_identity_error.max(rel);
        discontinuities.push(Discontinuity { time: j.time, magnitude: op.fractional_norm(&j.increment, -alpha), identity_error: rel });
    }
    let mut max_off = 0.0f64;
    let mut hidden = Vec::new();
    for n in 0..path.n_steps {
        let (t0, t1) = (n as f64 * dt, (n + 1) as f64 * dt);
        if path.jumps.iter().any(|j| j.time > t0 && j.time <= t1) {
            continue;
        }
        let d: Vec<f64> = path.at(n + 1).iter().zip(path.at(n)).map(|(a, b)| a - b).collect();
        let inc = op.fractional_norm(&d, -alpha);
        max_off = max_off.max(inc);
        if inc > tolerance {
            hidden.push(t1);
        }
    }
    CadlagReport {
        passed: hidden.is_empty() && max_identity_error <= 1e-10,
        discontinuities,
        max_identity_error,
        max_off_jump_increment: max_off,
        hidden,
    }
}

/// `g(n) = floor(n^gamma)`.
pub fn g_of_n(n: usize, gamma: f64) -> usize {
    // guard against 10^0.5 style roundoff just below an integer
    ((n as f64).powf(gamma) + 1e-12).floor() as usize
}

/// `-log prod_{j=1}^N (1 - 2j/n)`, infinite once `2N >= n`.
pub fn log_product_deficit(big_n: usize, n: usize) -> f64 {
    (1..=big_n)
        .map(|j| {
            let f = 1.0 - 2.0 * j as f64 / n as f64;
            if f > 0.0 {
                -f.ln()
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

/// Smallest `c` with `prod_{j=1}^N (1 - 2j/n) >= exp(-c N(N-1) / 2n)` over
/// the `(N, n)` pairs with `2 <= N <= g(n)`.
pub fn product_constant(ns: &[usize], gamma: f64) -> f64 {
    let mut sup = 0.0f64;
    for &n in ns {
        for big_n in 2..=g_of_n(n, gamma) {
            let ratio = log_product_deficit(big_n, n) / ((big_n * (big_n - 1)) as f64 / n as f64);
            sup = sup.max(ratio);
        }
    }
    2.0 * sup
}

#[derive(Debug, Clone, Serialize)]
pub struct BnEstimate {
    pub n: usize,
    pub g_n: usize,
    pub estimate: f64,
    pub se: f64,
    pub lower_bound: f64,
    pub c: f64,
    pub respects_bound: bool,
}

/// Closed-form lower bound for `P(B_n)`.
pub fn bn_lower_bound(n: usize, gamma: f64, law: &JumpLaw, horizon: f64, c: f64) -> f64 {
    let nf = n as f64;
    let sigma_t = law.large_rate() * horizon;
    let big_c = law.tail_constant();
    let mut poisson = 0.0;
    let mut term = 1.0;
    for big_n in 1..=g_of_n(n, gamma) {
        term *= sigma_t / big_n as f64;
        poisson += term;
    }
    (-0.5 * c * nf.powf(2.0 * gamma - 1.0)).exp() * (1.0 - big_c * nf.powf(gamma - law.beta)) * (-sigma_t).exp() * poisson
}

fn in_bn(jumps: &[crate::noise::Jump], n: usize, g: usize, horizon: f64) -> bool {
    let count = jumps.len();
    if count == 0 || count > g {
        return false;
    }
    if jumps.iter().any(|j| j.magnitude.abs() > n as f64) {
        return false;
    }
    let gap = horizon / n as f64;
    jumps.windows(2).all(|w| w[1].time - w[0].time >= gap)
}

fn check_gamma(gamma: f64, law: &JumpLaw) -> Result<()> {
    if !(gamma > 0.0 && gamma < 0.5_f64.min(law.beta)) {
        return Err(Error::config(MODULE, format!("gamma must lie in (0, min(1/2, beta)) = (0, {}), got {gamma}", 0.5_f64.min(law.beta))));
    }
    Ok(())
}

/// Monte Carlo `P(B_n)` for each `n`, with common random numbers across
/// `n`, and the paired standard errors of successive differences.
pub fn bn_probability(
    ns: &[usize],
    gamma: f64,
    law: &JumpLaw,
    horizon: f64,
    paths: usize,
    seed: u64,
) -> Result<(Vec<BnEstimate>, Vec<MeanEstimate>)> {
    check_gamma(gamma, law)?;
    if ns.iter().any(|&n| n < 2) {
        return Err(Error::config(MODULE, "n must be at least 2"));
    }
    if paths < 2 {
        return Err(Error::config(MODULE, "at least 2 Monte Carlo runs are needed"));
    }
    let c = product_constant(ns, gamma);
    let hits = run_paths(paths, |p| {
        let seq = sample_large_jumps(law, horizon, &mut path_rng(seed, p, StreamKind::Large))?;
        Ok(ns.iter().map(|&n| in_bn(&seq.jumps, n, g_of_n(n, gamma), horizon)).collect::<Vec<bool>>())
    })?;
    let mut acc = vec![Accumulator::default(); ns.len()];
    let mut diff = vec![Accumulator::default(); ns.len().saturating_sub(1)];
    for h in &hits {
        for (a, b) in acc.iter_mut().zip(h) {
            a.push(*b as u8 as f64);
        }
        for (i, d) in diff.iter_mut().enumerate() {
            d.push(h[i + 1] as u8 as f64 - h[i] as u8 as f64);
        }
    }
    let estimates = ns
        .iter()
        .zip(&acc)
        .map(|(&n, a)| {
            let e = a.estimate();
            let lower_bound = bn_lower_bound(n, gamma, law, horizon, c);
            BnEstimate {
                n,
                g_n: g_of_n(n, gamma),
                estimate: e.mean,
                se: e.se,
                lower_bound,
                c,
                respects_bound: e.mean >= lower_bound - 3.0 * e.se,
            }
        })
        .collect();
    Ok((estimates, diff.iter().map(Accumulator::estimate).collect()))
}

#[derive(Debug, Clone, Serialize)]
pub struct GapEstimate {
    pub n: usize,
    pub conditioned_paths: usize,
    pub estimate: f64,
    pub se: f64,
    pub exact: f64,
    pub lower_bound: f64,
}

/// `P(|T_1 - T_2| >= T/n | N(T) = 2)` from the large-jump sampler by
/// conditioning on the count.
pub fn conditional_gap_probability(n: usize, law: &JumpLaw, horizon: f64, paths: usize, seed: u64) -> Result<GapEstimate> {
    if n < 2 {
        return Err(Error::config(MODULE, "n must be at least 2"));
    }
    let gap = horizon / n as f64;
    let hits = run_paths(paths, |p| {
        let seq = sample_large_jumps(law, horizon, &mut path_rng(seed, p, StreamKind::Large))?;
        Ok((seq.count() == 2).then(|| seq.jumps[1].time - seq.jumps[0].time >= gap))
    })?;
    let mut acc = Accumulator::default();
    hits.into_iter().flatten().for_each(|h| acc.push(h as u8 as f64));
    let e = acc.estimate();
    let nf = n as f64;
    Ok(GapEstimate {
        n,
        conditioned_paths: e.n,
        estimate: e.mean,
        se: e.se,
        exact: (1.0 - 1.0 / nf).powi(2),
        lower_bound: 1.0 - 2.0 / nf,
    })
}

/// One refinement problem: kernel, domain, coefficients for the largest `K`.
pub struct StudySetup<'a> {
    pub kernel: &'a MemoryKernel,
    pub length: f64,
    pub cfg: SolverConfig,
    pub coeffs: &'a CoefficientSet,
    pub law: Option<JumpLaw>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub modes: usize,
    /// sup over the coarse grid of the `H` distance to the previous level
    pub difference: f64,
    pub order: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

impl<'a> StudySetup<'a> {
    fn solve(&self, dt: f64, modes: usize, noise: &NoisePath) -> Result<MildSolutionPath> {
        if modes > self.coeffs.u0.len() {
            return Err(Error::config(MODULE, format!("coefficients carry {} modes, {modes} requested", self.coeffs.u0.len())));
        }
        let cfg = SolverConfig { dt, ..self.cfg.clone() };
        let op = SpectralOperator::dirichlet(self.length, modes)?;
        let tables = SolverTables::new(ResolventTable::build(self.kernel, &op, dt, cfg.n_steps())?);
        let mut coeffs = self.coeffs.clone();
        coeffs.u0.truncate(modes);
        let solver = Solver::new(&cfg, &tables, &op, &coeffs, self.law)?;
        solver.step(noise)
    }
}

/// Sup-over-grid `H` distance between two paths on the coarser grid, the
/// shorter mode vector padded with zeros.
pub fn path_distance(coarse: &MildSolutionPath, fine: &MildSolutionPath) -> Result<f64> {
    let ratio = (coarse.dt / fine.dt).round() as usize;
    if ratio == 0 || fine.n_steps != coarse.n_steps * ratio {
        return Err(Error::domain(MODULE, "grids are not nested"));
    }
    let mut sup = 0.0f64;
    for n in 0..=coarse.n_steps {
        let (a, b) = (coarse.at(n), fine.at(n * ratio));
        let len = a.len().max(b.len());
        let d: f64 = (0..len)
            .map(|k| a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        sup = sup.max(d);
    }
    Ok(sup)
}

fn refine<I>(setup: &StudySetup<'_>, levels: I, noise: &NoisePath) -> Result<ConvergenceTable>
where
    I: Iterator<Item = (f64, usize)>,
{
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    let mut prev: Option<MildSolutionPath> = None;
    for (dt, modes) in levels {
        let path = setup.solve(dt, modes, noise)?;
        let difference = match &prev {
            Some(p) => path_distance(p, &path)?,
            None => f64::NAN,
        };
        let order = rows
            .last()
            .filter(|r| r.difference.is_finite() && r.difference > 0.0 && difference > 0.0)
            .map(|r| (r.difference / difference).log2());
        rows.push(ConvergenceRow { dt, modes, difference, order });
        prev = Some(path);
    }
    Ok(ConvergenceTable { rows })
}

/// Successive differences under `dt` halving on one noise realization.
pub fn convergence_in_dt(setup: &StudySetup<'_>, dts: &[f64], modes: usize, noise: &NoisePath) -> Result<ConvergenceTable> {
    refine(setup, dts.iter().map(|&dt| (dt, modes)), noise)
}

/// Successive differences under mode refinement on one noise realization.
pub fn convergence_in_modes(setup: &StudySetup<'_>, dt: f64, modes: &[usize], noise: &NoisePath) -> Result<ConvergenceTable> {
    refine(setup, modes.iter().map(|&k| (dt, k)), noise)
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub q: f64,
    pub alpha_i: f64,
    pub skipped: Option<String>,
    pub estimate: Option<MeanEstimate>,
    /// standard error from the first half of the paths
    pub half_se: Option<f64>,
    pub max_value: Option<f64>,
    /// whether `se * sqrt(2)` stays within 25% of the half-sample SE
    pub stabilized: Option<bool>,
}

/// `E |u(T)|^q` in `H^A_{-alpha_I}` over a grid of `(q, alpha_I)`, from one
/// ensemble of terminal values. Inadmissible points are skipped.
pub fn moment_vs_indices(
    solver: &Solver<'_>,
    law: &JumpLaw,
    rho: f64,
    grid: &[(f64, f64)],
    paths: usize,
    seed: u64,
    select: NoiseSelection,
) -> Result<Vec<MomentRow>> {
    if paths < 4 {
        return Err(Error::config(MODULE, "moment tables need at least 4 paths"));
    }
    let horizon = solver.cfg.horizon;
    let finals = run_paths(paths, |p| {
        let noise = with_path(seed, p, sample_noise_path(law, horizon, seed, p, select))?;
        Ok(with_path(seed, p, solver.step(&noise))?.final_value().to_vec())
    })?;
    let mut rows = Vec::with_capacity(grid.len());
    for &(q, alpha_i) in grid {
        let cfg = SolverConfig { q, alpha_i, ..solver.cfg.clone() };
        let bad = cfg.admissibility(rho);
        if !bad.is_empty() {
            rows.push(MomentRow { q, alpha_i, skipped: Some(bad.join("; ")), estimate: None, half_se: None, max_value: None, stabilized: None });
            continue;
        }
        let values: Vec<f64> = finals.iter().map(|u| solver.op.fractional_norm(u, -alpha_i).powf(q)).collect();
        let full = crate::stats::mean_se(&values);
        let half = crate::stats::mean_se(&values[..paths / 2]);
        let max_value = values.iter().copied().fold(0.0, f64::max);
        let stabilized = full.se > 0.0 && ((full.se * 2f64.sqrt() / half.se) - 1.0).abs() < 0.25;
        rows.push(MomentRow { q, alpha_i, skipped: None, estimate: Some(full), half_se: Some(half.se), max_value: Some(max_value), stabilized: Some(stabilized) });
    }
    Ok(rows)
}
