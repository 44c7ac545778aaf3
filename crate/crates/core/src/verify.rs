//! The invariant suite behind `svolterra verify`.
//!
//! Each check records what it measured and the threshold it was held to.

use serde::Serialize;

use crate::analysis::{self, EnsembleOptions};
use crate::config::{KernelChoice, Problem, RunConfig};
use crate::error::Result;
use crate::kernel::{self, MemoryKernel};
use crate::mittag_leffler::mittag_leffler;
use crate::noise::{self, path_rng, sample_noise_path, NoisePath, NoiseSelection, StreamKind};
use crate::resolvent::{self, ResolventTable};
use crate::solver::{self, CoefficientSet, Gain, Solver, SolverTables};
use crate::spectral::delta_partial_norms_sq;
use crate::stats;

/// Significance level for distributional tests. The suite runs several on
/// every invocation, so a per-test level of 1% would fail healthy runs.
pub const STAT_LEVEL: f64 = 1e-4;

/// Largest accepted |estimate - exact| / SE for Monte Carlo checks.
pub const Z_LIMIT: f64 = 4.0;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, measured, threshold, detail: detail.into() }
    }

    /// `measured <= threshold`
    fn at_most(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self::new(name, measured <= threshold, measured, threshold, detail)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Squared partial norms of `delta_x` at doubling cutoffs and their
/// successive increments.
#[derive(Debug, Clone, Serialize)]
pub struct DeltaThreshold {
    pub alpha: f64,
    pub cutoffs: Vec<usize>,
    pub norms_sq: Vec<f64>,
    pub increments: Vec<f64>,
    /// increments shrink at every doubling
    pub cauchy: bool,
    /// increments grow at every doubling
    pub growing: bool,
}

pub fn delta_threshold(x: f64, alpha: f64, cutoffs: &[usize]) -> Result<DeltaThreshold> {
    let norms_sq = delta_partial_norms_sq(1.0, x, alpha, cutoffs)?;
    let increments: Vec<f64> = norms_sq.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(DeltaThreshold {
        alpha,
        cutoffs: cutoffs.to_vec(),
        cauchy: increments.windows(2).all(|w| w[1] < w[0]),
        growing: increments.windows(2).all(|w| w[1] > w[0]),
        norms_sq,
        increments,
    })
}

/// `max_n |s_mu(t_n) - E_rho(-mu t_n^rho)|` over a resolvent row.
pub fn oracle_error(row: &[f64], mu: f64, rho: f64, dt: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for (n, s) in row.iter().enumerate() {
        let t = n as f64 * dt;
        let e = mittag_leffler(rho, -mu * t.powf(rho))?;
        worst = worst.max((s - e).abs());
    }
    Ok(worst)
}

/// Runs every check on the configured problem. `tables` must match the
/// configured grid.
pub fn run_suite(cfg: &RunConfig, problem: &Problem, tables: &SolverTables) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let seed = cfg.seed;
    let k = &problem.kernel;
    let op = &problem.op;
    let law = &problem.law;
    let scfg = &cfg.solver;

    // kernel
    let report = kernel::analyze(k, &kernel::log_grid(1e-3, 10.0, 200))?;
    checks.push(Check::new(
        "kernel.accepted",
        report.accepted,
        report.rho_hat.unwrap_or(f64::NAN),
        f64::NAN,
        report.rejection.clone().unwrap_or_else(|| "sector in (1,2), 4-monotone".into()),
    ));
    if cfg.kernel.kind == KernelChoice::Model {
        let rho_hat = report.rho_hat.unwrap_or(f64::NAN);
        let err = (rho_hat - cfg.kernel.rho).abs();
        checks.push(Check::new("kernel.sector_parameter", err <= 1e-3, err, 1e-3, format!("rho_hat = {rho_hat}")));
    }

    // resolvent
    let table = &tables.table;
    checks.push(Check::at_most("resolvent.bounded", table.max_abs() - 1.0, resolvent::BOUND_TOLERANCE, "max |s_mu(t)| - 1"));
    if let MemoryKernel::ModelPowerExp { rho, eta } = *k {
        if eta == 0.0 && scfg.dt <= 1e-3 {
            let steps = ((1.0f64.min(scfg.horizon)) / scfg.dt).round() as usize;
            let mu = table.mu()[0];
            let err = oracle_error(&table.row(0)[..=steps], mu, rho, scfg.dt)?;
            checks.push(Check::at_most("resolvent.mittag_leffler", err, 1e-4, format!("first mode, mu = {mu}")));
        }
    }
    let betas = resolvent::symmetric_beta_grid(1e-3, 1e4, 200);
    let mut worst = f64::INFINITY;
    for mu in [table.mu()[0], 10.0 * table.mu()[0]] {
        for omega in [0.1, 1.0] {
            worst = worst.min(resolvent::positive_definiteness_check(k, mu, omega, &betas)?.min_value);
        }
    }
    checks.push(Check::new("resolvent.positivity", worst >= -resolvent::POSITIVITY_TOLERANCE, worst, -resolvent::POSITIVITY_TOLERANCE, "min 2 Re 1/(omega + i beta + mu b_hat)"));

    // noise
    let has_noise_modes = op.kind() == crate::spectral::OperatorKind::DirichletLaplacian1D;
    let sigma = law.length * law.split_r.powf(-law.beta) / law.beta;
    checks.push(Check::at_most("noise.large_rate", (law.large_rate() - sigma).abs(), 1e-12 * sigma, "sigma = L r^-beta / beta"));
    let tail = noise::tail_bound_check(law, &[2.0 * law.split_r, 4.0 * law.split_r], 100_000, &mut path_rng(seed, 0, StreamKind::Large))?;
    checks.push(Check::new("noise.tail_bound", tail.passed, tail.constant, f64::NAN, "analytic tail within C x^-beta, empirical within 3 SE"));
    let runs = 10_000u64;
    let mut counts = Vec::with_capacity(runs as usize);
    let mut firsts = Vec::new();
    for p in 0..runs {
        let seq = noise::sample_large_jumps(law, scfg.horizon, &mut path_rng(seed, p, StreamKind::Large))?;
        counts.push(seq.count());
        let long = noise::sample_large_jumps(law, 50.0 / law.large_rate(), &mut path_rng(seed ^ 0x5eed, p, StreamKind::Large))?;
        if let Some(j) = long.jumps.first() {
            firsts.push(j.time);
        }
    }
    let chi = stats::chi_square_poisson(&counts, law.large_rate() * scfg.horizon)?;
    checks.push(Check::new("noise.count_chi_square", chi.passes(STAT_LEVEL), chi.p_value, STAT_LEVEL, format!("statistic {} on {} dof", chi.statistic, chi.dof)));
    let ks = stats::ks_exponential(&firsts, law.large_rate())?;
    checks.push(Check::new("noise.arrival_ks", ks.passes(STAT_LEVEL), ks.p_value, STAT_LEVEL, format!("D = {}", ks.statistic)));

    // solver
    let select = if has_noise_modes { cfg.noise_selection() } else { NoiseSelection { small: false, large: false } };
    let solver_law = select.small.then_some(*law);
    let zero = CoefficientSet::homogeneous(problem.coeffs.u0.clone());
    let s0 = Solver::new(scfg, tables, op, &zero, None)?;
    let path = s0.step(&NoisePath::default())?;
    let mut homog = 0.0f64;
    for n in 0..=scfg.n_steps() {
        for (m, v) in path.at(n).iter().enumerate() {
            homog = homog.max((v - table.value(m, n) * zero.u0[m]).abs());
        }
    }
    checks.push(Check::at_most("solver.homogeneous_exact", homog, 0.0, "zero drift and noise reproduce S(t) u0"));

    let main = Solver::new(scfg, tables, op, &problem.coeffs, solver_law)?;
    if has_noise_modes {
        let mut worst = 0.0f64;
        let mut seen = 0;
        let mut p = 0u64;
        let jumps_only = NoiseSelection { small: false, large: true };
        let large_only = Solver::new(scfg, tables, op, &problem.coeffs, None)?;
        while seen < 20 && p < 2000 {
            let noise = sample_noise_path(law, scfg.horizon, seed, p, jumps_only)?;
            p += 1;
            if noise.large.count() == 0 {
                continue;
            }
            seen += 1;
            let path = large_only.step(&noise)?;
            worst = worst.max(analysis::cadlag_audit(&path, op, scfg.alpha, f64::INFINITY).max_identity_error);
        }
        checks.push(Check::at_most("solver.jump_identity", worst, 1e-10, format!("{seen} paths with large jumps")));
    }

    let mut worst = 0.0f64;
    let mut factors = Vec::new();
    for p in 0..2u64 {
        let noise = if has_noise_modes { sample_noise_path(law, scfg.horizon, seed, p, select)? } else { NoisePath::default() };
        let direct = main.step(&noise)?;
        let (fixed, trace) = main.picard(&noise)?;
        let diff: Vec<f64> = direct.values.iter().zip(&fixed.values).map(|(a, b)| a - b).collect();
        let k_modes = main.modes();
        let rel = solver::weighted_norm(&diff, k_modes, scfg.dt, op, scfg.lambda, scfg.q, scfg.alpha)
            / solver::weighted_norm(&direct.values, k_modes, scfg.dt, op, scfg.lambda, scfg.q, scfg.alpha).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        factors.push(trace.contraction_factor);
    }
    checks.push(Check::at_most("solver.picard_matches_stepper", worst, 1e-6, format!("contraction factors {factors:?}")));

    let n = scfg.n_steps() + 1;
    let xi = vec![1.0; n * op.modes()];
    let ratios = solver::convolution_damping_ratio(tables, op, &xi, &[1.0, 10.0, 100.0, 1000.0], scfg.q, scfg.alpha)?;
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    checks.push(Check::new("solver.convolution_damping", decreasing, ratios[3] / ratios[0], 1.0, format!("ratios {ratios:?}")));

    // analysis
    let opts = EnsembleOptions { paths: 16, seed, select, q: scfg.q, alpha_i: scfg.alpha_i, tracked_modes: 8 };
    let a = serde_json::to_string(&analysis::mc_ensemble(&main, law, &opts)?).unwrap_or_default();
    let b = serde_json::to_string(&analysis::mc_ensemble(&main, law, &opts)?).unwrap_or_default();
    checks.push(Check::new("analysis.ensemble_deterministic", a == b && !a.is_empty(), 0.0, 0.0, "two 16-path ensembles, same seed"));

    if has_noise_modes {
        let comp = CoefficientSet::homogeneous(problem.coeffs.u0.clone()).with_gains(Gain::constant(1.0), Gain::ZERO);
        let cs = Solver::new(scfg, tables, op, &comp, Some(*law))?;
        let opts = EnsembleOptions {
            paths: cfg.mc_paths,
            seed,
            select: NoiseSelection { small: true, large: false },
            q: scfg.q,
            alpha_i: scfg.alpha_i,
            tracked_modes: 8,
        };
        let summary = analysis::mc_ensemble(&cs, law, &opts)?;
        let last = summary.mode_mean.len() - 1;
        let baseline = table.apply(scfg.horizon, &comp.u0)?;
        let z = summary.mode_mean[last]
            .iter()
            .zip(&summary.mode_se[last])
            .zip(&baseline)
            .map(|((m, se), b)| if *se > 0.0 { (m - b).abs() / se } else { 0.0 })
            .fold(0.0, f64::max);
        checks.push(Check::at_most("analysis.compensated_mean", z, Z_LIMIT, format!("max |mean - S(T)u0| / SE over 8 modes, {} paths", cfg.mc_paths)));

        let gap = analysis::conditional_gap_probability(10, law, scfg.horizon, 100_000, seed)?;
        let z = (gap.estimate - gap.exact).abs() / gap.se;
        checks.push(Check::at_most("analysis.gap_probability", z, Z_LIMIT, format!("estimate {} vs exact {}", gap.estimate, gap.exact)));
    }

    // spectral threshold
    let cutoffs: Vec<usize> = (8..=16).map(|p| 1usize << p).collect();
    let conv = delta_threshold(0.3, 0.3, &cutoffs)?;
    let div = delta_threshold(0.3, 0.2, &cutoffs)?;
    checks.push(Check::new(
        "spectral.delta_threshold",
        conv.cauchy && div.growing,
        *conv.increments.last().unwrap_or(&f64::NAN),
        f64::NAN,
        "alpha = 0.3 Cauchy, alpha = 0.2 growing",
    ));

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { checks, passed })
}

/// Build the resolvent tables for a configured problem.
pub fn build_tables(cfg: &RunConfig, problem: &Problem) -> Result<SolverTables> {
    let table = ResolventTable::build(&problem.kernel, &problem.op, cfg.solver.dt, cfg.solver.n_steps())?;
    Ok(SolverTables::new(table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn suite_passes_on_a_small_problem() {
        let cfg = parse_config("operator.modes = 8\nsolver.dt = 1e-2\nmc.paths = 50\nseed = 3\n").unwrap();
        let problem = cfg.build().unwrap();
        let tables = build_tables(&cfg, &problem).unwrap();
        let report = run_suite(&cfg, &problem, &tables).unwrap();
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).collect();
        assert!(report.passed, "{failed:?}");
        for prefix in ["kernel.", "resolvent.", "noise.", "solver.", "analysis.", "spectral."] {
            assert!(report.checks.iter().any(|c| c.name.starts_with(prefix)), "no {prefix} check");
        }
    }

    #[test]
    fn delta_threshold_separates_quarter() {
        let cutoffs: Vec<usize> = (6..=12).map(|p| 1usize << p).collect();
        let above = delta_threshold(0.3, 0.35, &cutoffs).unwrap();
        assert!(above.cauchy && !above.growing);
        let below = delta_threshold(0.3, 0.15, &cutoffs).unwrap();
        assert!(below.growing && !below.cauchy);
        assert!(below.norms_sq.windows(2).all(|w| w[1] > w[0]));
    }
}
