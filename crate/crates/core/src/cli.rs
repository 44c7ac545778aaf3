//! Command-line front end.
//!
//! Every subcommand writes its artifacts and one `manifest.json` into
//! `<output dir>/<subcommand>/`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{self, EnsembleOptions};
use crate::config::{self, OutputFormat, Problem, RunConfig};
use crate::error::{Error, Result};
use crate::kernel;
use crate::noise::{sample_noise_path, NoisePath};
use crate::solver::{MildSolutionPath, Solver};
use crate::verify;

/// Exit code for a failed property check.
pub const EXIT_PROPERTY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "svolterra", version, about = "Stochastic Volterra equations with memory kernels and jump noise")]
pub struct Cli {
    /// Configuration file (flat dotted-key TOML)
    #[arg(short, long, global = true, default_value = "configs/sample.toml")]
    pub config: PathBuf,
    /// Override the master seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the output directory (takes precedence over the environment)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sector parameter and monotonicity report for the configured kernel
    AnalyzeKernel,
    /// Tabulate the scalar resolvents of every mode
    Resolvent,
    /// Simulate one path
    Simulate {
        /// Path index within the master seed's stream family
        #[arg(long, default_value_t = 0)]
        path: u64,
        /// Solve by Picard iteration instead of the direct stepper
        #[arg(long)]
        picard: bool,
    },
    /// Monte Carlo ensemble
    Mc {
        /// Override mc.paths
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Run the invariant suite; exits 4 if any check fails
    Verify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::AnalyzeKernel => "analyze-kernel",
            Command::Resolvent => "resolvent",
            Command::Simulate { .. } => "simulate",
            Command::Mc { .. } => "mc",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    config_path: String,
    config_sha256: String,
    seed: u64,
    versions: Versions,
    wall_time_seconds: f64,
    files: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Versions {
    svolterra: &'static str,
    manifest: u32,
}

struct Run {
    dir: PathBuf,
    files: Vec<String>,
}

impl Run {
    fn create(root: &Path, sub: &str) -> Result<Self> {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        f.write_all(bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn write_csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        self.write(name, &bytes)
    }
}

/// Shortest representation that parses back to the same `f64`.
fn num(x: f64) -> String {
    format!("{x}")
}

fn output_root(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    if let Some(o) = &cli.out {
        return o.clone();
    }
    match std::env::var_os(config::OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_dir.clone(),
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let start = Instant::now();
    let (mut cfg, text) = config::load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let problem = cfg.build()?;
    let mut out = Run::create(&output_root(cli, &cfg), cli.command.name())?;

    let code = match &cli.command {
        Command::AnalyzeKernel => analyze_kernel(&problem, &mut out)?,
        Command::Resolvent => resolvent(&cfg, &problem, &mut out)?,
        Command::Simulate { path, picard } => simulate(&cfg, &problem, *path, *picard, &mut out)?,
        Command::Mc { paths } => mc(&cfg, &problem, paths.unwrap_or(cfg.mc_paths), &mut out)?,
        Command::Verify => verify_cmd(&cfg, &problem, &mut out)?,
    };

    let manifest = Manifest {
        subcommand: cli.command.name(),
        config_path: cli.config.display().to_string(),
        config_sha256: format!("{:x}", Sha256::digest(text.as_bytes())),
        seed: cfg.seed,
        versions: Versions { svolterra: env!("CARGO_PKG_VERSION"), manifest: 1 },
        wall_time_seconds: start.elapsed().as_secs_f64(),
        files: out.files.clone(),
    };
    out.write_json("manifest.json", &manifest)?;
    Ok(code)
}

fn analyze_kernel(problem: &Problem, out: &mut Run) -> Result<i32> {
    let report = kernel::analyze(&problem.kernel, &kernel::log_grid(1e-3, 10.0, 200))?;
    println!(
        "kernel {:?}: rho_hat = {}, accepted = {}",
        report.kind,
        report.rho_hat.map_or("n/a".into(), num),
        report.accepted
    );
    if let Some(r) = &report.rejection {
        println!("rejected: {r}");
    }
    out.write_json("kernel.json", &report)?;
    Ok(0)
}

#[derive(Serialize)]
struct ResolventSummary {
    modes: usize,
    dt: f64,
    n_steps: usize,
    max_abs: f64,
    min_value: f64,
    interpolation_error: f64,
}

fn resolvent(cfg: &RunConfig, problem: &Problem, out: &mut Run) -> Result<i32> {
    let tables = verify::build_tables(cfg, problem)?;
    let t = &tables.table;
    let summary = ResolventSummary {
        modes: t.modes(),
        dt: t.dt(),
        n_steps: t.n_steps(),
        max_abs: t.max_abs(),
        min_value: t.min_value(),
        interpolation_error: t.interpolation_error_estimate(),
    };
    println!("resolvent: {} modes, max |s| = {}, min s = {}", summary.modes, num(summary.max_abs), num(summary.min_value));
    match cfg.output_format {
        OutputFormat::Csv => {
            let mut header = vec!["t".to_string()];
            header.extend((1..=t.modes()).map(|k| format!("s_{k}")));
            let rows: Vec<Vec<String>> = (0..=t.n_steps())
                .map(|n| {
                    let mut r = vec![num(n as f64 * t.dt())];
                    r.extend((0..t.modes()).map(|k| num(t.value(k, n))));
                    r
                })
                .collect();
            out.write_csv("resolvent.csv", &header, &rows)?;
        }
        OutputFormat::Json => {
            let rows: Vec<&[f64]> = (0..t.modes()).map(|k| t.row(k)).collect();
            out.write_json("resolvent_rows.json", &rows)?;
        }
    }
    out.write_json("resolvent.json", &summary)?;
    Ok(0)
}

/// Grid rows (flag 0) merged with pre-jump (-1) and post-jump (1) rows.
fn path_rows(path: &MildSolutionPath) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let mut jumps = path.jumps.iter().peekable();
    let row = |t: f64, u: &[f64], flag: i32| {
        let mut r = vec![num(t)];
        r.extend(u.iter().map(|v| num(*v)));
        r.push(flag.to_string());
        r
    };
    for n in 0..=path.n_steps {
        let t = n as f64 * path.dt;
        while let Some(j) = jumps.peek() {
            if j.time > t {
                break;
            }
            rows.push(row(j.time, &j.left, -1));
            rows.push(row(j.time, &j.right, 1));
            jumps.next();
        }
        rows.push(row(t, path.at(n), 0));
    }
    rows
}

fn jump_rows(noise: &NoisePath) -> Vec<Vec<String>> {
    let large = noise.large.jumps.iter().map(|j| ("large", j));
    let small = noise.small.iter().map(|j| ("small", j));
    let mut all: Vec<_> = large.chain(small).collect();
    all.sort_by(|a, b| a.1.time.total_cmp(&b.1.time));
    all.into_iter()
        .map(|(kind, j)| vec![kind.to_string(), num(j.time), num(j.location), num(j.magnitude)])
        .collect()
}

fn simulate(cfg: &RunConfig, problem: &Problem, index: u64, picard: bool, out: &mut Run) -> Result<i32> {
    let tables = verify::build_tables(cfg, problem)?;
    let select = cfg.noise_selection();
    let law = select.small.then_some(problem.law);
    let solver = Solver::new(&cfg.solver, &tables, &problem.op, &problem.coeffs, law)?;
    let noise = if select.small || select.large {
        sample_noise_path(&problem.law, cfg.solver.horizon, cfg.seed, index, select)?
    } else {
        NoisePath::default()
    };
    let path = if picard {
        let (p, trace) = solver.picard(&noise)?;
        println!("picard: {} sweeps, contraction factor {}", trace.iterations, num(trace.contraction_factor));
        out.write_json("picard_trace.json", &trace)?;
        p
    } else {
        solver.step(&noise)?
    };
    println!(
        "simulate: path {index}, {} large and {} small jumps, |u(T)| = {}",
        noise.large.count(),
        noise.small.len(),
        num(problem.op.fractional_norm(path.final_value(), 0.0))
    );
    match cfg.output_format {
        OutputFormat::Csv => {
            let mut header = vec!["t".to_string()];
            header.extend((1..=path.modes).map(|k| format!("u_{k}")));
            header.push("flag".into());
            out.write_csv("path.csv", &header, &path_rows(&path))?;
            let header: Vec<String> = ["kind", "time", "location", "magnitude"].iter().map(|s| s.to_string()).collect();
            out.write_csv("jumps.csv", &header, &jump_rows(&noise))?;
        }
        OutputFormat::Json => {
            out.write_json("path.json", &path)?;
            out.write_json("jumps.json", &noise)?;
        }
    }
    Ok(0)
}

fn mc(cfg: &RunConfig, problem: &Problem, paths: usize, out: &mut Run) -> Result<i32> {
    let tables = verify::build_tables(cfg, problem)?;
    let select = cfg.noise_selection();
    let law = select.small.then_some(problem.law);
    let solver = Solver::new(&cfg.solver, &tables, &problem.op, &problem.coeffs, law)?;
    let opts = EnsembleOptions { paths, seed: cfg.seed, select, q: cfg.solver.q, alpha_i: cfg.solver.alpha_i, tracked_modes: 8 };
    let summary = analysis::mc_ensemble(&solver, &problem.law, &opts)?;
    println!(
        "mc: {paths} paths, E|u(T)|^q = {} +/- {} (q = {}, alpha_I = {})",
        num(summary.moment.mean),
        num(summary.moment.se),
        cfg.solver.q,
        cfg.solver.alpha_i
    );
    out.write_json("ensemble.json", &summary)?;
    if cfg.output_format == OutputFormat::Csv {
        let mut header = vec!["t".to_string(), "norm_q_mean".into(), "norm_q_var".into()];
        let tracked = summary.mode_mean.first().map_or(0, Vec::len);
        for k in 1..=tracked {
            header.push(format!("mean_u_{k}"));
            header.push(format!("se_u_{k}"));
        }
        let rows: Vec<Vec<String>> = (0..summary.times.len())
            .map(|n| {
                let mut r = vec![num(summary.times[n]), num(summary.norm_q_mean[n]), num(summary.norm_q_var[n])];
                for k in 0..tracked {
                    r.push(num(summary.mode_mean[n][k]));
                    r.push(num(summary.mode_se[n][k]));
                }
                r
            })
            .collect();
        out.write_csv("moments.csv", &header, &rows)?;
    }
    Ok(0)
}

fn verify_cmd(cfg: &RunConfig, problem: &Problem, out: &mut Run) -> Result<i32> {
    let tables = verify::build_tables(cfg, problem)?;
    let report = verify::run_suite(cfg, problem, &tables)?;
    for c in &report.checks {
        println!("{} {}: measured {} (threshold {}) {}", if c.passed { "PASS" } else { "FAIL" }, c.name, num(c.measured), num(c.threshold), c.detail);
    }
    out.write_json("verify.json", &report)?;
    Ok(if report.passed { 0 } else { EXIT_PROPERTY })
}
