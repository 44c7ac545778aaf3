//! Run configuration in flat dotted-key TOML.
//!
//! Keys may be written flat (`solver.dt = 1e-3`) or grouped under `[solver]`
//! headers; both flatten to the same key set. Unknown keys are errors, and
//! every violation is reported, not just the first.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{self, MemoryKernel};
use crate::noise::{JumpLaw, NoiseSelection};
use crate::solver::{CoefficientSet, Gain, SolverConfig};
use crate::spectral::SpectralOperator;

const MODULE: &str = "config";

/// Environment variable that overrides `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "SVOLTERRA_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    Model,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelSection {
    pub kind: KernelChoice,
    pub rho: f64,
    pub eta: f64,
    pub table_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorChoice {
    Dirichlet,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorSection {
    pub kind: OperatorChoice,
    pub length: f64,
    pub modes: usize,
    pub eigenvalues: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSection {
    pub beta: f64,
    pub split_r: f64,
    pub eps: f64,
    pub small: bool,
    pub large: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientSection {
    pub drift_linear: f64,
    pub drift_sine: f64,
    pub add_compensator: bool,
    pub gain_small: f64,
    pub gain_small_state: f64,
    pub gain_large: f64,
    pub gain_large_state: f64,
    pub u0_mode: usize,
    pub u0_amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub kernel: KernelSection,
    pub operator: OperatorSection,
    pub noise: NoiseSection,
    pub solver: SolverConfig,
    pub coefficients: CoefficientSection,
    pub mc_paths: usize,
    pub output_dir: PathBuf,
    pub output_format: OutputFormat,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSection { kind: KernelChoice::Model, rho: 1.5, eta: 0.0, table_path: None },
            operator: OperatorSection { kind: OperatorChoice::Dirichlet, length: 1.0, modes: 256, eigenvalues: None },
            noise: NoiseSection { beta: 0.5, split_r: 1.0, eps: 0.01, small: true, large: true },
            solver: SolverConfig {
                horizon: 1.0,
                dt: 1e-3,
                lambda: 10.0,
                q: 1.2,
                alpha: 0.3,
                alpha_f: 0.3,
                alpha_g: 0.3,
                alpha_i: 0.3,
                picard_tol: 1e-10,
                picard_max_iter: 200,
            },
            coefficients: CoefficientSection {
                drift_linear: 1.0,
                drift_sine: 0.5,
                add_compensator: false,
                gain_small: 0.5,
                gain_small_state: 0.2,
                gain_large: 0.5,
                gain_large_state: 0.2,
                u0_mode: 1,
                u0_amplitude: 1.0,
            },
            mc_paths: 200,
            output_dir: PathBuf::from("out"),
            output_format: OutputFormat::Csv,
            seed: 0,
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "kernel.kind",
    "kernel.rho",
    "kernel.eta",
    "kernel.table_path",
    "operator.kind",
    "operator.length",
    "operator.modes",
    "operator.eigenvalues",
    "noise.beta",
    "noise.split_r",
    "noise.eps",
    "noise.seed",
    "noise.small",
    "noise.large",
    "solver.horizon",
    "solver.dt",
    "solver.lambda",
    "solver.q",
    "solver.alpha",
    "solver.alpha_f",
    "solver.alpha_g",
    "solver.alpha_i",
    "solver.picard_tol",
    "solver.picard_max_iter",
    "solver.drift_linear",
    "solver.drift_sine",
    "solver.add_compensator",
    "solver.gain_small",
    "solver.gain_small_state",
    "solver.gain_large",
    "solver.gain_large_state",
    "solver.u0_mode",
    "solver.u0_amplitude",
    "mc.paths",
    "output.dir",
    "output.format",
    "seed",
];

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

struct Reader {
    values: BTreeMap<String, toml::Value>,
    errors: Vec<String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.values.remove(key)
    }

    fn float(&mut self, key: &str, slot: &mut f64) {
        match self.take(key) {
            None => {}
            Some(toml::Value::Float(f)) => *slot = f,
            Some(toml::Value::Integer(i)) => *slot = i as f64,
            Some(v) => self.errors.push(format!("{key}: expected a number, got {}", v.type_str())),
        }
    }

    fn uint(&mut self, key: &str) -> Option<u64> {
        match self.take(key) {
            None => None,
            Some(toml::Value::Integer(i)) if i >= 0 => Some(i as u64),
            Some(v) => {
                self.errors.push(format!("{key}: expected a nonnegative integer, got {v}"));
                None
            }
        }
    }

    fn usize(&mut self, key: &str, slot: &mut usize) {
        if let Some(v) = self.uint(key) {
            *slot = v as usize;
        }
    }

    fn boolean(&mut self, key: &str, slot: &mut bool) {
        match self.take(key) {
            None => {}
            Some(toml::Value::Boolean(b)) => *slot = b,
            Some(v) => self.errors.push(format!("{key}: expected a boolean, got {}", v.type_str())),
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.take(key) {
            None => None,
            Some(toml::Value::String(s)) => Some(s),
            Some(v) => {
                self.errors.push(format!("{key}: expected a string, got {}", v.type_str()));
                None
            }
        }
    }

    fn floats(&mut self, key: &str) -> Option<Vec<f64>> {
        match self.take(key) {
            None => None,
            Some(toml::Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for v in a {
                    match v {
                        toml::Value::Float(f) => out.push(f),
                        toml::Value::Integer(i) => out.push(i as f64),
                        other => {
                            self.errors.push(format!("{key}: expected numbers, found {}", other.type_str()));
                            return None;
                        }
                    }
                }
                Some(out)
            }
            Some(v) => {
                self.errors.push(format!("{key}: expected an array of numbers, got {}", v.type_str()));
                None
            }
        }
    }
}

/// Parse and validate a configuration. Errors list every violation.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, col) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::Invalid(vec![format!("{MODULE}: syntax error at line {line}, column {col}: {}", e.message().trim_end().replace('\n', "; "))])
    })?;
    let mut values = BTreeMap::new();
    flatten("", &table, &mut values);
    let mut r = Reader { values, errors: Vec::new() };
    let mut cfg = RunConfig::default();

    match r.string("kernel.kind").as_deref() {
        None | Some("model") => {}
        Some("tabulated") => cfg.kernel.kind = KernelChoice::Tabulated,
        Some(other) => r.errors.push(format!("kernel.kind: expected \"model\" or \"tabulated\", got \"{other}\"")),
    }
    r.float("kernel.rho", &mut cfg.kernel.rho);
    r.float("kernel.eta", &mut cfg.kernel.eta);
    cfg.kernel.table_path = r.string("kernel.table_path").map(PathBuf::from);

    match r.string("operator.kind").as_deref() {
        None | Some("dirichlet") => {}
        Some("explicit") => cfg.operator.kind = OperatorChoice::Explicit,
        Some(other) => r.errors.push(format!("operator.kind: expected \"dirichlet\" or \"explicit\", got \"{other}\"")),
    }
    r.float("operator.length", &mut cfg.operator.length);
    r.usize("operator.modes", &mut cfg.operator.modes);
    cfg.operator.eigenvalues = r.floats("operator.eigenvalues");

    r.float("noise.beta", &mut cfg.noise.beta);
    r.float("noise.split_r", &mut cfg.noise.split_r);
    r.float("noise.eps", &mut cfg.noise.eps);
    let noise_seed = r.uint("noise.seed");
    r.boolean("noise.small", &mut cfg.noise.small);
    r.boolean("noise.large", &mut cfg.noise.large);

    let s = &mut cfg.solver;
    r.float("solver.horizon", &mut s.horizon);
    r.float("solver.dt", &mut s.dt);
    r.float("solver.lambda", &mut s.lambda);
    r.float("solver.q", &mut s.q);
    r.float("solver.alpha", &mut s.alpha);
    r.float("solver.alpha_f", &mut s.alpha_f);
    r.float("solver.alpha_g", &mut s.alpha_g);
    r.float("solver.alpha_i", &mut s.alpha_i);
    r.float("solver.picard_tol", &mut s.picard_tol);
    r.usize("solver.picard_max_iter", &mut s.picard_max_iter);
    let c = &mut cfg.coefficients;
    r.float("solver.drift_linear", &mut c.drift_linear);
    r.float("solver.drift_sine", &mut c.drift_sine);
    r.boolean("solver.add_compensator", &mut c.add_compensator);
    r.float("solver.gain_small", &mut c.gain_small);
    r.float("solver.gain_small_state", &mut c.gain_small_state);
    r.float("solver.gain_large", &mut c.gain_large);
    r.float("solver.gain_large_state", &mut c.gain_large_state);
    r.usize("solver.u0_mode", &mut c.u0_mode);
    r.float("solver.u0_amplitude", &mut c.u0_amplitude);

    r.usize("mc.paths", &mut cfg.mc_paths);
    if let Some(d) = r.string("output.dir") {
        cfg.output_dir = PathBuf::from(d);
    }
    match r.string("output.format").as_deref() {
        None | Some("csv") => {}
        Some("json") => cfg.output_format = OutputFormat::Json,
        Some(other) => r.errors.push(format!("output.format: expected \"csv\" or \"json\", got \"{other}\"")),
    }
    let top_seed = r.uint("seed");
    match (top_seed, noise_seed) {
        (Some(a), Some(b)) if a != b => r.errors.push(format!("seed = {a} and noise.seed = {b} disagree")),
        (Some(a), _) | (None, Some(a)) => cfg.seed = a,
        (None, None) => {}
    }

    let mut errors = std::mem::take(&mut r.errors);
    for key in r.values.keys() {
        errors.push(format!("unknown key \"{key}\""));
    }
    let fields = cfg.field_violations();
    // admissibility messages are meaningless on top of invalid fields
    if fields.is_empty() {
        if let Some(rho) = cfg.model_rho() {
            errors.extend(cfg.solver.admissibility(rho));
        }
    }
    errors.extend(fields);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Invalid(errors.into_iter().map(|e| format!("{MODULE}: {e}")).collect()))
    }
}

/// Read and parse a configuration file.
pub fn load_config(path: &Path) -> Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let (Some(p), Some(dir)) = (cfg.kernel.table_path.as_ref(), path.parent()) {
        if p.is_relative() {
            cfg.kernel.table_path = Some(dir.join(p));
        }
    }
    Ok((cfg, text))
}

/// Objects built from a validated configuration.
pub struct Problem {
    pub kernel: MemoryKernel,
    pub rho: f64,
    pub op: SpectralOperator,
    pub law: JumpLaw,
    pub coeffs: CoefficientSet,
}

impl RunConfig {
    fn model_rho(&self) -> Option<f64> {
        (self.kernel.kind == KernelChoice::Model).then_some(self.kernel.rho)
    }

    pub fn noise_selection(&self) -> NoiseSelection {
        NoiseSelection { small: self.noise.small, large: self.noise.large }
    }

    pub fn modes(&self) -> usize {
        match (&self.operator.kind, &self.operator.eigenvalues) {
            (OperatorChoice::Explicit, Some(e)) => e.len(),
            _ => self.operator.modes,
        }
    }

    /// Range and consistency checks that need no kernel evaluation.
    fn field_violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let k = &self.kernel;
        match k.kind {
            KernelChoice::Model => {
                if !(k.rho > 1.0 && k.rho < 2.0) {
                    bad.push(format!("kernel.rho must lie in (1, 2), got {}", k.rho));
                }
                if !(k.eta >= 0.0 && k.eta.is_finite()) {
                    bad.push(format!("kernel.eta must be nonnegative, got {}", k.eta));
                }
                if k.table_path.is_some() {
                    bad.push("kernel.table_path is only valid with kernel.kind = \"tabulated\"".into());
                }
            }
            KernelChoice::Tabulated => {
                if k.table_path.is_none() {
                    bad.push("kernel.table_path is required with kernel.kind = \"tabulated\"".into());
                }
            }
        }
        let o = &self.operator;
        if !(o.length > 0.0 && o.length.is_finite()) {
            bad.push(format!("operator.length must be positive, got {}", o.length));
        }
        match o.kind {
            OperatorChoice::Dirichlet => {
                if o.modes == 0 {
                    bad.push("operator.modes must be at least 1".into());
                }
                if o.eigenvalues.is_some() {
                    bad.push("operator.eigenvalues is only valid with operator.kind = \"explicit\"".into());
                }
            }
            OperatorChoice::Explicit => match &o.eigenvalues {
                None => bad.push("operator.eigenvalues is required with operator.kind = \"explicit\"".into()),
                Some(e) => {
                    if let Err(err) = SpectralOperator::explicit(e.clone()) {
                        bad.push(format!("operator.eigenvalues: {err}"));
                    }
                    if self.noise.small || self.noise.large {
                        bad.push("explicit spectra have no eigenfunctions; set noise.small = false and noise.large = false".into());
                    }
                }
            },
        }
        let n = &self.noise;
        if let Err(e) = JumpLaw::new(n.beta, n.split_r, n.eps, o.length.max(f64::MIN_POSITIVE)) {
            bad.push(format!("noise: {e}"));
        }
        bad.extend(self.solver.validate());
        let c = &self.coefficients;
        if c.u0_mode > self.modes() {
            bad.push(format!("solver.u0_mode = {} exceeds the {} modes", c.u0_mode, self.modes()));
        }
        for (name, v) in [
            ("solver.drift_linear", c.drift_linear),
            ("solver.drift_sine", c.drift_sine),
            ("solver.gain_small", c.gain_small),
            ("solver.gain_small_state", c.gain_small_state),
            ("solver.gain_large", c.gain_large),
            ("solver.gain_large_state", c.gain_large_state),
            ("solver.u0_amplitude", c.u0_amplitude),
        ] {
            if !v.is_finite() {
                bad.push(format!("{name} must be finite"));
            }
        }
        if self.mc_paths < 2 {
            bad.push(format!("mc.paths must be at least 2, got {}", self.mc_paths));
        }
        bad
    }

    pub fn coefficient_set(&self) -> CoefficientSet {
        let c = &self.coefficients;
        let k = self.modes();
        let mut u0 = vec![0.0; k];
        if c.u0_mode >= 1 {
            u0[c.u0_mode - 1] = c.u0_amplitude;
        }
        let mut set = CoefficientSet::homogeneous(u0)
            .with_parametric_drift(c.drift_linear, c.drift_sine)
            .with_gains(Gain { base: c.gain_small, state: c.gain_small_state }, Gain { base: c.gain_large, state: c.gain_large_state });
        set.add_compensator = c.add_compensator;
        set
    }

    fn load_kernel(&self) -> Result<MemoryKernel> {
        match self.kernel.kind {
            KernelChoice::Model => MemoryKernel::model(self.kernel.rho, self.kernel.eta),
            KernelChoice::Tabulated => {
                let path = self.kernel.table_path.as_ref().ok_or_else(|| Error::config(MODULE, "kernel.table_path missing"))?;
                let (t, b) = read_kernel_table(path)?;
                MemoryKernel::tabulated(t, b)
            }
        }
    }

    /// Build kernel, operator, jump law and coefficients. For tabulated
    /// kernels this is where the sector estimate gates admissibility.
    pub fn build(&self) -> Result<Problem> {
        let kernel = self.load_kernel()?;
        let rho = match self.kernel.kind {
            KernelChoice::Model => self.kernel.rho,
            KernelChoice::Tabulated => kernel::sector_parameter(&kernel)?,
        };
        let bad = self.solver.admissibility(rho);
        if !bad.is_empty() {
            return Err(Error::Invalid(bad.into_iter().map(|e| format!("{MODULE}: {e}")).collect()));
        }
        let op = match self.operator.kind {
            OperatorChoice::Dirichlet => SpectralOperator::dirichlet(self.operator.length, self.operator.modes)?,
            OperatorChoice::Explicit => SpectralOperator::explicit(self.operator.eigenvalues.clone().unwrap_or_default())?,
        };
        let law = JumpLaw::new(self.noise.beta, self.noise.split_r, self.noise.eps, self.operator.length)?;
        Ok(Problem { kernel, rho, op, law, coeffs: self.coefficient_set() })
    }
}

/// Two-column `t,b` CSV, with an optional header row.
pub fn read_kernel_table(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let (mut t, mut b) = (Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::config(MODULE, format!("{}: {e}", path.display())))?;
        if rec.len() != 2 {
            return Err(Error::config(MODULE, format!("{}: row {} has {} fields, expected 2", path.display(), i + 1, rec.len())));
        }
        match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
            (Ok(x), Ok(y)) => {
                t.push(x);
                b.push(y);
            }
            _ if i == 0 => continue,
            _ => return Err(Error::config(MODULE, format!("{}: row {} is not numeric", path.display(), i + 1))),
        }
    }
    Ok((t, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(Error::Invalid(v)) => v,
            other => panic!("expected violations, got {other:?}"),
        }
    }

    #[test]
    fn empty_config_takes_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn flat_and_sectioned_keys_agree() {
        let a = parse_config("solver.dt = 0.002\nkernel.rho = 1.25\n").unwrap();
        let b = parse_config("[solver]\ndt = 0.002\n[kernel]\nrho = 1.25\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.solver.dt, 0.002);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = errors("noise.sigma = 1.0\n");
        assert_eq!(e, vec!["config: unknown key \"noise.sigma\"".to_string()]);
    }

    #[test]
    fn all_violations_are_listed() {
        let e = errors("noise.sigma = 1\nsolver.dt = \"x\"\nkernel.rho = 2.5\nmc.paths = 1\n");
        assert_eq!(e.len(), 4, "{e:?}");
    }

    #[test]
    fn admissibility_cites_condition() {
        let e = errors("solver.alpha = 0.2\nsolver.alpha_i = 0.2\nsolver.alpha_g = 0.3\n");
        assert!(e.iter().any(|m| m.contains("\"alpha >= alpha_G\"")), "{e:?}");
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_config("solver.dt = 0.1\nkernel.rho = = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn seeds_must_agree() {
        assert_eq!(parse_config("noise.seed = 5").unwrap().seed, 5);
        assert!(errors("seed = 1\nnoise.seed = 2\n")[0].contains("disagree"));
    }

    #[test]
    fn shipped_sample_is_valid() {
        let text = include_str!("../configs/sample.toml");
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.operator.modes, 256);
        assert_eq!(cfg.kernel.rho, 1.5);
        assert!(cfg.build().is_ok());
    }

    #[test]
    fn every_key_is_documented() {
        let doc = include_str!("../../../docs/config.md");
        for k in KEYS {
            assert!(doc.contains(&format!("`{k}`")), "{k} missing from docs/config.md");
        }
    }

    proptest::proptest! {
        #[test]
        fn any_unknown_key_is_rejected(section in "[a-z]{1,8}", name in "[a-z_]{1,12}") {
            let key = format!("{section}.{name}");
            proptest::prop_assume!(!KEYS.contains(&key.as_str()));
            let text = format!("{key} = 1\n");
            let errs = errors(&text);
            let expected = format!("unknown key \"{key}\"");
            proptest::prop_assert!(errs.iter().any(|e| e.contains(&expected)), "{:?}", errs);
        }
    }
}

