//! Mild-solution paths on a uniform grid.
//!
//! Both the direct stepper and the Picard iterator discretize
//!
//! ```text
//! u(t) = S(t) u0 + int_0^t S(t-s) f(s) ds
//!        + sum_{small jumps s_i < t} S(t-s_i) G y_i delta_{x_i}
//!        + sum_{large jumps T_j <= t} S(t-T_j) G_L y_j delta_{x_j}
//! ```
//!
//! with `f = F(u) - c G(u)` (`c` the compensator drift of the small jumps).
//! The drift integrand is frozen at the left grid point and the resolvent
//! is linearly interpolated, so each step weight is the exact integral of
//! the interpolant. This makes the compensated small-jump sum exactly
//! mean-zero at the discrete level.

use std::sync::{Arc, OnceLock};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{compensator_drift, Jump, JumpLaw, NoisePath};
use crate::resolvent::ResolventTable;
use crate::spectral::SpectralOperator;

const MODULE: &str = "solver";

/// Modes whose modulus exceeds this abort the path.
pub const BLOW_UP_LIMIT: f64 = 1e12;
/// Jumps closer than this to a grid node are applied at the node.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub horizon: f64,
    pub dt: f64,
    pub lambda: f64,
    pub q: f64,
    pub alpha: f64,
    pub alpha_f: f64,
    pub alpha_g: f64,
    pub alpha_i: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            dt: 1e-3,
            lambda: 0.0,
            q: 2.0,
            alpha: 0.3,
            alpha_f: 0.3,
            alpha_g: 0.3,
            alpha_i: 0.3,
            picard_tol: 1e-12,
            picard_max_iter: 200,
        }
    }
}

impl SolverConfig {
    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Basic shape checks independent of the kernel.
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            bad.push(format!("solver.horizon must be positive, got {}", self.horizon));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            bad.push(format!("solver.dt must lie in (0, horizon], got {}", self.dt));
        } else {
            let n = self.horizon / self.dt;
            if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
                bad.push(format!("solver.horizon / solver.dt = {n} must be an integer"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bad.push(format!("solver.lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.picard_tol > 0.0) {
            bad.push("solver.picard_tol must be positive".into());
        }
        if self.picard_max_iter == 0 {
            bad.push("solver.picard_max_iter must be at least 1".into());
        }
        bad
    }

    /// Admissibility of the regularity indices for sector parameter `rho`.
    /// Each violation names the inequality it breaks.
    pub fn admissibility(&self, rho: f64) -> Vec<String> {
        let (a, af, ag, ai, q) = (self.alpha, self.alpha_f, self.alpha_g, self.alpha_i, self.q);
        let mut bad = Vec::new();
        if !(q > 1.0) {
            bad.push(format!("condition \"q > 1\" violated: q = {q}"));
            return bad;
        }
        let bound = 1.0 - 1.0 / q;
        if !(a >= ai) {
            bad.push(format!("condition \"alpha >= alpha_I\" violated: alpha = {a}, alpha_I = {ai}"));
        }
        if !(a >= ag) {
            bad.push(format!("condition \"alpha >= alpha_G\" violated: alpha = {a}, alpha_G = {ag}"));
        }
        if !((af - a) * rho < bound) {
            bad.push(format!(
                "condition \"(alpha_F - alpha) rho < 1 - 1/q\" violated: ({af} - {a}) * {rho} = {} >= {bound}",
                (af - a) * rho
            ));
        }
        bad.extend(self.moment_admissibility(rho));
        if !(ag < 1.0 / (q * rho)) {
            bad.push(format!("condition \"alpha_G < 1/(q rho)\" violated: alpha_G = {ag}, 1/(q rho) = {}", 1.0 / (q * rho)));
        }
        if !(af < 1.0 / rho) {
            bad.push(format!("condition \"alpha_F < 1/rho\" violated: alpha_F = {af}, 1/rho = {}", 1.0 / rho));
        }
        if !(ai < 1.0 / (q * rho)) {
            bad.push(format!("condition \"alpha_I < 1/(q rho)\" violated: alpha_I = {ai}, 1/(q rho) = {}", 1.0 / (q * rho)));
        }
        bad
    }

    /// The extra conditions under which `u(t)` has finite `q`-moments in
    /// `H^A_{-alpha_I}`.
    pub fn moment_admissibility(&self, rho: f64) -> Vec<String> {
        let (af, ag, ai, q) = (self.alpha_f, self.alpha_g, self.alpha_i, self.q);
        let bound = 1.0 - 1.0 / q;
        let mut bad = Vec::new();
        if !((af - ai) * rho < bound) {
            bad.push(format!(
                "condition \"(alpha_F - alpha_I) rho < 1 - 1/q\" violated: ({af} - {ai}) * {rho} = {} >= {bound}",
                (af - ai) * rho
            ));
        }
        if !(ai >= ag) {
            bad.push(format!("condition \"alpha_I >= alpha_G\" violated: alpha_I = {ai}, alpha_G = {ag}"));
        }
        bad
    }
}

/// Scalar gain `base + state * n / (1 + n)` of the state norm `n`;
/// Lipschitz in `n` with constant `|state|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gain {
    pub base: f64,
    pub state: f64,
}

impl Gain {
    pub const ZERO: Gain = Gain { base: 0.0, state: 0.0 };

    pub fn constant(base: f64) -> Self {
        Self { base, state: 0.0 }
    }

    pub fn eval(&self, norm: f64) -> f64 {
        self.base + self.state * norm / (1.0 + norm)
    }

    pub fn lipschitz(&self) -> f64 {
        self.state.abs()
    }

    pub fn is_constant(&self) -> bool {
        self.state == 0.0
    }
}

/// `F(t, u) -> out`, written into a caller buffer.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct CoefficientSet {
    pub drift: Option<DriftFn>,
    pub drift_lipschitz: f64,
    /// whether `drift` ignores its state argument
    pub drift_state_free: bool,
    pub gain_small: Gain,
    pub gain_large: Gain,
    /// add `c G` back into the drift, i.e. drive with uncompensated small jumps
    pub add_compensator: bool,
    pub u0: Vec<f64>,
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("drift", &self.drift.as_ref().map(|_| "<fn>"))
            .field("drift_lipschitz", &self.drift_lipschitz)
            .field("gain_small", &self.gain_small)
            .field("gain_large", &self.gain_large)
            .field("add_compensator", &self.add_compensator)
            .field("u0", &self.u0)
            .finish()
    }
}

impl CoefficientSet {
    /// No drift, no noise gains.
    pub fn homogeneous(u0: Vec<f64>) -> Self {
        Self {
            drift: None,
            drift_lipschitz: 0.0,
            drift_state_free: true,
            gain_small: Gain::ZERO,
            gain_large: Gain::ZERO,
            add_compensator: false,
            u0,
        }
    }

    /// `F_k(u) = -linear u_k + sine sin(u_k)`.
    pub fn with_parametric_drift(mut self, linear: f64, sine: f64) -> Self {
        if linear == 0.0 && sine == 0.0 {
            self.drift = None;
            self.drift_lipschitz = 0.0;
            self.drift_state_free = true;
            return self;
        }
        self.drift = Some(Arc::new(move |_t, u: &[f64], out: &mut [f64]| {
            for (o, x) in out.iter_mut().zip(u) {
                *o = -linear * x + sine * x.sin();
            }
        }));
        self.drift_lipschitz = linear.abs() + sine.abs();
        self.drift_state_free = false;
        self
    }

    /// A drift that does not depend on the state.
    pub fn with_forcing<F>(mut self, forcing: F) -> Self
    where
        F: Fn(f64, &mut [f64]) + Send + Sync + 'static,
    {
        self.drift = Some(Arc::new(move |t, _u: &[f64], out: &mut [f64]| forcing(t, out)));
        self.drift_lipschitz = 0.0;
        self.drift_state_free = true;
        self
    }

    pub fn with_gains(mut self, small: Gain, large: Gain) -> Self {
        self.gain_small = small;
        self.gain_large = large;
        self
    }

    pub fn state_free(&self) -> bool {
        self.drift_state_free && self.gain_small.is_constant()
    }

    pub fn validate(&self, modes: usize) -> Result<()> {
        if self.u0.len() != modes {
            return Err(Error::config(MODULE, format!("u0 has {} entries, expected {modes}", self.u0.len())));
        }
        if !(self.drift_lipschitz.is_finite() && self.drift_lipschitz >= 0.0) {
            return Err(Error::config(MODULE, "drift Lipschitz constant must be finite"));
        }
        if self.u0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(MODULE, "u0 must be finite"));
        }
        Ok(())
    }
}

/// Record of one large jump: left limit, right value, applied increment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JumpRecord {
    pub time: f64,
    pub location: f64,
    pub magnitude: f64,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub increment: Vec<f64>,
}

/// Grid values (time-major, right-continuous) and jump records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MildSolutionPath {
    pub dt: f64,
    pub n_steps: usize,
    pub modes: usize,
    pub values: Vec<f64>,
    pub jumps: Vec<JumpRecord>,
}

impl MildSolutionPath {
    pub fn at(&self, n: usize) -> &[f64] {
        &self.values[n * self.modes..(n + 1) * self.modes]
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|n| n as f64 * self.dt).collect()
    }

    pub fn final_value(&self) -> &[f64] {
        self.at(self.n_steps)
    }
}

/// Time-major resolvent data derived once per configuration.
#[derive(Debug)]
pub struct SolverTables {
    pub table: ResolventTable,
    modes: usize,
    dt: f64,
    n_steps: usize,
    /// `s_k(t_n)` at `[n * K + k]`
    s: Vec<f64>,
    /// `int_0^{t_n} s_k` of the interpolant at `[n * K + k]`
    cum: Vec<f64>,
    /// step weights `cum[l] - cum[l-1]`
    w: Vec<f64>,
}

impl SolverTables {
    pub fn new(table: ResolventTable) -> Self {
        let (k, n, dt) = (table.modes(), table.n_steps(), table.dt());
        let mut s = vec![0.0; (n + 1) * k];
        for m in 0..k {
            for (i, v) in table.row(m).iter().enumerate() {
                s[i * k + m] = *v;
            }
        }
        let mut cum = vec![0.0; (n + 1) * k];
        let mut w = vec![0.0; (n + 1) * k];
        for i in 1..=n {
            for m in 0..k {
                let step = 0.5 * dt * (s[i * k + m] + s[(i - 1) * k + m]);
                w[i * k + m] = step;
                cum[i * k + m] = cum[(i - 1) * k + m] + step;
            }
        }
        Self { table, modes: k, dt, n_steps: n, s, cum, w }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    fn s_row(&self, n: usize) -> &[f64] {
        &self.s[n * self.modes..(n + 1) * self.modes]
    }

    fn w_row(&self, l: usize) -> &[f64] {
        &self.w[l * self.modes..(l + 1) * self.modes]
    }

    /// Node index and fraction for a lag `x >= 0`.
    fn split(&self, x: f64) -> Result<(usize, f64)> {
        let pos = x / self.dt;
        if pos > self.n_steps as f64 * (1.0 + 1e-12) {
            return Err(Error::range(MODULE, format!("lag {x} beyond the resolvent table")));
        }
        let l = (pos.floor() as usize).min(self.n_steps);
        let th = (pos - l as f64).clamp(0.0, 1.0);
        if l == self.n_steps {
            return Ok((l, 0.0));
        }
        Ok((l, th))
    }

    /// `out_k += scale_k * s_k(x)` with linear interpolation.
    fn add_s(&self, x: f64, scale: &[f64], out: &mut [f64]) -> Result<()> {
        let (l, th) = self.split(x)?;
        let a = self.s_row(l);
        if th == 0.0 {
            for ((o, s), c) in out.iter_mut().zip(a).zip(scale) {
                *o += s * c;
            }
        } else {
            let b = self.s_row(l + 1);
            for (((o, s0), s1), c) in out.iter_mut().zip(a).zip(b).zip(scale) {
                *o += (s0 + th * (s1 - s0)) * c;
            }
        }
        Ok(())
    }

    /// `int_0^x s_k` of the interpolant, into `out`.
    fn integral_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        let (l, th) = self.split(x)?;
        let k = self.modes;
        let c = &self.cum[l * k..(l + 1) * k];
        if th == 0.0 {
            out.copy_from_slice(c);
            return Ok(());
        }
        let s0 = self.s_row(l);
        let s1 = self.s_row(l + 1);
        let h = self.dt;
        for m in 0..k {
            out[m] = c[m] + th * h * s0[m] + 0.5 * th * th * h * (s1[m] - s0[m]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    location: f64,
    magnitude: f64,
    /// gain times magnitude
    amplitude: f64,
    /// node interval `[t_slot, t_slot+1)` holding the event
    slot: usize,
    /// first node the event reaches
    first: usize,
}

/// Prepared solver for one configuration; shared read-only across paths.
pub struct Solver<'a> {
    pub cfg: &'a SolverConfig,
    pub tables: &'a SolverTables,
    pub op: &'a SpectralOperator,
    pub coeffs: &'a CoefficientSet,
    law: Option<JumpLaw>,
    compensator: Vec<f64>,
    deterministic: OnceLock<Vec<f64>>,
}

impl<'a> Solver<'a> {
    /// `law` is needed only when paths carry small jumps (for the compensator).
    pub fn new(
        cfg: &'a SolverConfig,
        tables: &'a SolverTables,
        op: &'a SpectralOperator,
        coeffs: &'a CoefficientSet,
        law: Option<JumpLaw>,
    ) -> Result<Self> {
        let bad = cfg.validate();
        if !bad.is_empty() {
            return Err(Error::Invalid(bad));
        }
        if tables.modes() != op.modes() {
            return Err(Error::config(MODULE, "resolvent table and operator disagree on the number of modes"));
        }
        coeffs.validate(op.modes())?;
        if (tables.dt - cfg.dt).abs() > 1e-12 * cfg.dt || tables.n_steps != cfg.n_steps() {
            return Err(Error::config(MODULE, "resolvent table grid does not match the solver grid"));
        }
        let compensator = match law {
            Some(l) if coeffs.gain_small.base != 0.0 || coeffs.gain_small.state != 0.0 => compensator_drift(&l, op)?,
            _ => vec![0.0; op.modes()],
        };
        Ok(Self { cfg, tables, op, coeffs, law, compensator, deterministic: OnceLock::new() })
    }

    pub fn modes(&self) -> usize {
        self.op.modes()
    }

    pub fn law(&self) -> Option<&JumpLaw> {
        self.law.as_ref()
    }

    /// `f = F(t, u) - c G(|u|)`; the compensator term is dropped when
    /// `add_compensator` is set or no small-jump law was given.
    fn drift_into(&self, t: f64, u: &[f64], out: &mut [f64]) {
        match &self.coeffs.drift {
            Some(f) => f(t, u, out),
            None => out.iter_mut().for_each(|v| *v = 0.0),
        }
        if self.law.is_some() && !self.coeffs.add_compensator {
            let g = self.coeffs.gain_small.eval(norm(u));
            for (o, c) in out.iter_mut().zip(&self.compensator) {
                *o -= c * g;
            }
        }
    }

    /// `S(t_n) u0 + sum_{m<n} W(n - m) f_m` when `f` is path-independent.
    fn deterministic_part(&self) -> &[f64] {
        self.deterministic.get_or_init(|| {
            let (k, n_steps) = (self.modes(), self.tables.n_steps);
            let mut f = vec![0.0; (n_steps + 1) * k];
            let zero = vec![0.0; k];
            for m in 0..=n_steps {
                self.drift_into(m as f64 * self.cfg.dt, &zero, &mut f[m * k..(m + 1) * k]);
            }
            let mut out = vec![0.0; (n_steps + 1) * k];
            for n in 0..=n_steps {
                let row = &mut out[n * k..(n + 1) * k];
                self.initial_into(n, row);
                self.convolve_into(n, &f, row);
            }
            out
        })
    }

    fn initial_into(&self, n: usize, out: &mut [f64]) {
        for ((o, s), u) in out.iter_mut().zip(self.tables.s_row(n)).zip(&self.coeffs.u0) {
            *o = s * u;
        }
    }

    /// `out += sum_{m<n} W(n - m) f_m` with time-major `f`.
    fn convolve_into(&self, n: usize, f: &[f64], out: &mut [f64]) {
        let k = self.modes();
        for m in 0..n {
            let w = self.tables.w_row(n - m);
            for ((o, wi), fi) in out.iter_mut().zip(w).zip(&f[m * k..(m + 1) * k]) {
                *o += wi * fi;
            }
        }
    }

    fn check_noise(&self, noise: &NoisePath) -> Result<()> {
        if !noise.small.is_empty() && self.law.is_none() {
            return Err(Error::config(MODULE, "small jumps present but no jump law given for the compensator"));
        }
        let t_end = self.cfg.horizon;
        if noise.large.jumps.iter().chain(&noise.small).any(|j| !(j.time >= 0.0 && j.time <= t_end)) {
            return Err(Error::range(MODULE, "noise path extends beyond the solver horizon"));
        }
        let unsorted = |v: &[Jump]| v.windows(2).any(|w| w[1].time < w[0].time);
        if unsorted(&noise.small) || unsorted(&noise.large.jumps) {
            return Err(Error::domain(MODULE, "noise events must be sorted in time"));
        }
        Ok(())
    }

    /// Events of a path with placeholder amplitudes, in time order within
    /// each kind. Large jumps within [`TIE_TOLERANCE`] of a node move onto it.
    fn events(&self, noise: &NoisePath) -> (Vec<Event>, Vec<Event>) {
        let dt = self.cfg.dt;
        let n_steps = self.cfg.n_steps();
        let small = noise
            .small
            .iter()
            .map(|s| {
                let slot = ((s.time / dt).floor() as usize).min(n_steps - 1);
                Event { time: s.time, location: s.location, magnitude: s.magnitude, amplitude: 0.0, slot, first: slot + 1 }
            })
            .collect();
        let large = noise
            .large
            .jumps
            .iter()
            .map(|j| {
                let pos = j.time / dt;
                let near = pos.round();
                if (pos - near).abs() * dt <= TIE_TOLERANCE {
                    let slot = near as usize;
                    Event { time: slot as f64 * dt, location: j.location, magnitude: j.magnitude, amplitude: 0.0, slot, first: slot }
                } else {
                    let slot = pos.floor() as usize;
                    Event { time: j.time, location: j.location, magnitude: j.magnitude, amplitude: 0.0, slot, first: slot + 1 }
                }
            })
            .collect();
        (small, large)
    }

    fn blow_up(&self, n: usize, u: &[f64]) -> Result<()> {
        if u.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_LIMIT) {
            return Err(Error::BlowUp { step: n, time: n as f64 * self.cfg.dt, limit: BLOW_UP_LIMIT });
        }
        Ok(())
    }

    /// Coefficients `amplitude * delta_x` of an event.
    fn event_coefficients(&self, ev: &Event, out: &mut [f64]) -> Result<()> {
        self.op.delta_coefficients_into(ev.location, out)?;
        out.iter_mut().for_each(|c| *c *= ev.amplitude);
        Ok(())
    }

    /// Value at an off-grid `t` in `(t_n, t_{n+1})` from drift values
    /// `f[0..=n]` and the events strictly before `t`.
    fn evaluate_off_grid<'e>(
        &self,
        t: f64,
        n: usize,
        f: &[f64],
        events: impl Iterator<Item = &'e Event>,
        out: &mut [f64],
    ) -> Result<()> {
        let k = self.modes();
        let dt = self.cfg.dt;
        out.iter_mut().for_each(|v| *v = 0.0);
        self.tables.add_s(t, &self.coeffs.u0, out)?;
        let mut hi = vec![0.0; k];
        let mut lo = vec![0.0; k];
        for m in 0..=n {
            let lag = t - m as f64 * dt;
            self.tables.integral_into(lag, &mut hi)?;
            if lag > dt {
                self.tables.integral_into(lag - dt, &mut lo)?;
            } else {
                lo.iter_mut().for_each(|v| *v = 0.0);
            }
            for ((o, (a, b)), fm) in out.iter_mut().zip(hi.iter().zip(&lo)).zip(&f[m * k..(m + 1) * k]) {
                *o += (a - b) * fm;
            }
        }
        let mut coef = vec![0.0; k];
        for ev in events.filter(|e| e.time < t && e.amplitude != 0.0) {
            self.event_coefficients(ev, &mut coef)?;
            self.tables.add_s(t - ev.time, &coef, out)?;
        }
        Ok(())
    }

    /// Add an event's contribution to every node from `ev.first` on.
    fn spread(&self, ev: &Event, acc: &mut [f64], coef: &mut [f64]) -> Result<()> {
        if ev.amplitude == 0.0 {
            return Ok(());
        }
        let (k, dt) = (self.modes(), self.cfg.dt);
        self.event_coefficients(ev, coef)?;
        for n in ev.first..=self.cfg.n_steps() {
            let lag = (n as f64 * dt - ev.time).max(0.0);
            self.tables.add_s(lag, coef, &mut acc[n * k..(n + 1) * k])?;
        }
        Ok(())
    }

    fn record(&self, ev: &Event, left: Vec<f64>, coef: &mut [f64]) -> Result<JumpRecord> {
        self.event_coefficients(ev, coef)?;
        let increment = coef.to_vec();
        let right = left.iter().zip(&increment).map(|(a, b)| a + b).collect();
        Ok(JumpRecord { time: ev.time, location: ev.location, magnitude: ev.magnitude, left, right, increment })
    }

    /// Direct time stepper: nodes in increasing order, events between
    /// nodes in time order.
    pub fn step(&self, noise: &NoisePath) -> Result<MildSolutionPath> {
        self.check_noise(noise)?;
        let (k, n_steps, dt) = (self.modes(), self.cfg.n_steps(), self.cfg.dt);
        let det = self.coeffs.state_free().then(|| self.deterministic_part());
        let (small, large) = self.events(noise);

        let mut values = vec![0.0; (n_steps + 1) * k];
        let mut acc = vec![0.0; (n_steps + 1) * k];
        let mut f = vec![0.0; (n_steps + 1) * k];
        let mut done: Vec<Event> = Vec::with_capacity(small.len() + large.len());
        let mut records = Vec::with_capacity(large.len());
        let mut coef = vec![0.0; k];
        let mut u = vec![0.0; k];
        let (mut is, mut il) = (0, 0);

        for n in 0..=n_steps {
            match det {
                Some(d) => u.copy_from_slice(&d[n * k..(n + 1) * k]),
                None => {
                    self.initial_into(n, &mut u);
                    self.convolve_into(n, &f, &mut u);
                }
            }
            for (o, a) in u.iter_mut().zip(&acc[n * k..(n + 1) * k]) {
                *o += a;
            }

            // large jumps sitting on this node
            while il < large.len() && large[il].first == n {
                let mut ev = large[il];
                ev.amplitude = self.coeffs.gain_large.eval(norm(&u)) * ev.magnitude;
                let rec = self.record(&ev, u.clone(), &mut coef)?;
                u.copy_from_slice(&rec.right);
                records.push(rec);
                ev.first = n + 1;
                self.spread(&ev, &mut acc, &mut coef)?;
                done.push(ev);
                il += 1;
            }

            self.blow_up(n, &u)?;
            values[n * k..(n + 1) * k].copy_from_slice(&u);
            self.drift_into(n as f64 * dt, &u, &mut f[n * k..(n + 1) * k]);
            if n == n_steps {
                break;
            }

            let g_small = self.coeffs.gain_small.eval(norm(&u));
            loop {
                let s_next = (is < small.len() && small[is].slot == n).then(|| small[is].time);
                let l_next = (il < large.len() && large[il].slot == n && large[il].first == n + 1).then(|| large[il].time);
                match (s_next, l_next) {
                    (None, None) => break,
                    (Some(ts), tl) if tl.is_none_or(|tl| ts <= tl) => {
                        let mut ev = small[is];
                        ev.amplitude = g_small * ev.magnitude;
                        self.spread(&ev, &mut acc, &mut coef)?;
                        done.push(ev);
                        is += 1;
                    }
                    _ => {
                        let mut ev = large[il];
                        let mut left = vec![0.0; k];
                        self.evaluate_off_grid(ev.time, n, &f, done.iter(), &mut left)?;
                        ev.amplitude = self.coeffs.gain_large.eval(norm(&left)) * ev.magnitude;
                        records.push(self.record(&ev, left, &mut coef)?);
                        self.spread(&ev, &mut acc, &mut coef)?;
                        done.push(ev);
                        il += 1;
                    }
                }
            }
        }
        debug_assert!(is == small.len() && il == large.len());
        Ok(MildSolutionPath { dt, n_steps, modes: k, values, jumps: records })
    }

    /// Picard iteration from `u^0(t) = S(t) u0`. Each sweep evaluates all
    /// coefficients at the previous iterate and rebuilds grid and jump-left
    /// values mode by mode, independently of [`Solver::step`].
    pub fn picard(&self, noise: &NoisePath) -> Result<(MildSolutionPath, PicardTrace)> {
        self.check_noise(noise)?;
        let (k, n_steps, dt) = (self.modes(), self.cfg.n_steps(), self.cfg.dt);
        let row = n_steps + 1;
        let (mut small, mut large) = self.events(noise);

        // mode-major grid iterate and jump-left values
        let mut grid = vec![0.0; k * row];
        for m in 0..k {
            for (g, s) in grid[m * row..(m + 1) * row].iter_mut().zip(self.tables.table.row(m)) {
                *g = s * self.coeffs.u0[m];
            }
        }
        let mut lefts: Vec<Vec<f64>> = large
            .iter()
            .map(|ev| {
                let mut v = vec![0.0; k];
                self.tables.add_s(ev.time, &self.coeffs.u0, &mut v).map(|_| v)
            })
            .collect::<Result<_>>()?;

        let mut distances = Vec::new();
        let mut u = vec![0.0; k];
        let mut f = vec![0.0; row * k];
        let mut g_small = vec![0.0; row];
        for iteration in 1..=self.cfg.picard_max_iter {
            for n in 0..row {
                for m in 0..k {
                    u[m] = grid[m * row + n];
                }
                self.drift_into(n as f64 * dt, &u, &mut f[n * k..(n + 1) * k]);
                g_small[n] = self.coeffs.gain_small.eval(norm(&u));
            }
            for ev in small.iter_mut() {
                ev.amplitude = g_small[ev.slot] * ev.magnitude;
            }
            for (ev, left) in large.iter_mut().zip(&lefts) {
                ev.amplitude = self.coeffs.gain_large.eval(norm(left)) * ev.magnitude;
            }
            let coefs: Vec<Vec<f64>> = small
                .iter()
                .chain(&large)
                .map(|ev| {
                    let mut c = vec![0.0; k];
                    self.event_coefficients(ev, &mut c).map(|_| c)
                })
                .collect::<Result<_>>()?;

            let mut next = vec![0.0; k * row];
            for m in 0..k {
                let s = self.tables.table.row(m);
                let out = &mut next[m * row..(m + 1) * row];
                for n in 0..row {
                    let mut v = s[n] * self.coeffs.u0[m];
                    for j in 0..n {
                        v += self.tables.w[(n - j) * k + m] * f[j * k + m];
                    }
                    out[n] = v;
                }
                for (ev, c) in small.iter().chain(&large).zip(&coefs) {
                    if c[m] == 0.0 {
                        continue;
                    }
                    for n in ev.first..row {
                        out[n] += self.tables.table.at(m, (n as f64 * dt - ev.time).max(0.0))? * c[m];
                    }
                }
            }

            let mut next_lefts = Vec::with_capacity(large.len());
            for (idx, ev) in large.iter().enumerate() {
                let mut left = vec![0.0; k];
                if ev.first == ev.slot {
                    // node value minus this and later jumps on the same node
                    for m in 0..k {
                        left[m] = next[m * row + ev.slot];
                    }
                    for (later, c) in large.iter().zip(&coefs[small.len()..]).skip(idx) {
                        if later.first == ev.slot {
                            for m in 0..k {
                                left[m] -= c[m];
                            }
                        }
                    }
                } else {
                    let prior = small.iter().chain(&large[..idx]);
                    self.evaluate_off_grid(ev.time, ev.slot, &f, prior, &mut left)?;
                }
                next_lefts.push(left);
            }

            let times: Vec<f64> = large.iter().map(|ev| ev.time).collect();
            let (d, change) = self.iterate_distance(&grid, &next, &lefts, &next_lefts, &times);
            let scale = next.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            distances.push(d);
            grid = next;
            lefts = next_lefts;
            if change <= self.cfg.picard_tol * scale {
                let mut values = vec![0.0; row * k];
                for m in 0..k {
                    for n in 0..row {
                        values[n * k + m] = grid[m * row + n];
                    }
                }
                for n in 0..row {
                    self.blow_up(n, &values[n * k..(n + 1) * k])?;
                }
                let mut coef = vec![0.0; k];
                let jumps = large
                    .iter()
                    .zip(lefts)
                    .map(|(ev, left)| {
                        let mut ev = *ev;
                        ev.amplitude = self.coeffs.gain_large.eval(norm(&left)) * ev.magnitude;
                        self.record(&ev, left, &mut coef)
                    })
                    .collect::<Result<_>>()?;
                let path = MildSolutionPath { dt, n_steps, modes: k, values, jumps };
                return Ok((path, PicardTrace::new(distances, iteration)));
            }
        }
        Err(Error::NonContraction {
            iterations: self.cfg.picard_max_iter,
            last: distances.last().copied().unwrap_or(f64::NAN),
            trace: distances,
        })
    }

    /// Distance between iterates (mode-major grids, jump-left values at
    /// `times`): the `L^q_lambda` norm in `H` plus the largest jump-left
    /// change discounted by `e^{-lambda t / q}`. Also returns the undiscounted
    /// sup change, which decides convergence so the result is independent
    /// of `lambda`.
    fn iterate_distance(&self, a: &[f64], b: &[f64], la: &[Vec<f64>], lb: &[Vec<f64>], times: &[f64]) -> (f64, f64) {
        let (k, row) = (self.modes(), self.cfg.n_steps() + 1);
        let mut diff = vec![0.0; row * k];
        let mut change = 0.0f64;
        for m in 0..k {
            for n in 0..row {
                let d = b[m * row + n] - a[m * row + n];
                diff[n * k + m] = d;
                change = change.max(d.abs());
            }
        }
        let grid = weighted_norm(&diff, k, self.cfg.dt, self.op, self.cfg.lambda, self.cfg.q, 0.0);
        let mut jumps = 0.0f64;
        for ((x, y), t) in la.iter().zip(lb).zip(times) {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            change = change.max(d.iter().fold(0.0, |acc, v| acc.max(v.abs())));
            jumps = jumps.max((-self.cfg.lambda * t / self.cfg.q).exp() * norm(&d));
        }
        (grid + jumps, change)
    }
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct PicardTrace {
    pub distances: Vec<f64>,
    pub iterations: usize,
    pub contraction_factor: f64,
}

impl PicardTrace {
    fn new(distances: Vec<f64>, iterations: usize) -> Self {
        let contraction_factor = contraction_factor(&distances);
        Self { distances, iterations, contraction_factor }
    }
}

/// Largest ratio of successive distances, ignoring distances at rounding level.
pub fn contraction_factor(d: &[f64]) -> f64 {
    let floor = d.first().copied().unwrap_or(0.0) * 1e-11;
    d.windows(2)
        .filter(|w| w[0] > floor && w[1] > floor)
        .map(|w| w[1] / w[0])
        .fold(0.0, f64::max)
}

/// `(sum_n w_n e^{-lambda t_n} |v(t_n)|^q_{H^A_{-alpha}})^{1/q}` with
/// trapezoid weights `w_n` on a uniform grid; `values` is time-major.
pub fn weighted_norm(values: &[f64], modes: usize, dt: f64, op: &SpectralOperator, lambda: f64, q: f64, alpha: f64) -> f64 {
    let n = values.len() / modes;
    let weights = op.weights(-alpha);
    let mut acc = 0.0;
    for i in 0..n {
        let v = &values[i * modes..(i + 1) * modes];
        let nrm = v.iter().zip(&weights).map(|(x, w)| w * x * x).sum::<f64>().sqrt();
        let tw = if i == 0 || i + 1 == n { 0.5 * dt } else { dt };
        acc += tw * (-lambda * i as f64 * dt).exp() * nrm.powf(q);
    }
    acc.powf(1.0 / q)
}

/// `|c xi|_lambda / |xi|_lambda` for each lambda, with `(c xi)(t_n) =
/// sum_{m<n} W(n-m) xi(t_m)` the discrete deterministic convolution.
pub fn convolution_damping_ratio(
    tables: &SolverTables,
    op: &SpectralOperator,
    xi: &[f64],
    lambdas: &[f64],
    q: f64,
    alpha: f64,
) -> Result<Vec<f64>> {
    let (k, n) = (tables.modes(), tables.n_steps);
    if xi.len() != (n + 1) * k {
        return Err(Error::domain(MODULE, "test signal must be time-major over the table grid"));
    }
    let mut conv = vec![0.0; (n + 1) * k];
    for i in 1..=n {
        for m in 0..i {
            let w = tables.w_row(i - m);
            for j in 0..k {
                conv[i * k + j] += w[j] * xi[m * k + j];
            }
        }
    }
    Ok(lambdas
        .iter()
        .map(|&l| weighted_norm(&conv, k, tables.dt, op, l, q, alpha) / weighted_norm(xi, k, tables.dt, op, l, q, alpha))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::kernel::MemoryKernel;
    use crate::noise::{sample_noise_path, LargeJumpSequence, NoiseSelection};

    struct Setup {
        cfg: SolverConfig,
        tables: SolverTables,
        op: SpectralOperator,
    }

    fn setup(modes: usize, dt: f64, horizon: f64) -> Setup {
        let cfg = SolverConfig { horizon, dt, ..SolverConfig::default() };
        let op = SpectralOperator::dirichlet(1.0, modes).unwrap();
        let k = MemoryKernel::model(1.5, 0.0).unwrap();
        let table = ResolventTable::build(&k, &op, dt, cfg.n_steps()).unwrap();
        Setup { cfg, tables: SolverTables::new(table), op }
    }

    fn u0(modes: usize) -> Vec<f64> {
        (0..modes).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn weighted_norm_of_unit_path() {
        let op = SpectralOperator::dirichlet(1.0, 3).unwrap();
        let n = 101;
        let mut v = vec![0.0; n * 3];
        for i in 0..n {
            v[i * 3] = 1.0;
        }
        let w = weighted_norm(&v, 3, 0.01, &op, 0.0, 2.0, 0.0);
        assert!((w - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_spectrum_with_single_small_jump() {
        let cfg = SolverConfig { horizon: 1.0, dt: 0.01, ..SolverConfig::default() };
        let op = SpectralOperator::dirichlet(1.0, 1).unwrap();
        let k = MemoryKernel::model(1.5, 0.0).unwrap();
        let tables = SolverTables::new(ResolventTable::from_eigenvalues(&k, &[0.0], cfg.dt, cfg.n_steps()).unwrap());
        let mut coeffs = CoefficientSet::homogeneous(vec![0.7]).with_gains(Gain::constant(1.0), Gain::ZERO);
        coeffs.add_compensator = true;
        let law = JumpLaw::new(0.5, 1.0, 0.01, 1.0).unwrap();
        let solver = Solver::new(&cfg, &tables, &op, &coeffs, Some(law)).unwrap();
        let (s1, x1, y) = (0.3337, 0.4, 0.2);
        let noise = NoisePath { large: LargeJumpSequence::default(), small: vec![Jump { time: s1, location: x1, magnitude: y }] };
        let path = solver.step(&noise).unwrap();
        let e = op.eigenfunction(1, x1).unwrap();
        for (n, t) in path.times().into_iter().enumerate() {
            let expected = if t > s1 { 0.7 + y * e } else { 0.7 };
            assert!((path.at(n)[0] - expected).abs() < 1e-14, "t={t}");
        }
    }

    #[test]
    fn large_jumps_satisfy_jump_identity() {
        let s = setup(16, 0.01, 1.0);
        let coeffs = CoefficientSet::homogeneous(u0(16))
            .with_parametric_drift(1.0, 0.5)
            .with_gains(Gain::ZERO, Gain { base: 0.5, state: 0.3 });
        let solver = Solver::new(&s.cfg, &s.tables, &s.op, &coeffs, None).unwrap();
        let large = LargeJumpSequence {
            jumps: vec![
                Jump { time: 0.1234, location: 0.3, magnitude: 2.0 },
                Jump { time: 0.5, location: 0.6, magnitude: 1.5 },
                Jump { time: 0.5 + 1e-13, location: 0.2, magnitude: 1.2 },
            ],
        };
        let path = solver.step(&NoisePath { large, small: vec![] }).unwrap();
        assert_eq!(path.jumps.len(), 3);
        for j in &path.jumps {
            let jump: Vec<f64> = j.right.iter().zip(&j.left).map(|(a, b)| a - b).collect();
            let err = norm(&jump.iter().zip(&j.increment).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(err <= 1e-10 * norm(&j.increment));
        }
        // both ties at t = 0.5 sit on node 50, whose value is post-jump
        assert_eq!(path.jumps[1].time, 0.5);
        assert_eq!(path.jumps[2].time, 0.5);
        assert_eq!(path.jumps[2].left, path.jumps[1].right);
        assert_eq!(path.at(50), path.jumps[2].right.as_slice());
    }

    #[test]
    fn stepper_and_picard_agree() {
        let s = setup(16, 0.01, 1.0);
        let law = JumpLaw::new(0.5, 1.0, 0.05, 1.0).unwrap();
        let coeffs = CoefficientSet::homogeneous(u0(16))
            .with_parametric_drift(1.0, 0.5)
            .with_gains(Gain { base: 0.3, state: 0.2 }, Gain { base: 0.5, state: 0.3 });
        let solver = Solver::new(&s.cfg, &s.tables, &s.op, &coeffs, Some(law)).unwrap();
        let noise = sample_noise_path(&law, 1.0, 11, 0, NoiseSelection { small: true, large: true }).unwrap();
        assert!(noise.large.count() > 0 && !noise.small.is_empty());
        let a = solver.step(&noise).unwrap();
        let (b, trace) = solver.picard(&noise).unwrap();
        let diff = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "grid difference {diff}");
        for (x, y) in a.jumps.iter().zip(&b.jumps) {
            let d = x.left.iter().zip(&y.left).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d < 1e-6);
        }
        assert!(trace.contraction_factor < 1.0);
    }

    #[test]
    fn picard_result_ignores_lambda_but_contraction_does_not() {
        let s = setup(16, 0.01, 1.0);
        let law = JumpLaw::new(0.5, 1.0, 0.05, 1.0).unwrap();
        let coeffs = CoefficientSet::homogeneous(u0(16))
            .with_parametric_drift(1.0, 0.5)
            .with_gains(Gain { base: 0.3, state: 0.2 }, Gain { base: 0.5, state: 0.3 });
        let noise = sample_noise_path(&law, 1.0, 11, 0, NoiseSelection { small: true, large: true }).unwrap();
        let run = |lambda: f64| {
            let cfg = SolverConfig { lambda, ..s.cfg.clone() };
            Solver::new(&cfg, &s.tables, &s.op, &coeffs, Some(law)).unwrap().picard(&noise).unwrap()
        };
        let (a, ta) = run(1.0);
        let (b, tb) = run(100.0);
        assert_eq!(a.values, b.values);
        assert_eq!(ta.iterations, tb.iterations);
        assert!(tb.contraction_factor < ta.contraction_factor, "{} vs {}", tb.contraction_factor, ta.contraction_factor);
    }

    #[test]
    fn linear_additive_picard_stops_after_two_sweeps() {
        let s = setup(8, 0.02, 1.0);
        let law = JumpLaw::new(0.5, 1.0, 0.05, 1.0).unwrap();
        let coeffs = CoefficientSet::homogeneous(u0(8))
            .with_forcing(|t, out| out.iter_mut().enumerate().for_each(|(k, o)| *o = (t * (k + 1) as f64).cos()))
            .with_gains(Gain::constant(0.4), Gain::constant(0.8));
        let solver = Solver::new(&s.cfg, &s.tables, &s.op, &coeffs, Some(law)).unwrap();
        let noise = sample_noise_path(&law, 1.0, 3, 1, NoiseSelection { small: true, large: true }).unwrap();
        let (_, trace) = solver.picard(&noise).unwrap();
        assert_eq!(trace.iterations, 2);
        assert_eq!(trace.distances[1], 0.0);
    }

    #[test]
    fn deterministic_cache_matches_direct_convolution() {
        let s = setup(8, 0.02, 1.0);
        let law = JumpLaw::new(0.5, 1.0, 0.05, 1.0).unwrap();
        let coeffs = CoefficientSet::homogeneous(u0(8)).with_gains(Gain::constant(1.0), Gain::constant(0.5));
        let solver = Solver::new(&s.cfg, &s.tables, &s.op, &coeffs, Some(law)).unwrap();
        let noise = sample_noise_path(&law, 1.0, 5, 2, NoiseSelection { small: true, large: true }).unwrap();
        let a = solver.step(&noise).unwrap();
        let (b, _) = solver.picard(&noise).unwrap();
        let diff = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn blow_up_is_reported() {
        let s = setup(4, 0.01, 1.0);
        let coeffs = CoefficientSet::homogeneous(u0(4)).with_parametric_drift(-2000.0, 0.0);
        let solver = Solver::new(&s.cfg, &s.tables, &s.op, &coeffs, None).unwrap();
        let err = solver.step(&NoisePath::default()).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }), "{err:?}");
    }

    #[test]
    fn admissibility_names_the_broken_condition() {
        let cfg = SolverConfig { q: 1.2, alpha: 0.0, alpha_f: 0.3, alpha_g: 0.0, alpha_i: 0.0, ..SolverConfig::default() };
        let bad = cfg.admissibility(1.5);
        assert!(bad.iter().any(|m| m.contains("(alpha_F - alpha) rho < 1 - 1/q")), "{bad:?}");
        let ok = SolverConfig { q: 1.2, ..SolverConfig::default() };
        assert!(ok.admissibility(1.5).is_empty(), "{:?}", ok.admissibility(1.5));
    }

    #[test]
    fn damping_ratio_decreases_with_lambda() {
        let s = setup(8, 0.01, 1.0);
        let n = s.cfg.n_steps() + 1;
        let xi: Vec<f64> = (0..n * 8).map(|i| 1.0 + 0.1 * (i % 8) as f64).collect();
        let r = convolution_damping_ratio(&s.tables, &s.op, &xi, &[1.0, 10.0, 100.0], 2.0, 0.0).unwrap();
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
    }

    #[test]
    fn rejects_mismatched_grid() {
        let s = setup(4, 0.01, 1.0);
        let cfg = SolverConfig { dt: 0.02, ..s.cfg.clone() };
        let coeffs = CoefficientSet::homogeneous(u0(4));
        assert!(Solver::new(&cfg, &s.tables, &s.op, &coeffs, None).is_err());
        let cfg = SolverConfig { dt: 0.3, ..s.cfg.clone() };
        assert!(!cfg.validate().is_empty());
    }

    fn picard_factors(s: &Setup, coeffs: &CoefficientSet, law: JumpLaw, noise: &NoisePath, lambdas: &[f64]) -> Vec<PicardTrace> {
        lambdas
            .iter()
            .map(|&lambda| {
                let cfg = SolverConfig { lambda, ..s.cfg.clone() };
                Solver::new(&cfg, &s.tables, &s.op, coeffs, Some(law)).unwrap().picard(noise).unwrap().1
            })
            .collect()
    }

    #[test]
    fn contraction_improves_with_lambda() {
        let s = setup(16, 0.01, 1.0);
        let law = JumpLaw::new(0.5, 1.0, 0.05, 1.0).unwrap();
        let coeffs = CoefficientSet::homogeneous(u0(16))
            .with_parametric_drift(1.0, 0.5)
            .with_gains(Gain { base: 0.3, state: 0.2 }, Gain { base: 0.5, state: 0.3 });

        // small jumps only: strictly ordered across lambda, distances fall at every sweep
        let noise = sample_noise_path(&law, 1.0, 11, 0, NoiseSelection { small: true, large: false }).unwrap();
        let traces = picard_factors(&s, &coeffs, law, &noise, &[1.0, 10.0, 100.0]);
        let c: Vec<f64> = traces.iter().map(|t| t.contraction_factor).collect();
        assert!(c[0] > c[1] && c[1] > c[2], "{c:?}");
        for t in &traces {
            let floor = t.distances[0] * 1e-11;
            assert!(t.distances.windows(2).filter(|w| w[1] > floor).all(|w| w[1] < w[0]), "{:?}", t.distances);
        }

        // with state-dependent large jumps the largest observed ratio can tie
        // between nearby lambdas, but lambda = 100 always beats lambda = 1
        for p in 0..10 {
            let noise = sample_noise_path(&law, 1.0, 11, p, NoiseSelection { small: true, large: true }).unwrap();
            let t = picard_factors(&s, &coeffs, law, &noise, &[1.0, 100.0]);
            assert!(t[1].contraction_factor < t[0].contraction_factor, "path {p}");
        }
    }

    fn admissible(a: f64, af: f64, ag: f64, ai: f64, q: f64, rho: f64) -> bool {
        q > 1.0
            && a >= ai
            && a >= ag
            && (af - a) * rho < 1.0 - 1.0 / q
            && (af - ai) * rho < 1.0 - 1.0 / q
            && ai >= ag
            && ag < 1.0 / (q * rho)
            && af < 1.0 / rho
            && ai < 1.0 / (q * rho)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn admissibility_matches_the_inequalities(
            a in 0.0f64..0.8,
            af in 0.0f64..0.8,
            ag in 0.0f64..0.8,
            ai in 0.0f64..0.8,
            q in 0.9f64..4.0,
            rho in 1.01f64..1.99,
        ) {
            let cfg = SolverConfig { alpha: a, alpha_f: af, alpha_g: ag, alpha_i: ai, q, ..SolverConfig::default() };
            let bad = cfg.admissibility(rho);
            prop_assert_eq!(bad.is_empty(), admissible(a, af, ag, ai, q, rho), "{:?}", bad);
            prop_assert!(bad.iter().all(|m| m.starts_with("condition \"")));
        }
    }
}
