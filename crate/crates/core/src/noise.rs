//! Jump noise with beta-stable intensity `y^(-beta-1) dy` and uniform marks
//! on `(0, L)`.
//!
//! Magnitudes above `r` form the finite-activity large-jump stream, built
//! from exponential inter-arrival times. Magnitudes in `(eps, r]` are
//! simulated as a compound Poisson stream and compensated by a deterministic
//! drift; the part below `eps` is dropped and reported as a bias bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{SpectralOperator, SpectralVector};

const MODULE: &str = "noise";

/// Expected small-jump events per step above which sampling is refused.
pub const MAX_EVENTS_PER_STEP: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JumpLaw {
    pub beta: f64,
    pub split_r: f64,
    pub eps: f64,
    /// length of the mark domain `(0, L)`
    pub length: f64,
}

impl JumpLaw {
    pub fn new(beta: f64, split_r: f64, eps: f64, length: f64) -> Result<Self> {
        let mut bad = Vec::new();
        if !(beta > 0.0 && beta < 1.0) {
            bad.push(format!("noise.beta must lie in (0, 1), got {beta}"));
        }
        if !(split_r > 0.0 && split_r.is_finite()) {
            bad.push(format!("noise.split_r must be positive, got {split_r}"));
        }
        if !(eps > 0.0 && eps < split_r) {
            bad.push(format!("noise.eps must lie in (0, split_r), got {eps}"));
        }
        if !(length > 0.0 && length.is_finite()) {
            bad.push(format!("mark domain length must be positive, got {length}"));
        }
        if !bad.is_empty() {
            return Err(Error::config(MODULE, bad.join("; ")));
        }
        Ok(Self { beta, split_r, eps, length })
    }

    /// `L x^(-beta) / beta`, the intensity of magnitudes above `x`.
    pub fn tail(&self, x: f64) -> f64 {
        self.length * x.powf(-self.beta) / self.beta
    }

    /// The constant `C` in the tail bound `nu_L(|z| > x) <= C x^(-beta)`.
    pub fn tail_constant(&self) -> f64 {
        self.length / self.beta
    }

    /// Total mass `sigma` of the large-jump measure.
    pub fn large_rate(&self) -> f64 {
        self.tail(self.split_r)
    }

    /// Rate of simulated small jumps, magnitudes in `(eps, r]`.
    pub fn small_rate(&self) -> f64 {
        self.length * (self.eps.powf(-self.beta) - self.split_r.powf(-self.beta)) / self.beta
    }

    /// `int_eps^r y^(-beta) dy`
    pub fn compensator_magnitude(&self) -> f64 {
        let b = 1.0 - self.beta;
        (self.split_r.powf(b) - self.eps.powf(b)) / b
    }

    /// `int_0^eps y^(-beta) dy`, the first moment of the dropped jumps.
    pub fn neglected_bias_bound(&self) -> f64 {
        self.eps.powf(1.0 - self.beta) / (1.0 - self.beta)
    }

    /// Inverse CDF of the Pareto law of large magnitudes.
    pub fn large_magnitude(&self, u: f64) -> f64 {
        self.split_r * u.powf(-1.0 / self.beta)
    }

    /// Inverse CDF of the magnitude law restricted to `(eps, r]`.
    pub fn small_magnitude(&self, u: f64) -> f64 {
        let a = self.eps.powf(-self.beta);
        let b = self.split_r.powf(-self.beta);
        (a - u * (a - b)).powf(-1.0 / self.beta)
    }

    /// Mean of a small magnitude, `int y^(-beta) dy / int y^(-beta-1) dy` on `(eps, r]`.
    pub fn small_magnitude_mean(&self) -> f64 {
        self.compensator_magnitude() * self.length / self.small_rate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jump {
    pub time: f64,
    pub location: f64,
    pub magnitude: f64,
}

/// Marked point process `(T_i, x_i, Y_i)` on `(0, T]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LargeJumpSequence {
    pub jumps: Vec<Jump>,
}

impl LargeJumpSequence {
    pub fn count(&self) -> usize {
        self.jumps.len()
    }

    /// `N(t)`, the number of jumps in `(0, t]`.
    pub fn count_until(&self, t: f64) -> usize {
        self.jumps.partition_point(|j| j.time <= t)
    }

    pub fn inter_arrivals(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.jumps
            .iter()
            .map(|j| {
                let d = j.time - prev;
                prev = j.time;
                d
            })
            .collect()
    }
}

/// Which of the two independent random streams of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Large = 0,
    Small = 1,
}

/// Deterministic stream for `(master seed, path index, kind)`.
pub fn path_rng(seed: u64, path: u64, kind: StreamKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path.wrapping_mul(2).wrapping_add(kind as u64));
    rng
}

/// Compound Poisson construction: exponential inter-arrivals with rate
/// `sigma`, uniform locations, Pareto magnitudes.
pub fn sample_large_jumps<R: Rng + ?Sized>(law: &JumpLaw, horizon: f64, rng: &mut R) -> Result<LargeJumpSequence> {
    if !(horizon > 0.0) {
        return Err(Error::domain(MODULE, format!("horizon must be positive, got {horizon}")));
    }
    let exp = Exp::new(law.large_rate()).map_err(|e| Error::config(MODULE, e.to_string()))?;
    let mut jumps = Vec::new();
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t > horizon {
            break;
        }
        let location = law.length * open_unit(rng);
        let magnitude = law.large_magnitude(open_unit(rng));
        jumps.push(Jump { time: t, location, magnitude });
    }
    Ok(LargeJumpSequence { jumps })
}

/// Small jumps on `[t0, t1)`: Poisson count, uniform instants, magnitudes in `(eps, r]`.
pub fn sample_small_jumps<R: Rng + ?Sized>(law: &JumpLaw, t0: f64, t1: f64, rng: &mut R) -> Result<Vec<Jump>> {
    if !(t1 > t0) {
        return Err(Error::domain(MODULE, "empty step interval"));
    }
    let mean = law.small_rate() * (t1 - t0);
    if mean > MAX_EVENTS_PER_STEP {
        return Err(Error::config(
            MODULE,
            format!("{mean:.3e} expected small jumps per step exceed {MAX_EVENTS_PER_STEP:e}; increase noise.eps or decrease solver.dt"),
        ));
    }
    let count = if mean > 0.0 {
        Poisson::new(mean).map_err(|e| Error::config(MODULE, e.to_string()))?.sample(rng) as usize
    } else {
        0
    };
    let mut out: Vec<Jump> = (0..count)
        .map(|_| {
            let time = t0 + (t1 - t0) * rng.random::<f64>();
            let location = law.length * open_unit(rng);
            let magnitude = law.small_magnitude(rng.random::<f64>());
            Jump { time, location, magnitude }
        })
        .collect();
    out.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(out)
}

/// Uniform on the open interval (0, 1).
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Drift created by compensating the simulated window `(eps, r]`:
/// `c_k = [int_eps^r y^(-beta) dy] * int_0^L e_k(x) dx`.
pub fn compensator_drift(law: &JumpLaw, op: &SpectralOperator) -> Result<SpectralVector> {
    let m = law.compensator_magnitude();
    Ok(op.eigenfunction_integrals()?.into_iter().map(|c| m * c).collect())
}

/// One realization of both noise streams on `[0, T]`. Small jumps are drawn
/// for the whole horizon at once, so the realization does not depend on the
/// time step and can be reused under grid refinement.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NoisePath {
    pub large: LargeJumpSequence,
    pub small: Vec<Jump>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSelection {
    pub small: bool,
    pub large: bool,
}

pub fn sample_noise_path(
    law: &JumpLaw,
    horizon: f64,
    seed: u64,
    path: u64,
    select: NoiseSelection,
) -> Result<NoisePath> {
    let large = if select.large {
        sample_large_jumps(law, horizon, &mut path_rng(seed, path, StreamKind::Large))?
    } else {
        LargeJumpSequence::default()
    };
    let small = if select.small {
        sample_small_jumps(law, 0.0, horizon, &mut path_rng(seed, path, StreamKind::Small))?
    } else {
        Vec::new()
    };
    Ok(NoisePath { large, small })
}

#[derive(Debug, Clone, Serialize)]
pub struct TailPoint {
    pub x: f64,
    pub analytic: f64,
    pub bound: f64,
    pub empirical: f64,
    pub expected: f64,
    pub standard_error: f64,
    pub within_3se: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub constant: f64,
    pub points: Vec<TailPoint>,
    pub passed: bool,
}

/// Compare the analytic tail with `C x^(-beta)` and the empirical tail of
/// `draws` Pareto magnitudes with `(x/r)^(-beta)`.
pub fn tail_bound_check<R: Rng + ?Sized>(law: &JumpLaw, x_grid: &[f64], draws: usize, rng: &mut R) -> Result<TailReport> {
    if x_grid.iter().any(|&x| x < law.split_r) {
        return Err(Error::domain(MODULE, "tail grid must lie in [r, inf)"));
    }
    let samples: Vec<f64> = (0..draws).map(|_| law.large_magnitude(open_unit(rng))).collect();
    let c = law.tail_constant();
    let points: Vec<TailPoint> = x_grid
        .iter()
        .map(|&x| {
            let p = (x / law.split_r).powf(-law.beta);
            let hits = samples.iter().filter(|&&y| y > x).count() as f64;
            let emp = hits / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            let analytic = law.tail(x);
            let bound = c * x.powf(-law.beta);
            TailPoint {
                x,
                analytic,
                bound,
                empirical: emp,
                expected: p,
                standard_error: se,
                within_3se: (emp - p).abs() <= 3.0 * se.max(1e-300) && analytic <= bound * (1.0 + 1e-12),
            }
        })
        .collect();
    let passed = points.iter().all(|p| p.within_3se);
    Ok(TailReport { constant: c, points, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn law() -> JumpLaw {
        JumpLaw::new(0.5, 1.0, 0.01, 1.0).unwrap()
    }

    #[test]
    fn closed_form_rates() {
        let l = law();
        assert!((l.large_rate() - 2.0).abs() < 1e-15);
        assert!((l.small_rate() - 18.0).abs() < 1e-12);
        assert!((l.tail(2.0) - 2.0 / 2f64.sqrt()).abs() < 1e-15);
        let tiny = JumpLaw::new(0.5, 1.0, 1e-4, 1.0).unwrap();
        assert!((tiny.neglected_bias_bound() - 2e-2).abs() < 1e-15);
        let near = JumpLaw::new(0.5, 1.0, 1e-12, 1.0).unwrap();
        assert!((near.compensator_magnitude() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn invalid_laws_are_rejected() {
        assert!(JumpLaw::new(1.0, 1.0, 0.1, 1.0).is_err());
        assert!(JumpLaw::new(0.5, 1.0, 1.0, 1.0).is_err());
        assert!(JumpLaw::new(0.5, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn eps_near_r_gives_empty_batches() {
        let l = JumpLaw::new(0.5, 1.0, 1.0 - 1e-12, 1.0).unwrap();
        let mut rng = path_rng(1, 0, StreamKind::Small);
        let total: usize = (0..1000)
            .map(|i| sample_small_jumps(&l, i as f64, i as f64 + 1.0, &mut rng).unwrap().len())
            .sum();
        assert_eq!(total, 0);
    }

    #[test]
    fn overflow_guard() {
        let l = JumpLaw::new(0.9, 1.0, 1e-12, 1.0).unwrap();
        let mut rng = path_rng(1, 0, StreamKind::Small);
        assert!(matches!(sample_small_jumps(&l, 0.0, 1.0, &mut rng), Err(Error::Config { .. })));
    }

    #[test]
    fn large_jumps_are_ordered_and_bounded() {
        let l = law();
        let mut rng = path_rng(7, 3, StreamKind::Large);
        for _ in 0..200 {
            let s = sample_large_jumps(&l, 1.0, &mut rng).unwrap();
            assert!(s.jumps.windows(2).all(|w| w[0].time < w[1].time));
            assert!(s.jumps.iter().all(|j| j.time > 0.0 && j.time <= 1.0 && j.magnitude > 1.0));
            assert!(s.inter_arrivals().iter().all(|d| *d > 0.0));
            assert_eq!(s.count_until(1.0), s.count());
        }
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let l = law();
        let sel = NoiseSelection { small: true, large: true };
        let a = sample_noise_path(&l, 1.0, 42, 5, sel).unwrap();
        let b = sample_noise_path(&l, 1.0, 42, 5, sel).unwrap();
        assert_eq!(a, b);
        let c = sample_noise_path(&l, 1.0, 42, 6, sel).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counting_mean_and_tail() {
        let l = law();
        let mut rng = path_rng(11, 0, StreamKind::Large);
        let m = 100_000;
        let counts: Vec<f64> = (0..m).map(|_| sample_large_jumps(&l, 1.0, &mut rng).unwrap().count() as f64).collect();
        let mean = counts.iter().sum::<f64>() / m as f64;
        let se = (2.0 / m as f64).sqrt();
        assert!((mean - 2.0).abs() < 4.0 * se, "{mean}");

        let rep = tail_bound_check(&l, &[1.0, 2.0, 4.0], 100_000, &mut rng).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!((rep.points[0].analytic - l.large_rate()).abs() < 1e-15);
    }

    #[test]
    fn small_magnitude_mean() {
        let l = law();
        let mut rng = path_rng(3, 0, StreamKind::Small);
        let ys: Vec<f64> = (0..200).flat_map(|i| sample_small_jumps(&l, i as f64, i as f64 + 1.0, &mut rng).unwrap()).map(|j| j.magnitude).collect();
        assert!(ys.iter().all(|y| *y > l.eps && *y <= l.split_r));
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - l.small_magnitude_mean()).abs() < 3.0 * (var / n).sqrt());
    }

    #[test]
    fn compensator_vanishes_on_even_modes() {
        let l = law();
        let op = SpectralOperator::dirichlet(1.0, 8).unwrap();
        let c = compensator_drift(&l, &op).unwrap();
        for k in (1..8).step_by(2) {
            assert_eq!(c[k], 0.0);
        }
        let expected = l.compensator_magnitude() * 2f64.sqrt() * 2.0 / std::f64::consts::PI;
        assert!((c[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn counts_are_poisson_and_gaps_exponential() {
        let l = law();
        let mut counts = Vec::with_capacity(100_000);
        let mut gaps = Vec::new();
        for path in 0..100_000u64 {
            let seq = sample_large_jumps(&l, 1.0, &mut path_rng(9, path, StreamKind::Large)).unwrap();
            counts.push(seq.count());
            if path < 20_000 {
                gaps.extend(seq.inter_arrivals());
            }
        }
        let chi = crate::stats::chi_square_poisson(&counts, l.large_rate()).unwrap();
        assert!(chi.passes(0.01), "{chi:?}");
        // inter-arrivals before the horizon are exponential only when not
        // truncated by it, so take just the first gap of long paths
        let firsts: Vec<f64> = (0..20_000u64)
            .map(|p| sample_large_jumps(&l, 50.0, &mut path_rng(10, p, StreamKind::Large)).unwrap().jumps[0].time)
            .collect();
        let ks = crate::stats::ks_exponential(&firsts, l.large_rate()).unwrap();
        assert!(ks.passes(0.01), "{ks:?}");
        assert!(gaps.iter().all(|g| *g > 0.0));
    }

    #[test]
    fn halving_eps_moves_compensated_sum_within_bias_bound() {
        let op = SpectralOperator::dirichlet(1.0, 4).unwrap();
        let coarse = JumpLaw::new(0.5, 1.0, 0.02, 1.0).unwrap();
        let fine = JumpLaw::new(0.5, 1.0, 0.01, 1.0).unwrap();
        let mean_mode = |l: &JumpLaw| {
            let comp = compensator_drift(l, &op).unwrap();
            let mut acc = crate::stats::Accumulator::default();
            for p in 0..4000u64 {
                let js = sample_small_jumps(l, 0.0, 1.0, &mut path_rng(4, p, StreamKind::Small)).unwrap();
                let s: f64 = js.iter().map(|j| j.magnitude * op.eigenfunction(1, j.location).unwrap()).sum();
                acc.push(s - comp[0]);
            }
            acc.estimate()
        };
        let (a, b) = (mean_mode(&coarse), mean_mode(&fine));
        let bound = coarse.neglected_bias_bound() * 2f64.sqrt();
        assert!((a.mean - b.mean).abs() < bound + 4.0 * (a.se.hypot(b.se)), "{a:?} {b:?} {bound}");
    }

    #[test]
    fn compensated_small_jumps_are_mean_zero_per_step() {
        let l = law();
        let op = SpectralOperator::dirichlet(1.0, 4).unwrap();
        let comp = compensator_drift(&l, &op).unwrap();
        let dt = 1e-3;
        let mut acc = vec![crate::stats::Accumulator::default(); 4];
        let mut rng = path_rng(8, 0, StreamKind::Small);
        for step in 0..10_000 {
            let t0 = step as f64 * dt;
            let js = sample_small_jumps(&l, t0, t0 + dt, &mut rng).unwrap();
            for (k, a) in acc.iter_mut().enumerate() {
                let s: f64 = js.iter().map(|j| j.magnitude * op.eigenfunction(k + 1, j.location).unwrap()).sum();
                a.push(s - comp[k] * dt);
            }
        }
        for (k, a) in acc.iter().enumerate() {
            let e = a.estimate();
            assert!(e.mean.abs() <= 4.0 * e.se, "mode {}: {e:?}", k + 1);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn paths_are_reproducible_and_well_formed(
            seed in any::<u64>(),
            path in any::<u64>(),
            beta in 0.1f64..0.95,
            horizon in 0.1f64..5.0,
        ) {
            let l = JumpLaw::new(beta, 1.0, 0.05, 1.0).unwrap();
            let sel = NoiseSelection { small: true, large: true };
            let a = sample_noise_path(&l, horizon, seed, path, sel).unwrap();
            let b = sample_noise_path(&l, horizon, seed, path, sel).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.large.jumps.windows(2).all(|w| w[0].time < w[1].time));
            prop_assert!(a.large.jumps.iter().all(|j| j.time > 0.0 && j.time <= horizon && j.magnitude > 1.0));
            prop_assert!(a.large.jumps.iter().all(|j| j.location > 0.0 && j.location < 1.0));
            prop_assert!(a.small.iter().all(|j| j.magnitude > 0.05 && j.magnitude <= 1.0 && (0.0..horizon).contains(&j.time)));
        }
    }
}
