//! Sample summaries and the two goodness-of-fit tests used on the noise.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson};

use crate::error::{Error, Result};

const MODULE: &str = "stats";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Accumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.m2 / (self.n - 1) as f64
    }

    pub fn estimate(&self) -> MeanEstimate {
        let se = if self.n < 2 { f64::NAN } else { (self.variance() / self.n as f64).sqrt() };
        MeanEstimate { mean: self.mean(), se, n: self.n }
    }
}

pub fn mean_se(xs: &[f64]) -> MeanEstimate {
    let mut a = Accumulator::default();
    xs.iter().for_each(|x| a.push(*x));
    a.estimate()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub dof: usize,
}

impl TestResult {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

/// Asymptotic Kolmogorov survival function `P(K > x)`.
fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * x * x).exp();
        s += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against `Exponential(rate)`.
pub fn ks_exponential(samples: &[f64], rate: f64) -> Result<TestResult> {
    if samples.is_empty() || !(rate > 0.0) {
        return Err(Error::domain(MODULE, "KS test needs samples and a positive rate"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let f = 1.0 - (-rate * x.max(0.0)).exp();
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    // finite-sample correction
    let sq = n.sqrt();
    let p = kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d);
    Ok(TestResult { statistic: d, p_value: p, dof: xs.len() })
}

/// Pearson chi-square test of counts against `Poisson(mean)`. Cells with
/// expected count below 5 are pooled into the two tails.
pub fn chi_square_poisson(counts: &[usize], mean: f64) -> Result<TestResult> {
    if counts.is_empty() || !(mean > 0.0) {
        return Err(Error::domain(MODULE, "chi-square test needs counts and a positive mean"));
    }
    let total = counts.len() as f64;
    let pois = Poisson::new(mean).map_err(|e| Error::domain(MODULE, e.to_string()))?;
    let max = *counts.iter().max().expect("nonempty");
    let mut observed = vec![0usize; max + 1];
    for &c in counts {
        observed[c] += 1;
    }
    // cells [lo, hi] individually, tails pooled
    let expected = |k: usize| pois.pmf(k as u64) * total;
    let mut lo = 0;
    while expected(lo) < 5.0 && (lo as f64) < mean {
        lo += 1;
    }
    let mut hi = mean.ceil() as usize;
    while expected(hi + 1) >= 5.0 {
        hi += 1;
    }
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let below: f64 = (0..lo).map(expected).sum();
    let obs_below: usize = observed.iter().take(lo).sum();
    if lo > 0 {
        cells.push((obs_below as f64, below));
    }
    for k in lo..=hi {
        cells.push((observed.get(k).copied().unwrap_or(0) as f64, expected(k)));
    }
    let upper_expected = total - cells.iter().map(|c| c.1).sum::<f64>();
    let obs_upper: usize = observed.iter().skip(hi + 1).sum();
    cells.push((obs_upper as f64, upper_expected.max(1e-300)));
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = cells.len() - 1;
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::domain(MODULE, e.to_string()))?;
    Ok(TestResult { statistic: stat, p_value: 1.0 - chi.cdf(stat), dof })
}
