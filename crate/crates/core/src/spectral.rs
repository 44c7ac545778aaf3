//! The operator `A` through its eigendecomposition.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};

const MODULE: &str = "spectral";

/// Coordinates in the eigenbasis of `A`, mode `k` at index `k - 1`.
pub type SpectralVector = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    DirichletLaplacian1D,
    ExplicitSpectrum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOperator {
    kind: OperatorKind,
    length: f64,
    eigenvalues: Vec<f64>,
}

impl SpectralOperator {
    /// `-d^2/dx^2` on `(0, length)` with Dirichlet conditions, `modes` retained.
    pub fn dirichlet(length: f64, modes: usize) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::domain(MODULE, format!("domain length must be positive, got {length}")));
        }
        if modes == 0 {
            return Err(Error::domain(MODULE, "at least one mode is required"));
        }
        let eigenvalues = (1..=modes).map(|k| (k as f64 * PI / length).powi(2)).collect();
        Ok(Self { kind: OperatorKind::DirichletLaplacian1D, length, eigenvalues })
    }

    /// A designer spectrum. Eigenvalues must be finite, nonnegative and
    /// nondecreasing; a zero eigenvalue is allowed for degenerate test cases
    /// and is weighted like an `H` coordinate by the fractional norms.
    pub fn explicit(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::domain(MODULE, "at least one eigenvalue is required"));
        }
        if eigenvalues.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::domain(MODULE, "eigenvalues must be finite and nonnegative"));
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::domain(MODULE, "eigenvalues must be nondecreasing"));
        }
        Ok(Self { kind: OperatorKind::ExplicitSpectrum, length: 1.0, eigenvalues })
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Same operator with a different number of retained modes.
    pub fn truncated(&self, modes: usize) -> Result<Self> {
        match self.kind {
            OperatorKind::DirichletLaplacian1D => Self::dirichlet(self.length, modes),
            OperatorKind::ExplicitSpectrum => {
                if modes > self.modes() || modes == 0 {
                    return Err(Error::domain(MODULE, "explicit spectra cannot be extended"));
                }
                Self::explicit(self.eigenvalues[..modes].to_vec())
            }
        }
    }

    /// `mu_k^(2 alpha)` per mode, so that `|v|_alpha^2 = sum w_k v_k^2`.
    pub fn weights(&self, alpha: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|&m| weight(m, alpha)).collect()
    }

    /// `|v|_{H^A_alpha} = (sum_k mu_k^(2 alpha) v_k^2)^(1/2)`.
    pub fn fractional_norm(&self, v: &[f64], alpha: f64) -> f64 {
        debug_assert_eq!(v.len(), self.modes());
        self.eigenvalues
            .iter()
            .zip(v)
            .map(|(&m, &x)| weight(m, alpha) * x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// `e_k(x) = sqrt(2/L) sin(k pi x / L)`, with `k` 1-based.
    pub fn eigenfunction(&self, k: usize, x: f64) -> Result<f64> {
        match self.kind {
            OperatorKind::DirichletLaplacian1D => {
                Ok((2.0 / self.length).sqrt() * (k as f64 * PI * x / self.length).sin())
            }
            OperatorKind::ExplicitSpectrum => Err(Error::unsupported(
                MODULE,
                "explicit spectra carry no eigenfunction evaluator",
            )),
        }
    }

    /// Coefficients of the point mass `delta_x`: `e_k(x)` for `k = 1..=K`.
    pub fn delta_coefficients(&self, x: f64) -> Result<SpectralVector> {
        let mut out = vec![0.0; self.modes()];
        self.delta_coefficients_into(x, &mut out)?;
        Ok(out)
    }

    pub fn delta_coefficients_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        if self.kind == OperatorKind::ExplicitSpectrum {
            return Err(Error::unsupported(MODULE, "explicit spectra carry no eigenfunction evaluator"));
        }
        if !(x > 0.0 && x < self.length) {
            return Err(Error::domain(MODULE, format!("point {x} is outside (0, {})", self.length)));
        }
        let scale = (2.0 / self.length).sqrt();
        let theta = PI * x / self.length;
        for (k, o) in out.iter_mut().enumerate() {
            *o = scale * ((k + 1) as f64 * theta).sin();
        }
        Ok(())
    }

    /// Physical-space values `u(x_j) = sum_k v_k e_k(x_j)`.
    pub fn synthesize(&self, v: &[f64], x_grid: &[f64]) -> Result<Vec<f64>> {
        if self.kind == OperatorKind::ExplicitSpectrum {
            return Err(Error::unsupported(MODULE, "explicit spectra carry no eigenfunction evaluator"));
        }
        let scale = (2.0 / self.length).sqrt();
        Ok(x_grid
            .iter()
            .map(|&x| {
                let theta = PI * x / self.length;
                v.iter()
                    .enumerate()
                    .map(|(k, c)| c * ((k + 1) as f64 * theta).sin())
                    .sum::<f64>()
                    * scale
            })
            .collect())
    }

    /// `<f, e_k>` by composite Gauss-Legendre quadrature with `panels` panels.
    pub fn project<F: Fn(f64) -> f64>(&self, f: F, panels: usize) -> Result<SpectralVector> {
        if self.kind == OperatorKind::ExplicitSpectrum {
            return Err(Error::unsupported(MODULE, "explicit spectra carry no eigenfunction evaluator"));
        }
        let gl = crate::quad::GaussLegendre::new(8);
        let h = self.length / panels as f64;
        let mut out = vec![0.0; self.modes()];
        let scale = (2.0 / self.length).sqrt();
        for p in 0..panels {
            let c = (p as f64 + 0.5) * h;
            for (xi, wi) in gl.nodes.iter().zip(&gl.weights) {
                let x = c + 0.5 * h * xi;
                let fx = f(x) * wi * 0.5 * h * scale;
                let theta = PI * x / self.length;
                for (k, o) in out.iter_mut().enumerate() {
                    *o += fx * ((k + 1) as f64 * theta).sin();
                }
            }
        }
        Ok(out)
    }

    /// `int_0^L e_k(x) dx = sqrt(2/L) L (1 - cos k pi) / (k pi)`.
    pub fn eigenfunction_integrals(&self) -> Result<SpectralVector> {
        if self.kind == OperatorKind::ExplicitSpectrum {
            return Err(Error::unsupported(MODULE, "explicit spectra carry no eigenfunction evaluator"));
        }
        let scale = (2.0 / self.length).sqrt() * self.length;
        Ok((1..=self.modes())
            .map(|k| {
                if k % 2 == 0 {
                    0.0
                } else {
                    scale * 2.0 / (k as f64 * PI)
                }
            })
            .collect())
    }
}

fn weight(mu: f64, alpha: f64) -> f64 {
    if mu == 0.0 {
        1.0
    } else {
        mu.powf(2.0 * alpha)
    }
}

/// Squared partial norms `sum_{k <= K} e_k(x)^2 mu_k^(-2 alpha)` of `delta_x`
/// for each cutoff in `cutoffs` (ascending), on the Dirichlet Laplacian.
pub fn delta_partial_norms_sq(length: f64, x: f64, alpha: f64, cutoffs: &[usize]) -> Result<Vec<f64>> {
    if !(x > 0.0 && x < length) {
        return Err(Error::domain(MODULE, format!("point {x} is outside (0, {length})")));
    }
    if cutoffs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::domain(MODULE, "cutoffs must be ascending"));
    }
    let theta = PI * x / length;
    let mut out = Vec::with_capacity(cutoffs.len());
    let mut acc = 0.0;
    let mut comp = 0.0;
    let mut k = 0usize;
    for &cut in cutoffs {
        while k < cut {
            k += 1;
            let e = (2.0 / length) * (k as f64 * theta).sin().powi(2);
            let term = e * (k as f64 * PI / length).powf(-4.0 * alpha) - comp;
            let next = acc + term;
            comp = (next - acc) - term;
            acc = next;
        }
        out.push(acc);
    }
    Ok(out)
}
