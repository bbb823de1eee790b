//! Spectral (sum of squared-exponential) kernel and jittered Cholesky.
//!
//! `k(t, s) = sum_j alpha_j * exp(-0.5 * beta_j * (t - s)^2)` with
//! `alpha_j = exp(log_amplitude_j)` and `beta_j = exp(log_bandwidth_j)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of decades the jitter is escalated by before giving up.
pub const JITTER_DECADES: i32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_amplitudes: Vec<f64>,
    pub log_bandwidths: Vec<f64>,
}

impl KernelParams {
    pub fn new(log_amplitudes: Vec<f64>, log_bandwidths: Vec<f64>) -> Result<Self> {
        let p = Self {
            log_amplitudes,
            log_bandwidths,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds from amplitudes `alpha` and bandwidths `beta` directly.
    pub fn from_natural(amplitudes: &[f64], bandwidths: &[f64]) -> Result<Self> {
        if amplitudes.iter().chain(bandwidths).any(|&v| v.is_nan() || v <= 0.0) {
            return Err(Error::Invalid(
                "kernel amplitudes and bandwidths must be positive".into(),
            ));
        }
        Self::new(
            amplitudes.iter().map(|a| a.ln()).collect(),
            bandwidths.iter().map(|b| b.ln()).collect(),
        )
    }

    /// `J` components with `alpha = beta = 1`.
    pub fn unit(num_components: usize) -> Self {
        Self {
            log_amplitudes: vec![0.0; num_components],
            log_bandwidths: vec![0.0; num_components],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_amplitudes.is_empty() || self.log_amplitudes.len() != self.log_bandwidths.len()
        {
            return Err(Error::Invalid(format!(
                "kernel needs J >= 1 amplitudes and bandwidths of equal length, got {} and {}",
                self.log_amplitudes.len(),
                self.log_bandwidths.len()
            )));
        }
        let ok = |v: &f64| {
            let e = v.exp();
            e.is_finite() && e > 0.0
        };
        if !self.log_amplitudes.iter().chain(&self.log_bandwidths).all(ok) {
            return Err(Error::Numerical(
                "kernel log-parameter does not exponentiate to a finite positive value".into(),
            ));
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.log_amplitudes.len()
    }

    pub fn amplitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_amplitudes.iter().map(|v| v.exp())
    }

    pub fn bandwidths(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_bandwidths.iter().map(|v| v.exp())
    }

    /// Kernel value at zero lag, `sum_j alpha_j`.
    pub fn variance(&self) -> f64 {
        self.amplitudes().sum()
    }

    pub(crate) fn value(&self, t: f64, s: f64) -> f64 {
        let r2 = (t - s) * (t - s);
        self.amplitudes()
            .zip(self.bandwidths())
            .map(|(a, b)| a * (-0.5 * b * r2).exp())
            .sum()
    }

    /// Derivative of `k(t, s)` with respect to its first argument `t`.
    pub(crate) fn d_first_arg(&self, t: f64, s: f64) -> f64 {
        let r = t - s;
        -self
            .amplitudes()
            .zip(self.bandwidths())
            .map(|(a, b)| a * b * r * (-0.5 * b * r * r).exp())
            .sum::<f64>()
    }

    /// Writes `d k / d log_alpha_j` into `out[j]` and `d k / d log_beta_j`
    /// into `out[J + j]`.
    pub(crate) fn d_log_params(&self, t: f64, s: f64, out: &mut [f64]) {
        let j_count = self.num_components();
        let r2 = (t - s) * (t - s);
        for (j, (a, b)) in self.amplitudes().zip(self.bandwidths()).enumerate() {
            let term = a * (-0.5 * b * r2).exp();
            out[j] = term;
            out[j_count + j] = -0.5 * b * r2 * term;
        }
    }
}

pub fn kernel_eval(params: &KernelParams, t: f64, s: f64) -> Result<f64> {
    if !(t.is_finite() && s.is_finite()) {
        return Err(Error::Domain("kernel_eval"));
    }
    Ok(params.value(t, s))
}

pub fn kernel_matrix(params: &KernelParams, rows: &[f64], cols: &[f64]) -> Result<DMatrix<f64>> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Invalid("kernel matrix needs non-empty timestamps".into()));
    }
    if rows.iter().chain(cols).any(|v| !v.is_finite()) {
        return Err(Error::Domain("kernel_matrix"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
        params.value(rows[a], cols[b])
    }))
}

/// Lower Cholesky factor of `mat + jitter_used * I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub lower: DMatrix<f64>,
    pub jitter_used: f64,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive")
    }

    /// `L^{-T} b`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .tr_solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive")
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive")
    }

    pub fn solve_upper_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .tr_solve_lower_triangular(b)
            .expect("Cholesky diagonal is strictly positive")
    }

    /// `(L L^T)^{-1} b`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper_vec(&self.solve_lower_vec(b))
    }

    /// `(L L^T)^{-1} b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Cholesky of `mat + j I` for the smallest `j` in
/// `{base_jitter * 10^p : p = 0..=6}` that factorizes.
pub fn chol_jittered(mat: &DMatrix<f64>, base_jitter: f64) -> Result<CholeskyFactor> {
    let n = mat.nrows();
    if n == 0 || mat.ncols() != n {
        return Err(Error::Invalid(format!(
            "Cholesky needs a non-empty square matrix, got {}x{}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    if !(base_jitter > 0.0 && base_jitter.is_finite()) {
        return Err(Error::Invalid("base jitter must be positive".into()));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in matrix to factorize".into()));
    }
    for a in 0..n {
        for b in 0..a {
            if (mat[(a, b)] - mat[(b, a)]).abs() > 1e-12 {
                return Err(Error::Invalid(format!(
                    "matrix not symmetric at ({a}, {b}): {} vs {}",
                    mat[(a, b)],
                    mat[(b, a)]
                )));
            }
        }
    }
    let mut jitter = base_jitter;
    for _ in 0..=JITTER_DECADES {
        let mut shifted = mat.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(shifted) {
            let lower = chol.unpack();
            if lower.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok(CholeskyFactor {
                    lower,
                    jitter_used: jitter,
                });
            }
        }
        jitter *= 10.0;
    }
    let sym = (mat + mat.transpose()) * 0.5;
    let min_eigenvalue = sym
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Err(Error::Singular {
        min_eigenvalue,
        max_jitter: jitter / 10.0,
    })
}

/// Plain Cholesky of a matrix expected to be well conditioned (for example
/// `c I + V V^T`), falling back to [`chol_jittered`] from `fallback_jitter`.
pub fn chol_spd(mat: &DMatrix<f64>, fallback_jitter: f64) -> Result<CholeskyFactor> {
    let sym = (mat + mat.transpose()) * 0.5;
    match nalgebra::Cholesky::new(sym.clone()) {
        Some(c) => Ok(CholeskyFactor {
            lower: c.unpack(),
            jitter_used: 0.0,
        }),
        None => chol_jittered(&sym, fallback_jitter),
    }
}
