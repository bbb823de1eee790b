//! Optimal variational posterior over the inducing signal, predictive
//! moments, forecasting and nearest-mean classification.
//!
//! With `L L^T = K_SS`, `V_i = L^{-1} K_{S T_i}`, `c = B sigma^2` and
//! `M = I + (1/c) sum_i V_i V_i^T` we have `Lambda = L M L^T`, so
//!
//! ```text
//! mu = (1/c) L M^{-1} sum_i V_i y_i
//! A  = L M^{-1} L^T
//! ```
//!
//! which avoids forming `Lambda^{-1}` explicitly. `M >= I` is always well
//! conditioned.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{chol_jittered, chol_spd, kernel_matrix, CholeskyFactor, KernelParams};
use crate::types::{Collection, Dataset, ModelParams, Prediction, TimeSeries};

/// Forecast queries may extend this far past the end of normalized training time.
pub const FORECAST_HORIZON: f64 = 1.25;

/// Tolerance on negative predictive variances before clipping, relative to
/// `max(1, k(t, t))`.
pub const VARIANCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct VariationalPosterior {
    pub class: usize,
    pub inducing: Vec<f64>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub kss_chol: CholeskyFactor,
    /// Cholesky of `M = I + (1/c) sum_i V_i V_i^T`.
    pub m_chol: CholeskyFactor,
    /// `L^{-1} mu`.
    whitened_mean: DVector<f64>,
}

pub fn fit_posterior(
    collection: &Collection,
    kparams: &KernelParams,
    s_m: &[f64],
    sigma: f64,
    jitter: f64,
) -> Result<VariationalPosterior> {
    if let Some(&s) = s_m.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(Error::Range {
            value: s,
            min: 0.0,
            max: 1.0,
        });
    }
    if s_m.is_empty() {
        return Err(Error::Invalid("no inducing timestamps".into()));
    }
    let m = s_m.len();
    let kss = kernel_matrix(kparams, s_m, s_m)?;
    let kss_chol = chol_jittered(&kss, jitter)?;
    let c = collection.len() as f64 * sigma * sigma;

    let mut precision = DMatrix::<f64>::zeros(m, m);
    let mut projected = DVector::<f64>::zeros(m);
    for series in collection.series() {
        let kst = kernel_matrix(kparams, s_m, series.timestamps())?;
        let v = kss_chol.solve_lower(&kst);
        precision += &v * v.transpose();
        projected += &v * DVector::from_column_slice(series.values());
    }
    precision /= c;
    for i in 0..m {
        precision[(i, i)] += 1.0;
    }
    let m_chol = chol_spd(&precision, jitter)?;

    let whitened_mean = m_chol.solve_vec(&projected) / c;
    let mean = &kss_chol.lower * &whitened_mean;
    let lt = kss_chol.lower.transpose();
    let covariance = &kss_chol.lower * m_chol.solve(&lt);
    let covariance = (&covariance + covariance.transpose()) * 0.5;
    if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "class {}: non-finite posterior moments",
            collection.label()
        )));
    }
    Ok(VariationalPosterior {
        class: collection.label(),
        inducing: s_m.to_vec(),
        mean,
        covariance,
        kss_chol,
        m_chol,
        whitened_mean,
    })
}

/// Predictive mean and marginal variance at `query`.
pub fn predict(
    posterior: &VariationalPosterior,
    kparams: &KernelParams,
    query: &[f64],
) -> Result<Prediction> {
    if query.is_empty() {
        return Err(Error::Invalid("empty query".into()));
    }
    let ksq = kernel_matrix(kparams, &posterior.inducing, query)?;
    let vq = posterior.kss_chol.solve_lower(&ksq);
    let mean = vq.transpose() * &posterior.whitened_mean;
    let wq = posterior.m_chol.solve_lower(&vq);
    let prior = kparams.variance();
    let tolerance = VARIANCE_TOLERANCE * prior.max(1.0);
    let mut variance = Vec::with_capacity(query.len());
    for (q, &tq) in query.iter().enumerate() {
        let v = prior - vq.column(q).norm_squared() + wq.column(q).norm_squared();
        if v < -tolerance || !v.is_finite() {
            return Err(Error::Numerical(format!(
                "predictive variance {v:e} at t = {} is negative",
                tq
            )));
        }
        variance.push(v.max(0.0));
    }
    Ok(Prediction {
        timestamps: query.to_vec(),
        mean: mean.iter().copied().collect(),
        variance,
    })
}

fn class_posterior(model: &ModelParams, collection: &Collection, k: usize) -> Result<VariationalPosterior> {
    let s = model.informative_timestamps(k)?;
    let eta = model.eta.get(k).ok_or(Error::UnknownClass(k))?;
    fit_posterior(collection, eta, s.as_slice(), model.hyper.sigma, model.hyper.jitter)
}

/// One prediction per class: posterior on the class's training collection,
/// evaluated at `query` (normalized time, up to [`FORECAST_HORIZON`]).
pub fn forecast(model: &ModelParams, dataset: &Dataset, k: usize, query: &[f64]) -> Result<Prediction> {
    if k >= model.num_classes() {
        return Err(Error::UnknownClass(k));
    }
    let collection = dataset.collection(k)?;
    if let Some(&t) = query
        .iter()
        .find(|t| !(t.is_finite() && **t >= 0.0 && **t <= FORECAST_HORIZON))
    {
        return Err(Error::Range {
            value: t,
            min: 0.0,
            max: FORECAST_HORIZON,
        });
    }
    let posterior = class_posterior(model, collection, k)?;
    predict(&posterior, &model.eta[k], query)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: usize,
    pub distances: Vec<f64>,
}

/// Index of the smallest distance; ties go to the smallest class id.
pub fn nearest(distances: &[f64]) -> usize {
    let mut best = 0;
    for (k, &d) in distances.iter().enumerate().skip(1) {
        if d < distances[best] {
            best = k;
        }
    }
    best
}

/// Posteriors of every class, fitted once and reused across queries.
#[derive(Debug, Clone)]
pub struct Classifier<'a> {
    model: &'a ModelParams,
    posteriors: Vec<VariationalPosterior>,
}

impl<'a> Classifier<'a> {
    pub fn new(model: &'a ModelParams, dataset: &Dataset) -> Result<Self> {
        if model.num_classes() != dataset.num_classes() {
            return Err(Error::Invalid(format!(
                "model has {} classes but training data has {}",
                model.num_classes(),
                dataset.num_classes()
            )));
        }
        let posteriors = dataset
            .collections()
            .par_iter()
            .enumerate()
            .map(|(k, c)| class_posterior(model, c, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, posteriors })
    }

    pub fn posterior(&self, k: usize) -> Option<&VariationalPosterior> {
        self.posteriors.get(k)
    }

    pub fn predict(&self, k: usize, query: &[f64]) -> Result<Prediction> {
        let post = self.posteriors.get(k).ok_or(Error::UnknownClass(k))?;
        predict(post, &self.model.eta[k], query)
    }

    pub fn classify(&self, series: &TimeSeries) -> Result<Classification> {
        let y = series.values();
        let distances = (0..self.posteriors.len())
            .map(|k| {
                let p = self.predict(k, series.timestamps())?;
                Ok(y.iter()
                    .zip(&p.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Classification {
            label: nearest(&distances),
            distances,
        })
    }
}

/// Label of the class whose predicted mean signal is closest to `series`
/// in Euclidean distance, with the full distance vector.
pub fn classify(model: &ModelParams, dataset: &Dataset, series: &TimeSeries) -> Result<Classification> {
    Classifier::new(model, dataset)?.classify(series)
}
