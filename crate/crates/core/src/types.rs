//! Domain types shared across the crate.
//!
//! All timestamps held by [`TimeSeries`] live in normalized time `[0, 1]`;
//! the [`TimeScale`] recorded on a [`Dataset`] maps them back to original
//! units. Values are stored after dataset-wide centering, see [`ValueScale`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::objective::informative_timestamps;

/// One realization of a process: strictly increasing timestamps in `[0, 1]`
/// and the observed values at those timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    timestamps: Vec<f64>,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(timestamps: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Invalid(format!(
                "{} timestamps but {} values",
                timestamps.len(),
                values.len()
            )));
        }
        if timestamps.len() < 2 {
            return Err(Error::Invalid(format!(
                "a time series needs at least 2 points, got {}",
                timestamps.len()
            )));
        }
        if let Some(&t) = timestamps
            .iter()
            .find(|t| !t.is_finite() || **t < 0.0 || **t > 1.0)
        {
            return Err(Error::Range {
                value: t,
                min: 0.0,
                max: 1.0,
            });
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite value in time series".into()));
        }
        Ok(Self { timestamps, values })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Returns a copy with every value replaced through `f(value)`.
    pub fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            timestamps: self.timestamps.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// The sample set of one class: every series is assumed drawn from the same
/// underlying process.
#[derive(Debug, Clone, PartialEq)]
pub struct Collection {
    label: usize,
    series: Vec<TimeSeries>,
}

impl Collection {
    pub fn new(label: usize, series: Vec<TimeSeries>) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Dataset(format!("collection {label} is empty")));
        }
        Ok(Self { label, series })
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn series(&self) -> &[TimeSeries] {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.series.iter().map(TimeSeries::len).sum()
    }
}

/// Affine map between original time units and normalized `[0, 1]` time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScale {
    pub t_min: f64,
    pub t_max: f64,
}

impl TimeScale {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_min.is_finite() && t_max.is_finite() && t_min < t_max) {
            return Err(Error::Invalid(format!(
                "time scale needs t_min < t_max, got ({t_min}, {t_max})"
            )));
        }
        Ok(Self { t_min, t_max })
    }

    pub fn unit() -> Self {
        Self {
            t_min: 0.0,
            t_max: 1.0,
        }
    }

    pub fn span(&self) -> f64 {
        self.t_max - self.t_min
    }

    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.t_min) / self.span()
    }

    /// Exact at both endpoints and never leaves the range for `u` in `[0, 1]`.
    pub fn denormalize(&self, u: f64) -> f64 {
        let t = self.t_min * (1.0 - u) + self.t_max * u;
        if (0.0..=1.0).contains(&u) {
            t.clamp(self.t_min, self.t_max)
        } else {
            t
        }
    }
}

/// Maps raw times into `[0, 1]` via `(t - t_min) / (t_max - t_min)`.
pub fn normalize_timestamps(raw_times: &[f64], time_scale: TimeScale) -> Result<Vec<f64>> {
    let TimeScale { t_min, t_max } = TimeScale::new(time_scale.t_min, time_scale.t_max)?;
    raw_times
        .iter()
        .map(|&t| {
            if !(t >= t_min && t <= t_max) {
                Err(Error::Range {
                    value: t,
                    min: t_min,
                    max: t_max,
                })
            } else {
                Ok(time_scale.normalize(t))
            }
        })
        .collect()
}

/// Dataset-wide value standardization: stored values are `(raw - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueScale {
    pub center: f64,
    pub scale: f64,
}

impl ValueScale {
    pub fn identity() -> Self {
        Self {
            center: 0.0,
            scale: 1.0,
        }
    }

    pub fn to_standard(&self, raw: f64) -> f64 {
        (raw - self.center) / self.scale
    }

    pub fn to_original(&self, standard: f64) -> f64 {
        standard * self.scale + self.center
    }
}

impl Default for ValueScale {
    fn default() -> Self {
        Self::identity()
    }
}

/// `L >= 2` collections with contiguous labels `0..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    collections: Vec<Collection>,
    time_scale: TimeScale,
    value_scale: ValueScale,
}

impl Dataset {
    pub fn new(
        mut collections: Vec<Collection>,
        time_scale: TimeScale,
        value_scale: ValueScale,
    ) -> Result<Self> {
        if collections.len() < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 labels, found {}",
                collections.len()
            )));
        }
        collections.sort_by_key(Collection::label);
        for (expected, c) in collections.iter().enumerate() {
            if c.label() != expected {
                return Err(Error::Dataset(format!(
                    "labels must be distinct and contiguous from 0; expected {expected}, found {}",
                    c.label()
                )));
            }
        }
        let time_scale = TimeScale::new(time_scale.t_min, time_scale.t_max)?;
        if !(value_scale.scale.is_finite() && value_scale.scale > 0.0 && value_scale.center.is_finite())
        {
            return Err(Error::Dataset(format!(
                "invalid value scale ({}, {})",
                value_scale.center, value_scale.scale
            )));
        }
        Ok(Self {
            collections,
            time_scale,
            value_scale,
        })
    }

    /// A dataset already in normalized units (unit time scale, identity value scale).
    pub fn from_collections(collections: Vec<Collection>) -> Result<Self> {
        Self::new(collections, TimeScale::unit(), ValueScale::identity())
    }

    pub fn collections(&self) -> &[Collection] {
        &self.collections
    }

    pub fn collection(&self, k: usize) -> Result<&Collection> {
        self.collections.get(k).ok_or(Error::UnknownClass(k))
    }

    pub fn num_classes(&self) -> usize {
        self.collections.len()
    }

    pub fn time_scale(&self) -> TimeScale {
        self.time_scale
    }

    pub fn value_scale(&self) -> ValueScale {
        self.value_scale
    }

    pub fn num_points(&self) -> usize {
        self.collections.iter().map(Collection::num_points).sum()
    }

    pub fn num_series(&self) -> usize {
        self.collections.iter().map(Collection::len).sum()
    }
}

/// Training hyperparameters. Defaults follow the reference experimental setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Number of most informative timestamps per class.
    pub m: usize,
    /// Motion-code dimension.
    pub d: usize,
    /// Spectral kernel components.
    pub num_components: usize,
    pub lambda: f64,
    /// Noise scale; the per-point noise variance is `sigma^2`.
    pub sigma: f64,
    pub max_iters: usize,
    pub epsilon: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            m: 10,
            d: 2,
            num_components: 1,
            lambda: 1.0,
            sigma: 0.1,
            max_iters: 10,
            epsilon: 1e-5,
            jitter: 1e-6,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(msg.to_string()));
        if self.m == 0 {
            return bad("m must be at least 1");
        }
        if self.d == 0 {
            return bad("d must be at least 1");
        }
        if self.num_components == 0 {
            return bad("J must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.jitter > 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be positive");
        }
        Ok(())
    }
}

/// The trained triple (kernel parameters, motion codes, shared map) plus
/// the settings needed to reuse it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub eta: Vec<KernelParams>,
    pub z: Vec<DVector<f64>>,
    /// `m x d` map shared by all classes.
    pub theta: DMatrix<f64>,
    pub hyper: Hyperparams,
    pub time_scale: TimeScale,
}

impl ModelParams {
    pub fn num_classes(&self) -> usize {
        self.z.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, d) = (self.hyper.m, self.hyper.d);
        if self.theta.nrows() != m || self.theta.ncols() != d {
            return Err(Error::Invalid(format!(
                "theta is {}x{}, expected {m}x{d}",
                self.theta.nrows(),
                self.theta.ncols()
            )));
        }
        if self.eta.len() != self.z.len() {
            return Err(Error::Invalid(format!(
                "{} kernel parameter sets for {} motion codes",
                self.eta.len(),
                self.z.len()
            )));
        }
        for (k, (eta, z)) in self.eta.iter().zip(&self.z).enumerate() {
            if z.len() != d {
                return Err(Error::Invalid(format!(
                    "motion code {k} has length {}, expected {d}",
                    z.len()
                )));
            }
            if eta.num_components() != self.hyper.num_components {
                return Err(Error::Invalid(format!(
                    "class {k} kernel has {} components, expected {}",
                    eta.num_components(),
                    self.hyper.num_components
                )));
            }
            eta.validate()?;
            let s = self.informative_timestamps(k)?;
            if s.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::Numerical(format!(
                    "informative timestamps of class {k} saturated outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// `sigmoid(theta * z_k)` for class `k`, unsorted.
    pub fn informative_timestamps(&self, k: usize) -> Result<DVector<f64>> {
        let z = self.z.get(k).ok_or(Error::UnknownClass(k))?;
        Ok(informative_timestamps(&self.theta, z))
    }
}

/// Predictive moments of one class's signal at query timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub timestamps: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let ts = |a, b| TimeScale::new(a, b).unwrap();
        assert_eq!(
            normalize_timestamps(&[10.0, 20.0, 30.0], ts(10.0, 30.0)).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(normalize_timestamps(&[5.0], ts(0.0, 10.0)).unwrap(), vec![0.5]);
        assert_eq!(
            normalize_timestamps(&[0.0, 1.0, 2.0], ts(0.0, 4.0)).unwrap(),
            vec![0.0, 0.25, 0.5]
        );
    }

    #[test]
    fn normalize_out_of_range_names_value() {
        let err = normalize_timestamps(&[1.0, 11.5], TimeScale::new(0.0, 10.0).unwrap())
            .unwrap_err();
        assert!(err.to_string().contains("11.5"), "{err}");
    }

    #[test]
    fn time_series_rejects_bad_input() {
        assert!(TimeSeries::new(vec![0.0], vec![1.0]).is_err());
        assert!(TimeSeries::new(vec![0.0, 0.5], vec![1.0]).is_err());
        assert!(TimeSeries::new(vec![0.5, 0.5], vec![1.0, 2.0]).is_err());
        assert!(TimeSeries::new(vec![0.5, 1.5], vec![1.0, 2.0]).is_err());
        assert!(TimeSeries::new(vec![0.0, 1.0], vec![1.0, f64::NAN]).is_err());
        assert!(TimeSeries::new(vec![0.0, 1.0], vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn dataset_rejects_duplicates_and_empty() {
        let s = TimeSeries::new(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert!(Collection::new(0, vec![]).is_err());
        let c0 = Collection::new(0, vec![s.clone()]).unwrap();
        let c0b = Collection::new(0, vec![s.clone()]).unwrap();
        let c2 = Collection::new(2, vec![s.clone()]).unwrap();
        assert!(Dataset::from_collections(vec![c0.clone()]).is_err());
        assert!(Dataset::from_collections(vec![c0.clone(), c0b]).is_err());
        assert!(Dataset::from_collections(vec![c0.clone(), c2]).is_err());
        let c1 = Collection::new(1, vec![s]).unwrap();
        let ds = Dataset::from_collections(vec![c1, c0]).unwrap();
        assert_eq!(ds.collections()[0].label(), 0);
    }

    #[test]
    fn hyper_defaults() {
        let h = Hyperparams::default();
        assert_eq!((h.m, h.d, h.num_components, h.max_iters), (10, 2, 1, 10));
        assert_eq!((h.lambda, h.epsilon, h.sigma, h.jitter), (1.0, 1e-5, 0.1, 1e-6));
        h.validate().unwrap();
        assert!(Hyperparams { sigma: 0.0, ..h }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_strictly_monotone(a in -1e3f64..1e3, b in -1e3f64..1e3, lo in -3e3f64..-2e3, width in 4e3f64..6e3) {
            let ts = TimeScale::new(lo, lo + width).unwrap();
            let out = normalize_timestamps(&[a, b], ts).unwrap();
            if a < b { proptest::prop_assert!(out[0] < out[1]); }
            if a > b { proptest::prop_assert!(out[0] > out[1]); }
        }
    }
}
