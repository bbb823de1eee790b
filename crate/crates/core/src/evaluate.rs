//! Scoring a trained model: classification accuracy, forecasting RMSE against
//! the Last-Seen baseline, and the per-class timestamp skeleton.

use serde::{Deserialize, Serialize};

use crate::data_io::{HeldOut, LabelMap};
use crate::error::{Error, Result};
use crate::inference::Classifier;
use crate::types::{Dataset, ModelParams, TimeSeries, ValueScale};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesOutcome {
    pub index: usize,
    pub true_label: i64,
    pub predicted_label: i64,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub labels: Vec<i64>,
    /// `confusion[true][predicted]`, indexed like `labels`.
    pub confusion: Vec<Vec<usize>>,
    pub series: Vec<SeriesOutcome>,
}

/// Classifies `(true class, series)` pairs against class posteriors fitted
/// on `train`.
pub fn classification_report(
    model: &ModelParams,
    train: &Dataset,
    test: &[(usize, TimeSeries)],
    labels: &LabelMap,
) -> Result<ClassificationReport> {
    let classes = model.num_classes();
    if labels.len() != classes {
        return Err(Error::Invalid(format!("{} labels for {classes} classes", labels.len())));
    }
    if let Some((k, _)) = test.iter().find(|(k, _)| *k >= classes) {
        return Err(Error::UnknownClass(*k));
    }
    let classifier = Classifier::new(model, train)?;
    let mut confusion = vec![vec![0; classes]; classes];
    let mut series = Vec::with_capacity(test.len());
    for (k, s) in test {
        let out = classifier.classify(s)?;
        confusion[*k][out.label] += 1;
        series.push(SeriesOutcome {
            index: series.len(),
            true_label: labels.labels[*k],
            predicted_label: labels.labels[out.label],
            distances: out.distances,
        });
    }
    if series.is_empty() {
        return Err(Error::Invalid("no test series".into()));
    }
    let total = series.len();
    let correct = (0..classes).map(|k| confusion[k][k]).sum();
    Ok(ClassificationReport {
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        labels: labels.labels.clone(),
        confusion,
        series,
    })
}

/// One held-out point in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastPoint {
    pub label: i64,
    pub series: usize,
    pub t: f64,
    pub y: f64,
    pub motion_code: f64,
    pub last_seen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassForecast {
    pub label: i64,
    pub series: usize,
    pub points: usize,
    pub rmse_motion_code: f64,
    pub rmse_last_seen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub classes: Vec<ClassForecast>,
    pub points: Vec<ForecastPoint>,
}

/// Root mean square of `pred - y` over `(y, pred)` pairs; 0 for no pairs.
pub fn rmse(pairs: impl IntoIterator<Item = (f64, f64)>) -> f64 {
    let (sum, n) = pairs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (y, p)| (s + (y - p) * (y - p), n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Class-level RMSE of the predicted mean signal and of Last-Seen (each
/// series' final training value), in original units. `test[k][i]` continues
/// series `i` of class `k` in `train`.
pub fn forecast_report(
    model: &ModelParams,
    train: &Dataset,
    test: &[Vec<HeldOut>],
    labels: &LabelMap,
) -> Result<ForecastReport> {
    let vs: ValueScale = train.value_scale();
    let classifier = Classifier::new(model, train)?;
    let mut classes = Vec::new();
    let mut points = Vec::new();
    for (k, held) in test.iter().enumerate() {
        if held.is_empty() {
            continue;
        }
        let collection = train.collection(k)?;
        let label = labels.original(k).ok_or(Error::UnknownClass(k))?;
        if held.len() > collection.len() {
            return Err(Error::Invalid(format!(
                "label {label}: {} test series but only {} training series",
                held.len(),
                collection.len()
            )));
        }
        let start = points.len();
        for (i, h) in held.iter().enumerate() {
            let pred = classifier.predict(k, &h.timestamps)?;
            let last = *collection.series()[i].values().last().expect("series has points");
            for ((t, y), m) in h.timestamps.iter().zip(&h.values).zip(&pred.mean) {
                points.push(ForecastPoint {
                    label,
                    series: i,
                    t: train.time_scale().denormalize(*t),
                    y: vs.to_original(*y),
                    motion_code: vs.to_original(*m),
                    last_seen: vs.to_original(last),
                });
            }
        }
        let mine = &points[start..];
        classes.push(ClassForecast {
            label,
            series: held.len(),
            points: mine.len(),
            rmse_motion_code: rmse(mine.iter().map(|p| (p.y, p.motion_code))),
            rmse_last_seen: rmse(mine.iter().map(|p| (p.y, p.last_seen))),
        });
    }
    Ok(ForecastReport { classes, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub label: i64,
    /// Sorted informative timestamps in normalized time.
    pub s: Vec<f64>,
    /// The same timestamps in original units.
    pub t: Vec<f64>,
    /// Predicted mean signal at `t`, original units.
    pub mean: Vec<f64>,
    /// Predictive variance at `t`, original units squared.
    pub variance: Vec<f64>,
}

/// Per-class `(timestamp, mean, variance)` at the sorted informative
/// timestamps, or on `grid` (normalized time) when given.
pub fn skeletons(
    model: &ModelParams,
    train: &Dataset,
    labels: &LabelMap,
    grid: Option<&[f64]>,
) -> Result<Vec<Skeleton>> {
    let classifier = Classifier::new(model, train)?;
    let vs = train.value_scale();
    let ts = train.time_scale();
    (0..model.num_classes())
        .map(|k| {
            let s = match grid {
                Some(g) => g.to_vec(),
                None => {
                    let mut s: Vec<f64> = model.informative_timestamps(k)?.iter().copied().collect();
                    s.sort_by(f64::total_cmp);
                    s
                }
            };
            let pred = classifier.predict(k, &s)?;
            Ok(Skeleton {
                label: labels.original(k).ok_or(Error::UnknownClass(k))?,
                t: s.iter().map(|&u| ts.denormalize(u)).collect(),
                mean: pred.mean.iter().map(|&m| vs.to_original(m)).collect(),
                variance: pred.variance.iter().map(|&v| v * vs.scale * vs.scale).collect(),
                s,
            })
        })
        .collect()
}
