//! Dataset files, normalization, noise injection, forecasting splits and
//! model persistence.
//!
//! # Ragged format
//!
//! UTF-8 JSON Lines. Each non-blank line that does not start with `#` is one
//! JSON object:
//!
//! ```text
//! # optional comment lines
//! {"time_range": [0.0, 250.0]}
//! {"label": 3, "t": [0.0, 12.5, 40.0], "y": [1.25, 0.5, -0.75]}
//! {"label": 7, "t": [3.0, 9.0], "y": [0.0, 2.0]}
//! ```
//!
//! * `label` is any integer; labels are remapped to `0..L` in ascending order.
//! * `t` (original time units) is strictly increasing and as long as `y`.
//! * An optional `{"time_range": [lo, hi]}` object, allowed only before the
//!   first record, fixes the time scale instead of taking the min/max over
//!   the file. Forecasting splits write it so train and test files share the
//!   time axis of the full data.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits.
//!
//! # UCR-style format
//!
//! Tab- or comma-separated rows, integer label first, then equally many
//! values per row. Timestamps are the grid `i / (N - 1)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::FORECAST_HORIZON;
use crate::kernel::KernelParams;
use crate::types::{Collection, Dataset, Hyperparams, ModelParams, TimeScale, TimeSeries, ValueScale};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ragged,
    Ucr,
}

/// One series in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaggedRecord {
    pub label: i64,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

/// Parsed records with the line each came from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaggedFile {
    /// Path or other name used in error messages.
    pub source: String,
    pub time_range: Option<TimeScale>,
    pub records: Vec<RaggedRecord>,
    pub lines: Vec<usize>,
}

impl RaggedFile {
    pub fn new(source: impl Into<String>, time_range: Option<TimeScale>, records: Vec<RaggedRecord>) -> Self {
        let lines = (1..=records.len()).collect();
        Self {
            source: source.into(),
            time_range,
            records,
            lines,
        }
    }

    fn located(&self, index: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.clone(),
            line: self.lines.get(index).copied().unwrap_or(0),
            message: message.into(),
        }
    }

    pub fn num_points(&self) -> usize {
        self.records.iter().map(|r| r.t.len()).sum()
    }

    /// The explicit `time_range` if present, else `(min t, max t)`.
    pub fn time_scale(&self) -> Result<TimeScale> {
        if let Some(ts) = self.time_range {
            return Ok(ts);
        }
        let (lo, hi) = self
            .records
            .iter()
            .flat_map(|r| r.t.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
        if lo.is_nan() || lo >= hi {
            return Err(Error::Dataset(format!(
                "{}: timestamps do not span a positive range",
                self.source
            )));
        }
        TimeScale::new(lo, hi)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    label: Option<i64>,
    t: Option<Vec<f64>>,
    y: Option<Vec<f64>>,
    time_range: Option<[f64; 2]>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_record(t: &[f64], y: &[f64]) -> std::result::Result<(), String> {
    if t.len() != y.len() {
        return Err(format!("{} timestamps but {} values", t.len(), y.len()));
    }
    if t.is_empty() {
        return Err("empty record".into());
    }
    if t.iter().chain(y).any(|v| !v.is_finite()) {
        return Err("non-finite number".into());
    }
    if let Some(i) = t.windows(2).position(|w| w[0] >= w[1]) {
        return Err(format!("timestamps not strictly increasing at index {}", i + 1));
    }
    Ok(())
}

/// Parses ragged text. Records with a single point are accepted here (held-out
/// forecasting data); building a [`Dataset`] requires at least 2.
pub fn parse_ragged(text: &str, source: &str) -> Result<RaggedFile> {
    let mut out = RaggedFile {
        source: source.to_string(),
        ..Default::default()
    };
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message,
        };
        let line: Line = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
        match line {
            Line {
                time_range: Some([lo, hi]),
                label: None,
                t: None,
                y: None,
            } => {
                if !out.records.is_empty() || out.time_range.is_some() {
                    return Err(err("time_range must come once, before any record".into()));
                }
                out.time_range = Some(TimeScale::new(lo, hi).map_err(|e| err(e.to_string()))?);
            }
            Line {
                label: Some(label),
                t: Some(t),
                y: Some(y),
                time_range: None,
            } => {
                check_record(&t, &y).map_err(err)?;
                out.records.push(RaggedRecord { label, t, y });
                out.lines.push(line_no);
            }
            _ => {
                return Err(err(
                    "expected either {\"label\", \"t\", \"y\"} or {\"time_range\"}".into(),
                ))
            }
        }
    }
    if let Some(ts) = out.time_range {
        for (i, r) in out.records.iter().enumerate() {
            if let Some(&t) = r.t.iter().find(|&&t| t < ts.t_min) {
                return Err(out.located(i, format!("timestamp {t} precedes time_range start {}", ts.t_min)));
            }
        }
    }
    Ok(out)
}

pub fn read_ragged(path: impl AsRef<Path>) -> Result<RaggedFile> {
    let path = path.as_ref();
    parse_ragged(&read_text(path)?, &path.display().to_string())
}

/// Serializes to the ragged format, one record per line.
pub fn format_ragged(file: &RaggedFile) -> String {
    let mut out = String::new();
    if let Some(ts) = file.time_range {
        out.push_str(&serde_json::json!({ "time_range": [ts.t_min, ts.t_max] }).to_string());
        out.push('\n');
    }
    for r in &file.records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_ragged(path: impl AsRef<Path>, file: &RaggedFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_ragged(file)).map_err(|e| Error::io(path, e))
}

/// Implicit grid `i / (n - 1)`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn parse_ucr(text: &str, source: &str) -> Result<RaggedFile> {
    let mut out = RaggedFile {
        source: source.to_string(),
        ..Default::default()
    };
    let mut width = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: source.to_string(),
            line: line_no,
            message,
        };
        let delim = if trimmed.contains('\t') { '\t' } else { ',' };
        let mut fields = trimmed.split(delim).map(str::trim);
        let label_field = fields.next().unwrap_or_default();
        let label = parse_label(label_field).ok_or_else(|| err(format!("label `{label_field}` is not an integer")))?;
        let y = fields
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("field {}: `{f}` is not a finite number", j + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(y.len()),
            Some(w) if w != y.len() => {
                return Err(err(format!(
                    "row has {} values but earlier rows have {w}; use the ragged format for uneven data",
                    y.len()
                )))
            }
            _ => {}
        }
        if y.len() < 2 {
            return Err(err(format!("row has {} values, need at least 2", y.len())));
        }
        out.records.push(RaggedRecord {
            label,
            t: unit_grid(y.len()),
            y,
        });
        out.lines.push(line_no);
    }
    out.time_range = Some(TimeScale::unit());
    Ok(out)
}

/// Integer labels, tolerating the `1.0000000e+00` spelling found in some archives.
fn parse_label(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    let v = field.parse::<f64>().ok()?;
    (v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

pub fn read_ucr(path: impl AsRef<Path>) -> Result<RaggedFile> {
    let path = path.as_ref();
    parse_ucr(&read_text(path)?, &path.display().to_string())
}

pub fn read_records(path: impl AsRef<Path>, format: Format) -> Result<RaggedFile> {
    match format {
        Format::Ragged => read_ragged(path),
        Format::Ucr => read_ucr(path),
    }
}

/// Original labels in ascending order; class `k` is `labels[k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub labels: Vec<i64>,
}

impl LabelMap {
    pub fn from_records(file: &RaggedFile) -> Self {
        let mut labels: Vec<i64> = file.records.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        Self { labels }
    }

    /// Identity map `0..n`.
    pub fn identity(n: usize) -> Self {
        Self {
            labels: (0..n as i64).collect(),
        }
    }

    pub fn class_of(&self, label: i64) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn original(&self, class: usize) -> Option<i64> {
        self.labels.get(class).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Time and value scales fitted on training data and reused for test data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub time_scale: TimeScale,
    pub value_scale: ValueScale,
}

impl Normalization {
    /// Time scale from the file; values centered by the global mean and
    /// divided by the global population standard deviation (1 if constant).
    pub fn fit(file: &RaggedFile) -> Result<Self> {
        let n = file.num_points();
        if n == 0 {
            return Err(Error::Dataset(format!("{}: no records", file.source)));
        }
        let values = || file.records.iter().flat_map(|r| r.y.iter().copied());
        let mean = values().sum::<f64>() / n as f64;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let scale = if std > 0.0 && std.is_finite() { std } else { 1.0 };
        Ok(Self {
            time_scale: file.time_scale()?,
            value_scale: ValueScale { center: mean, scale },
        })
    }

    pub fn identity() -> Self {
        Self {
            time_scale: TimeScale::unit(),
            value_scale: ValueScale::identity(),
        }
    }
}

/// A loaded dataset with the label map and scales that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub dataset: Dataset,
    pub labels: LabelMap,
    pub normalization: Normalization,
}

/// Every record as `(class, series)` in normalized units, in file order;
/// errors name the source line.
pub fn to_labeled_series(file: &RaggedFile, labels: &LabelMap, norm: &Normalization) -> Result<Vec<(usize, TimeSeries)>> {
    file.records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let class = labels
                .class_of(r.label)
                .ok_or_else(|| file.located(i, format!("label {} was not seen in the training data", r.label)))?;
            let t = crate::types::normalize_timestamps(&r.t, norm.time_scale)
                .map_err(|e| file.located(i, e.to_string()))?;
            let y = r.y.iter().map(|&v| norm.value_scale.to_standard(v)).collect();
            let s = TimeSeries::new(t, y).map_err(|e| file.located(i, e.to_string()))?;
            Ok((class, s))
        })
        .collect()
}

/// Normalizes every record into a dataset with one collection per label.
pub fn to_dataset(file: &RaggedFile, labels: &LabelMap, norm: &Normalization) -> Result<Dataset> {
    let mut per_class: Vec<Vec<TimeSeries>> = vec![Vec::new(); labels.len()];
    for (class, s) in to_labeled_series(file, labels, norm)? {
        per_class[class].push(s);
    }
    let collections = per_class
        .into_iter()
        .enumerate()
        .map(|(k, series)| {
            Collection::new(k, series).map_err(|_| {
                Error::Dataset(format!(
                    "{}: no series with label {}",
                    file.source,
                    labels.labels[k]
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(collections, norm.time_scale, norm.value_scale)
}

/// Fits labels and scales on `file` and builds the dataset.
pub fn load_records(file: &RaggedFile) -> Result<Loaded> {
    let labels = LabelMap::from_records(file);
    if labels.len() < 2 {
        return Err(Error::Dataset(format!(
            "{}: need at least 2 labels, found {}",
            file.source,
            labels.len()
        )));
    }
    let normalization = Normalization::fit(file)?;
    let dataset = to_dataset(file, &labels, &normalization)?;
    Ok(Loaded {
        dataset,
        labels,
        normalization,
    })
}

pub fn load(path: impl AsRef<Path>, format: Format) -> Result<Loaded> {
    load_records(&read_records(path, format)?)
}

pub fn load_ragged(path: impl AsRef<Path>) -> Result<Dataset> {
    Ok(load(path, Format::Ragged)?.dataset)
}

pub fn load_ucr_style(path: impl AsRef<Path>) -> Result<Dataset> {
    Ok(load(path, Format::Ucr)?.dataset)
}

/// Back to original units; the inverse of [`to_dataset`] up to rounding.
pub fn to_records(dataset: &Dataset, labels: &LabelMap) -> Result<RaggedFile> {
    let ts = dataset.time_scale();
    let vs = dataset.value_scale();
    let mut records = Vec::with_capacity(dataset.num_series());
    for c in dataset.collections() {
        let label = labels.original(c.label()).ok_or(Error::UnknownClass(c.label()))?;
        for s in c.series() {
            records.push(RaggedRecord {
                label,
                t: s.timestamps().iter().map(|&u| ts.denormalize(u)).collect(),
                y: s.values().iter().map(|&v| vs.to_original(v)).collect(),
            });
        }
    }
    Ok(RaggedFile::new("<memory>", Some(ts), records))
}

/// Whose maximum absolute value sets the noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseScope {
    /// One scale over every point of the dataset.
    #[default]
    Global,
    /// Each series uses its own maximum.
    PerSeries,
}

fn max_abs<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Adds `N(0, (level * max|value|)^2)` noise to every value, drawing from a
/// ChaCha8 stream seeded with `seed` in collection, series, point order.
pub fn inject_noise(dataset: &Dataset, level: f64, seed: u64) -> Result<Dataset> {
    inject_noise_scoped(dataset, level, seed, NoiseScope::Global)
}

pub fn inject_noise_scoped(dataset: &Dataset, level: f64, seed: u64, scope: NoiseScope) -> Result<Dataset> {
    check_level(level)?;
    let global = max_abs(dataset.collections().iter().flat_map(|c| c.series()).flat_map(|s| s.values()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let collections = dataset
        .collections()
        .iter()
        .map(|c| {
            let series = c
                .series()
                .iter()
                .map(|s| {
                    let std = level * scope_max(scope, global, s.values());
                    s.map_values(|v| perturb(v, std, &mut rng))
                })
                .collect();
            Collection::new(c.label(), series)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(collections, dataset.time_scale(), dataset.value_scale())
}

/// [`inject_noise_scoped`] on raw records, before any normalization.
pub fn inject_noise_records(file: &RaggedFile, level: f64, seed: u64, scope: NoiseScope) -> Result<RaggedFile> {
    check_level(level)?;
    let global = max_abs(file.records.iter().flat_map(|r| &r.y));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = file.clone();
    for r in &mut out.records {
        let std = level * scope_max(scope, global, &r.y);
        for v in &mut r.y {
            *v = perturb(*v, std, &mut rng);
        }
    }
    Ok(out)
}

fn check_level(level: f64) -> Result<()> {
    if level >= 0.0 && level.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("noise level must be >= 0, got {level}")))
    }
}

fn scope_max(scope: NoiseScope, global: f64, values: &[f64]) -> f64 {
    match scope {
        NoiseScope::Global => global,
        NoiseScope::PerSeries => max_abs(values),
    }
}

fn perturb(v: f64, std: f64, rng: &mut ChaCha8Rng) -> f64 {
    // a zero scale leaves values bit-identical (no -0.0 + 0.0 rewrite)
    if std == 0.0 {
        v
    } else {
        v + std * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Number of leading points kept for training: `ceil(fraction * n)`, with a
/// small tolerance so `0.7 * 10` counts as 7.
pub fn train_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::Split(format!("fraction must lie in (0, 1), got {fraction}")))
    }
}

/// Future points of one series, in normalized time and standardized values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub timestamps: Vec<f64>,
    pub values: Vec<f64>,
}

/// Train prefixes as a dataset (same scales as the input) and the held-out
/// suffixes, `test[k][i]` pairing with series `i` of class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSplit {
    pub train: Dataset,
    pub test: Vec<Vec<HeldOut>>,
}

pub fn forecast_split(dataset: &Dataset, fraction: f64) -> Result<ForecastSplit> {
    check_fraction(fraction)?;
    let mut train = Vec::with_capacity(dataset.num_classes());
    let mut test = Vec::with_capacity(dataset.num_classes());
    for c in dataset.collections() {
        let mut tr = Vec::with_capacity(c.len());
        let mut te = Vec::with_capacity(c.len());
        for (i, s) in c.series().iter().enumerate() {
            let n = s.len();
            let cut = train_count(n, fraction);
            if cut < 2 || cut >= n {
                return Err(Error::Split(format!(
                    "class {} series {i}: {n} points give {cut} train and {} test points",
                    c.label(),
                    n - cut.min(n)
                )));
            }
            tr.push(TimeSeries::new(s.timestamps()[..cut].to_vec(), s.values()[..cut].to_vec())?);
            te.push(HeldOut {
                timestamps: s.timestamps()[cut..].to_vec(),
                values: s.values()[cut..].to_vec(),
            });
        }
        train.push(Collection::new(c.label(), tr)?);
        test.push(te);
    }
    Ok(ForecastSplit {
        train: Dataset::new(train, dataset.time_scale(), dataset.value_scale())?,
        test,
    })
}

/// [`forecast_split`] on raw records. Both halves carry the full data's
/// time range so they normalize onto one shared axis.
pub fn split_records(file: &RaggedFile, fraction: f64) -> Result<(RaggedFile, RaggedFile)> {
    check_fraction(fraction)?;
    let ts = file.time_scale()?;
    let mut train = RaggedFile {
        source: format!("{} (train)", file.source),
        time_range: Some(ts),
        ..Default::default()
    };
    let mut test = RaggedFile {
        source: format!("{} (test)", file.source),
        time_range: Some(ts),
        ..Default::default()
    };
    for (i, r) in file.records.iter().enumerate() {
        let n = r.t.len();
        let cut = train_count(n, fraction);
        if cut < 2 || cut >= n {
            return Err(file.located(
                i,
                format!("{n} points give {cut} train and {} test points", n - cut.min(n)),
            ));
        }
        let line = file.lines[i];
        train.records.push(RaggedRecord {
            label: r.label,
            t: r.t[..cut].to_vec(),
            y: r.y[..cut].to_vec(),
        });
        train.lines.push(line);
        test.records.push(RaggedRecord {
            label: r.label,
            t: r.t[cut..].to_vec(),
            y: r.y[cut..].to_vec(),
        });
        test.lines.push(line);
    }
    Ok((train, test))
}

/// Held-out records normalized onto a model's axes, grouped by class in file
/// order. Times may run up to the forecast horizon past the end of the scale.
pub fn to_held_out(file: &RaggedFile, labels: &LabelMap, norm: &Normalization) -> Result<Vec<Vec<HeldOut>>> {
    let ts = norm.time_scale;
    let mut out = vec![Vec::new(); labels.len()];
    for (i, r) in file.records.iter().enumerate() {
        let class = labels
            .class_of(r.label)
            .ok_or_else(|| file.located(i, format!("label {} was not seen in the training data", r.label)))?;
        let timestamps = r
            .t
            .iter()
            .map(|&t| {
                let u = ts.normalize(t);
                if (0.0..=FORECAST_HORIZON).contains(&u) {
                    Ok(u)
                } else {
                    Err(file.located(
                        i,
                        format!(
                            "timestamp {t} is outside [{}, {}]",
                            ts.t_min,
                            ts.denormalize(FORECAST_HORIZON)
                        ),
                    ))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out[class].push(HeldOut {
            timestamps,
            values: r.y.iter().map(|&v| norm.value_scale.to_standard(v)).collect(),
        });
    }
    Ok(out)
}

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassParams {
    pub label: i64,
    pub log_amplitudes: Vec<f64>,
    pub log_bandwidths: Vec<f64>,
    pub z: Vec<f64>,
}

/// On-disk model: parameters plus everything needed to reuse them on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u64,
    pub hyper: Hyperparams,
    pub time_scale: TimeScale,
    pub value_scale: ValueScale,
    pub classes: Vec<ClassParams>,
    /// Row-major `m x d`.
    pub theta: Vec<Vec<f64>>,
    /// Hex SHA-256 of the normalized training data, see [`dataset_digest`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_digest: Option<String>,
}

impl ModelFile {
    pub fn from_params(
        params: &ModelParams,
        labels: &LabelMap,
        value_scale: ValueScale,
        training_digest: Option<String>,
    ) -> Result<Self> {
        if labels.len() != params.num_classes() {
            return Err(Error::Invalid(format!(
                "{} labels for {} classes",
                labels.len(),
                params.num_classes()
            )));
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            hyper: params.hyper,
            time_scale: params.time_scale,
            value_scale,
            classes: params
                .eta
                .iter()
                .zip(&params.z)
                .zip(&labels.labels)
                .map(|((eta, z), &label)| ClassParams {
                    label,
                    log_amplitudes: eta.log_amplitudes.clone(),
                    log_bandwidths: eta.log_bandwidths.clone(),
                    z: z.iter().copied().collect(),
                })
                .collect(),
            theta: params.theta.row_iter().map(|r| r.iter().copied().collect()).collect(),
            training_digest,
        })
    }

    pub fn params(&self) -> Result<ModelParams> {
        let (m, d) = (self.hyper.m, self.hyper.d);
        if self.theta.len() != m || self.theta.iter().any(|r| r.len() != d) {
            return Err(Error::Field {
                field: "theta".into(),
                message: format!("expected {m} rows of {d} values"),
            });
        }
        let eta = self
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| {
                KernelParams::new(c.log_amplitudes.clone(), c.log_bandwidths.clone()).map_err(|e| Error::Field {
                    field: format!("classes[{k}]"),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ModelParams {
            eta,
            z: self
                .classes
                .iter()
                .map(|c| nalgebra::DVector::from_vec(c.z.clone()))
                .collect(),
            theta: nalgebra::DMatrix::from_row_iterator(m, d, self.theta.iter().flatten().copied()),
            hyper: self.hyper,
            time_scale: self.time_scale,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn labels(&self) -> LabelMap {
        LabelMap {
            labels: self.classes.iter().map(|c| c.label).collect(),
        }
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            time_scale: self.time_scale,
            value_scale: self.value_scale,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    /// Checks `format_version` before anything else, then reports the
    /// path of the first bad field.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Field {
            field: "<root>".into(),
            message: e.to_string(),
        })?;
        let version = value.get("format_version").ok_or_else(|| Error::Field {
            field: "format_version".into(),
            message: "missing".into(),
        })?;
        let found = version.as_u64().ok_or_else(|| Error::Field {
            field: "format_version".into(),
            message: format!("expected an unsigned integer, found {version}"),
        })?;
        if found != FORMAT_VERSION {
            return Err(Error::Version {
                found,
                expected: FORMAT_VERSION,
            });
        }
        serde_path_to_error::deserialize(value).map_err(|e| Error::Field {
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &ModelFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    ModelFile::from_json(&read_text(path)?).map_err(|e| match e {
        Error::Field { field, message } => Error::Field {
            field,
            message: format!("{message} (in {})", path.display()),
        },
        other => other,
    })
}

/// Hex SHA-256 over the bit patterns of a dataset's scales, labels, timestamps
/// and values, in storage order.
pub fn dataset_digest(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    let ts = dataset.time_scale();
    let vs = dataset.value_scale();
    for v in [ts.t_min, ts.t_max, vs.center, vs.scale] {
        h.update(v.to_bits().to_le_bytes());
    }
    for c in dataset.collections() {
        h.update((c.label() as u64).to_le_bytes());
        h.update((c.len() as u64).to_le_bytes());
        for s in c.series() {
            h.update((s.len() as u64).to_le_bytes());
            for v in s.timestamps().iter().chain(s.values()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::init_params;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};

    fn rec(label: i64, t: &[f64], y: &[f64]) -> RaggedRecord {
        RaggedRecord {
            label,
            t: t.to_vec(),
            y: y.to_vec(),
        }
    }

    #[test]
    fn two_records_two_classes() {
        let text = "{\"label\":0,\"t\":[10,20,30],\"y\":[1,2,3]}\n{\"label\":1,\"t\":[10,30],\"y\":[0,1]}\n";
        let loaded = load_records(&parse_ragged(text, "mem").unwrap()).unwrap();
        assert_eq!(loaded.dataset.num_classes(), 2);
        assert!(loaded.dataset.collections().iter().all(|c| c.len() == 1));
        let second = &loaded.dataset.collections()[1].series()[0];
        assert_eq!(second.timestamps(), &[0.0, 1.0]);
    }

    #[test]
    fn centering_uses_global_moments() {
        let text = "{\"label\":0,\"t\":[0,1],\"y\":[1,3]}\n{\"label\":1,\"t\":[0,1],\"y\":[5,7]}\n";
        let loaded = load_records(&parse_ragged(text, "mem").unwrap()).unwrap();
        let vs = loaded.normalization.value_scale;
        assert_eq!(vs.center, 4.0);
        assert!((vs.scale - 5.0f64.sqrt()).abs() < 1e-15);
        for (c, raw) in loaded.dataset.collections().iter().zip([[1.0, 3.0], [5.0, 7.0]]) {
            for (v, r) in c.series()[0].values().iter().zip(raw) {
                assert!((vs.to_original(*v) - r).abs() <= 1e-12 * r.abs());
            }
        }
    }

    #[test]
    fn constant_values_keep_unit_scale() {
        let text = "{\"label\":0,\"t\":[0,1],\"y\":[2,2]}\n{\"label\":1,\"t\":[0,1],\"y\":[2,2]}\n";
        let n = Normalization::fit(&parse_ragged(text, "mem").unwrap()).unwrap();
        assert_eq!(n.value_scale, ValueScale { center: 2.0, scale: 1.0 });
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "# header\n{\"label\":0,\"t\":[0,1],\"y\":[1,2]}\n\n{\"label\":1,\"t\":[0,1],\"y\":[1,2}\n";
        match parse_ragged(text, "f.jsonl") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(path, "f.jsonl");
            }
            other => panic!("{other:?}"),
        }
        let text = "{\"label\":0,\"t\":[0,1],\"y\":[1,2]}\n{\"label\":1,\"t\":[0.5,0.5],\"y\":[1,2]}\n";
        match parse_ragged(text, "f") {
            Err(Error::Parse { line: 2, message, .. }) => assert!(message.contains("increasing")),
            other => panic!("{other:?}"),
        }
        let text = "{\"label\":0,\"t\":[0,1],\"y\":[1]}\n";
        assert!(matches!(parse_ragged(text, "f"), Err(Error::Parse { line: 1, .. })));
        let text = "{\"label\":0,\"t\":[0,1],\"y\":[1,2],\"extra\":1}\n";
        assert!(matches!(parse_ragged(text, "f"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn single_label_is_a_dataset_error() {
        let text = "{\"label\":4,\"t\":[0,1],\"y\":[1,2]}\n{\"label\":4,\"t\":[0,1],\"y\":[1,3]}\n";
        assert!(matches!(load_records(&parse_ragged(text, "f").unwrap()), Err(Error::Dataset(_))));
    }

    #[test]
    fn single_point_record_fails_when_building_dataset() {
        let text = "{\"label\":0,\"t\":[0,1],\"y\":[1,2]}\n{\"label\":1,\"t\":[0.5],\"y\":[1]}\n";
        let file = parse_ragged(text, "f").unwrap();
        assert!(matches!(load_records(&file), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn time_range_header() {
        let text = "{\"time_range\":[0,100]}\n{\"label\":0,\"t\":[0,50],\"y\":[1,2]}\n{\"label\":1,\"t\":[10,80],\"y\":[1,2]}\n";
        let loaded = load_records(&parse_ragged(text, "f").unwrap()).unwrap();
        assert_eq!(loaded.dataset.time_scale(), TimeScale::new(0.0, 100.0).unwrap());
        assert_eq!(loaded.dataset.collections()[1].series()[0].timestamps(), &[0.1, 0.8]);
        let late = "{\"label\":0,\"t\":[0,1],\"y\":[1,2]}\n{\"time_range\":[0,1]}\n";
        assert!(matches!(parse_ragged(late, "f"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn ucr_rows() {
        let file = parse_ucr("1,0.0,0.5,1.0\n", "u").unwrap();
        assert_eq!(file.records[0].t, vec![0.0, 0.5, 1.0]);
        assert_eq!(file.records[0].label, 1);

        let loaded = load_records(&parse_ucr("7\t1\t2\n3\t4\t5\n7\t0\t1\n", "u").unwrap()).unwrap();
        assert_eq!(loaded.labels.labels, vec![3, 7]);
        assert_eq!(loaded.dataset.collections()[0].len(), 1);
        assert_eq!(loaded.dataset.collections()[1].len(), 2);
        assert_eq!(loaded.dataset.collections()[0].series()[0].timestamps(), &[0.0, 1.0]);

        assert!(matches!(parse_ucr("1,0,1,2\n2,0,1\n", "u"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_ucr("x,0,1\n", "u"), Err(Error::Parse { line: 1, .. })));
        assert_eq!(parse_ucr("1.0000000e+00,1,2\n", "u").unwrap().records[0].label, 1);
    }

    #[test]
    fn noise_level_zero_is_identity() {
        let text = "{\"label\":0,\"t\":[0,1],\"y\":[-0.0,2]}\n{\"label\":1,\"t\":[0,1],\"y\":[1,2]}\n";
        let ds = load_records(&parse_ragged(text, "f").unwrap()).unwrap().dataset;
        assert_eq!(inject_noise(&ds, 0.0, 9).unwrap(), ds);
        assert!(inject_noise(&ds, -1.0, 9).is_err());
    }

    fn big_dataset(points: usize, peak: f64) -> Dataset {
        let t = unit_grid(points);
        let y: Vec<f64> = t.iter().map(|t| peak * (7.0 * t).sin()).collect();
        let mut y0 = y.clone();
        y0[points / 4] = peak; // exact maximum
        let c0 = Collection::new(0, vec![TimeSeries::new(t.clone(), y0).unwrap()]).unwrap();
        let c1 = Collection::new(1, vec![TimeSeries::new(t, y).unwrap()]).unwrap();
        Dataset::from_collections(vec![c0, c1]).unwrap()
    }

    #[test]
    fn noise_std_tracks_level() {
        let ds = big_dataset(6000, 2.0);
        let noisy = inject_noise(&ds, 0.3, 11).unwrap();
        let diffs: Vec<f64> = ds
            .collections()
            .iter()
            .zip(noisy.collections())
            .flat_map(|(a, b)| {
                a.series()[0]
                    .values()
                    .iter()
                    .zip(b.series()[0].values())
                    .map(|(x, y)| y - x)
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.6).abs() < 0.03, "{std}");
        assert_eq!(inject_noise(&ds, 0.3, 11).unwrap(), noisy);
        assert_ne!(inject_noise(&ds, 0.3, 12).unwrap(), noisy);
    }

    #[test]
    fn per_series_scope() {
        let file = RaggedFile::new("m", None, vec![rec(0, &[0.0, 1.0], &[0.0, 10.0]), rec(1, &[0.0, 1.0], &[0.0, 0.0])]);
        let g = inject_noise_records(&file, 0.1, 1, NoiseScope::Global).unwrap();
        let p = inject_noise_records(&file, 0.1, 1, NoiseScope::PerSeries).unwrap();
        assert_ne!(g.records[1].y, file.records[1].y);
        assert_eq!(p.records[1].y, file.records[1].y);
        assert_eq!(p.records[0].y, g.records[0].y);
    }

    #[test]
    fn split_examples() {
        assert_eq!(train_count(10, 0.8), 8);
        assert_eq!(train_count(4, 0.5), 2);
        assert_eq!(train_count(10, 0.7), 7);
        assert_eq!(train_count(10, 0.75), 8);
        let t = unit_grid(10);
        let s = TimeSeries::new(t.clone(), t.iter().map(|v| v * 2.0).collect()).unwrap();
        let c0 = Collection::new(0, vec![s.clone()]).unwrap();
        let c1 = Collection::new(1, vec![s]).unwrap();
        let ds = Dataset::from_collections(vec![c0, c1]).unwrap();
        let split = forecast_split(&ds, 0.8).unwrap();
        assert_eq!(split.train.collections()[0].series()[0].len(), 8);
        assert_eq!(split.test[0][0].timestamps.len(), 2);
        assert_eq!(split.train.time_scale(), ds.time_scale());
        assert!(matches!(forecast_split(&ds, 1.0), Err(Error::Split(_))));
        assert!(matches!(forecast_split(&ds, 0.1), Err(Error::Split(_))));
        assert!(matches!(forecast_split(&ds, 0.95), Err(Error::Split(_))));
    }

    #[test]
    fn record_split_shares_time_range() {
        let file = RaggedFile::new(
            "m",
            None,
            vec![rec(0, &[10.0, 20.0, 30.0, 40.0], &[1.0, 2.0, 3.0, 4.0]), rec(1, &[15.0, 50.0, 60.0], &[0.0, 1.0, 2.0])],
        );
        let (tr, te) = split_records(&file, 0.5).unwrap();
        assert_eq!(tr.time_range, Some(TimeScale::new(10.0, 60.0).unwrap()));
        assert_eq!(te.time_range, tr.time_range);
        assert_eq!(tr.records[1].t, vec![15.0, 50.0]);
        assert_eq!(te.records[1].t, vec![60.0]);
        let back = parse_ragged(&format_ragged(&te), "t").unwrap();
        assert_eq!(back.records, te.records);
    }

    #[test]
    fn ragged_round_trip_is_bit_exact() {
        let file = RaggedFile::new(
            "m",
            Some(TimeScale::new(-1.0, 1e6).unwrap()),
            vec![
                rec(-3, &[0.1, 0.2 + 1e-16, 1.0 / 3.0], &[f64::MIN_POSITIVE, -1e300, 0.1 + 0.2]),
                rec(9, &[5.0, 6.0], &[-0.0, std::f64::consts::PI]),
            ],
        );
        let back = parse_ragged(&format_ragged(&file), "m").unwrap();
        assert_eq!(back.time_range, file.time_range);
        for (a, b) in back.records.iter().zip(&file.records) {
            assert_eq!(a.label, b.label);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.t), bits(&b.t));
            assert_eq!(bits(&a.y), bits(&b.y));
        }
    }

    #[test]
    fn model_round_trip() {
        let hyper = Hyperparams {
            lambda: 0.1 + 0.2,
            ..Default::default()
        };
        let mut params = init_params(2, hyper);
        params.time_scale = TimeScale::new(3.0, 17.25).unwrap();
        params.eta[1].log_bandwidths[0] = 1.0 / 3.0;
        params.z[0][1] = -std::f64::consts::FRAC_1_SQRT_2;
        params.theta[(3, 1)] = 1e-17;
        let labels = LabelMap { labels: vec![-2, 5] };
        let vs = ValueScale { center: 0.1, scale: 2.0f64.sqrt() };
        let file = ModelFile::from_params(&params, &labels, vs, Some("ab".into())).unwrap();
        let back = ModelFile::from_json(&file.to_json()).unwrap();
        assert_eq!(back, file);
        let p2 = back.params().unwrap();
        assert_eq!(p2, params);
        for k in 0..2 {
            let a = params.informative_timestamps(k).unwrap();
            let b = p2.informative_timestamps(k).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.labels(), labels);
        assert_eq!(back.value_scale, vs);
    }

    #[test]
    fn model_version_and_field_errors() {
        let file = ModelFile::from_params(&init_params(2, Hyperparams::default()), &LabelMap::identity(2), ValueScale::identity(), None).unwrap();
        let json = file.to_json();
        let v99 = json.replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(matches!(ModelFile::from_json(&v99), Err(Error::Version { found: 99, expected: 1 })));
        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["classes"][1]["z"][0] = serde_json::json!("oops");
        match ModelFile::from_json(&value.to_string()) {
            Err(Error::Field { field, .. }) => assert_eq!(field, "classes[1].z[0]"),
            other => panic!("{other:?}"),
        }
        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["theta"] = serde_json::json!([[1.0, 2.0]]);
        assert!(matches!(ModelFile::from_json(&value.to_string()).unwrap().params(), Err(Error::Field { .. })));
    }

    #[test]
    fn digest_detects_changes() {
        let ds = big_dataset(20, 1.0);
        let d = dataset_digest(&ds);
        assert_eq!(d.len(), 64);
        assert_eq!(d, dataset_digest(&ds.clone()));
        assert_ne!(d, dataset_digest(&inject_noise(&ds, 0.01, 0).unwrap()));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 4usize..60, frac in 0.3f64..0.8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            prop_assume!(t.len() >= 4);
            let y: Vec<f64> = t.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let file = RaggedFile::new("p", None, vec![rec(0, &t, &y), rec(1, &t, &y)]);
            let cut = train_count(t.len(), frac);
            prop_assume!(cut >= 2 && cut < t.len());
            let (tr, te) = split_records(&file, frac).unwrap();
            for (a, b) in tr.records.iter().zip(&te.records) {
                let mut joined = a.t.clone();
                joined.extend(&b.t);
                prop_assert_eq!(&joined, &t);
                let mut vals = a.y.clone();
                vals.extend(&b.y);
                prop_assert_eq!(&vals, &y);
            }
            let loaded = load_records(&file).unwrap();
            let split = forecast_split(&loaded.dataset, frac).unwrap();
            let s = &loaded.dataset.collections()[0].series()[0];
            let mut joined = split.train.collections()[0].series()[0].timestamps().to_vec();
            joined.extend(&split.test[0][0].timestamps);
            prop_assert_eq!(joined.as_slice(), s.timestamps());
        }

        #[test]
        fn centering_is_invertible(center in -1e4f64..1e4, scale in 1e-3f64..1e3, v in -1e5f64..1e5) {
            let vs = ValueScale { center, scale };
            let back = vs.to_original(vs.to_standard(v));
            prop_assert!((back - v).abs() <= 1e-12 * v.abs().max(center.abs()).max(1.0));
        }

        #[test]
        fn dataset_round_trip(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records = (0..6)
                .map(|i| {
                    let n = rng.random_range(2..12);
                    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
                    t.sort_by(f64::total_cmp);
                    t.dedup();
                    let y = t.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
                    RaggedRecord { label: (i % 3) as i64 * 10, t, y }
                })
                .filter(|r| r.t.len() >= 2)
                .collect::<Vec<_>>();
            let file = RaggedFile::new("p", None, records);
            prop_assume!(LabelMap::from_records(&file).len() >= 2);
            let loaded = load_records(&file).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.jsonl");
            write_ragged(&path, &to_records(&loaded.dataset, &loaded.labels).unwrap()).unwrap();
            let again = load(&path, Format::Ragged).unwrap();
            prop_assert_eq!(&again.labels, &loaded.labels);
            for (a, b) in again.dataset.collections().iter().zip(loaded.dataset.collections()) {
                for (x, y) in a.series().iter().zip(b.series()) {
                    for (p, q) in x.timestamps().iter().zip(y.timestamps()).chain(x.values().iter().zip(y.values())) {
                        prop_assert!((p - q).abs() < 1e-12, "{} vs {}", p, q);
                    }
                }
            }
            // the written records themselves survive bit for bit
            let written = to_records(&loaded.dataset, &loaded.labels).unwrap();
            write_ragged(&path, &written).unwrap();
            prop_assert_eq!(read_ragged(&path).unwrap().records, written.records);
        }
    }
}
