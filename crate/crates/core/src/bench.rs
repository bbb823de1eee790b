//! End-to-end checks: dense oracles, gradient checks and the synthetic
//! classification/forecasting/scaling benchmarks.
//!
//! Each check returns a [`Check`] whose contents depend only on the seed, so
//! a [`BenchReport`] is byte-for-byte reproducible. Wall-clock measurements
//! go into [`Timing`] records kept apart from the report.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{load_records, split_records, to_held_out, to_labeled_series, RaggedFile};
use crate::error::Result;
use crate::evaluate::{classification_report, forecast_report};
use crate::inference::{fit_posterior, predict};
use crate::objective::{lmax_bound, loss_and_gradient, BoundWorkspace};
use crate::optimizer::train;
use crate::oracle::{self, random_instance, random_model, spaced_points};
use crate::synthetic::{sine_vs_ramp, SyntheticConfig, SINE};
use crate::types::{Collection, Hyperparams, TimeSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// The summary statistic compared against `threshold`.
    pub value: f64,
    pub threshold: f64,
    /// How `value` must relate to `threshold`: `"<="` or `">="`.
    pub comparison: String,
    /// Per-instance or per-seed values behind `value`.
    pub details: Vec<f64>,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64, details: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            comparison: "<=".into(),
            details,
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64, details: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            passed: value >= threshold,
            value,
            threshold,
            comparison: ">=".into(),
            details,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub name: String,
    pub seconds: f64,
    pub limit_seconds: Option<f64>,
    pub passed: bool,
}

impl Timing {
    fn new(name: &str, seconds: f64, limit_seconds: Option<f64>) -> Self {
        Self {
            name: name.into(),
            seconds,
            limit_seconds,
            passed: limit_seconds.is_none_or(|l| seconds < l),
        }
    }
}

fn max(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// With one series and `S = T` the bound equals the exact log marginal
/// likelihood and the trace term vanishes.
pub fn collapse(seed: u64) -> Result<Check> {
    let mut rng = sub_rng(seed, 1);
    let mut errors = Vec::with_capacity(20);
    for _ in 0..20 {
        let n = rng.random_range(2..=10);
        let t = spaced_points(&mut rng, n, 0.0, 1.0, 0.05);
        let y: Vec<f64> = t.iter().map(|_| rng.random_range(-1.5..1.5)).collect();
        let kernel = crate::kernel::KernelParams::new(
            vec![rng.random_range(-0.5..0.5)],
            vec![rng.random_range(3.0..4.5)],
        )?;
        let sigma = rng.random_range(0.2..0.6);
        let c = Collection::new(0, vec![TimeSeries::new(t.clone(), y.clone())?])?;
        let ws = BoundWorkspace::new(&c, &kernel, &t, sigma, 1e-12)?;
        let exact = oracle::exact_log_marginal(&kernel, &t, &y, sigma);
        errors.push((ws.bound() - exact).abs().max(ws.trace_term().abs()));
    }
    Ok(Check::at_most("bound_collapse", max(&errors), 1e-8, errors))
}

/// Low-rank evaluation against the dense `B sigma^2 I + Q` construction.
pub fn woodbury(seed: u64) -> Result<Check> {
    let mut rng = sub_rng(seed, 2);
    let mut errors = Vec::with_capacity(50);
    for _ in 0..50 {
        let b = rng.random_range(1..=3);
        let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(2..=8)).collect();
        let m = rng.random_range(1..=4);
        let j = rng.random_range(1..=2);
        let inst = random_instance(&mut rng, b, &lengths, m, j);
        let fast = lmax_bound(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter)?;
        let dense = oracle::dense_bound(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter);
        errors.push((fast - dense).abs());
    }
    Ok(Check::at_most("woodbury_vs_dense", max(&errors), 1e-8, errors))
}

/// Posterior moments and predictions against explicit-inverse formulas.
pub fn posterior(seed: u64) -> Result<Check> {
    let mut rng = sub_rng(seed, 3);
    let mut errors = Vec::with_capacity(50);
    for _ in 0..50 {
        let b = rng.random_range(1..=3);
        let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(2..=8)).collect();
        let m = rng.random_range(1..=4);
        let j = rng.random_range(1..=2);
        let inst = random_instance(&mut rng, b, &lengths, m, j);
        let post = fit_posterior(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter)?;
        let (mu, a) = oracle::dense_posterior(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter);
        let query: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.2)).collect();
        let pred = predict(&post, &inst.kernel, &query)?;
        let (mean, var) = oracle::dense_predict(&inst.kernel, &inst.inducing, &mu, &a, &query, inst.jitter);
        let worst = (&post.mean - &mu)
            .amax()
            .max((&post.covariance - &a).amax())
            .max(pred.mean.iter().zip(&mean).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
            .max(pred.variance.iter().zip(&var).map(|(x, y)| (x - y.max(0.0)).abs()).fold(0.0, f64::max));
        errors.push(worst);
    }
    Ok(Check::at_most("posterior_vs_dense", max(&errors), 1e-8, errors))
}

/// Analytic loss gradient against central differences with `h = 1e-5`.
pub fn gradient(seed: u64) -> Result<Check> {
    let mut rng = sub_rng(seed, 4);
    let mut errors = Vec::with_capacity(20);
    for i in 0..20 {
        let classes = [2, 3][i % 2];
        let j = [1, 2][(i / 2) % 2];
        let m = [2, 5][(i / 4) % 2];
        let collections = (0..classes)
            .map(|k| {
                let b = rng.random_range(1..=3);
                let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(3..=8)).collect();
                let inst = random_instance(&mut rng, b, &lengths, 1, 1);
                Collection::new(k, inst.collection.series().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        let hyper = Hyperparams {
            m,
            d: 2,
            num_components: j,
            lambda: 0.7,
            sigma: rng.random_range(0.2..0.6),
            jitter: 1e-8,
            ..Default::default()
        };
        let params = random_model(&mut rng, classes, hyper);
        let (_, grad) = loss_and_gradient(&collections, &params)?;
        let report = oracle::check_gradient(&collections, &params, &grad, 1e-5);
        errors.push(report.worst_relative_error);
    }
    Ok(Check::at_most("gradient_vs_finite_differences", max(&errors), 1e-4, errors))
}

/// Adding one inducing timestamp never lowers the bound.
pub fn refinement(seed: u64) -> Result<Check> {
    let mut rng = sub_rng(seed, 5);
    let mut drops = Vec::with_capacity(10);
    for _ in 0..10 {
        let b = rng.random_range(1..=3);
        let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(3..=10)).collect();
        let m = rng.random_range(2..=5);
        let mut inst = random_instance(&mut rng, b, &lengths, m + 1, 1);
        let extra = inst.inducing.pop().expect("m + 1 points");
        let base = lmax_bound(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter)?;
        inst.inducing.push(extra);
        let refined = lmax_bound(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter)?;
        drops.push(base - refined);
    }
    Ok(Check::at_most("monotone_refinement", max(&drops), 1e-8, drops))
}

/// Seeds used by the synthetic benchmarks for a given bench seed.
pub fn benchmark_seeds(seed: u64) -> Vec<u64> {
    (0..5).map(|i| seed.wrapping_mul(1000).wrapping_add(i)).collect()
}

/// Accuracy of a default-hyperparameter model on one synthetic draw.
pub fn classification_accuracy(seed: u64) -> Result<f64> {
    let (train_file, test_file) = sine_vs_ramp(seed, &SyntheticConfig::default())?;
    let train_set = load_records(&train_file)?;
    let test = to_labeled_series(&test_file, &train_set.labels, &train_set.normalization)?;
    let out = train(&train_set.dataset, Hyperparams::default())?;
    Ok(classification_report(&out.params, &train_set.dataset, &test, &train_set.labels)?.accuracy)
}

pub fn classification(seed: u64) -> Result<Check> {
    let acc = benchmark_seeds(seed)
        .into_iter()
        .map(classification_accuracy)
        .collect::<Result<Vec<_>>>()?;
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    Ok(Check::at_least("synthetic_classification_accuracy", mean, 0.9, acc))
}

/// `(Motion Code RMSE, Last-Seen RMSE)` on the sine class after a 0.8 split.
pub fn forecast_rmse(seed: u64) -> Result<(f64, f64)> {
    let (train_file, _) = sine_vs_ramp(seed, &SyntheticConfig::default())?;
    let (head, tail) = split_records(&train_file, 0.8)?;
    let loaded = load_records(&head)?;
    let held = to_held_out(&tail, &loaded.labels, &loaded.normalization)?;
    let out = train(&loaded.dataset, Hyperparams::default())?;
    let report = forecast_report(&out.params, &loaded.dataset, &held, &loaded.labels)?;
    let sine = report
        .classes
        .iter()
        .find(|c| c.label == SINE)
        .expect("sine class present");
    Ok((sine.rmse_motion_code, sine.rmse_last_seen))
}

pub fn forecasting(seed: u64) -> Result<Check> {
    let pairs = benchmark_seeds(seed)
        .into_iter()
        .map(forecast_rmse)
        .collect::<Result<Vec<_>>>()?;
    let wins = pairs.iter().filter(|(mc, ls)| mc <= ls).count();
    let details = pairs.iter().flat_map(|&(mc, ls)| [mc, ls]).collect();
    Ok(Check::at_least("synthetic_forecast_wins", wins as f64, 4.0, details))
}

/// Synthetic training data with about `points` observations in total.
pub fn scaling_dataset(seed: u64, points: usize) -> Result<RaggedFile> {
    let per_class = (points / 100).max(1);
    let cfg = SyntheticConfig {
        train_per_class: per_class,
        test_per_class: 0,
        ..Default::default()
    };
    Ok(sine_vs_ramp(seed, &cfg)?.0)
}

/// Best-of-`repeats` training time at about `2000` and `4000` points, with
/// a fixed iteration budget (a vanishing `epsilon` disables early stopping).
pub fn scaling(seed: u64, repeats: usize) -> Result<(Check, Vec<Timing>)> {
    let hyper = Hyperparams {
        epsilon: f64::MIN_POSITIVE,
        ..Default::default()
    };
    let mut best = Vec::new();
    let mut sizes = Vec::new();
    for points in [2000, 4000] {
        let data = load_records(&scaling_dataset(seed, points)?)?.dataset;
        sizes.push(data.num_points() as f64);
        let mut fastest = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            train(&data, hyper)?;
            fastest = fastest.min(start.elapsed().as_secs_f64());
        }
        best.push(fastest);
    }
    let ratio = best[1] / best[0];
    let timings = vec![
        Timing::new("train_n_small", best[0], None),
        Timing::new("train_n_large", best[1], None),
    ];
    Ok((
        Check::at_most("training_time_ratio", ratio, 2.6, vec![sizes[0], sizes[1], best[0], best[1]]),
        timings,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub all_passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTimings {
    pub all_passed: bool,
    pub scaling: Check,
    pub timings: Vec<Timing>,
}

type CheckFn = fn(u64) -> Result<Check>;

/// Runtime limits per check, in seconds.
pub const CHECKS: [(&str, CheckFn, f64); 7] = [
    ("bound_collapse", collapse, 1.0),
    ("woodbury_vs_dense", woodbury, 2.0),
    ("posterior_vs_dense", posterior, 2.0),
    ("gradient_vs_finite_differences", gradient, 30.0),
    ("monotone_refinement", refinement, f64::INFINITY),
    ("synthetic_classification_accuracy", classification, 60.0),
    ("synthetic_forecast_wins", forecasting, 60.0),
];

/// Runs every check. The report holds seed-determined results only; the
/// timing side holds wall-clock limits and the scaling ratio.
pub fn run(seed: u64) -> Result<(BenchReport, BenchTimings)> {
    let mut checks = Vec::new();
    let mut timings = Vec::new();
    for (name, f, limit) in CHECKS {
        let start = Instant::now();
        let check = f(seed)?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("{name}: passed={} value={:e} ({secs:.3}s)", check.passed, check.value);
        timings.push(Timing::new(name, secs, limit.is_finite().then_some(limit)));
        checks.push(check);
    }
    let (scaling, extra) = scaling(seed, 5)?;
    timings.extend(extra);
    let report = BenchReport {
        seed,
        all_passed: checks.iter().all(|c| c.passed),
        checks,
    };
    let timing = BenchTimings {
        all_passed: scaling.passed && timings.iter().all(|t| t.passed),
        scaling,
        timings,
    };
    Ok((report, timing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_checks_pass() {
        for f in [collapse, woodbury, posterior, refinement] {
            let c = f(0).unwrap();
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn checks_are_deterministic() {
        assert_eq!(woodbury(3).unwrap(), woodbury(3).unwrap());
        assert_ne!(woodbury(3).unwrap().details, woodbury(4).unwrap().details);
    }

    #[test]
    fn scaling_dataset_sizes() {
        let small = scaling_dataset(0, 2000).unwrap();
        let n = small.num_points() as f64;
        assert!((1600.0..2400.0).contains(&n), "{n}");
    }
}
