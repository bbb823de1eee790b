//! Dense reference evaluations.
//!
//! Everything here builds full matrices and uses explicit inverses or a
//! dense Cholesky of the joint covariance. It shares no code path with the
//! low-rank evaluations in [`crate::objective`] and [`crate::inference`]
//! beyond scalar kernel evaluation, and exists to check them.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::kernel::KernelParams;
use crate::objective::total_loss;
use crate::optimizer::ParamLayout;
use crate::types::{Collection, Hyperparams, ModelParams, TimeScale, TimeSeries};

fn gram(p: &KernelParams, a: &[f64], b: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        p.amplitudes()
            .zip(p.bandwidths())
            .map(|(al, be)| al * (-0.5 * be * (a[i] - b[j]).powi(2)).exp())
            .sum()
    })
}

fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("oracle matrix is invertible")
}

/// Dense Gaussian log density `log N(y | 0, cov)` via a full Cholesky.
pub fn dense_log_density(y: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let sym = (cov + cov.transpose()) * 0.5;
    let chol = nalgebra::Cholesky::new(sym).expect("oracle covariance is positive definite");
    let l = chol.l();
    let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let alpha = chol.solve(y);
    -0.5 * (y.len() as f64 * (2.0 * PI).ln() + logdet + y.dot(&alpha))
}

/// Exact GP log marginal likelihood `log N(y | 0, sigma^2 I + K_TT)`.
pub fn exact_log_marginal(p: &KernelParams, t: &[f64], y: &[f64], sigma: f64) -> f64 {
    let n = t.len();
    let cov = gram(p, t, t) + DMatrix::identity(n, n) * (sigma * sigma);
    dense_log_density(&DVector::from_column_slice(y), &cov)
}

/// `(Q_TT, K_TT)` with `Q_TT = K_TS (K_SS + jitter I)^{-1} K_ST`.
pub fn dense_nystrom(p: &KernelParams, t: &[f64], s: &[f64], jitter: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let kss = gram(p, s, s) + DMatrix::identity(s.len(), s.len()) * jitter;
    let kts = gram(p, t, s);
    let q = &kts * inverse(&kss) * kts.transpose();
    (q, gram(p, t, t))
}

/// The collection bound assembled from the full `B sigma^2 I + Q^{C,G}`.
pub fn dense_bound(c: &Collection, p: &KernelParams, s: &[f64], sigma: f64, jitter: f64) -> f64 {
    let b = c.len() as f64;
    let total: usize = c.num_points();
    let mut cov = DMatrix::<f64>::identity(total, total) * (b * sigma * sigma);
    let mut y = DVector::<f64>::zeros(total);
    let mut trace = 0.0;
    let mut offset = 0;
    for series in c.series() {
        let n = series.len();
        let (q, k) = dense_nystrom(p, series.timestamps(), s, jitter);
        let mut block = cov.view_mut((offset, offset), (n, n));
        block += &q;
        y.rows_mut(offset, n).copy_from(&DVector::from_column_slice(series.values()));
        trace += (k - q).trace();
        offset += n;
    }
    dense_log_density(&y, &cov) - trace / (2.0 * sigma * sigma * b)
}

/// `(mu, A)` from explicit `Lambda`, `Sigma = Lambda^{-1}` and `K_SS`.
pub fn dense_posterior(
    c: &Collection,
    p: &KernelParams,
    s: &[f64],
    sigma: f64,
    jitter: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let m = s.len();
    let b = c.len() as f64;
    let kss = gram(p, s, s) + DMatrix::identity(m, m) * jitter;
    let mut lambda = kss.clone();
    let mut rhs = DVector::<f64>::zeros(m);
    for series in c.series() {
        let kst = gram(p, s, series.timestamps());
        lambda += &kst * kst.transpose() / (sigma * sigma * b);
        rhs += &kst * DVector::from_column_slice(series.values()) / b;
    }
    let big_sigma = inverse(&lambda);
    let mu = &kss * &big_sigma * rhs / (sigma * sigma);
    let a = &kss * &big_sigma * &kss;
    (mu, a)
}

/// Predictive mean and marginal variance from explicit `K_SS^{-1}`.
pub fn dense_predict(
    p: &KernelParams,
    s: &[f64],
    mu: &DVector<f64>,
    a: &DMatrix<f64>,
    query: &[f64],
    jitter: f64,
) -> (Vec<f64>, Vec<f64>) {
    let m = s.len();
    let kss_inv = inverse(&(gram(p, s, s) + DMatrix::identity(m, m) * jitter));
    let kqs = gram(p, query, s);
    let kqq = gram(p, query, query);
    let proj = &kqs * &kss_inv;
    let mean = &proj * mu;
    let var = kqq - &proj * kqs.transpose() + &proj * a * proj.transpose();
    (mean.iter().copied().collect(), var.diagonal().iter().copied().collect())
}

/// A randomized small problem for one class.
#[derive(Debug, Clone)]
pub struct Instance {
    pub collection: Collection,
    pub kernel: KernelParams,
    pub inducing: Vec<f64>,
    pub sigma: f64,
    pub jitter: f64,
}

/// Sorted points in `[lo, hi]` with pairwise gaps of at least `gap`, uniform
/// over all such configurations.
pub fn spaced_points<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64, gap: f64) -> Vec<f64> {
    let slack = hi - lo - gap * n.saturating_sub(1) as f64;
    assert!(slack >= 0.0, "{n} points with gap {gap} do not fit in [{lo}, {hi}]");
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=slack)).collect();
    v.sort_by(f64::total_cmp);
    v.iter().enumerate().map(|(i, x)| lo + x + gap * i as f64).collect()
}

pub fn random_instance<R: Rng>(
    rng: &mut R,
    b: usize,
    lengths: &[usize],
    m: usize,
    j: usize,
) -> Instance {
    assert_eq!(lengths.len(), b);
    let series = lengths
        .iter()
        .map(|&n| {
            let t = spaced_points(rng, n, 0.0, 1.0, 0.02);
            let y = t
                .iter()
                .map(|t| (5.0 * t).sin() + rng.random_range(-0.5..0.5))
                .collect();
            TimeSeries::new(t, y).expect("valid random series")
        })
        .collect();
    let mut inducing = spaced_points(rng, m, 0.05, 0.95, 0.08);
    // shuffle so nothing relies on sorted inducing points
    for i in (1..inducing.len()).rev() {
        let k = rng.random_range(0..=i);
        inducing.swap(i, k);
    }
    Instance {
        collection: Collection::new(0, series).expect("non-empty"),
        kernel: KernelParams::new(
            (0..j).map(|_| rng.random_range(-0.7..0.7)).collect(),
            (0..j).map(|_| rng.random_range(1.6..4.4)).collect(),
        )
        .expect("finite kernel"),
        inducing,
        sigma: rng.random_range(0.2..0.6),
        jitter: 1e-8,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub coordinates: usize,
    pub worst_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor of `1e-2` on the denominator so coordinates
/// whose true derivative is ~0 are judged on an absolute `1e-6` scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Central finite differences of [`total_loss`] against `analytic`, one
/// coordinate at a time in the flat layout.
pub fn check_gradient(
    collections: &[Collection],
    params: &ModelParams,
    analytic: &crate::objective::LossGradient,
    h: f64,
) -> GradientCheck {
    let layout = ParamLayout::new(collections.len(), &params.hyper);
    let x = layout.pack(params);
    let g = layout.pack_gradient(analytic);
    let mut worst = GradientCheck {
        coordinates: x.len(),
        worst_relative_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = total_loss(collections, &layout.unpack(&plus, params)).expect("finite loss");
        let fm = total_loss(collections, &layout.unpack(&minus, params)).expect("finite loss");
        let fd = (fp - fm) / (2.0 * h);
        let err = relative_error(g[i], fd);
        if err > worst.worst_relative_error || i == 0 {
            worst.worst_relative_error = err;
            worst.worst_index = i;
            worst.analytic = g[i];
            worst.numeric = fd;
        }
    }
    worst
}

/// Random parameters whose informative timestamps are well separated for
/// every class (sorted gaps of at least `0.04`, inside `[0.03, 0.97]`).
pub fn random_model<R: Rng>(rng: &mut R, classes: usize, hyper: Hyperparams) -> ModelParams {
    let (m, d, j) = (hyper.m, hyper.d, hyper.num_components);
    loop {
        let params = ModelParams {
            eta: (0..classes)
                .map(|_| {
                    KernelParams::new(
                        (0..j).map(|_| rng.random_range(-0.5..0.5)).collect(),
                        (0..j).map(|_| rng.random_range(2.0..4.0)).collect(),
                    )
                    .expect("finite kernel")
                })
                .collect(),
            z: (0..classes)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            theta: DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.5..1.5)),
            hyper,
            time_scale: TimeScale::unit(),
        };
        let spread = (0..classes).all(|k| {
            let mut s: Vec<f64> = params.informative_timestamps(k).expect("class exists").iter().copied().collect();
            s.sort_by(f64::total_cmp);
            s[0] >= 0.03 && s[m - 1] <= 0.97 && s.windows(2).all(|w| w[1] - w[0] >= 0.04)
        });
        if spread {
            return params;
        }
    }
}
