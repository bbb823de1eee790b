//! Collection-level variational bound and the training loss built from it.
//!
//! For one class with `B` series, inducing timestamps `S` and noise scale
//! `sigma`, the bound is
//!
//! ```text
//! log N(Y | 0, B sigma^2 I + blockdiag(Q_i)) - 1/(2 sigma^2 B) * sum_i Tr(K_ii - Q_i)
//! Q_i = K_{T_i S} K_SS^{-1} K_{S T_i}
//! ```
//!
//! Each block is evaluated through its rank-`m` factor `U_i = K_{T_i S} L^{-T}`
//! (`L L^T = K_SS`) with the matrix determinant lemma and the Woodbury
//! identity, so a series of length `n` costs `O(m^2 n)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{chol_jittered, chol_spd, kernel_matrix, CholeskyFactor, KernelParams};
use crate::types::{Collection, ModelParams};

/// Per-series Nyström residuals in `[-TRACE_TOLERANCE, 0)` are clipped to 0.
pub const TRACE_TOLERANCE: f64 = 1e-8;

pub(crate) fn sigmoid(x: f64) -> f64 {
    // Largest double below 1; keeps saturated outputs strictly inside (0, 1).
    const UPPER: f64 = 1.0 - f64::EPSILON / 2.0;
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, UPPER)
}

/// `sigmoid(theta * z)` elementwise. Not sorted.
pub fn informative_timestamps(theta: &DMatrix<f64>, z: &DVector<f64>) -> DVector<f64> {
    (theta * z).map(sigmoid)
}

/// Factorization of `c I_m + V V^T` where `c` is the block noise.
fn inner_factor(v: &DMatrix<f64>, noise: f64) -> Result<CholeskyFactor> {
    let mut inner = v * v.transpose();
    for i in 0..v.nrows() {
        inner[(i, i)] += noise;
    }
    chol_spd(&inner, noise * 1e-12)
}

/// Cached per-series quantities for one series of one class.
#[derive(Debug, Clone)]
pub struct SeriesBlock {
    /// `V = L^{-1} K_{S T}` (`m x n`); the low-rank factor is `U = V^T`.
    pub v: DMatrix<f64>,
    /// Cholesky of `c I + V V^T`.
    pub inner: CholeskyFactor,
    /// `Tr(K_TT - Q_TT)` after clipping.
    pub trace: f64,
    /// Whether the trace was clipped to zero.
    pub trace_clipped: bool,
    /// `log N(y | 0, c I + Q_TT)`.
    pub log_density: f64,
}

/// Everything needed to evaluate (and differentiate) the bound of one class.
#[derive(Debug, Clone)]
pub struct BoundWorkspace {
    pub inducing: Vec<f64>,
    pub kss_chol: CholeskyFactor,
    /// Block noise `c = B sigma^2`.
    pub noise: f64,
    pub sigma: f64,
    pub blocks: Vec<SeriesBlock>,
}

impl BoundWorkspace {
    pub fn new(
        collection: &Collection,
        kparams: &KernelParams,
        inducing: &[f64],
        sigma: f64,
        jitter: f64,
    ) -> Result<Self> {
        if inducing.is_empty() {
            return Err(Error::Invalid("no inducing timestamps".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Invalid("sigma must be positive".into()));
        }
        let label = collection.label();
        let kss = kernel_matrix(kparams, inducing, inducing)?;
        let kss_chol = chol_jittered(&kss, jitter)?;
        let b = collection.len() as f64;
        let noise = b * sigma * sigma;
        let diag = kparams.variance();
        let mut blocks = Vec::with_capacity(collection.len());
        for (i, series) in collection.series().iter().enumerate() {
            let t = series.timestamps();
            let n = t.len();
            let kst = kernel_matrix(kparams, inducing, t)?;
            let v = kss_chol.solve_lower(&kst);
            let inner = inner_factor(&v, noise)?;

            let y = DVector::from_column_slice(series.values());
            let vy = &v * &y;
            let w = inner.solve_lower_vec(&vy);
            let quad = (y.norm_squared() - w.norm_squared()) / noise;
            let m = inducing.len() as f64;
            let log_det = (n as f64 - m) * noise.ln() + inner.log_det();
            let log_density = -0.5 * (n as f64 * (2.0 * PI).ln() + log_det + quad);

            let raw_trace = n as f64 * diag - v.norm_squared();
            let (trace, trace_clipped) = if raw_trace >= 0.0 {
                (raw_trace, false)
            } else if raw_trace >= -TRACE_TOLERANCE {
                (0.0, true)
            } else {
                return Err(Error::Numerical(format!(
                    "class {label}, series {i}: Nyström residual trace {raw_trace:e} is negative"
                )));
            };
            if !log_density.is_finite() {
                return Err(Error::Numerical(format!(
                    "class {label}, series {i}: non-finite log density"
                )));
            }
            blocks.push(SeriesBlock {
                v,
                inner,
                trace,
                trace_clipped,
                log_density,
            });
        }
        Ok(Self {
            inducing: inducing.to_vec(),
            kss_chol,
            noise,
            sigma,
            blocks,
        })
    }

    pub fn log_density(&self) -> f64 {
        self.blocks.iter().map(|b| b.log_density).sum()
    }

    pub fn trace_term(&self) -> f64 {
        let b = self.blocks.len() as f64;
        self.blocks.iter().map(|b| b.trace).sum::<f64>() / (2.0 * self.sigma * self.sigma * b)
    }

    pub fn bound(&self) -> f64 {
        self.log_density() - self.trace_term()
    }
}

/// Approximate maximal bound of one collection at inducing timestamps `s_m`.
pub fn lmax_bound(
    collection: &Collection,
    kparams: &KernelParams,
    s_m: &[f64],
    sigma: f64,
    jitter: f64,
) -> Result<f64> {
    let bound = BoundWorkspace::new(collection, kparams, s_m, sigma, jitter)?.bound();
    if !bound.is_finite() {
        return Err(Error::Numerical(format!(
            "class {}: non-finite bound",
            collection.label()
        )));
    }
    Ok(bound)
}

/// Gradient of one class's bound.
#[derive(Debug, Clone)]
pub struct BoundGradient {
    pub bound: f64,
    /// `d bound / d log_alpha_j` for `j < J`, then `d bound / d log_beta_j`.
    pub log_params: Vec<f64>,
    /// `d bound / d s` per inducing timestamp.
    pub inducing: Vec<f64>,
}

/// Bound of one collection and its gradient with respect to the kernel
/// log-parameters and the inducing timestamps.
pub fn lmax_bound_gradient(
    collection: &Collection,
    kparams: &KernelParams,
    s_m: &[f64],
    sigma: f64,
    jitter: f64,
) -> Result<BoundGradient> {
    let ws = BoundWorkspace::new(collection, kparams, s_m, sigma, jitter)?;
    let bound = ws.bound();
    if !bound.is_finite() {
        return Err(Error::Numerical(format!(
            "class {}: non-finite bound",
            collection.label()
        )));
    }
    let m = s_m.len();
    let j_count = kparams.num_components();
    let b = collection.len() as f64;
    let trace_coef = 1.0 / (2.0 * sigma * sigma * b);
    let c = ws.noise;

    let mut g_log = vec![0.0; 2 * j_count];
    let mut g_s = vec![0.0; m];
    let mut g_kss = DMatrix::<f64>::zeros(m, m);
    let mut scratch = vec![0.0; 2 * j_count];

    for (series, block) in collection.series().iter().zip(&ws.blocks) {
        let t = series.timestamps();
        let y = DVector::from_column_slice(series.values());
        let v = &block.v;
        // W = K_SS^{-1} K_ST (m x n)
        let w = ws.kss_chol.solve_upper(v);
        // a = C^{-1} y
        let vy = v * &y;
        let a = (&y - v.transpose() * block.inner.solve_vec(&vy)) / c;
        let wa = &w * &a;
        // C^{-1} W^T = (W^T - V^T (cI + V V^T)^{-1} V W^T) / c
        let wt = w.transpose();
        let vwt = v * &wt;
        let cinv_wt = (&wt - v.transpose() * block.inner.solve(&vwt)) / c;
        // G_Q W^T with G_Q = (a a^T - C^{-1}) / 2
        let gq_wt = (&a * wa.transpose() - &cinv_wt) * 0.5;
        let mut p = gq_wt * 2.0;
        // W G_Q W^T
        let mut r = (&wa * wa.transpose() - &w * &cinv_wt) * 0.5;
        if !block.trace_clipped {
            p += &wt * (2.0 * trace_coef);
            r += &w * &wt * trace_coef;
            let n = t.len() as f64;
            for (g, alpha) in g_log.iter_mut().zip(kparams.amplitudes()) {
                *g -= n * trace_coef * alpha;
            }
        }
        g_kss -= &r;

        // chain through K_{T S}
        for (bi, &s) in s_m.iter().enumerate() {
            for (ai, &ta) in t.iter().enumerate() {
                let coef = p[(ai, bi)];
                g_s[bi] += coef * kparams.d_first_arg(s, ta);
                kparams.d_log_params(ta, s, &mut scratch);
                for (g, d) in g_log.iter_mut().zip(&scratch) {
                    *g += coef * d;
                }
            }
        }
    }

    // chain through K_SS
    let g_kss = (&g_kss + g_kss.transpose()) * 0.5;
    for a in 0..m {
        for bi in 0..m {
            let coef = g_kss[(a, bi)];
            kparams.d_log_params(s_m[a], s_m[bi], &mut scratch);
            for (g, d) in g_log.iter_mut().zip(&scratch) {
                *g += coef * d;
            }
            if a != bi {
                g_s[a] += 2.0 * coef * kparams.d_first_arg(s_m[a], s_m[bi]);
            }
        }
    }

    Ok(BoundGradient {
        bound,
        log_params: g_log,
        inducing: g_s,
    })
}

fn check_consistent(collections: &[Collection], params: &ModelParams) -> Result<()> {
    if collections.len() != params.num_classes() {
        return Err(Error::Invalid(format!(
            "model has {} classes but data has {}",
            params.num_classes(),
            collections.len()
        )));
    }
    params.validate()
}

/// `U = -sum_k bound_k + lambda * sum_k |z_k|^2`.
pub fn total_loss(collections: &[Collection], params: &ModelParams) -> Result<f64> {
    check_consistent(collections, params)?;
    let h = &params.hyper;
    let bounds = collections
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let s = params.informative_timestamps(k)?;
            lmax_bound(c, &params.eta[k], s.as_slice(), h.sigma, h.jitter)
        })
        .collect::<Result<Vec<f64>>>()?;
    let penalty: f64 = params.z.iter().map(|z| z.norm_squared()).sum();
    Ok(-bounds.iter().sum::<f64>() + h.lambda * penalty)
}

/// Gradient of [`total_loss`] in the log-parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub log_amplitudes: Vec<Vec<f64>>,
    pub log_bandwidths: Vec<Vec<f64>>,
    pub z: Vec<DVector<f64>>,
    pub theta: DMatrix<f64>,
}

/// Loss and its exact gradient.
pub fn loss_and_gradient(
    collections: &[Collection],
    params: &ModelParams,
) -> Result<(f64, LossGradient)> {
    check_consistent(collections, params)?;
    let h = &params.hyper;
    let j_count = h.num_components;
    let per_class = collections
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let s = params.informative_timestamps(k)?;
            lmax_bound_gradient(c, &params.eta[k], s.as_slice(), h.sigma, h.jitter)
                .map(|g| (s, g))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut loss = 0.0;
    let mut grad = LossGradient {
        log_amplitudes: Vec::with_capacity(per_class.len()),
        log_bandwidths: Vec::with_capacity(per_class.len()),
        z: Vec::with_capacity(per_class.len()),
        theta: DMatrix::zeros(h.m, h.d),
    };
    for (k, (s, g)) in per_class.iter().enumerate() {
        loss -= g.bound;
        grad.log_amplitudes
            .push(g.log_params[..j_count].iter().map(|v| -v).collect());
        grad.log_bandwidths
            .push(g.log_params[j_count..].iter().map(|v| -v).collect());
        // d(-bound)/d(theta z) through the sigmoid
        let dx = DVector::from_iterator(
            h.m,
            s.iter()
                .zip(&g.inducing)
                .map(|(&sv, &gs)| -gs * sv * (1.0 - sv)),
        );
        let z = &params.z[k];
        grad.theta += &dx * z.transpose();
        grad.z.push(params.theta.transpose() * &dx + z * (2.0 * h.lambda));
    }
    loss += h.lambda * params.z.iter().map(|z| z.norm_squared()).sum::<f64>();

    let blocks: [(&str, bool); 3] = [
        (
            "kernel log-parameters",
            grad.log_amplitudes
                .iter()
                .chain(&grad.log_bandwidths)
                .flatten()
                .all(|v| v.is_finite()),
        ),
        ("motion codes", grad.z.iter().flatten().all(|v| v.is_finite())),
        ("theta", grad.theta.iter().all(|v| v.is_finite())),
    ];
    if let Some((name, _)) = blocks.iter().find(|(_, ok)| !ok) {
        return Err(Error::Numerical(format!("non-finite gradient in {name}")));
    }
    Ok((loss, grad))
}

pub fn loss_gradient(collections: &[Collection], params: &ModelParams) -> Result<LossGradient> {
    loss_and_gradient(collections, params).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::types::TimeSeries;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(t: &[f64], y: &[f64]) -> TimeSeries {
        TimeSeries::new(t.to_vec(), y.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_examples() {
        let theta = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 0.5, 3.0, 1.0]);
        let s = informative_timestamps(&theta, &DVector::zeros(2));
        assert!(s.iter().all(|&v| v == 0.5));

        let theta = DMatrix::from_row_slice(2, 1, &[-50.0, 50.0]);
        let s = informative_timestamps(&theta, &DVector::from_vec(vec![1.0]));
        let tiny = (-50f64).exp();
        assert!((s[0] - tiny).abs() / tiny < 1e-10 && s[0] > 0.0);
        assert!(s[1] < 1.0 && s[1] > 1.0 - 1e-15);

        let theta = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let s = informative_timestamps(&theta, &DVector::from_vec(vec![3f64.ln()]));
        assert!((s[0] - 0.75).abs() < 1e-15);
        assert!((s[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn collapse_to_exact_marginal() {
        let t = [0.05, 0.3, 0.55, 0.8];
        let y = [0.4, -0.2, 1.1, 0.3];
        let c = Collection::new(0, vec![series(&t, &y)]).unwrap();
        let p = KernelParams::from_natural(&[1.2], &[60.0]).unwrap();
        let sigma = 0.3;
        let ws = BoundWorkspace::new(&c, &p, &t, sigma, 1e-13).unwrap();
        assert!(ws.trace_term() <= 1e-8);
        let exact = oracle::exact_log_marginal(&p, &t, &y, sigma);
        assert!((ws.bound() - exact).abs() < 1e-8, "{} vs {exact}", ws.bound());
    }

    #[test]
    fn zero_data_two_points() {
        let t = [0.2, 0.7];
        let c = Collection::new(0, vec![series(&t, &[0.0, 0.0])]).unwrap();
        let p = KernelParams::from_natural(&[1.0], &[4.0]).unwrap();
        let s = [0.4, 0.9, 0.1];
        let sigma = 0.5;
        let bound = lmax_bound(&c, &p, &s, sigma, 1e-8).unwrap();
        let (q, _) = oracle::dense_nystrom(&p, &t, &s, 1e-8);
        let mut cov = q + DMatrix::identity(2, 2) * (sigma * sigma);
        cov = (&cov + cov.transpose()) * 0.5;
        let logdet = cov.determinant().ln();
        let trace = {
            let (qq, _) = oracle::dense_nystrom(&p, &t, &s, 1e-8);
            (2.0 * p.variance() - qq.trace()) / (2.0 * sigma * sigma)
        };
        let expected = -(2.0 * PI).ln() - 0.5 * logdet - trace;
        assert!((bound - expected).abs() < 1e-10);
    }

    #[test]
    fn woodbury_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inst = oracle::random_instance(&mut rng, 3, &[4, 6, 8], 3, 1);
        let fast = lmax_bound(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter).unwrap();
        let dense = oracle::dense_bound(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter);
        assert!((fast - dense).abs() < 1e-8, "{fast} vs {dense}");
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = oracle::random_instance(&mut rng, 4, &[5, 7, 3, 6], 3, 2);
        let mut rev: Vec<TimeSeries> = inst.collection.series().to_vec();
        rev.reverse();
        let rev = Collection::new(0, rev).unwrap();
        let a = lmax_bound(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter).unwrap();
        let b = lmax_bound(&rev, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn model_for(collections: &[Collection], rng: &mut ChaCha8Rng, m: usize, j: usize) -> ModelParams {
        let hyper = crate::types::Hyperparams {
            m,
            d: 2,
            num_components: j,
            lambda: 0.7,
            sigma: 0.4,
            jitter: 1e-8,
            ..Default::default()
        };
        ModelParams {
            eta: (0..collections.len())
                .map(|_| {
                    KernelParams::new(
                        (0..j).map(|_| rng.random_range(-0.5..0.5)).collect(),
                        (0..j).map(|_| rng.random_range(2.0..4.0)).collect(),
                    )
                    .unwrap()
                })
                .collect(),
            z: (0..collections.len())
                .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            theta: DMatrix::from_fn(m, 2, |_, _| rng.random_range(-1.5..1.5)),
            hyper,
            time_scale: crate::types::TimeScale::unit(),
        }
    }

    #[test]
    fn total_loss_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = oracle::random_instance(&mut rng, 2, &[5, 6], 3, 1);
        let cols = vec![inst.collection.clone()];
        let mut params = model_for(&cols, &mut rng, 3, 1);
        params.hyper.lambda = 0.0;
        let s = params.informative_timestamps(0).unwrap();
        let b = lmax_bound(&cols[0], &params.eta[0], s.as_slice(), params.hyper.sigma, params.hyper.jitter).unwrap();
        assert_eq!(total_loss(&cols, &params).unwrap(), -b);

        params.hyper.lambda = 7.0;
        params.z[0] = DVector::zeros(2);
        assert_eq!(total_loss(&cols, &params).unwrap(), -lmax_bound(&cols[0], &params.eta[0], params.informative_timestamps(0).unwrap().as_slice(), 0.4, 1e-8).unwrap());

        // two identical classes with identical parameters
        let twin = Collection::new(1, inst.collection.series().to_vec()).unwrap();
        let cols2 = vec![inst.collection.clone(), twin];
        let mut p2 = params.clone();
        p2.eta.push(p2.eta[0].clone());
        p2.z = vec![DVector::from_vec(vec![0.3, -0.2]); 2];
        let single = lmax_bound(&cols2[0], &p2.eta[0], p2.informative_timestamps(0).unwrap().as_slice(), 0.4, 1e-8).unwrap();
        let expected = -2.0 * single + 7.0 * 2.0 * 0.13;
        assert!((total_loss(&cols2, &p2).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = oracle::random_instance(&mut rng, 2, &[6, 5], 4, 2);
        let b = oracle::random_instance(&mut rng, 3, &[4, 7, 5], 4, 2);
        let cols = vec![a.collection, Collection::new(1, b.collection.series().to_vec()).unwrap()];
        let params = model_for(&cols, &mut rng, 4, 2);
        let (_, grad) = loss_and_gradient(&cols, &params).unwrap();
        let report = oracle::check_gradient(&cols, &params, &grad, 1e-5);
        assert!(report.worst_relative_error < 1e-4, "{report:?}");

        // explicit z penalty term: with lambda > 0 the z gradient includes 2 lambda z
        let mut no_pen = params.clone();
        no_pen.hyper.lambda = 0.0;
        let (_, g0) = loss_and_gradient(&cols, &no_pen).unwrap();
        for k in 0..2 {
            let diff = &grad.z[k] - &g0.z[k];
            let expected = &params.z[k] * (2.0 * params.hyper.lambda);
            assert!((diff - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn amplitude_gradient_zero_data() {
        let t = [0.1, 0.4, 0.6, 0.9];
        let zero = Collection::new(0, vec![series(&t, &[0.0; 4])]).unwrap();
        let p = KernelParams::from_natural(&[0.8], &[20.0]).unwrap();
        let s = [0.2, 0.5, 0.75];
        let g = lmax_bound_gradient(&zero, &p, &s, 0.3, 1e-8).unwrap();
        let h = 1e-5;
        let f = |la: f64| {
            let q = KernelParams::new(vec![la], p.log_bandwidths.clone()).unwrap();
            lmax_bound(&zero, &q, &s, 0.3, 1e-8).unwrap()
        };
        let fd = (f(p.log_amplitudes[0] + h) - f(p.log_amplitudes[0] - h)) / (2.0 * h);
        assert!((fd - g.log_params[0]).abs() / fd.abs().max(1e-12) < 1e-4, "{fd} vs {}", g.log_params[0]);
    }

    #[test]
    fn monotone_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inst = oracle::random_instance(&mut rng, 3, &[6, 6, 6], 3, 1);
        let mut bigger = inst.inducing.clone();
        bigger.push(0.5);
        let a = lmax_bound(&inst.collection, &inst.kernel, &inst.inducing, inst.sigma, inst.jitter).unwrap();
        let b = lmax_bound(&inst.collection, &inst.kernel, &bigger, inst.sigma, inst.jitter).unwrap();
        assert!(b >= a - 1e-8, "{b} < {a}");
    }
}
