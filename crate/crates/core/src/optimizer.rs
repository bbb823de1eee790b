//! L-BFGS with Armijo backtracking, and the training loop built on it.

use std::collections::VecDeque;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::objective::{loss_and_gradient, total_loss, LossGradient};
use crate::types::{Dataset, Hyperparams, ModelParams, TimeScale};

pub const HISTORY: usize = 10;
pub const ARMIJO: f64 = 1e-4;
pub const BACKTRACK: f64 = 0.5;
pub const MAX_HALVINGS: usize = 30;
pub const MAX_EXPANSIONS: usize = 10;
pub const GRADIENT_TOLERANCE: f64 = 1e-10;
const CURVATURE_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIters,
    SmallDecrease,
    SmallGradient,
    LineSearchFailure,
    NonFiniteGradient,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxIters => "max-iters",
            StopReason::SmallDecrease => "small-decrease",
            StopReason::SmallGradient => "small-gradient",
            StopReason::LineSearchFailure => "line-search-failure",
            StopReason::NonFiniteGradient => "non-finite-gradient",
        }
    }
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    /// Loss after every accepted iteration, starting with the initial loss.
    pub trace: Vec<f64>,
}

/// Curvature pairs and loop counters of one L-BFGS run.
#[derive(Debug, Clone)]
pub struct OptState {
    pub x: Vec<f64>,
    pub history: VecDeque<(Vec<f64>, Vec<f64>)>,
    pub capacity: usize,
    pub iteration: usize,
    pub loss: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl OptState {
    pub fn new(x: Vec<f64>, loss: f64, capacity: usize) -> Self {
        Self {
            x,
            history: VecDeque::with_capacity(capacity),
            capacity,
            iteration: 0,
            loss,
        }
    }

    /// Stores `(s, y)` when `s^T y` passes the curvature check. Returns
    /// whether the pair was kept.
    pub fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if dot(&s, &y) <= CURVATURE_MIN {
            return false;
        }
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back((s, y));
        true
    }

    /// Two-loop recursion: returns `-H g`.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for (s, y) in self.history.iter().rev() {
            let rho = 1.0 / dot(s, y);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y)) = self.history.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), a) in self.history.iter().zip(alphas.iter().rev()) {
            let rho = 1.0 / dot(s, y);
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

/// Minimizes `loss_fn` from `x0`. Non-finite losses are treated as failed
/// trial points by the line search.
pub fn minimize<F, G>(
    mut loss_fn: F,
    mut grad_fn: G,
    x0: Vec<f64>,
    max_iters: usize,
    epsilon: f64,
) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let f0 = loss_fn(&x0);
    let mut state = OptState::new(x0, f0, HISTORY);
    let mut trace = vec![f0];
    if max_iters == 0 {
        return Minimum {
            x: state.x,
            loss: f0,
            iterations: 0,
            stop_reason: StopReason::MaxIters,
            trace,
        };
    }
    let mut grad = grad_fn(&state.x);
    if grad.iter().any(|g| !g.is_finite()) {
        return Minimum {
            x: state.x,
            loss: f0,
            iterations: 0,
            stop_reason: StopReason::NonFiniteGradient,
            trace,
        };
    }

    let stop_reason = loop {
        let mut dir = state.direction(&grad);
        let mut slope = dot(&grad, &dir);
        if (slope.is_nan() || slope >= 0.0) && !state.history.is_empty() {
            // not a descent direction; restart from steepest descent
            state.history.clear();
            dir = state.direction(&grad);
            slope = dot(&grad, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = state
                .x
                .iter()
                .zip(&dir)
                .map(|(x, d)| x + step * d)
                .collect();
            let f = loss_fn(&trial);
            if f.is_finite() && f <= state.loss + ARMIJO * step * slope {
                accepted = Some((trial, f));
                break;
            }
            step *= BACKTRACK;
        }
        let Some((mut x_new, mut f_new)) = accepted else {
            break StopReason::LineSearchFailure;
        };
        if step == 1.0 {
            // unit step accepted: expand while the loss keeps improving
            for _ in 0..MAX_EXPANSIONS {
                let longer = step * 2.0;
                let trial: Vec<f64> = state
                    .x
                    .iter()
                    .zip(&dir)
                    .map(|(x, d)| x + longer * d)
                    .collect();
                let f = loss_fn(&trial);
                if !(f.is_finite() && f < f_new && f <= state.loss + ARMIJO * longer * slope) {
                    break;
                }
                step = longer;
                x_new = trial;
                f_new = f;
            }
        }

        let decrease = state.loss - f_new;
        let g_new = grad_fn(&x_new);
        state.iteration += 1;
        trace.push(f_new);
        debug!(
            "iteration {}: loss {f_new:.10e} (decrease {decrease:.3e}, step {step:.3e})",
            state.iteration
        );
        if g_new.iter().any(|g| !g.is_finite()) {
            state.x = x_new;
            state.loss = f_new;
            break StopReason::NonFiniteGradient;
        }
        let s: Vec<f64> = x_new.iter().zip(&state.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        state.push_pair(s, y);
        state.x = x_new;
        state.loss = f_new;
        grad = g_new;

        if decrease < epsilon {
            break StopReason::SmallDecrease;
        }
        if grad.iter().all(|g| g.abs() < GRADIENT_TOLERANCE) {
            break StopReason::SmallGradient;
        }
        if state.iteration >= max_iters {
            break StopReason::MaxIters;
        }
    };

    Minimum {
        x: state.x,
        loss: state.loss,
        iterations: state.iteration,
        stop_reason,
        trace,
    }
}

/// Flat layout of [`ModelParams`]: log-eta class-major (amplitudes then
/// bandwidths), then z class-major, then theta row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub classes: usize,
    pub components: usize,
    pub m: usize,
    pub d: usize,
}

impl ParamLayout {
    pub fn new(classes: usize, hyper: &Hyperparams) -> Self {
        Self {
            classes,
            components: hyper.num_components,
            m: hyper.m,
            d: hyper.d,
        }
    }

    pub fn eta_len(&self) -> usize {
        self.classes * 2 * self.components
    }

    pub fn z_offset(&self) -> usize {
        self.eta_len()
    }

    pub fn theta_offset(&self) -> usize {
        self.eta_len() + self.classes * self.d
    }

    pub fn len(&self) -> usize {
        self.theta_offset() + self.m * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, params: &ModelParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for eta in &params.eta {
            out.extend_from_slice(&eta.log_amplitudes);
            out.extend_from_slice(&eta.log_bandwidths);
        }
        for z in &params.z {
            out.extend(z.iter());
        }
        for r in 0..self.m {
            out.extend(params.theta.row(r).iter());
        }
        out
    }

    pub fn pack_gradient(&self, grad: &LossGradient) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (a, b) in grad.log_amplitudes.iter().zip(&grad.log_bandwidths) {
            out.extend_from_slice(a);
            out.extend_from_slice(b);
        }
        for z in &grad.z {
            out.extend(z.iter());
        }
        for r in 0..self.m {
            out.extend(grad.theta.row(r).iter());
        }
        out
    }

    /// Writes `flat` into a copy of `template`.
    pub fn unpack(&self, flat: &[f64], template: &ModelParams) -> ModelParams {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let j = self.components;
        let mut p = template.clone();
        for (k, eta) in p.eta.iter_mut().enumerate() {
            let base = k * 2 * j;
            eta.log_amplitudes.copy_from_slice(&flat[base..base + j]);
            eta.log_bandwidths
                .copy_from_slice(&flat[base + j..base + 2 * j]);
        }
        for (k, z) in p.z.iter_mut().enumerate() {
            let base = self.z_offset() + k * self.d;
            z.copy_from_slice(&flat[base..base + self.d]);
        }
        let t0 = self.theta_offset();
        p.theta = DMatrix::from_row_slice(self.m, self.d, &flat[t0..t0 + self.m * self.d]);
        p
    }
}

/// `m` evenly spaced values from 0.1 to 0.9; a single value is the midpoint.
fn arithmetic_column(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.5];
    }
    (0..m)
        .map(|i| 0.1 + 0.8 * i as f64 / (m - 1) as f64)
        .collect()
}

/// Constant initialization: unit kernel parameters, all-ones motion codes and
/// every column of theta the arithmetic sequence 0.1..0.9.
pub fn init_params(num_classes: usize, hyper: Hyperparams) -> ModelParams {
    let col = arithmetic_column(hyper.m);
    ModelParams {
        eta: vec![KernelParams::unit(hyper.num_components); num_classes],
        z: vec![DVector::from_element(hyper.d, 1.0); num_classes],
        theta: DMatrix::from_fn(hyper.m, hyper.d, |r, _| col[r]),
        hyper,
        time_scale: TimeScale::unit(),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub initial_loss: f64,
    pub loss: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub loss_trace: Vec<f64>,
}

/// Runs the full training procedure on `dataset`.
pub fn train(dataset: &Dataset, hyper: Hyperparams) -> Result<TrainOutcome> {
    hyper.validate()?;
    let mut init = init_params(dataset.num_classes(), hyper);
    init.time_scale = dataset.time_scale();
    let collections = dataset.collections();
    let layout = ParamLayout::new(dataset.num_classes(), &hyper);
    let initial_loss = total_loss(collections, &init)?;

    let loss_fn = |x: &[f64]| {
        let p = layout.unpack(x, &init);
        match total_loss(collections, &p) {
            Ok(v) => v,
            Err(e) => {
                debug!("trial point rejected: {e}");
                f64::INFINITY
            }
        }
    };
    let grad_fn = |x: &[f64]| {
        let p = layout.unpack(x, &init);
        match loss_and_gradient(collections, &p) {
            Ok((_, g)) => layout.pack_gradient(&g),
            Err(e) => {
                warn!("gradient evaluation failed: {e}");
                vec![f64::NAN; layout.len()]
            }
        }
    };
    let min = minimize(loss_fn, grad_fn, layout.pack(&init), hyper.max_iters, hyper.epsilon);
    let params = layout.unpack(&min.x, &init);
    params.validate()?;
    if !min.loss.is_finite() {
        return Err(Error::Numerical("training loss is not finite".into()));
    }
    Ok(TrainOutcome {
        params,
        initial_loss,
        loss: min.loss,
        iterations: min.iterations,
        stop_reason: min.stop_reason,
        loss_trace: min.trace,
    })
}
