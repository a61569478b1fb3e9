//! Losses, optimizers and the training loop.
//!
//! Full-batch objectives are evaluated over fixed-size chunks in parallel and
//! the chunk sums are combined in chunk order, so results do not depend on
//! the thread count.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{QkanError, Result};
use crate::qkan::QkanNetwork;
use crate::rng::{stream, Purpose};

const CHUNK: usize = 32;

fn check_shapes(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(QkanError::DimensionMismatch {
            expected: target.len(),
            actual: pred.len(),
            context: "prediction length",
        });
    }
    if pred.is_empty() {
        return Err(QkanError::InvalidArgument("loss of empty arrays".into()));
    }
    Ok(())
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_shapes(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    mse_loss(pred, target).map(f64::sqrt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mse,
    /// Softmax over the outputs against one-hot targets.
    SoftmaxCrossEntropy,
}

/// Adds the loss of one sample, scaled by `scale`, and returns the gradient
/// of that scaled loss with respect to the network output.
fn sample_loss(objective: Objective, out: &[f64], target: &[f64], scale: f64) -> (f64, Vec<f64>) {
    match objective {
        Objective::Mse => {
            let loss = out.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
            let up = out.iter().zip(target).map(|(p, t)| 2.0 * (p - t) * scale).collect();
            (loss * scale, up)
        }
        Objective::SoftmaxCrossEntropy => {
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let log_z = z.ln() + max;
            let loss = target.iter().zip(out).map(|(t, o)| -t * (o - log_z)).sum::<f64>();
            let up = exps
                .iter()
                .zip(target)
                .map(|(e, t)| (e / z - t) * scale)
                .collect();
            (loss * scale, up)
        }
    }
}

fn per_sample_scale(objective: Objective, rows: usize, outputs: usize) -> f64 {
    match objective {
        Objective::Mse => 1.0 / (rows * outputs) as f64,
        Objective::SoftmaxCrossEntropy => 1.0 / rows as f64,
    }
}

/// Mean objective over `rows` of the dataset and its parameter gradient.
pub fn loss_and_grad(
    net: &QkanNetwork,
    data: &Dataset,
    rows: &[usize],
    objective: Objective,
) -> Result<(f64, Vec<f64>)> {
    if rows.is_empty() {
        return Err(QkanError::InvalidArgument("objective over zero samples".into()));
    }
    let n_params = net.param_count();
    let scale = per_sample_scale(objective, rows.len(), net.output_dim());
    let partials: Vec<Result<(f64, Vec<f64>)>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; n_params];
            let mut loss = 0.0;
            for &i in chunk {
                let out = net.forward(&data.inputs[i])?;
                let (l, up) = sample_loss(objective, &out, &data.targets[i], scale);
                loss += l;
                net.backward_accumulate(&data.inputs[i], &up, &mut acc)?;
            }
            Ok((loss, acc))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; n_params];
    for part in partials {
        let (l, g) = part?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Mean objective over `rows` without gradients.
pub fn loss_only(net: &QkanNetwork, data: &Dataset, rows: &[usize], objective: Objective) -> Result<f64> {
    if rows.is_empty() {
        return Err(QkanError::InvalidArgument("objective over zero samples".into()));
    }
    let scale = per_sample_scale(objective, rows.len(), net.output_dim());
    let partials: Vec<Result<f64>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            for &i in chunk {
                let out = net.forward(&data.inputs[i])?;
                loss += sample_loss(objective, &out, &data.targets[i], scale).0;
            }
            Ok(loss)
        })
        .collect();
    partials.into_iter().sum()
}

/// Network outputs for every input row.
pub fn predict(net: &QkanNetwork, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    inputs.par_iter().map(|x| net.forward(x)).collect()
}

/// RMSE of the network over a whole dataset.
pub fn dataset_rmse(net: &QkanNetwork, data: &Dataset) -> Result<f64> {
    let pred = predict(net, &data.inputs)?;
    let flat_p: Vec<f64> = pred.into_iter().flatten().collect();
    let flat_t: Vec<f64> = data.targets.iter().flatten().copied().collect();
    rmse(&flat_p, &flat_t)
}

/// Fraction of rows whose largest output matches the largest target entry.
pub fn accuracy(net: &QkanNetwork, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(QkanError::InvalidArgument("accuracy of an empty dataset".into()));
    }
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0
    };
    let pred = predict(net, &data.inputs)?;
    let hits = pred
        .iter()
        .zip(&data.targets)
        .filter(|(p, t)| argmax(p) == argmax(t))
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// Bias-corrected update in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        for (len, what) in [(params.len(), "parameter vector"), (grads.len(), "gradient vector")] {
            if len != self.m.len() {
                return Err(QkanError::DimensionMismatch {
                    expected: self.m.len(),
                    actual: len,
                    context: what,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut Adam, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.update(params, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_trials: usize,
    /// Curvature pairs with `s.y` at or below this are dropped.
    pub curvature_eps: f64,
    /// Line searches per call before giving up on the current point.
    pub max_attempts: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            max_trials: 25,
            curvature_eps: 1e-12,
            max_attempts: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lbfgs {
    pub config: LbfgsConfig,
    pub step: u64,
    pub s_hist: VecDeque<Vec<f64>>,
    pub y_hist: VecDeque<Vec<f64>>,
    /// Initial trial length for the next line search.
    pub initial_step: f64,
    pub line_search_failures: u64,
    pub rejected_pairs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LbfgsOutcome {
    /// A step was taken; holds the new loss.
    Accepted(f64),
    /// The gradient vanished.
    Converged,
    /// No line search found a decrease.
    Stalled,
}

struct Point {
    a: f64,
    phi: f64,
    dphi: f64,
    grad: Vec<f64>,
}

impl Lbfgs {
    pub fn new(config: LbfgsConfig) -> Self {
        Lbfgs {
            config,
            step: 0,
            s_hist: VecDeque::new(),
            y_hist: VecDeque::new(),
            initial_step: 1.0,
            line_search_failures: 0,
            rejected_pairs: 0,
        }
    }

    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let k = self.s_hist.len();
        let mut alpha = vec![0.0; k];
        let mut rho = vec![0.0; k];
        for i in (0..k).rev() {
            rho[i] = 1.0 / dot(&self.y_hist[i], &self.s_hist[i]);
            alpha[i] = rho[i] * dot(&self.s_hist[i], &q);
            axpy(-alpha[i], &self.y_hist[i], &mut q);
        }
        if k > 0 {
            let (s, y) = (&self.s_hist[k - 1], &self.y_hist[k - 1]);
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = rho[i] * dot(&self.y_hist[i], &q);
            axpy(alpha[i] - beta, &self.s_hist[i], &mut q);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One accepted quasi-Newton step. `f` returns the loss and gradient at a
    /// parameter vector; `loss` and `grad` describe the current point and are
    /// updated on acceptance.
    pub fn step<F>(&mut self, params: &mut [f64], loss: &mut f64, grad: &mut Vec<f64>, f: &mut F) -> Result<LbfgsOutcome>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        if grad.iter().all(|g| *g == 0.0) {
            return Ok(LbfgsOutcome::Converged);
        }
        for _ in 0..self.config.max_attempts {
            let mut d = self.direction(grad);
            let mut dphi0 = dot(grad, &d);
            if !(dphi0 < 0.0) {
                self.s_hist.clear();
                self.y_hist.clear();
                d = grad.iter().map(|g| -g).collect();
                dphi0 = dot(grad, &d);
            }
            let a0 = if self.s_hist.is_empty() {
                self.initial_step.min(1.0 / norm(grad))
            } else {
                self.initial_step
            };
            let (found, failed) = self.line_search(params, *loss, dphi0, &d, a0, f)?;
            if failed {
                self.line_search_failures += 1;
                self.initial_step *= 0.5;
            } else {
                self.initial_step = 1.0;
            }
            let Some(pt) = found else {
                self.s_hist.clear();
                self.y_hist.clear();
                continue;
            };
            let s: Vec<f64> = d.iter().map(|v| v * pt.a).collect();
            let y: Vec<f64> = pt.grad.iter().zip(grad.iter()).map(|(a, b)| a - b).collect();
            for (p, ds) in params.iter_mut().zip(&s) {
                *p += ds;
            }
            if dot(&s, &y) > self.config.curvature_eps {
                if self.s_hist.len() == self.config.history {
                    self.s_hist.pop_front();
                    self.y_hist.pop_front();
                }
                self.s_hist.push_back(s);
                self.y_hist.push_back(y);
            } else {
                self.rejected_pairs += 1;
                self.s_hist.clear();
                self.y_hist.clear();
            }
            *loss = pt.phi;
            *grad = pt.grad;
            self.step += 1;
            return Ok(LbfgsOutcome::Accepted(*loss));
        }
        Ok(LbfgsOutcome::Stalled)
    }

    /// Strong-Wolfe search by bracketing and zoom. Returns the accepted point
    /// (the best sufficient-decrease point when the trial budget runs out) and
    /// whether the search failed.
    fn line_search<F>(
        &self,
        x: &[f64],
        phi0: f64,
        dphi0: f64,
        d: &[f64],
        a_init: f64,
        f: &mut F,
    ) -> Result<(Option<Point>, bool)>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (c1, c2) = (self.config.c1, self.config.c2);
        let mut trials = 0;
        let mut eval = |a: f64, trials: &mut usize| -> Result<Point> {
            *trials += 1;
            let xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + a * di).collect();
            let (phi, grad) = f(&xa)?;
            let dphi = dot(&grad, d);
            Ok(Point { a, phi, dphi, grad })
        };
        let armijo = |p: &Point| p.phi.is_finite() && p.phi <= phi0 + c1 * p.a * dphi0;
        let curvature = |p: &Point| p.dphi.abs() <= -c2 * dphi0;

        let mut prev = Point { a: 0.0, phi: phi0, dphi: dphi0, grad: Vec::new() };
        let mut a = a_init;
        let (mut lo, mut hi);
        loop {
            if trials >= self.config.max_trials {
                return Ok((None, true));
            }
            let cur = eval(a, &mut trials)?;
            if !armijo(&cur) || (prev.a > 0.0 && cur.phi >= prev.phi) {
                lo = prev;
                hi = cur;
                break;
            }
            if curvature(&cur) {
                return Ok((Some(cur), false));
            }
            if cur.dphi >= 0.0 {
                lo = cur;
                hi = prev;
                break;
            }
            a = cur.a * 2.0;
            prev = cur;
        }
        loop {
            if trials >= self.config.max_trials {
                let best = (lo.a > 0.0).then_some(lo);
                return Ok((best, true));
            }
            let a = interpolate(&lo, &hi);
            let cur = eval(a, &mut trials)?;
            if !armijo(&cur) || cur.phi >= lo.phi {
                hi = cur;
            } else {
                if curvature(&cur) {
                    return Ok((Some(cur), false));
                }
                if cur.dphi * (hi.a - lo.a) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
    }
}

/// Cubic interpolation between the bracket ends, safeguarded into the middle
/// 80% of the interval and falling back to bisection.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a0, a1) = (lo.a, hi.a);
    let width = a1 - a0;
    let mid = 0.5 * (a0 + a1);
    if !hi.phi.is_finite() || !hi.dphi.is_finite() {
        return mid;
    }
    let d1 = lo.dphi + hi.dphi - 3.0 * (lo.phi - hi.phi) / (a0 - a1);
    let disc = d1 * d1 - lo.dphi * hi.dphi;
    if disc < 0.0 {
        return mid;
    }
    let d2 = width.signum() * disc.sqrt();
    let denom = hi.dphi - lo.dphi + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let a = a1 - width * (hi.dphi + d2 - d1) / denom;
    let (min, max) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
    let margin = 0.1 * width.abs();
    if a.is_finite() && a > min + margin && a < max - margin {
        a
    } else {
        mid
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OptimizerState {
    Adam(Adam),
    Lbfgs(Lbfgs),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        /// Rows per update; `None` means full batch.
        #[serde(default)]
        batch_size: Option<usize>,
    },
    Lbfgs(#[serde(default)] LbfgsConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Lbfgs(LbfgsConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub objective: Objective,
    /// Seeds the shuffle stream for minibatch order.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.optimizer {
            OptimizerConfig::Adam { lr, batch_size } => {
                if !(lr.is_finite() && *lr > 0.0) {
                    return Err(QkanError::config("optimizer.lr", format!("must be positive, got {lr}")));
                }
                if *batch_size == Some(0) {
                    return Err(QkanError::config("optimizer.batch_size", "must be >= 1"));
                }
            }
            OptimizerConfig::Lbfgs(c) => {
                if c.history == 0 {
                    return Err(QkanError::config("optimizer.history", "must be >= 1"));
                }
                if !(0.0 < c.c1 && c.c1 < c.c2 && c.c2 < 1.0) {
                    return Err(QkanError::config("optimizer.c1", "need 0 < c1 < c2 < 1"));
                }
                if c.max_trials == 0 || c.max_attempts == 0 {
                    return Err(QkanError::config("optimizer.max_trials", "must be >= 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// RMSE for regression, mean cross-entropy for classification.
    pub train_metric: f64,
    /// RMSE for regression, accuracy for classification.
    pub test_metric: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Network at the epoch with the best test metric.
    pub best: QkanNetwork,
    pub best_epoch: usize,
    pub best_test_metric: f64,
    pub trace: Vec<EpochRecord>,
    pub final_state: OptimizerState,
    /// Set when the optimizer stopped before the configured epoch count.
    pub stopped_early: bool,
}

fn metrics(net: &QkanNetwork, train: &Dataset, test: &Dataset, objective: Objective, all: &[usize]) -> Result<(f64, f64)> {
    match objective {
        Objective::Mse => Ok((dataset_rmse(net, train)?, dataset_rmse(net, test)?)),
        Objective::SoftmaxCrossEntropy => Ok((loss_only(net, train, all, objective)?, accuracy(net, test)?)),
    }
}

fn better(objective: Objective, candidate: f64, best: f64) -> bool {
    match objective {
        Objective::Mse => candidate < best,
        Objective::SoftmaxCrossEntropy => candidate > best,
    }
}

fn non_finite(epoch: usize, params: &[f64]) -> QkanError {
    QkanError::Numerical(format!(
        "non-finite loss at epoch {epoch}; parameter norm {:.6e}",
        norm(params)
    ))
}

/// Trains a copy of `net` and returns the best-by-test checkpoint with the
/// per-epoch trace. The datasets are only read.
pub fn train(net: &QkanNetwork, train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    net.validate()?;
    for (d, name) in [(train, "training"), (test, "test")] {
        d.validate()?;
        if d.is_empty() {
            return Err(QkanError::InvalidArgument(format!("{name} set is empty")));
        }
        if d.n_features() != net.input_dim() {
            return Err(QkanError::DimensionMismatch {
                expected: net.input_dim(),
                actual: d.n_features(),
                context: "dataset feature count",
            });
        }
        if d.n_targets() != net.output_dim() {
            return Err(QkanError::DimensionMismatch {
                expected: net.output_dim(),
                actual: d.n_targets(),
                context: "dataset target count",
            });
        }
    }

    let objective = config.objective;
    let all: Vec<usize> = (0..train.len()).collect();
    let mut work = net.clone();
    let mut params = work.params_flat();
    let start = Instant::now();

    let (_, initial_test) = metrics(&work, train, test, objective, &all)?;
    let mut best = work.clone();
    let mut best_epoch = 0;
    let mut best_metric = initial_test;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut stopped_early = false;

    let eval_at = |p: &[f64], epoch: usize| -> Result<(f64, Vec<f64>)> {
        let mut probe = net.clone();
        probe.set_params_flat(p)?;
        let (l, g) = loss_and_grad(&probe, train, &all, objective)?;
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(non_finite(epoch, p));
        }
        Ok((l, g))
    };

    let final_state = match &config.optimizer {
        OptimizerConfig::Lbfgs(lc) => {
            let mut opt = Lbfgs::new(lc.clone());
            if config.epochs > 0 {
                let (mut loss, mut grad) = eval_at(&params, 1)?;
                for epoch in 1..=config.epochs {
                    let mut f = |p: &[f64]| eval_at(p, epoch);
                    match opt.step(&mut params, &mut loss, &mut grad, &mut f) {
                        Ok(LbfgsOutcome::Accepted(_)) => {}
                        Ok(LbfgsOutcome::Converged | LbfgsOutcome::Stalled) => {
                            stopped_early = true;
                            break;
                        }
                        // A trial point blew up; the accepted iterate is still finite.
                        Err(QkanError::Numerical(_)) if loss.is_finite() => {
                            opt.line_search_failures += 1;
                            stopped_early = true;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                    work.set_params_flat(&params)?;
                    let (tr, te) = metrics(&work, train, test, objective, &all)?;
                    if !tr.is_finite() {
                        return Err(non_finite(epoch, &params));
                    }
                    trace.push(EpochRecord {
                        epoch,
                        train_metric: tr,
                        test_metric: te,
                        elapsed_ms: start.elapsed().as_millis() as u64,
                    });
                    if better(objective, te, best_metric) {
                        best = work.clone();
                        best_epoch = epoch;
                        best_metric = te;
                    }
                }
            }
            OptimizerState::Lbfgs(opt)
        }
        OptimizerConfig::Adam { lr, batch_size } => {
            let mut opt = Adam::new(params.len(), *lr);
            let mut order = all.clone();
            let bs = batch_size.unwrap_or(train.len()).min(train.len());
            let mut shuffle = stream(config.seed, Purpose::Shuffle);
            for epoch in 1..=config.epochs {
                if bs < train.len() {
                    order.shuffle(&mut shuffle);
                }
                for rows in order.chunks(bs) {
                    let (l, g) = loss_and_grad(&work, train, rows, objective)?;
                    if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                        return Err(non_finite(epoch, &params));
                    }
                    opt.update(&mut params, &g)?;
                    work.set_params_flat(&params)?;
                }
                let (tr, te) = metrics(&work, train, test, objective, &all)?;
                if !tr.is_finite() {
                    return Err(non_finite(epoch, &params));
                }
                trace.push(EpochRecord {
                    epoch,
                    train_metric: tr,
                    test_metric: te,
                    elapsed_ms: start.elapsed().as_millis() as u64,
                });
                if better(objective, te, best_metric) {
                    best = work.clone();
                    best_epoch = epoch;
                    best_metric = te;
                }
            }
            OptimizerState::Adam(opt)
        }
    };

    Ok(TrainOutcome {
        best,
        best_epoch,
        best_test_metric: best_metric,
        trace,
        final_state,
        stopped_early,
    })
}

/// Runs `run` for every seed and returns the index and outcome with the best
/// test metric. Ties go to the earlier seed.
pub fn best_of_seeds<F>(seeds: &[u64], objective: Objective, run: F) -> Result<(usize, Vec<TrainOutcome>)>
where
    F: Fn(u64) -> Result<TrainOutcome> + Sync,
{
    if seeds.is_empty() {
        return Err(QkanError::config("seeds", "at least one seed is required"));
    }
    let outcomes: Vec<TrainOutcome> = seeds.par_iter().map(|&s| run(s)).collect::<Result<_>>()?;
    let mut best = 0;
    for (i, o) in outcomes.iter().enumerate().skip(1) {
        if better(objective, o.best_test_metric, outcomes[best].best_test_metric) {
            best = i;
        }
    }
    Ok((best, outcomes))
}

/// Metrics trace as CSV with header `epoch,train_rmse,test_rmse,elapsed_ms`.
pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_rmse,test_rmse,elapsed_ms\n");
    for r in trace {
        out.push_str(&format!("{},{:?},{:?},{}\n", r.epoch, r.train_metric, r.test_metric, r.elapsed_ms));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::daruan::DaruanInit;
    use crate::data::{feynman_spec, gen_regression, DatasetMeta};
    use crate::qkan::QkanNetwork;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn loss_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(rmse(&[3.5, -1.5, 0.5], &[1.0, -4.0, -2.0]).unwrap(), 2.5, epsilon = 1e-15);
        assert_eq!(mse_loss(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert_relative_eq!(rmse(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(mse_loss(&[1.0], &[1.0, 2.0]), Err(QkanError::DimensionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn constant_offset_gives_abs_rmse(c in -10.0..10.0f64, v in prop::collection::vec(-5.0..5.0f64, 1..30)) {
            let p: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((rmse(&p, &v).unwrap() - c.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_zero_gradient() {
        let mut opt = Adam::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 3.0];
        opt.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step() {
        let mut opt = Adam::new(1, 1e-3);
        let mut p = vec![0.0];
        adam_step(&mut opt, &mut p, &[1.0]).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction.
        let want = -1e-3 / (1.0 + 1e-8);
        assert_relative_eq!(p[0], want, epsilon = 1e-18);
        assert!((p[0] + 9.999e-4).abs() < 2e-7);
    }

    proptest! {
        #[test]
        fn adam_first_step_opposes_gradient(g in prop::collection::vec(-100.0..100.0f64, 1..10)) {
            prop_assume!(g.iter().all(|v| v.abs() > 1e-6));
            let mut opt = Adam::new(g.len(), 1e-3);
            let mut p = vec![0.0; g.len()];
            opt.update(&mut p, &g).unwrap();
            for (pi, gi) in p.iter().zip(&g) {
                prop_assert_eq!(pi.signum(), -gi.signum());
            }
        }
    }

    fn bowl(target: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |p: &[f64]| {
            let d: Vec<f64> = p.iter().zip(&target).map(|(a, b)| a - b).collect();
            Ok((dot(&d, &d), d.iter().map(|v| 2.0 * v).collect()))
        }
    }

    #[test]
    fn lbfgs_solves_quadratic_bowl() {
        let target = vec![1.5, -2.0, 0.25, 7.0, -3.0];
        let mut f = bowl(target.clone());
        let mut p = vec![0.0; 5];
        let (mut loss, mut grad) = f(&p).unwrap();
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        for _ in 0..50 {
            if opt.step(&mut p, &mut loss, &mut grad, &mut f).unwrap() != LbfgsOutcome::Accepted(loss) {
                break;
            }
        }
        let dist = p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-8, "{dist}");
    }

    #[test]
    fn lbfgs_on_ill_conditioned_quadratic() {
        let scales = [1.0, 10.0, 100.0, 1000.0];
        let mut f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            let l = p.iter().zip(&scales).map(|(x, s)| s * (x - 1.0) * (x - 1.0)).sum();
            Ok((l, p.iter().zip(&scales).map(|(x, s)| 2.0 * s * (x - 1.0)).collect()))
        };
        let mut p = vec![0.0; 4];
        let (mut loss, mut grad) = f(&p).unwrap();
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let mut prev = loss;
        for _ in 0..50 {
            match opt.step(&mut p, &mut loss, &mut grad, &mut f).unwrap() {
                LbfgsOutcome::Accepted(l) => {
                    assert!(l <= prev);
                    prev = l;
                }
                _ => break,
            }
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-8), "{p:?}");
    }

    #[test]
    fn both_optimizers_reduce_quadratic_within_ten_steps() {
        let target = vec![0.3, -0.7, 1.1];
        let mut f = bowl(target);
        let p0 = vec![0.0; 3];
        let l0 = f(&p0).unwrap().0;

        let mut p = p0.clone();
        let mut adam = Adam::new(3, 1e-2);
        let mut last = l0;
        for _ in 0..10 {
            let (_, g) = f(&p).unwrap();
            adam.update(&mut p, &g).unwrap();
            let l = f(&p).unwrap().0;
            assert!(l < last);
            last = l;
        }

        let mut p = p0;
        let (mut loss, mut grad) = f(&p).unwrap();
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let LbfgsOutcome::Accepted(l) = opt.step(&mut p, &mut loss, &mut grad, &mut f).unwrap() else {
            panic!("first step rejected");
        };
        assert!(l < l0);
    }

    #[test]
    fn stationary_point_converges() {
        let mut f = bowl(vec![0.0, 0.0]);
        let mut p = vec![0.0, 0.0];
        let (mut loss, mut grad) = f(&p).unwrap();
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        assert_eq!(opt.step(&mut p, &mut loss, &mut grad, &mut f).unwrap(), LbfgsOutcome::Converged);
    }

    fn small_problem(seed: u64) -> (QkanNetwork, Dataset, Dataset) {
        let spec = feynman_spec("II.2.42").unwrap();
        let (train, test) = gen_regression(spec, 64, 32, 0.1, seed).unwrap();
        let net = QkanNetwork::new(&[2, 2, 1], 2, &DaruanInit::default(), &mut stream(seed, Purpose::Init)).unwrap();
        (net, train, test)
    }

    fn lbfgs_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            epochs,
            objective: Objective::Mse,
            seed: 0,
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let (net, train, _) = small_problem(4);
        let rows: Vec<usize> = (0..train.len()).collect();
        let (_, g) = loss_and_grad(&net, &train, &rows, Objective::Mse).unwrap();
        let p = net.params_flat();
        let h = 1e-6;
        for k in (0..p.len()).step_by(5) {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut pp = p.clone();
            pp[k] += h;
            plus.set_params_flat(&pp).unwrap();
            pp[k] -= 2.0 * h;
            minus.set_params_flat(&pp).unwrap();
            let fd = (loss_only(&plus, &train, &rows, Objective::Mse).unwrap()
                - loss_only(&minus, &train, &rows, Objective::Mse).unwrap())
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = stream(8, Purpose::Init);
        let net = crate::qkan::make_hqkan(4, 2, 2, &[], &DaruanInit::default(), &mut rng).unwrap();
        let data = Dataset::new(
            vec![vec![0.1, -0.3, 0.5, 0.9], vec![-0.7, 0.2, 0.0, 0.4]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            DatasetMeta::default(),
        )
        .unwrap();
        let rows = [0, 1];
        let (l, g) = loss_and_grad(&net, &data, &rows, Objective::SoftmaxCrossEntropy).unwrap();
        assert!(l > 0.0);
        let p = net.params_flat();
        let h = 1e-6;
        for k in 0..p.len() {
            let mut probe = net.clone();
            let mut pp = p.clone();
            pp[k] += h;
            probe.set_params_flat(&pp).unwrap();
            let up = loss_only(&probe, &data, &rows, Objective::SoftmaxCrossEntropy).unwrap();
            pp[k] -= 2.0 * h;
            probe.set_params_flat(&pp).unwrap();
            let down = loss_only(&probe, &data, &rows, Objective::SoftmaxCrossEntropy).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}");
        }
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let (net, train, test) = small_problem(1);
        let out = super::train(&net, &train, &test, &lbfgs_config(0)).unwrap();
        assert_eq!(out.best, net);
        assert!(out.trace.is_empty());
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn training_reduces_error_and_is_deterministic() {
        let (net, train, test) = small_problem(2);
        let snapshot = (train.clone(), test.clone());
        let a = super::train(&net, &train, &test, &lbfgs_config(15)).unwrap();
        let b = super::train(&net, &train, &test, &lbfgs_config(15)).unwrap();
        assert_eq!((&train, &test), (&snapshot.0, &snapshot.1));
        assert_eq!(a.best, b.best);
        let strip = |t: &[EpochRecord]| t.iter().map(|r| (r.epoch, r.train_metric, r.test_metric)).collect::<Vec<_>>();
        assert_eq!(strip(&a.trace), strip(&b.trace));
        let initial = dataset_rmse(&net, &test).unwrap();
        assert!(a.best_test_metric < initial);
        for w in a.trace.windows(2) {
            assert!(w[1].train_metric <= w[0].train_metric + 1e-15);
        }
    }

    #[test]
    fn adam_minibatch_training_runs() {
        let (net, train, test) = small_problem(3);
        let config = TrainConfig {
            optimizer: OptimizerConfig::Adam { lr: 1e-2, batch_size: Some(16) },
            epochs: 5,
            objective: Objective::Mse,
            seed: 3,
        };
        let a = super::train(&net, &train, &test, &config).unwrap();
        let b = super::train(&net, &train, &test, &config).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.trace.len(), 5);
        match a.final_state {
            OptimizerState::Adam(s) => assert_eq!(s.step, 20),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_targets_are_rejected_up_front() {
        let (net, mut train, test) = small_problem(5);
        train.targets[0][0] = f64::NAN;
        assert!(super::train(&net, &train, &test, &lbfgs_config(1)).is_err());
    }

    #[test]
    fn divergence_reports_epoch_and_norm() {
        let (net, train, test) = small_problem(6);
        let config = TrainConfig {
            optimizer: OptimizerConfig::Adam { lr: 1e300, batch_size: None },
            epochs: 3,
            objective: Objective::Mse,
            seed: 0,
        };
        match super::train(&net, &train, &test, &config) {
            Err(QkanError::Numerical(msg)) => {
                assert!(msg.contains("epoch") && msg.contains("parameter norm"), "{msg}")
            }
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("huge learning rate should diverge"),
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = lbfgs_config(1);
        c.optimizer = OptimizerConfig::Adam { lr: -1.0, batch_size: None };
        assert!(c.validate().unwrap_err().to_string().contains("optimizer.lr"));
    }

    #[test]
    fn best_of_seeds_picks_lowest() {
        let (net, train, test) = small_problem(7);
        let (best, all) = best_of_seeds(&[1, 2, 3], Objective::Mse, |seed| {
            let mut n = net.clone();
            let p: Vec<f64> = n.params_flat().iter().map(|v| v * (1.0 + 0.1 * seed as f64)).collect();
            n.set_params_flat(&p).unwrap();
            super::train(&n, &train, &test, &lbfgs_config(2))
        })
        .unwrap();
        let min = all.iter().map(|o| o.best_test_metric).fold(f64::INFINITY, f64::min);
        assert_eq!(all[best].best_test_metric, min);
    }

    #[test]
    fn trace_csv_format() {
        let t = vec![EpochRecord { epoch: 1, train_metric: 0.5, test_metric: 0.25, elapsed_ms: 7 }];
        assert_eq!(trace_csv(&t), "epoch,train_rmse,test_rmse,elapsed_ms\n1,0.5,0.25,7\n");
    }
}
