//! Gradients, the l1 proximal step and the training loop.
//!
//! Smooth parameters (attention heads, classifier) are updated with Adam or
//! plain gradient descent. `beta` always takes a proximal gradient step,
//! `beta <- soft_threshold(beta - lr * grad, lr * gamma)`, so weights that the
//! penalty removes are stored as exact zeros.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, fmt_f64};
use crate::clustering::ClusterAssignment;
use crate::datamodel::Bag;
use crate::error::{Error, Result};
use crate::evalx::metrics::{compute_metrics, MetricReport};
use crate::model::{bag_forward, batch_loss, cross_entropy, CsmilModel, ForwardCache, LossParts, Params};
use crate::seed;

/// A bag together with its cluster assignment.
pub type BagRef<'a> = (&'a Bag, &'a ClusterAssignment);

/// Gradient of the data term, shaped like the model parameters.
pub type GradientSet = Params;

/// Bags per work unit when forward/backward passes run in parallel. Partial
/// sums are combined in unit order, so results do not depend on thread count.
const CHUNK: usize = 8;

/// `||beta||_0` reporting threshold.
pub const L0_THRESHOLD: f64 = 1e-8;

fn check_cache(bag: &Bag, model: &CsmilModel, cache: &ForwardCache) -> Result<()> {
    let stale = |msg: String| Err(Error::StaleCache(format!("bag {}: {msg}", bag.id)));
    if cache.clusters.len() != model.k || cache.prototypes.dim() != (model.k, model.dim) {
        return stale(format!(
            "cache has {} clusters, model K = {}",
            cache.clusters.len(),
            model.k
        ));
    }
    let covered: usize = cache.clusters.iter().map(|c| c.indices.len()).sum();
    if covered != bag.n_instances() {
        return stale(format!("cache covers {covered} of {} instances", bag.n_instances()));
    }
    for c in &cache.clusters {
        if c.alpha.len() != c.indices.len()
            || c.activations.dim() != (c.indices.len(), model.hidden())
            || c.indices.iter().any(|&j| j >= bag.n_instances())
        {
            return stale("cluster cache shape".into());
        }
    }
    Ok(())
}

/// Accumulates `d CE(bag) / d theta` into `grad`.
pub fn backward_bag(bag: &Bag, model: &CsmilModel, cache: &ForwardCache, grad: &mut GradientSet) -> Result<()> {
    check_cache(bag, model, cache)?;
    let p = &model.params;
    let mut dlogits = cache.probs.clone();
    dlogits[usize::from(bag.label)] -= 1.0;

    for (c, &g) in dlogits.iter().enumerate() {
        grad.classifier_w.row_mut(c).scaled_add(g, &cache.z);
        grad.classifier_b[c] += g;
    }
    let dz = p.classifier_w.t().dot(&dlogits);

    for (k, cluster) in cache.clusters.iter().enumerate() {
        if cluster.indices.is_empty() {
            continue;
        }
        grad.beta[k] += dz.dot(&cache.prototypes.row(k));
        let dproto = &dz * p.beta[k];
        let members = bag.embeddings.select(Axis(0), &cluster.indices);
        let dalpha = members.dot(&dproto);
        let mean = cluster.alpha.dot(&dalpha);
        let dscore: Array1<f64> = cluster
            .alpha
            .iter()
            .zip(dalpha.iter())
            .map(|(a, da)| a * (da - mean))
            .collect();
        let head_idx = model.head_index(k);
        let head = &p.heads[head_idx];
        let gh = &mut grad.heads[head_idx];
        gh.w += &cluster.activations.t().dot(&dscore);
        // d pre-activation, m × L
        let dpre: Array2<f64> = Array2::from_shape_fn(cluster.activations.raw_dim(), |(n, l)| {
            let t = cluster.activations[[n, l]];
            dscore[n] * head.w[l] * (1.0 - t * t)
        });
        gh.v += &dpre.t().dot(&members);
    }
    Ok(())
}

/// Analytic gradient of the data term (no l1 term) over `items`, given
/// caches from a matching forward pass.
pub fn backward(items: &[BagRef<'_>], model: &CsmilModel, caches: &[ForwardCache]) -> Result<GradientSet> {
    if items.len() != caches.len() {
        return Err(Error::StaleCache(format!(
            "{} bags but {} caches",
            items.len(),
            caches.len()
        )));
    }
    let mut grad = Params::zeros_like(&model.params);
    for ((bag, _), cache) in items.iter().zip(caches) {
        backward_bag(bag, model, cache, &mut grad)?;
    }
    Ok(grad)
}

/// Data term and its gradient over `items` in one pass.
pub fn data_loss_and_grad(items: &[BagRef<'_>], model: &CsmilModel) -> Result<(f64, GradientSet)> {
    let partials: Vec<Result<(f64, GradientSet)>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = Params::zeros_like(&model.params);
            let mut loss = 0.0;
            for (bag, assignment) in chunk {
                let cache = bag_forward(bag, assignment, model)?;
                loss += cross_entropy(&cache, bag.label);
                backward_bag(bag, model, &cache, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = Params::zeros_like(&model.params);
    for part in partials {
        let (l, g) = part?;
        total += l;
        grad.add_scaled(1.0, &g);
    }
    Ok((total, grad))
}

/// Positive-class probabilities for `items`, in order.
pub fn predict(items: &[BagRef<'_>], model: &CsmilModel) -> Result<Vec<f64>> {
    items
        .par_iter()
        .map(|(bag, a)| Ok(bag_forward(bag, a, model)?.positive_probability()))
        .collect()
}

fn parallel_loss(items: &[BagRef<'_>], model: &CsmilModel, gamma: f64) -> Result<LossParts> {
    let partials: Vec<Result<LossParts>> = items
        .par_chunks(CHUNK)
        .map(|chunk| batch_loss(chunk, model, 0.0))
        .collect();
    let mut data = 0.0;
    for p in partials {
        data += p?.data;
    }
    let penalty = gamma * model.params.beta.iter().map(|b| b.abs()).sum::<f64>();
    Ok(LossParts {
        total: data + penalty,
        data,
        penalty,
    })
}

/// `sign(v) * max(|v| - t, 0)` componentwise.
pub fn soft_threshold(v: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
    if !(t >= 0.0) {
        return Err(Error::config(format!("threshold must be non-negative, got {t}")));
    }
    Ok(v.mapv(|x| soft_threshold_scalar(x, t)))
}

#[inline]
pub fn soft_threshold_scalar(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Full,
    Minibatch(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothOptimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    ValAuc,
    ValAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub metric: StopMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_smooth: f64,
    pub lr_beta: f64,
    /// l1 weight on `beta`.
    pub gamma: f64,
    pub batch_mode: BatchMode,
    pub optimizer: SmoothOptimizer,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    /// Max global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Keep `beta` at its initial value.
    pub freeze_beta: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            lr_smooth: 1e-3,
            lr_beta: 1e-2,
            gamma: 0.01,
            batch_mode: BatchMode::Full,
            optimizer: SmoothOptimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            seed: 0,
            early_stop: None,
            grad_clip: Some(5.0),
            freeze_beta: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_smooth > 0.0 && self.lr_beta > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be a non-negative number"));
        }
        if let BatchMode::Minibatch(0) = self.batch_mode {
            return Err(Error::config("minibatch size must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub data: f64,
    pub penalty: f64,
    pub beta_l0: usize,
    pub val: Option<ValMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

impl From<&MetricReport> for ValMetrics {
    fn from(r: &MetricReport) -> Self {
        ValMetrics {
            accuracy: r.accuracy,
            f1: r.f1,
            auc: r.auc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// `epoch,total,data,penalty,beta_l0,val_acc,val_f1,val_auc`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        let rows = self.epochs.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                fmt_f64(e.total),
                fmt_f64(e.data),
                fmt_f64(e.penalty),
                e.beta_l0.to_string(),
                opt(e.val.map(|v| v.accuracy)),
                opt(e.val.map(|v| v.f1)),
                opt(e.val.and_then(|v| v.auc)),
            ]
        });
        artifact::write_csv(
            path,
            &[
                "epoch", "total", "data", "penalty", "beta_l0", "val_acc", "val_f1", "val_auc",
            ],
            rows,
        )
    }
}

struct AdamState {
    m: Params,
    v: Params,
    t: i32,
}

fn smooth_step(model: &mut CsmilModel, grad: &GradientSet, cfg: &TrainConfig, adam: &mut AdamState) {
    // beta is excluded here; it gets the proximal step.
    let beta = model.params.beta.clone();
    match cfg.optimizer {
        SmoothOptimizer::Sgd => model.params.add_scaled(-cfg.lr_smooth, grad),
        SmoothOptimizer::Adam { beta1, beta2, eps } => {
            adam.t += 1;
            let bc1 = 1.0 - beta1.powi(adam.t);
            let bc2 = 1.0 - beta2.powi(adam.t);
            let g = grad.to_flat();
            let mut m = adam.m.to_flat();
            let mut v = adam.v.to_flat();
            let mut theta = model.params.to_flat();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= cfg.lr_smooth * m_hat / (v_hat.sqrt() + eps);
            }
            adam.m.set_flat(&m);
            adam.v.set_flat(&v);
            model.params.set_flat(&theta);
        }
    }
    model.params.beta = beta;
}

fn beta_step(model: &mut CsmilModel, grad: &GradientSet, cfg: &TrainConfig) {
    if cfg.freeze_beta {
        return;
    }
    let threshold = cfg.lr_beta * cfg.gamma;
    for (b, g) in model.params.beta.iter_mut().zip(grad.beta.iter()) {
        *b = soft_threshold_scalar(*b - cfg.lr_beta * g, threshold);
    }
}

/// One optimisation step on `batch`; returns the batch data term before the step.
pub fn train_step(
    model: &mut CsmilModel,
    batch: &[BagRef<'_>],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<f64> {
    let (data, mut grad) = data_loss_and_grad(batch, model)?;
    if !grad.is_finite() {
        return Err(Error::Diverged {
            epoch: state.epoch,
            loss: data,
        });
    }
    if let Some(max_norm) = cfg.grad_clip {
        let norm = grad.norm();
        if norm > max_norm {
            grad.scale(max_norm / norm);
        }
    }
    smooth_step(model, &grad, cfg, &mut state.adam);
    beta_step(model, &grad, cfg);
    Ok(data)
}

/// Optimiser state carried across steps.
pub struct TrainState {
    adam: AdamState,
    epoch: usize,
}

impl TrainState {
    pub fn new(model: &CsmilModel) -> Self {
        TrainState {
            adam: AdamState {
                m: Params::zeros_like(&model.params),
                v: Params::zeros_like(&model.params),
                t: 0,
            },
            epoch: 0,
        }
    }
}

fn complete(mut record: EpochRecord, data: f64, penalty: f64) -> Result<EpochRecord> {
    record.data = data;
    record.penalty = penalty;
    record.total = data + penalty;
    if !record.total.is_finite() {
        return Err(Error::Diverged {
            epoch: record.epoch,
            loss: record.total,
        });
    }
    log::debug!(
        "epoch {}: total {:.6} data {:.6} beta_l0 {}",
        record.epoch,
        record.total,
        record.data,
        record.beta_l0
    );
    Ok(record)
}

fn stop_score(val: &ValMetrics, metric: StopMetric) -> f64 {
    match metric {
        StopMetric::ValAuc => val.auc.unwrap_or(f64::NEG_INFINITY),
        StopMetric::ValAccuracy => val.accuracy,
    }
}

/// Trains `init` on `train_items`. Validation metrics are recorded per epoch
/// when `val_items` is non-empty; with early stopping the best-scoring model
/// is returned.
pub fn train(
    train_items: &[BagRef<'_>],
    val_items: &[BagRef<'_>],
    cfg: &TrainConfig,
    init: CsmilModel,
) -> Result<(CsmilModel, TrainHistory)> {
    cfg.validate()?;
    if train_items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.early_stop.is_some() && val_items.is_empty() {
        return Err(Error::config("early stopping needs validation bags"));
    }
    let mut model = init;
    model.validate()?;
    let mut state = TrainState::new(&model);
    let mut history = TrainHistory::default();
    let mut rng = seed::rng(seed::derive(cfg.seed, "train-shuffle"));
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut best: Option<(f64, CsmilModel, usize)> = None;

    // In full-batch mode the data term of epoch `e` (after its update) is the
    // pre-update loss of step `e + 1`, so it is filled in one step late.
    let mut pending: Option<EpochRecord> = None;
    let l1 = |m: &CsmilModel| cfg.gamma * m.params.beta.iter().map(|b| b.abs()).sum::<f64>();

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        match cfg.batch_mode {
            BatchMode::Full => {
                let penalty = l1(&model);
                let data = train_step(&mut model, train_items, cfg, &mut state)?;
                if let Some(record) = pending.take() {
                    history.epochs.push(complete(record, data, penalty)?);
                }
            }
            BatchMode::Minibatch(size) => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(size) {
                    let batch: Vec<BagRef<'_>> = chunk.iter().map(|&i| train_items[i]).collect();
                    train_step(&mut model, &batch, cfg, &mut state)?;
                }
            }
        }
        if !model.params.is_finite() {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        let val = if val_items.is_empty() {
            None
        } else {
            let scores = predict(val_items, &model)?;
            let labels: Vec<u8> = val_items.iter().map(|(b, _)| b.label).collect();
            Some(ValMetrics::from(&compute_metrics(&scores, &labels)?))
        };
        let record = EpochRecord {
            epoch,
            total: f64::NAN,
            data: f64::NAN,
            penalty: f64::NAN,
            beta_l0: model.beta_l0(L0_THRESHOLD),
            val,
        };
        match cfg.batch_mode {
            BatchMode::Full => pending = Some(record),
            BatchMode::Minibatch(_) => {
                let loss = parallel_loss(train_items, &model, cfg.gamma)?;
                history.epochs.push(complete(record, loss.data, loss.penalty)?);
            }
        }

        if let (Some(es), Some(v)) = (cfg.early_stop, val) {
            let score = stop_score(&v, es.metric);
            match &best {
                Some((s, _, _)) if score <= *s => {}
                _ => best = Some((score, model.clone(), epoch)),
            }
            let best_epoch = best.as_ref().map_or(epoch, |b| b.2);
            if epoch - best_epoch >= es.patience {
                break;
            }
        }
    }
    if let Some(record) = pending.take() {
        let loss = parallel_loss(train_items, &model, cfg.gamma)?;
        history.epochs.push(complete(record, loss.data, loss.penalty)?);
    }
    if let Some((_, best_model, _)) = best {
        model = best_model;
    }
    Ok((model, history))
}

/// Worst relative error between `analytic` and central differences of the
/// data term, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn compare_with_finite_differences(
    model: &CsmilModel,
    items: &[BagRef<'_>],
    analytic: &GradientSet,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    if !analytic.same_shape(&model.params) {
        return Err(Error::StaleCache("gradient shape differs from model".into()));
    }
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        let orig = model.params.get(i);
        probe.params.set(i, orig + h);
        let plus = batch_loss(items, &probe, 0.0)?.data;
        probe.params.set(i, orig - h);
        let minus = batch_loss(items, &probe, 0.0)?.data;
        probe.params.set(i, orig);
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.get(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Runs forward/backward and checks every coordinate against central differences.
pub fn finite_diff_check(model: &CsmilModel, items: &[BagRef<'_>], h: f64) -> Result<f64> {
    let caches = items
        .iter()
        .map(|(b, a)| bag_forward(b, a, model))
        .collect::<Result<Vec<_>>>()?;
    let grad = backward(items, model, &caches)?;
    compare_with_finite_differences(model, items, &grad, h)
}
