//! K-fold cross-validation of the full pipeline: per-fold global clustering on
//! training instances, local assignment, training and held-out scoring.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, fmt_f64};
use crate::clustering::{assign_local, kmeans_global, ClusterAssignment, ClusterModel, KMeansConfig};
use crate::datamodel::{Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::evalx::metrics::{compute_metrics, MetricReport};
use crate::model::{CsmilModel, ModelConfig};
use crate::optim::{predict, train, BagRef, TrainConfig, L0_THRESHOLD};
use crate::seed;

/// Everything a cross-validated run needs besides data and folds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub kmeans: KMeansConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

/// Fitted artifacts of one fold, kept in memory for inspection.
#[derive(Debug, Clone)]
pub struct FittedFold {
    pub clusters: ClusterModel,
    pub model: CsmilModel,
    /// Assignments of every bag of the (id-sorted) dataset.
    pub assignments: Vec<ClusterAssignment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricReport,
    pub beta: Vec<f64>,
    pub beta_l0: usize,
    pub final_penalty: f64,
    #[serde(skip)]
    pub fitted: Option<FittedFold>,
}

/// Fold-averaged metrics. `auc` is `None` if any fold lacks one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub beta_l0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mean: MeanMetrics,
    /// Metrics over all held-out predictions pooled across folds.
    pub pooled: MetricReport,
}

impl CvReport {
    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        write_roc_csv(&self.pooled, path)
    }
}

pub fn write_roc_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let rows = report.roc.iter().map(|(f, t)| vec![fmt_f64(*f), fmt_f64(*t)]);
    artifact::write_csv(path, &["fpr", "tpr"], rows)
}

/// Training and validation halves for early stopping: every fifth bag of each
/// class (in the given order) is held out for validation.
pub fn inner_validation_split(dataset: &Dataset, train_idx: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut fit = Vec::new();
    let mut val = Vec::new();
    let mut seen = [0usize; 2];
    for &i in train_idx {
        let label = usize::from(dataset.bags[i].label);
        if seen[label] % 5 == 4 {
            val.push(i);
        } else {
            fit.push(i);
        }
        seen[label] += 1;
    }
    (fit, val)
}

pub fn cross_validate(dataset: &Dataset, folds: &FoldAssignment, cfg: &CvConfig) -> Result<CvReport> {
    cross_validate_with_hook(dataset, folds, cfg, &|_, _| {})
}

/// As [`cross_validate`]; `hook(fold, ids)` sees the ids of the bags whose
/// instances feed that fold's global clustering.
pub fn cross_validate_with_hook(
    dataset: &Dataset,
    folds: &FoldAssignment,
    cfg: &CvConfig,
    hook: &(dyn Fn(usize, &[&str]) + Sync),
) -> Result<CvReport> {
    cfg.train.validate()?;
    let ds = dataset.sorted_by_id();
    ds.validate()?;
    let reports = (0..folds.n_folds)
        .into_par_iter()
        .map(|fold| run_fold(&ds, folds, cfg, fold, hook))
        .collect::<Result<Vec<_>>>()?;
    summarize(reports)
}

fn run_fold(
    ds: &Dataset,
    folds: &FoldAssignment,
    cfg: &CvConfig,
    fold: usize,
    hook: &(dyn Fn(usize, &[&str]) + Sync),
) -> Result<(FoldReport, Vec<f64>, Vec<u8>)> {
    let (train_idx, test_idx) = folds.split(ds, fold);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::config(format!(
            "fold {fold} has an empty training or test split"
        )));
    }
    let ids: Vec<&str> = train_idx.iter().map(|&i| ds.bags[i].id.as_str()).collect();
    hook(fold, &ids);

    let instances = ds.stack_instances(&train_idx);
    let clusters = kmeans_global(
        instances.view(),
        &cfg.kmeans,
        seed::derive_indexed(cfg.seed, "cv-kmeans", fold as u64),
    )?;
    let assignments = ds
        .bags
        .iter()
        .map(|b| assign_local(b, &clusters))
        .collect::<Result<Vec<_>>>()?;
    let items = |idx: &[usize]| -> Vec<BagRef<'_>> { idx.iter().map(|&i| (&ds.bags[i], &assignments[i])).collect() };

    let init = CsmilModel::new(
        clusters.k,
        ds.dim,
        &cfg.model,
        seed::derive_indexed(cfg.seed, "cv-model", fold as u64),
    )?;
    let train_cfg = TrainConfig {
        seed: seed::derive_indexed(cfg.seed, "cv-train", fold as u64),
        ..cfg.train.clone()
    };
    let (fit_idx, val_idx) = if train_cfg.early_stop.is_some() {
        inner_validation_split(ds, &train_idx)
    } else {
        (train_idx.clone(), Vec::new())
    };
    let (model, history) = train(&items(&fit_idx), &items(&val_idx), &train_cfg, init)?;

    let scores = predict(&items(&test_idx), &model)?;
    let labels: Vec<u8> = test_idx.iter().map(|&i| ds.bags[i].label).collect();
    let metrics = compute_metrics(&scores, &labels)?;
    log::info!(
        "fold {fold}: acc {:.4} auc {:?} beta_l0 {}",
        metrics.accuracy,
        metrics.auc,
        model.beta_l0(L0_THRESHOLD)
    );
    let report = FoldReport {
        fold,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        metrics,
        beta: model.beta().to_vec(),
        beta_l0: model.beta_l0(L0_THRESHOLD),
        final_penalty: history.last().map_or(0.0, |r| r.penalty),
        fitted: Some(FittedFold {
            clusters,
            model,
            assignments,
        }),
    };
    Ok((report, scores, labels))
}

fn summarize(runs: Vec<(FoldReport, Vec<f64>, Vec<u8>)>) -> Result<CvReport> {
    let n = runs.len() as f64;
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut folds = Vec::with_capacity(runs.len());
    for (report, scores, labels) in runs {
        all_scores.extend(scores);
        all_labels.extend(labels);
        folds.push(report);
    }
    let auc = folds.iter().map(|f| f.metrics.auc).sum::<Option<f64>>().map(|s| s / n);
    let mean = MeanMetrics {
        accuracy: folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / n,
        f1: folds.iter().map(|f| f.metrics.f1).sum::<f64>() / n,
        auc,
        beta_l0: folds.iter().map(|f| f.beta_l0 as f64).sum::<f64>() / n,
    };
    Ok(CvReport {
        folds,
        mean,
        pooled: compute_metrics(&all_scores, &all_labels)?,
    })
}
