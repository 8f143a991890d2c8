//! Experiment protocols: leave-one-cluster-out ablation, `gamma` and `K`
//! sweeps, and identification of planted informative clusters.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{self, fmt_f64};
use crate::clustering::{assign_local, kmeans_global, ClusterAssignment};
use crate::datamodel::{ComponentKind, Dataset, FoldAssignment, GroundTruth};
use crate::error::{Error, Result};
use crate::evalx::cv::{cross_validate, CvConfig, CvReport, MeanMetrics};
use crate::model::CsmilModel;
use crate::seed;

pub const DEFAULT_GAMMA_GRID: [f64; 15] = [
    0.0001, 0.0005, 0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.007, 0.008, 0.009, 0.01, 0.02, 0.05, 0.1,
];

pub const DEFAULT_K_GRID: [usize; 4] = [2, 3, 5, 10];

/// Make-up of one reference cluster in terms of latent components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterComposition {
    pub cluster: usize,
    pub size: usize,
    /// Most frequent latent component (lowest id on ties); `None` if empty.
    pub majority_component: Option<usize>,
    pub informative_instances: usize,
}

impl ClusterComposition {
    pub fn informative_fraction(&self) -> f64 {
        if self.size == 0 {
            0.0
        } else {
            self.informative_instances as f64 / self.size as f64
        }
    }

    /// Non-empty and free of informative instances.
    pub fn is_pure_background(&self) -> bool {
        self.size > 0 && self.informative_instances == 0
    }
}

/// Tabulates latent components per cluster. `dataset` and `assignments` are
/// parallel.
pub fn cluster_composition(
    dataset: &Dataset,
    assignments: &[ClusterAssignment],
    truth: &GroundTruth,
) -> Result<Vec<ClusterComposition>> {
    let k = assignments.first().map_or(0, |a| a.k);
    let mut tallies: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); k];
    for (bag, assignment) in dataset.bags.iter().zip(assignments) {
        let components = truth
            .component_of_instance
            .get(&bag.id)
            .ok_or_else(|| Error::Format(format!("ground truth has no entry for bag {}", bag.id)))?;
        if components.len() != assignment.n_instances() {
            return Err(Error::DimensionMismatch {
                context: format!("ground truth of bag {}", bag.id),
                expected: assignment.n_instances(),
                found: components.len(),
            });
        }
        for (&cluster, &component) in assignment.cluster_of_instance.iter().zip(components) {
            *tallies[cluster].entry(component).or_insert(0) += 1;
        }
    }
    Ok(tallies
        .into_iter()
        .enumerate()
        .map(|(cluster, t)| {
            let mut majority: Option<(usize, usize)> = None;
            for (&c, &n) in &t {
                if majority.is_none_or(|(_, best)| n > best) {
                    majority = Some((c, n));
                }
            }
            ClusterComposition {
                cluster,
                size: t.values().sum(),
                majority_component: majority.map(|m| m.0),
                informative_instances: t
                    .iter()
                    .filter(|(c, _)| truth.kind(**c) == ComponentKind::Informative)
                    .map(|(_, n)| n)
                    .sum(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    /// Clusters with `beta_k != 0`.
    pub selected: Vec<usize>,
    pub majority_component: Vec<Option<usize>>,
    /// Fraction of informative components that are the majority of some
    /// selected cluster.
    pub recall: f64,
    /// Fraction of selected clusters whose majority is informative.
    pub precision: Option<f64>,
    /// Background-majority clusters whose weight is exactly zero.
    pub zeroed_background: Vec<usize>,
}

pub fn identify_selected_clusters(
    model: &CsmilModel,
    dataset: &Dataset,
    assignments: &[ClusterAssignment],
    truth: &GroundTruth,
) -> Result<Identification> {
    if truth.informative_components.is_empty() {
        return Err(Error::config("ground truth lists no informative components"));
    }
    let composition = cluster_composition(dataset, assignments, truth)?;
    if !composition.is_empty() && composition.len() != model.k {
        return Err(Error::DimensionMismatch {
            context: "clusters vs model K".into(),
            expected: model.k,
            found: composition.len(),
        });
    }
    let majority: Vec<Option<usize>> = (0..model.k)
        .map(|k| composition.get(k).and_then(|c| c.majority_component))
        .collect();
    let selected: Vec<usize> = (0..model.k).filter(|&k| model.beta()[k] != 0.0).collect();
    let covered: BTreeSet<usize> = selected
        .iter()
        .filter_map(|&k| majority[k])
        .filter(|&c| truth.kind(c) == ComponentKind::Informative)
        .collect();
    let informative: BTreeSet<usize> = truth.informative_components.iter().copied().collect();
    let recall = covered.intersection(&informative).count() as f64 / informative.len() as f64;
    let precision = (!selected.is_empty()).then(|| {
        selected
            .iter()
            .filter(|&&k| majority[k].is_some_and(|c| truth.kind(c) == ComponentKind::Informative))
            .count() as f64
            / selected.len() as f64
    });
    let zeroed_background = (0..model.k)
        .filter(|&k| model.beta()[k] == 0.0)
        .filter(|&k| majority[k].is_some_and(|c| truth.kind(c) == ComponentKind::Background))
        .collect();
    Ok(Identification {
        selected,
        majority_component: majority,
        recall,
        precision,
        zeroed_background,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationVariant {
    pub removed_cluster: usize,
    pub mean: MeanMetrics,
    pub delta_acc: f64,
    pub excluded_bags: usize,
    pub composition: Option<ClusterComposition>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub sparse: bool,
    pub baseline: CvReport,
    pub variants: Vec<AblationVariant>,
}

impl AblationReport {
    /// `removed_cluster,acc,f1,auc,delta_acc,excluded_bags`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.variants.iter().map(|v| {
            vec![
                v.removed_cluster.to_string(),
                fmt_f64(v.mean.accuracy),
                fmt_f64(v.mean.f1),
                v.mean.auc.map_or_else(String::new, fmt_f64),
                fmt_f64(v.delta_acc),
                v.excluded_bags.to_string(),
            ]
        });
        artifact::write_csv(
            path,
            &["removed_cluster", "acc", "f1", "auc", "delta_acc", "excluded_bags"],
            rows,
        )
    }
}

/// Leave-one-cluster-out ablation. Clusters are defined by a reference k-means
/// on all instances (used only to decide which instances to drop); each
/// variant is then cross-validated like the baseline. Unless `sparse`, both
/// baseline and variants train with `gamma = 0` and `beta` frozen at one.
pub fn ablate_clusters(
    dataset: &Dataset,
    folds: &FoldAssignment,
    cfg: &CvConfig,
    sparse: bool,
    truth: Option<&GroundTruth>,
) -> Result<AblationReport> {
    if cfg.kmeans.k < 2 {
        return Err(Error::config("ablation needs K >= 2"));
    }
    let mut run_cfg = cfg.clone();
    if !sparse {
        run_cfg.train.gamma = 0.0;
        run_cfg.train.freeze_beta = true;
    }
    let ds = dataset.sorted_by_id();
    let all: Vec<usize> = (0..ds.len()).collect();
    let reference = kmeans_global(
        ds.stack_instances(&all).view(),
        &cfg.kmeans,
        seed::derive(cfg.seed, "ablation-reference"),
    )?;
    let assignments = ds
        .bags
        .iter()
        .map(|b| assign_local(b, &reference))
        .collect::<Result<Vec<_>>>()?;
    let composition = truth.map(|t| cluster_composition(&ds, &assignments, t)).transpose()?;

    let baseline = cross_validate(&ds, folds, &run_cfg)?;
    let variants = (0..reference.k)
        .into_par_iter()
        .map(|removed| {
            let mut excluded = 0;
            let mut bags = Vec::with_capacity(ds.len());
            for (bag, a) in ds.bags.iter().zip(&assignments) {
                let keep: Vec<usize> = (0..bag.n_instances())
                    .filter(|&j| a.cluster_of_instance[j] != removed)
                    .collect();
                match bag.select_instances(&keep) {
                    Some(b) => bags.push(b),
                    None => excluded += 1,
                }
            }
            let reduced = Dataset::new(ds.name.clone(), bags)?;
            let report = cross_validate(&reduced, folds, &run_cfg)?;
            Ok(AblationVariant {
                removed_cluster: removed,
                mean: report.mean,
                delta_acc: report.mean.accuracy - baseline.mean.accuracy,
                excluded_bags: excluded,
                composition: composition.as_ref().map(|c| c[removed].clone()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        sparse,
        baseline,
        variants,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub cv: CvReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    /// `"gamma"` or `"K"`.
    pub param: String,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    /// `param,fold,acc,f1,auc,beta_l0`; `param` holds the grid value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.entries.iter().flat_map(|e| {
            e.cv.folds.iter().map(move |f| {
                vec![
                    fmt_f64(e.value),
                    f.fold.to_string(),
                    fmt_f64(f.metrics.accuracy),
                    fmt_f64(f.metrics.f1),
                    f.metrics.auc.map_or_else(String::new, fmt_f64),
                    f.beta_l0.to_string(),
                ]
            })
        });
        artifact::write_csv(path, &["param", "fold", "acc", "f1", "auc", "beta_l0"], rows)
    }

    pub fn best_by_auc(&self) -> Option<&SweepEntry> {
        self.entries
            .iter()
            .filter(|e| e.cv.mean.auc.is_some())
            .fold(None, |best: Option<&SweepEntry>, e| match best {
                Some(b) if b.cv.mean.auc >= e.cv.mean.auc => Some(b),
                _ => Some(e),
            })
    }
}

pub fn sweep_gamma(dataset: &Dataset, folds: &FoldAssignment, cfg: &CvConfig, grid: &[f64]) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::config("gamma grid is empty"));
    }
    let entries = grid
        .par_iter()
        .map(|&gamma| {
            let mut c = cfg.clone();
            c.train.gamma = gamma;
            Ok(SweepEntry {
                value: gamma,
                cv: cross_validate(dataset, folds, &c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        param: "gamma".into(),
        entries,
    })
}

pub fn sweep_k(dataset: &Dataset, folds: &FoldAssignment, cfg: &CvConfig, grid: &[usize]) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::config("K grid is empty"));
    }
    let entries = grid
        .par_iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.kmeans.k = k;
            Ok(SweepEntry {
                value: k as f64,
                cv: cross_validate(dataset, folds, &c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        param: "K".into(),
        entries,
    })
}
