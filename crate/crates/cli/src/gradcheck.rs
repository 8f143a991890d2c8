//! Randomised finite-difference check of the analytic gradients.

use csmil::clustering::ClusterAssignment;
use csmil::datamodel::Bag;
use csmil::model::{CsmilModel, ModelConfig};
use csmil::optim::finite_diff_check;
use csmil::seed;
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::GradcheckSettings;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub seed: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub empty_clusters: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub cases: Vec<GradcheckCase>,
}

/// A small random model with bags whose first member always leaves the last
/// cluster empty (for `K >= 2`).
pub fn random_problem(
    k: usize,
    settings: &GradcheckSettings,
    seed: u64,
) -> csmil::Result<(CsmilModel, Vec<Bag>, Vec<ClusterAssignment>)> {
    let config = ModelConfig {
        hidden: settings.hidden,
        shared_attention: false,
    };
    let mut model = CsmilModel::new(k, settings.dim, &config, seed::derive(seed, "gradcheck-model"))?;
    let mut rng = seed::rng(seed::derive(seed, "gradcheck-data"));
    for b in model.params.beta.iter_mut() {
        *b = rng.random_range(-1.5..1.5);
    }
    let mut bags = Vec::with_capacity(settings.bags);
    let mut assignments = Vec::with_capacity(settings.bags);
    for i in 0..settings.bags {
        let n = rng.random_range(1..=5);
        let emb = Array2::from_shape_simple_fn((n, settings.dim), || StandardNormal.sample(&mut rng));
        let reach = if i == 0 && k >= 2 { k - 1 } else { k };
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..reach)).collect();
        bags.push(Bag::new(format!("g{i}"), (i % 2) as u8, emb)?);
        assignments.push(ClusterAssignment::from_labels(k, labels));
    }
    Ok((model, bags, assignments))
}

pub fn run(settings: &GradcheckSettings, root_seed: u64) -> csmil::Result<GradcheckReport> {
    let mut cases = Vec::new();
    for s in 0..settings.seeds {
        for &k in &settings.k_values {
            let case_seed = seed::derive_indexed(root_seed, &format!("gradcheck-K{k}"), s);
            let (model, bags, assignments) = random_problem(k, settings, case_seed)?;
            let items: Vec<_> = bags.iter().zip(&assignments).collect();
            let err = finite_diff_check(&model, &items, settings.h)?;
            let empty_clusters = assignments
                .iter()
                .map(|a| a.counts.iter().filter(|&&c| c == 0).count())
                .sum();
            cases.push(GradcheckCase {
                seed: s,
                k,
                empty_clusters,
                max_rel_error: err,
            });
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        h: settings.h,
        tolerance: settings.tolerance,
        max_rel_error,
        passed: max_rel_error < settings.tolerance,
        cases,
    })
}
