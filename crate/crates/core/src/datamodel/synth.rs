//! Planted-cluster MIL data.
//!
//! `k_latent` Gaussian components sit on mutually orthogonal directions at
//! distance `component_separation` from the origin. `s_informative` of them
//! are informative: each positive bag picks one informative component and
//! draws `ceil(positive_fraction * n)` instances from it, the rest from
//! background components. Negative bags contain background instances only.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub k_latent: usize,
    pub s_informative: usize,
    pub dim: usize,
    pub bags_per_class: usize,
    /// Inclusive `[n_min, n_max]`.
    pub instances_per_bag: [usize; 2],
    pub component_separation: f64,
    pub noise_sigma: f64,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k_latent: 8,
            s_informative: 2,
            dim: 16,
            bags_per_class: 100,
            instances_per_bag: [20, 40],
            component_separation: 4.0,
            noise_sigma: 0.25,
            positive_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [n_min, n_max] = self.instances_per_bag;
        let checks: [(bool, &str); 9] = [
            (self.s_informative >= 1, "s_informative must be at least 1"),
            (
                self.s_informative < self.k_latent,
                "s_informative must leave at least one background component",
            ),
            (
                self.dim >= self.k_latent,
                "dim must be at least k_latent for orthogonal centroids",
            ),
            (self.bags_per_class >= 1, "bags_per_class must be positive"),
            (n_min >= 1, "instances_per_bag minimum must be at least 1"),
            (n_min <= n_max, "instances_per_bag range is empty"),
            (
                self.noise_sigma > 0.0 && self.noise_sigma.is_finite(),
                "noise_sigma must be positive",
            ),
            (
                self.positive_fraction > 0.0 && self.positive_fraction <= 1.0,
                "positive_fraction must lie in (0, 1]",
            ),
            (
                self.component_separation > 0.0 && self.component_separation.is_finite(),
                "component_separation must be positive",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentKind {
    Informative,
    Background,
}

/// Latent component bookkeeping for a synthetic dataset (the sidecar file).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub informative_components: Vec<usize>,
    pub component_of_instance: BTreeMap<String, Vec<usize>>,
}

impl GroundTruth {
    pub fn kind(&self, component: usize) -> ComponentKind {
        if self.informative_components.contains(&component) {
            ComponentKind::Informative
        } else {
            ComponentKind::Background
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Orthonormal rows via Gram-Schmidt on Gaussian draws.
fn random_orthonormal(k: usize, d: usize, rng: &mut seed::Rng) -> Array2<f64> {
    let mut basis = Array2::<f64>::zeros((k, d));
    let mut row = 0;
    while row < k {
        let mut v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for prev in 0..row {
            let q = basis.row(prev);
            let proj = q.dot(&v);
            v.scaled_add(-proj, &q);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.row_mut(row).assign(&(v / norm));
            row += 1;
        }
    }
    basis
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, "synth"));
    let centroids = random_orthonormal(cfg.k_latent, cfg.dim, &mut rng) * cfg.component_separation;

    let mut informative = index::sample(&mut rng, cfg.k_latent, cfg.s_informative).into_vec();
    informative.sort_unstable();
    let background: Vec<usize> = (0..cfg.k_latent).filter(|k| !informative.contains(k)).collect();

    let n_bags = 2 * cfg.bags_per_class;
    let width = n_bags.to_string().len().max(4);
    let mut bags = Vec::with_capacity(n_bags);
    let mut component_of_instance = BTreeMap::new();
    let [n_min, n_max] = cfg.instances_per_bag;

    for i in 0..n_bags {
        let label = (i % 2) as u8;
        let n = rng.random_range(n_min..=n_max);
        let n_informative = if label == 1 {
            ((cfg.positive_fraction * n as f64).ceil() as usize).clamp(1, n)
        } else {
            0
        };
        let mut comps = Vec::with_capacity(n);
        if n_informative > 0 {
            let c = informative[rng.random_range(0..informative.len())];
            comps.extend(std::iter::repeat_n(c, n_informative));
        }
        while comps.len() < n {
            comps.push(background[rng.random_range(0..background.len())]);
        }
        comps.shuffle(&mut rng);

        let mut emb = Array2::<f64>::zeros((n, cfg.dim));
        for (j, &c) in comps.iter().enumerate() {
            for f in 0..cfg.dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = centroids[[c, f]] + cfg.noise_sigma * noise;
                // Stored as f32 on disk, so keep in-memory values identical.
                emb[[j, f]] = f64::from(v as f32);
            }
        }
        let id = format!("bag_{i:0width$}");
        component_of_instance.insert(id.clone(), comps);
        bags.push(Bag::new(id, label, emb)?);
    }

    let dataset = Dataset::new(format!("synthetic-seed{}", cfg.seed), bags)?;
    Ok((
        dataset,
        GroundTruth {
            informative_components: informative,
            component_of_instance,
        },
    ))
}

#[cfg(test)]
fn synthetic_centroids(cfg: &SynthConfig) -> Array2<f64> {
    let mut rng = seed::rng(seed::derive(cfg.seed, "synth"));
    random_orthonormal(cfg.k_latent, cfg.dim, &mut rng) * cfg.component_separation
}
