//! Global k-means over training instances and local assignment of each bag's
//! instances to the frozen global centers.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::datamodel::{Bag, Dataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    /// Z-score features before clustering (the scaling is stored in the model).
    pub standardize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 8,
            max_iter: 300,
            tol: 1e-6,
            restarts: 10,
            standardize: false,
        }
    }
}

/// Per-feature affine map applied before distances are computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaling {
    fn fit(data: ArrayView2<'_, f64>) -> Self {
        let n = data.nrows() as f64;
        let mean = data.mean_axis(Axis(0)).expect("non-empty");
        let var = data
            .rows()
            .into_iter()
            .fold(Array1::<f64>::zeros(data.ncols()), |acc, r| {
                acc + (&r - &mean).mapv(|x| x * x)
            })
            / n;
        FeatureScaling {
            mean: mean.to_vec(),
            std: var.iter().map(|&v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect(),
        }
    }

    fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// `K` global centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    #[serde(with = "matrix_rows")]
    pub centers: Array2<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<FeatureScaling>,
    #[serde(skip)]
    pub inertia: f64,
    #[serde(skip)]
    pub iterations_run: usize,
    /// Inertia after every assignment step of the winning restart.
    #[serde(skip)]
    pub inertia_trace: Vec<f64>,
}

/// Per-instance cluster labels for one bag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub k: usize,
    pub cluster_of_instance: Vec<usize>,
    /// `counts[k]` = number of the bag's instances in cluster `k`.
    pub counts: Vec<usize>,
}

impl ClusterAssignment {
    pub fn from_labels(k: usize, labels: Vec<usize>) -> Self {
        let mut counts = vec![0; k];
        for &c in &labels {
            counts[c] += 1;
        }
        ClusterAssignment {
            k,
            cluster_of_instance: labels,
            counts,
        }
    }

    pub fn n_instances(&self) -> usize {
        self.cluster_of_instance.len()
    }
}

pub(crate) mod matrix_rows {
    use ndarray::Array2;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Array2::from_shape_vec((rows.len(), ncols), flat).map_err(D::Error::custom)
    }
}

#[inline]
fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center by squared distance; exact ties go to the lowest index.
fn nearest(x: ArrayView1<'_, f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn kmeans_plus_plus(data: ArrayView2<'_, f64>, k: usize, rng: &mut seed::Rng) -> Result<Array2<f64>> {
    let n = data.nrows();
    let mut centers = Array2::zeros((k, data.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = data.rows().into_iter().map(|x| sq_dist(x, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate(format!(
                "only {c} distinct points available for K = {k}"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            acc += w;
            if acc > target && w > 0.0 {
                pick = i;
                break;
            }
        }
        // Guard against landing on an already-chosen point through rounding.
        if d2[pick] == 0.0 {
            pick = d2
                .iter()
                .enumerate()
                .rev()
                .find(|(_, &w)| w > 0.0)
                .map(|(i, _)| i)
                .expect("total > 0");
        }
        centers.row_mut(c).assign(&data.row(pick));
        for (i, x) in data.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centers.row(c)));
        }
    }
    Ok(centers)
}

struct LloydRun {
    centers: Array2<f64>,
    inertia: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn lloyd(data: ArrayView2<'_, f64>, k: usize, max_iter: usize, tol: f64, rng: &mut seed::Rng) -> Result<LloydRun> {
    let (n, d) = data.dim();
    let mut centers = kmeans_plus_plus(data, k, rng)?;
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut repairs = 0usize;

    loop {
        let mut inertia = 0.0;
        for (i, x) in data.rows().into_iter().enumerate() {
            let (c, dist) = nearest(x, &centers);
            labels[i] = c;
            dists[i] = dist;
            inertia += dist;
        }
        trace.push(inertia);
        if iterations == max_iter {
            return Ok(LloydRun {
                centers,
                inertia,
                iterations,
                trace,
            });
        }
        iterations += 1;

        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, x) in data.rows().into_iter().enumerate() {
            sums.row_mut(labels[i]).scaled_add(1.0, &x);
            counts[labels[i]] += 1;
        }
        let mut new_centers = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                new_centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        // Empty cluster: move its center onto the point farthest from its own center.
        for c in (0..k).filter(|&c| counts[c] == 0) {
            repairs += 1;
            if repairs > max_iter {
                return Err(Error::Degenerate("empty-cluster repair did not terminate".into()));
            }
            let (far, far_d) = dists
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            if far_d <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "cluster {c} is empty and every point coincides with its center"
                )));
            }
            new_centers.row_mut(c).assign(&data.row(far));
            dists[far] = 0.0;
        }

        let shift = centers
            .rows()
            .into_iter()
            .zip(new_centers.rows())
            .map(|(a, b)| a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
            .fold(0.0f64, f64::max);
        centers = new_centers;
        if shift < tol {
            let inertia: f64 = data.rows().into_iter().map(|x| nearest(x, &centers).1).sum();
            trace.push(inertia);
            return Ok(LloydRun {
                centers,
                inertia,
                iterations,
                trace,
            });
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding, best of `cfg.restarts` runs.
///
/// Ties in final inertia keep the earliest restart. Restart `r` draws from
/// `seed::derive_indexed(seed, "kmeans", r)`.
pub fn kmeans_global(data: ArrayView2<'_, f64>, cfg: &KMeansConfig, seed: u64) -> Result<ClusterModel> {
    let (n, d) = data.dim();
    if cfg.k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if n < cfg.k {
        return Err(Error::config(format!(
            "N = {n} points cannot form K = {} clusters",
            cfg.k
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clustering input".into()));
    }
    let scaling = cfg.standardize.then(|| FeatureScaling::fit(data));
    let scaled;
    let work = match &scaling {
        Some(s) => {
            scaled = Array2::from_shape_fn((n, d), |(i, j)| (data[[i, j]] - s.mean[j]) / s.std[j]);
            scaled.view()
        }
        None => data,
    };

    let mut best: Option<LloydRun> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = seed::rng(seed::derive_indexed(seed, "kmeans", r as u64));
        let run = lloyd(work, cfg.k, cfg.max_iter, cfg.tol, &mut rng)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    Ok(ClusterModel {
        k: cfg.k,
        dim: d,
        centers: best.centers,
        scaling,
        inertia: best.inertia,
        iterations_run: best.iterations,
        inertia_trace: best.trace,
    })
}

impl ClusterModel {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.centers.nrows() != self.k {
            return Err(Error::config(format!(
                "cluster checkpoint: K = {} but {} centers",
                self.k,
                self.centers.nrows()
            )));
        }
        if self.centers.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "cluster checkpoint centers".into(),
                expected: self.dim,
                found: self.centers.ncols(),
            });
        }
        if let Some(s) = &self.scaling {
            if s.mean.len() != self.dim || s.std.len() != self.dim || s.std.iter().any(|&v| v <= 0.0) {
                return Err(Error::config("cluster checkpoint: invalid feature scaling"));
            }
        }
        if self.centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cluster centers".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let m: ClusterModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_json(path, self)
    }

    fn label_of(&self, x: ArrayView1<'_, f64>) -> usize {
        match &self.scaling {
            Some(s) => nearest(s.apply(x).view(), &self.centers).0,
            None => nearest(x, &self.centers).0,
        }
    }
}

/// Assigns each instance of `bag` to its nearest global center.
pub fn assign_local(bag: &Bag, model: &ClusterModel) -> Result<ClusterAssignment> {
    if bag.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            context: format!("assigning bag {}", bag.id),
            expected: model.dim,
            found: bag.dim(),
        });
    }
    let labels = bag.embeddings.rows().into_iter().map(|x| model.label_of(x)).collect();
    Ok(ClusterAssignment::from_labels(model.k, labels))
}

pub fn assign_dataset(dataset: &Dataset, model: &ClusterModel) -> Result<Vec<ClusterAssignment>> {
    dataset.bags.iter().map(|b| assign_local(b, model)).collect()
}

/// Instance index lists per cluster, `K` lists long; empty clusters give empty lists.
pub fn partition_bag(assignment: &ClusterAssignment) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); assignment.k];
    for (j, &c) in assignment.cluster_of_instance.iter().enumerate() {
        lists[c].push(j);
    }
    lists
}

/// `bag_id,instance_index,cluster_id` export.
pub fn write_assignments_csv(path: &Path, dataset: &Dataset, assignments: &[ClusterAssignment]) -> Result<()> {
    let rows = dataset.bags.iter().zip(assignments).flat_map(|(bag, a)| {
        a.cluster_of_instance
            .iter()
            .enumerate()
            .map(move |(j, c)| vec![bag.id.clone(), j.to_string(), c.to_string()])
    });
    artifact::write_csv(path, &["bag_id", "instance_index", "cluster_id"], rows)
}
