//! csMIL forward computation.
//!
//! For a bag whose instances are split by cluster, each non-empty cluster `k`
//! is pooled by attention into a prototype `z_k = sum_n alpha_n h_n` with
//! `alpha = softmax_n(w_k . tanh(V_k h_n))`. Prototypes are combined as
//! `z = sum_k beta_k z_k` (empty clusters contribute a zero prototype) and
//! classified by `softmax(W z + b)`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::clustering::{partition_bag, ClusterAssignment};
use crate::datamodel::Bag;
use crate::error::{Error, Result};
use crate::seed;

pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Attention hidden width `L`.
    pub hidden: usize,
    /// One attention head shared by every cluster instead of one per cluster.
    pub shared_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            shared_attention: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// `L × d`
    pub v: Array2<f64>,
    /// length `L`
    pub w: Array1<f64>,
}

impl AttentionHead {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        AttentionHead {
            v: Array2::zeros((hidden, dim)),
            w: Array1::zeros(hidden),
        }
    }
}

/// Every learnable tensor of the model. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub heads: Vec<AttentionHead>,
    pub beta: Array1<f64>,
    /// `2 × d`
    pub classifier_w: Array2<f64>,
    pub classifier_b: Array1<f64>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            heads: other
                .heads
                .iter()
                .map(|h| AttentionHead {
                    v: Array2::zeros(h.v.raw_dim()),
                    w: Array1::zeros(h.w.len()),
                })
                .collect(),
            beta: Array1::zeros(other.beta.len()),
            classifier_w: Array2::zeros(other.classifier_w.raw_dim()),
            classifier_b: Array1::zeros(other.classifier_b.len()),
        }
    }

    /// Fixed traversal order: each head's `V` (row-major) then `w`, then
    /// `beta`, `W` (row-major), `b`.
    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.heads.len() + 3);
        for h in &self.heads {
            out.push(h.v.as_slice().expect("standard layout"));
            out.push(h.w.as_slice().expect("standard layout"));
        }
        out.push(self.beta.as_slice().expect("standard layout"));
        out.push(self.classifier_w.as_slice().expect("standard layout"));
        out.push(self.classifier_b.as_slice().expect("standard layout"));
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.heads.len() + 3);
        for h in &mut self.heads {
            out.push(h.v.as_slice_mut().expect("standard layout"));
            out.push(h.w.as_slice_mut().expect("standard layout"));
        }
        out.push(self.beta.as_slice_mut().expect("standard layout"));
        out.push(self.classifier_w.as_slice_mut().expect("standard layout"));
        out.push(self.classifier_b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    pub fn get(&self, index: usize) -> f64 {
        let mut i = index;
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let mut i = index;
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &Params) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.heads.len() == other.heads.len()
            && self
                .heads
                .iter()
                .zip(&other.heads)
                .all(|(a, b)| a.v.dim() == b.v.dim() && a.w.len() == b.w.len())
            && self.beta.len() == other.beta.len()
            && self.classifier_w.dim() == other.classifier_w.dim()
            && self.classifier_b.len() == other.classifier_b.len()
    }
}

/// A csMIL model over `K` clusters of `d`-dimensional instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CsmilModel {
    pub k: usize,
    pub dim: usize,
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Params,
}

impl CsmilModel {
    /// `beta = 1`; heads and classifier uniform in `±1/sqrt(fan_in)`.
    pub fn new(k: usize, dim: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        if k == 0 || dim == 0 || config.hidden == 0 {
            return Err(Error::config("K, d and hidden width must be positive"));
        }
        let mut rng = seed::rng(seed::derive(seed, "model-init"));
        let mut uniform = |fan_in: usize, shape: (usize, usize)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
        };
        let hidden = config.hidden;
        let n_heads = if config.shared_attention { 1 } else { k };
        let heads = (0..n_heads)
            .map(|_| AttentionHead {
                v: uniform(dim, (hidden, dim)),
                w: uniform(hidden, (1, hidden)).index_axis_move(Axis(0), 0),
            })
            .collect();
        let classifier_w = uniform(dim, (N_CLASSES, dim));
        let classifier_b = uniform(dim, (1, N_CLASSES)).index_axis_move(Axis(0), 0);
        Ok(CsmilModel {
            k,
            dim,
            config: config.clone(),
            seed,
            params: Params {
                heads,
                beta: Array1::ones(k),
                classifier_w,
                classifier_b,
            },
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// Head used for cluster `k`.
    pub fn head(&self, k: usize) -> &AttentionHead {
        if self.config.shared_attention {
            &self.params.heads[0]
        } else {
            &self.params.heads[k]
        }
    }

    pub fn head_index(&self, k: usize) -> usize {
        if self.config.shared_attention {
            0
        } else {
            k
        }
    }

    pub fn beta(&self) -> &Array1<f64> {
        &self.params.beta
    }

    /// Number of exactly-zero-excluded weights, `|{k : |beta_k| > threshold}|`.
    pub fn beta_l0(&self, threshold: f64) -> usize {
        self.params.beta.iter().filter(|b| b.abs() > threshold).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n_heads = if self.config.shared_attention { 1 } else { self.k };
        let l = self.config.hidden;
        let p = &self.params;
        let ok = self.k >= 1
            && p.heads.len() == n_heads
            && p.heads.iter().all(|h| h.v.dim() == (l, self.dim) && h.w.len() == l)
            && p.beta.len() == self.k
            && p.classifier_w.dim() == (N_CLASSES, self.dim)
            && p.classifier_b.len() == N_CLASSES;
        if !ok {
            return Err(Error::config("model parameter shapes are inconsistent"));
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let repr: Checkpoint = serde_json::from_str(text)?;
        let model = repr.into_model()?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        artifact::to_json_bytes(&Checkpoint::from_model(self))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadRepr {
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    w: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    #[serde(rename = "L")]
    l: usize,
    beta: Vec<f64>,
    heads: Vec<HeadRepr>,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    config: ModelConfig,
    seed: u64,
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix_from(rows: Vec<Vec<f64>>, shape: (usize, usize), what: &str) -> Result<Array2<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::config(format!(
            "checkpoint {what}: expected {}×{}",
            shape.0, shape.1
        )));
    }
    Ok(Array2::from_shape_vec(shape, rows.concat()).expect("shape checked"))
}

fn vector_from(v: Vec<f64>, len: usize, what: &str) -> Result<Array1<f64>> {
    if v.len() != len {
        return Err(Error::config(format!(
            "checkpoint {what}: expected length {len}, found {}",
            v.len()
        )));
    }
    Ok(Array1::from(v))
}

impl Checkpoint {
    fn from_model(m: &CsmilModel) -> Self {
        Checkpoint {
            k: m.k,
            d: m.dim,
            l: m.config.hidden,
            beta: m.params.beta.to_vec(),
            heads: m
                .params
                .heads
                .iter()
                .map(|h| HeadRepr {
                    v: rows_of(&h.v),
                    w: h.w.to_vec(),
                })
                .collect(),
            w: rows_of(&m.params.classifier_w),
            b: m.params.classifier_b.to_vec(),
            config: m.config.clone(),
            seed: m.seed,
        }
    }

    fn into_model(self) -> Result<CsmilModel> {
        if self.config.hidden != self.l {
            return Err(Error::config("checkpoint L disagrees with config.hidden"));
        }
        let expected_heads = if self.config.shared_attention { 1 } else { self.k };
        if self.heads.len() != expected_heads {
            return Err(Error::config(format!(
                "checkpoint has {} heads, expected {expected_heads}",
                self.heads.len()
            )));
        }
        let heads = self
            .heads
            .into_iter()
            .map(|h| {
                Ok(AttentionHead {
                    v: matrix_from(h.v, (self.l, self.d), "V")?,
                    w: vector_from(h.w, self.l, "w")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CsmilModel {
            k: self.k,
            dim: self.d,
            config: self.config,
            seed: self.seed,
            params: Params {
                heads,
                beta: vector_from(self.beta, self.k, "beta")?,
                classifier_w: matrix_from(self.w, (N_CLASSES, self.d), "W")?,
                classifier_b: vector_from(self.b, N_CLASSES, "b")?,
            },
        })
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exp = logits.mapv(|x| (x - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// `log(sum(exp(x)))`, stable.
pub fn log_sum_exp(logits: ArrayView1<'_, f64>) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Attention state of one cluster within one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCache {
    /// Instance indices (into the bag) belonging to this cluster.
    pub indices: Vec<usize>,
    pub alpha: Array1<f64>,
    /// `tanh(V h_n)` per member, `m × L`.
    pub activations: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// One entry per cluster; empty clusters have no indices.
    pub clusters: Vec<ClusterCache>,
    /// `K × d`, zero rows for empty clusters.
    pub prototypes: Array2<f64>,
    pub z: Array1<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

impl ForwardCache {
    pub fn positive_probability(&self) -> f64 {
        self.probs[1]
    }
}

fn pool_with_activations(
    instances: ArrayView2<'_, f64>,
    head: &AttentionHead,
) -> (Array1<f64>, Array2<f64>, Array1<f64>) {
    // m × L
    let activations = instances.dot(&head.v.t()).mapv(f64::tanh);
    let scores = activations.dot(&head.w);
    let alpha = softmax(scores.view());
    let prototype = alpha.dot(&instances);
    (alpha, activations, prototype)
}

/// Attention pooling of `m ≥ 1` instances: returns `(alpha, prototype)`.
pub fn attention_pool(instances: ArrayView2<'_, f64>, head: &AttentionHead) -> (Array1<f64>, Array1<f64>) {
    let (alpha, _, prototype) = pool_with_activations(instances, head);
    (alpha, prototype)
}

/// `sum_k beta_k prototypes[k]`, accumulated in ascending `k`.
pub fn aggregate_bag(prototypes: ArrayView2<'_, f64>, beta: ArrayView1<'_, f64>) -> Array1<f64> {
    assert_eq!(prototypes.nrows(), beta.len(), "one weight per prototype");
    let mut z = Array1::zeros(prototypes.ncols());
    for (row, &b) in prototypes.rows().into_iter().zip(beta.iter()) {
        z.scaled_add(b, &row);
    }
    z
}

/// `(W z + b, softmax(W z + b))`
pub fn classify(z: ArrayView1<'_, f64>, model: &CsmilModel) -> (Array1<f64>, Array1<f64>) {
    let logits = model.params.classifier_w.dot(&z) + &model.params.classifier_b;
    let probs = softmax(logits.view());
    (logits, probs)
}

fn check_inputs(bag: &Bag, assignment: &ClusterAssignment, model: &CsmilModel) -> Result<()> {
    if bag.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            context: format!("forward on bag {}", bag.id),
            expected: model.dim,
            found: bag.dim(),
        });
    }
    if assignment.k != model.k {
        return Err(Error::DimensionMismatch {
            context: format!("cluster count for bag {}", bag.id),
            expected: model.k,
            found: assignment.k,
        });
    }
    if assignment.n_instances() != bag.n_instances() {
        return Err(Error::DimensionMismatch {
            context: format!("assignment length for bag {}", bag.id),
            expected: bag.n_instances(),
            found: assignment.n_instances(),
        });
    }
    Ok(())
}

pub fn bag_forward(bag: &Bag, assignment: &ClusterAssignment, model: &CsmilModel) -> Result<ForwardCache> {
    check_inputs(bag, assignment, model)?;
    let mut prototypes = Array2::zeros((model.k, model.dim));
    let mut clusters = Vec::with_capacity(model.k);
    for (k, indices) in partition_bag(assignment).into_iter().enumerate() {
        if indices.is_empty() {
            clusters.push(ClusterCache {
                indices,
                alpha: Array1::zeros(0),
                activations: Array2::zeros((0, model.hidden())),
            });
            continue;
        }
        let members = bag.embeddings.select(Axis(0), &indices);
        let (alpha, activations, prototype) = pool_with_activations(members.view(), model.head(k));
        prototypes.row_mut(k).assign(&prototype);
        clusters.push(ClusterCache {
            indices,
            alpha,
            activations,
        });
    }
    let z = aggregate_bag(prototypes.view(), model.params.beta.view());
    let (logits, probs) = classify(z.view(), model);
    Ok(ForwardCache {
        clusters,
        prototypes,
        z,
        logits,
        probs,
    })
}

/// Cross-entropy of one forward pass against `label`.
pub fn cross_entropy(cache: &ForwardCache, label: u8) -> f64 {
    log_sum_exp(cache.logits.view()) - cache.logits[usize::from(label)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    pub penalty: f64,
}

/// `sum_i CE(bag_i) + gamma * ||beta||_1`, bags summed in the given order.
pub fn batch_loss(items: &[(&Bag, &ClusterAssignment)], model: &CsmilModel, gamma: f64) -> Result<LossParts> {
    if !(gamma >= 0.0) {
        return Err(Error::config(format!("gamma must be non-negative, got {gamma}")));
    }
    let mut data = 0.0;
    for (bag, assignment) in items {
        let cache = bag_forward(bag, assignment, model)?;
        data += cross_entropy(&cache, bag.label);
    }
    let penalty = gamma * model.params.beta.iter().map(|b| b.abs()).sum::<f64>();
    Ok(LossParts {
        total: data + penalty,
        data,
        penalty,
    })
}
