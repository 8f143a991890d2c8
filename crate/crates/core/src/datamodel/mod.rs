//! Bags, datasets and their on-disk representation.

mod folds;
mod format;
mod manifest;
mod synth;

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

pub use folds::{split_folds, FoldAssignment};
pub use format::{decode_bag, encode_bag, read_bag_file, save_bag, HEADER_LEN, MAGIC};
pub use manifest::{load_dataset, save_dataset, Manifest, ManifestEntry};
pub use synth::{generate_synthetic, ComponentKind, GroundTruth, SynthConfig};

/// One bag: a set of instance embeddings sharing a binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    /// 0 = negative, 1 = positive.
    pub label: u8,
    /// `n × d`, one row per instance.
    pub embeddings: Array2<f64>,
}

impl Bag {
    pub fn new(id: impl Into<String>, label: u8, embeddings: Array2<f64>) -> Result<Self> {
        let bag = Bag {
            id: id.into(),
            label,
            embeddings,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::config(format!(
                "bag {}: label must be 0 or 1, got {}",
                self.id, self.label
            )));
        }
        if self.n_instances() == 0 {
            return Err(Error::config(format!("bag {} has no instances", self.id)));
        }
        if self.dim() == 0 {
            return Err(Error::config(format!("bag {} has zero dimension", self.id)));
        }
        if self.embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bag {}", self.id)));
        }
        Ok(())
    }

    pub fn n_instances(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn instance(&self, j: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(j)
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    /// Copy of this bag keeping only the rows in `keep` (in the given order).
    /// Returns `None` if nothing is kept.
    pub fn select_instances(&self, keep: &[usize]) -> Option<Bag> {
        if keep.is_empty() {
            return None;
        }
        Some(Bag {
            id: self.id.clone(),
            label: self.label,
            embeddings: self.embeddings.select(ndarray::Axis(0), keep),
        })
    }
}

/// An ordered collection of bags of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, bags: Vec<Bag>) -> Result<Self> {
        let dim = bags.first().ok_or(Error::EmptyDataset)?.dim();
        let ds = Dataset {
            name: name.into(),
            dim,
            bags,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bags.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut ids = BTreeSet::new();
        for bag in &self.bags {
            bag.validate()?;
            if bag.dim() != self.dim {
                return Err(Error::DimensionMismatch {
                    context: format!("bag {}", bag.id),
                    expected: self.dim,
                    found: bag.dim(),
                });
            }
            if !ids.insert(bag.id.as_str()) {
                return Err(Error::config(format!("duplicate bag id {}", bag.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Total instance count `N`.
    pub fn n_instances(&self) -> usize {
        self.bags.iter().map(Bag::n_instances).sum()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0, 0];
        for bag in &self.bags {
            counts[usize::from(bag.label)] += 1;
        }
        counts
    }

    /// Stacks the instances of the selected bags into one `N × d` matrix,
    /// in bag order then instance order.
    pub fn stack_instances(&self, bag_indices: &[usize]) -> Array2<f64> {
        let total: usize = bag_indices.iter().map(|&i| self.bags[i].n_instances()).sum();
        let mut out = Array2::zeros((total, self.dim));
        let mut row = 0;
        for &i in bag_indices {
            let emb = &self.bags[i].embeddings;
            out.slice_mut(ndarray::s![row..row + emb.nrows(), ..]).assign(emb);
            row += emb.nrows();
        }
        out
    }

    /// Same dataset with bags sorted by id.
    pub fn sorted_by_id(&self) -> Dataset {
        let mut bags = self.bags.clone();
        bags.sort_by(|a, b| a.id.cmp(&b.id));
        Dataset {
            name: self.name.clone(),
            dim: self.dim,
            bags,
        }
    }
}
