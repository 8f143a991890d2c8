//! Cluster-level sparse multi-instance learning.
//!
//! Bags of instance embeddings are clustered against `K` global centers, each
//! cluster is pooled with its own attention head, and the per-cluster
//! prototypes are combined through a global weight vector `beta` that carries
//! an l1 penalty. Clusters whose weight is driven to exactly zero are dropped
//! from the bag representation.
//!
//! The crate also ships the machinery used to check the method at desk scale:
//! a planted-cluster data generator, Lasso solvers with design diagnostics for
//! support-recovery experiments, and cross-validated evaluation protocols.

pub mod artifact;
pub mod clustering;
pub mod datamodel;
pub mod error;
pub mod evalx;
pub mod model;
pub mod optim;
pub mod recovery;
pub mod seed;

pub use clustering::{ClusterAssignment, ClusterModel, KMeansConfig};
pub use datamodel::{Bag, Dataset, FoldAssignment, GroundTruth, SynthConfig};
pub use error::{Error, Result};
pub use evalx::MetricReport;
pub use model::{CsmilModel, ForwardCache, ModelConfig, Params};
pub use optim::{GradientSet, TrainConfig, TrainHistory};
pub use recovery::{LassoSolution, PhaseTable, RecoveryProblem};
