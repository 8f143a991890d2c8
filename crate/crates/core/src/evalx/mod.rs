//! Metrics, cross-validation and the experiment protocols built on them.

pub mod cv;
pub mod experiments;
pub mod metrics;
pub mod plot;

pub use cv::{cross_validate, cross_validate_with_hook, CvConfig, CvReport, FoldReport, MeanMetrics};
pub use experiments::{
    ablate_clusters, cluster_composition, identify_selected_clusters, sweep_gamma, sweep_k, AblationReport,
    ClusterComposition, Identification, SweepReport, DEFAULT_GAMMA_GRID, DEFAULT_K_GRID,
};
pub use metrics::{compute_metrics, trapezoid_area, Confusion, MetricReport};
