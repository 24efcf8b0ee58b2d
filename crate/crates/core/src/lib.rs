//! Multi-treatment causal machine learning toolkit.
//!
//! The crate covers the full evaluation pipeline for programmes with several
//! treatment arms: dataset handling with balance diagnostics, honest random
//! forests for propensity scores, common-support trimming, a modified causal
//! forest yielding outcome weights for every aggregation level (IATE, GATE,
//! BGATE, ATE, ATET), depth-bounded optimal policy trees with capacity
//! constraints, k-means++ clustering of individualised effects, and synthetic
//! data-generating processes with known ground truth for validation.

pub mod cluster;
pub mod data;
pub mod effects;
pub mod error;
pub mod forest;
pub mod mcf;
pub mod policy;
pub mod pseudostart;
pub mod report;
mod rng;
pub mod stats;
pub mod support;
pub mod synth;

pub use cluster::{ClusterModel, ClusterProfileTable, KmeansParams};
pub use data::{
    ColumnKind, ColumnSpec, Dataset, DescriptiveReport, FeatureKind, FeatureMatrix, Role, Schema,
};
pub use effects::{Contrast, EffectCurve, EffectEstimate, EffectsContext, EstimandKind};
pub use error::{Error, Result};
pub use forest::{ForestModel, ForestParams};
pub use mcf::{CausalForest, McfParams, WeightVector};
pub use policy::{
    ConstraintSolver, Constraints, PolicyScores, PolicyTree, PolicyTreeParams, PolicyValue,
};
pub use pseudostart::PseudoStartConfig;
pub use support::{SupportReport, SupportRule};
pub use synth::{DgpSpec, MonthlyTemplate, PropensityArm, Surface};
