//! Treatment-effect estimation on networked observational data with a
//! disentangled graph causal model.
//!
//! Unit features are split by a learned instance-wise mask into an
//! adjustment part and a confounder part. The adjustment part is aggregated
//! over each unit's neighbourhood with graph attention; the confounder part
//! is aggregated separately over same-treatment and opposite-treatment
//! neighbours, reusing the adjustment attention. A mapping network predicts
//! the counterfactual confounder for every unit, and two outcome heads (one
//! per treatment arm) produce factual and counterfactual predictions.
//!
//! The numeric core is generic over [`Real`] (`f32`/`f64`); the aliases at
//! the crate root fix it to `f64`, which the CLI and gradient checks use.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod projection;
pub mod scalar;
pub mod synthesis;
pub mod tape;
pub mod train;

pub use dataset::{load_dataset, save_dataset, GroundTruth, ObservationalDataset};
pub use error::{Error, Result};
pub use graph::{split_units, treatment_subgraphs, Graph, Split, SplitIndex, TreatmentSubgraphs};
pub use model::{ModelConfig, Neighborhoods, Nonlinearity, Variant};
pub use experiment::{replication_study, run_variant, sweep, SweepRow, VariantRun, WeightGrid};
pub use metrics::{aggregate_replications, ate_error, evaluate, pehe_sqrt, MetricsReport, SummaryRow};
pub use objectives::{LossWeights, SinkhornConfig};
pub use projection::{centroid_separation, project_embeddings, EmbeddingKind, ProjectedPoint};
pub use scalar::Real;
pub use synthesis::{synthesize, SynthesisConfig, SynthesizedBundle};
pub use train::{train, FittedModel, TrainConfig, TrainedModel};

/// Dataset with `f64` features and outcomes.
pub type Dataset = ObservationalDataset<f64>;
/// Ground-truth potential outcomes in `f64`.
pub type Truth = GroundTruth<f64>;
/// Full parameter set in `f64`.
pub type ModelParams = model::Params<f64>;
pub type Fitted = FittedModel<f64>;
pub type Trained = TrainedModel<f64>;
pub type Checkpoint = model::checkpoint::Checkpoint<f64>;
pub type Outputs = model::ForwardOutputs<f64>;
