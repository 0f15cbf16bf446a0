//! Metric-preserving sonification: learn a map from feature vectors into
//! audio whose pairwise perceptual distances track the source distances.

pub mod audio;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gan;
pub mod geometry;
pub mod testgen;
pub mod training;

pub use audio::{AudioClip, AudioMetric, FeatureFrame, FeatureParams};
pub use datasets::{AudioCorpus, FeatureRecord, FeatureTable};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, Sonifier};
pub use gan::{DiscriminatorConfig, GeneratorConfig, ModelState};
pub use geometry::{DistanceMatrix, Metric, MetricBatchStats};
pub use training::TrainConfig;
