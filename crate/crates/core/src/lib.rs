//! Few-shot classification over pre-extracted feature embeddings.
//!
//! The engine scores queries against class prototypes with three metrics
//! (negative squared Euclidean distance, cosine similarity and the
//! exponential maximum-log-likelihood score), fuses the three with a
//! Gaussian score model, and refines prototypes transductively on
//! imbalanced query batches. Synthetic exponential stores with a known
//! Bayes-optimal classifier make every piece checkable without a network.

pub mod diagnostics;
pub mod episode;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod metrics;
pub mod mvn;
pub mod store;
pub mod synthetic;
pub mod transductive;

pub use episode::{Episode, EpisodePlan, QueryCounts, Task};
pub use error::{Error, Result};
pub use fusion::{FusionModel, ScoreSampleSet};
pub use metrics::{ClassModel, Metric, ScoreTriple};
pub use store::{EmbeddingStore, SplitManifest};
pub use synthetic::{GroundTruth, SyntheticSpec};
