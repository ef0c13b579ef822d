//! Unsupervised domain adaptation for retrieval embeddings with
//! complementary pseudo labels: per-sample reliable neighbor sets and
//! merged neighbor groups, trained jointly with a labeled source domain.

pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod groups;
pub mod losses;
pub mod model;
pub mod neighbors;
pub mod optim;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use config::{Ablation, PolicyName, PredictorMode, TrainConfig};
pub use data::{Dataset, SampleLabel};
pub use embedding::{FeatureVector, MemoryBank};
pub use error::{Error, Result};
pub use eval::{MetricsReport, PairQuality, RetrievalMetrics};
pub use groups::{GroupPartition, MergePolicy};
pub use neighbors::{GppLite, NeighborMemory, NeighborSet};
pub use synth::{generate, SynthConfig, SynthDomains};
pub use trainer::{
    pseudo_labels, read_checkpoint_info, train, CheckpointInfo, EpochRecord, RunSummary, Trainer,
};
