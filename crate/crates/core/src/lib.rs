//! Graph-based predictive domain adaptation with domain-specific batch
//! normalization, plus continuous test-time refinement.

pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod domain_graph;
pub mod error;
pub mod gbn;
pub mod gradcheck;
pub mod network;
pub mod prediction;
pub mod refinement;
pub mod seeds;
pub mod selftest;
pub mod training;

pub use domain_graph::{BnParams, DomainGraph, DomainId, DomainNode, KernelConfig, Metadata, NodeRole, ParamSet};
pub use error::{AdaGraphError, Result};
pub use gbn::{BnMode, EffectiveScaleBias, GbnState};
pub use network::{Conditioning, Gradients, Loss, LossConfig, Network, Sample, UpdateScope};
pub use prediction::{predict_from_image, predict_from_metadata, MetadataClassifier, MixtureDistribution, TargetModel};
pub use refinement::{RefineMode, RefinementBuffer, RefinementEngine};
pub use training::{DomainBatchSchedule, Stage2Mode, TrainConfig, TrainLog};
