//! Dense low-rank adaptation on a toy LLaMA-style decoder.
//!
//! The crate provides a small reverse-mode tensor substrate, three adapter
//! families (LoRA, RED scale/bias edits and DenseLoRA with a shared
//! encoder/decoder codec), a decoder-only transformer exposing the seven
//! projection sites, an AdamW training loop with a linear warmup schedule,
//! and parameter-count / update-density analysis.

pub mod adapters;
pub mod analysis;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod param;
pub mod rng;
pub mod site;
pub mod tensor;
pub mod training;

pub use adapters::{AdapterCheckpoint, AdapterConfig, AdapterVariant};
pub use analysis::{count_model, density_report, DensityOptions, DensityReport, ParamCountReport};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{activation, ActivationKind, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::{kaiming_uniform_init, Rng};
pub use tensor::Tensor;
pub use site::{Site, TargetSet};
pub use model::{AdaptedModel, ModelConfig};
pub use training::{evaluate, lr_at, train, train_with, MetricsHistory, Task, TaskKind, TrainConfig, TrainOutcome};
