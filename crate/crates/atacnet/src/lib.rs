#![allow(clippy::needless_range_loop)]

//! A self-contained f64 neural-network micro-framework built around
//! attentional activation (ATAC) units: channel-attention gates used as
//! drop-in replacements for ReLU, plus the ResNet hosts, ablation baseline
//! units, cost accounting, and a deterministic CIFAR training recipe.

pub mod autograd;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod seeding;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{
    gradcheck, GradCheckConfig, GradCheckReport, Objective, ParamId, ParamKind, ParamStore,
    Parameter, Tape, TapeObjective, ValueId,
};
pub use error::{Error, Result};
pub use graph::{ActivationSite, HostSpec, LayerSpec, ModelGraph, ReplacementPolicy};
pub use model::{CheckpointMeta, Model, ModelObjective};
pub use nn::{activate, ActivationKind, AtacUnit, BatchNorm, BnMode};
pub use tensor::{ConvSpec, Tensor};
pub use train::{MetricsRow, TrainConfig};
