//! Starting-point (SP) regularization for fine-tuning small convolutional networks.
//!
//! The crate bundles a from-scratch training engine ([`net`], [`optim`]), the
//! regularizer family pulling fine-tuned weights toward a pre-trained reference
//! ([`penalties`], [`fisher`]), desk-scale transfer tasks ([`data`]), the analysis
//! toolchain built on top of them ([`transfer`]), and an exact checker of the
//! closed-form quadratic-objective minimizer ([`theory`]).

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod fisher;
pub mod net;
pub mod optim;
pub mod penalties;
pub mod tensor;
pub mod theory;
pub mod transfer;

pub use data::{Dataset, TransferTaskPair};
pub use error::{Error, Result};
pub use fisher::{estimate_fisher_diag, FisherDiag};
pub use net::{desknet, Forward, LayerSpec, Network, ParamSlice, ParamVector, Shape3};
pub use optim::{evaluate, lr_schedule, train, CropMode, EarlyStop, TrainConfig, TrainHistory, UpdateMode};
pub use penalties::{build_channel_groups, GroupStructure, PenaltyConfig, PenaltyKind};
pub use tensor::Tensor;
