//! DGCNet: a fully dense 3D network whose bottleneck convolutions use dynamic
//! group convolution, for hyperspectral patch classification.
//!
//! The crate is self-contained: a small reverse-mode autodiff core
//! ([`tape`], [`kernels`]), the DGC layer ([`dgc`]), the network
//! ([`densenet`]), data handling ([`hsi`], [`metrics`]), the training engine
//! ([`train`]) and the checkpoint format ([`checkpoint`]).

pub mod checkpoint;
pub mod dgc;
pub mod densenet;
pub mod error;
pub mod hsi;
pub mod kernels;
pub mod metrics;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dgc::{dgc_macs, keep_count, select_channels, DgcConfig, DgcLayer, MacReport, Selection};
pub use densenet::{build_model, growth_rate, BnMode, ExecPath, ForwardOptions, Model, ModelConfig};
pub use error::{Error, Result};
pub use hsi::{load_cube, save_cube, stratified_split, synth_cube, HsiCube, PatchExtractor, SplitRatio, SplitSpec};
pub use metrics::{compute_metrics, Metrics};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::{Shape5, Tensor5};
pub use train::{ensemble_predict, eps_schedule, fit, fit_runs, Adam, PatchDataset, RunResult, Schedule, TrainConfig};
