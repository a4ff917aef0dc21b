//! Salient-object detection on a frozen patch-transformer backbone, small
//! enough to train and verify on a single CPU.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] / [`graph`] - a reverse-mode autodiff engine over dense
//!   row-major tensors. Ops record onto a tape owned by a [`graph::Graph`];
//!   `backward` replays the tape in reverse and accumulates gradients into
//!   [`tensor::Param`] slots.
//! * [`fft`] / [`spectral`] - radix-2 FFT over 8x8 patches and the learnable
//!   complex-valued per-channel filter built on top of it.
//! * [`blocks`] - the fusion blocks: frequency adapters, multi-scale fusion,
//!   attention-based context fusion, and gated refinement.
//! * [`model`] - the frozen encoder stub, the prompt bank, and the four-level
//!   decode loop that ties the blocks into one network.
//! * [`loss`] / [`optim`] / [`train`] - BCE-with-logits over all four heads,
//!   decoupled-weight-decay Adam, and the training loop.
//! * [`metrics`] / [`data`] - the four standard saliency metrics and the
//!   seeded synthetic dataset generator.
//! * [`netpbm`] / [`checkpoint`] / [`config`] - binary image and weight
//!   formats plus the strict JSON run configuration.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use graph::Graph;
pub use metrics::MetricsReport;
pub use model::{ForwardOutput, SplfModel};
pub use scalar::Scalar;
pub use tensor::{Param, Tensor};
