//! Engine for beat-to-beat interval sequence modeling.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`] — flat row-major tensors and reverse-mode autodiff
//!   on a Wengert tape, plus a finite-difference gradient checker.
//! * [`nn`] — causal dilated convolutions, batch/layer norm, pooling, linear,
//!   dropout, and the parameter store shared by all layers.
//! * [`ssm`] — selective state-space recurrence: discretization, sequential
//!   and blocked parallel scans, the fused training-path op, and the gated
//!   block + residual wrapper built from them.
//! * [`model`] — the full network (TCN stack -> max pool -> SSM wrapper ->
//!   global pooling -> FC head) and its checkpoint format.
//! * [`data`] — RR-interval records: CSV parsing, cleaning, pre-onset
//!   cropping, 1 Hz tachogram resampling, windowing, subject-wise splits,
//!   the synthetic generator, and the binary segment cache.
//! * [`train`] — cross-entropy, AdamW with decoupled weight decay, and the
//!   early-stopping training loop.
//! * [`metrics`] — confusion counts, sensitivity/specificity, weighted F1,
//!   tie-aware AUROC, AUPRC, and multi-split aggregation.
//! * [`complexity`] — closed-form parameter/FLOP accounting per layer.
//! * [`pipeline`] — the end-to-end flows the CLI exposes (synth, prepare,
//!   train, eval, predict).

pub mod complexity;
pub mod data;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod ssm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use tape::{grad_check, NodeId, Tape};
pub use tensor::{Element, Tensor};

pub type Result<T> = std::result::Result<T, Error>;
