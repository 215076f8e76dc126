//! Counterfactual masked-image fine-tuning on a synthetic causal benchmark.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors and a reverse-mode tape with a finite-difference
//!   oracle.
//! - [`scm`]: the structural causal image generator and its file format.
//! - [`model`]: the small patch-attention classifier, checkpoints and teacher
//!   pre-training.
//! - [`relevance`]: gradient-weighted attention rollout (class activation
//!   maps) and threshold partitions.
//! - [`counterfactual`]: masking and refilling strategies.
//! - [`train`]: objectives, AdamW with warm-up cosine schedule, fine-tuning.
//! - [`eval`]: accuracy, mask-quality metrics, weight-space ensembles.
//! - [`harness`]: experiment configuration and the command implementations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod counterfactual;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod relevance;
pub mod rng;
pub mod scm;
pub mod tensor;
pub mod train;

pub use autodiff::{Bindings, Graph, GraphError, NodeId, ParamSet};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use scm::{Dataset, PatchImage, PixelMask, SampleRecord, ScmSpec, Split};
pub use tensor::{Scalar, Tensor};
