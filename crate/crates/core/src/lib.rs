//! Zero-shot knowledge distillation.
//!
//! The pipeline: train a LeNet-5 teacher ([`distill::train_teacher`]), turn
//! the cosine similarities between its final-layer class templates into
//! Dirichlet concentration parameters ([`prior`]), sample softmax targets and
//! optimise random-noise images until the teacher reproduces them
//! ([`impressions`]), optionally augment those images ([`augment`]), and
//! distil a LeNet-5-Half student on the synthetic transfer set alone
//! ([`distill::zskd_distill`]).

pub mod augment;
mod codec;
pub mod data;
pub mod distill;
pub mod error;
pub mod impressions;
pub mod models;
pub mod prior;
pub mod rng;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use tensor::{Graph, Padding, Reduction, Tensor, Var};
