//! Attention-based contextual biasing for encoder-decoder speech recognition.
//!
//! The crate contains everything needed to train and evaluate a small
//! biased recogniser end to end on CPU:
//!
//! * [`tensor`], [`autograd`], [`optim`]: `f64` tensors, a reverse-mode tape
//!   and Adam with warmup.
//! * [`vocab`], [`bias`]: vocabulary with reserved tokens, bias lists,
//!   training-time phrase sampling and `<sob>`/`<eob>` annotation.
//! * [`model`]: audio encoder, bias encoder and the bias decoder whose
//!   bias-attention scores double as a bias-phrase index distribution.
//! * [`losses`]: CTC, attention and bias-index losses and their weighted sum.
//! * [`decoding`]: plain beam search and bias-phrase-boosted beam search.
//! * [`metrics`]: alignment, WER and biased/unbiased error attribution.
//! * [`corpus`], [`config`], [`train`], [`eval`]: the synthetic experiment harness.

pub mod autograd;
pub mod bias;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use autograd::{Gradients, ParamId, ParameterStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
