//! Non-autoregressive translation with CTC.
//!
//! The crate covers the whole toy-scale pipeline: corpus handling and
//! synthetic tasks, source upsampling (token duplication or mask insertion,
//! fixed or dynamic ratio), the CTC objective with analytic gradients,
//! Hungarian-matched embedding distillation from a frozen teacher, a small
//! transformer encoder with hand-written backpropagation, a back-off n-gram
//! LM with ARPA I/O, LM-fused CTC prefix beam search, and corpus BLEU.

pub mod assignment;
pub mod beam;
pub mod corpus;
pub mod ctc;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ngram;
pub mod upsample;

pub use error::{Error, Result};
