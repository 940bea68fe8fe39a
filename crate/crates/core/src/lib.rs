//! Speaker-verification toolkit.
//!
//! End-to-end pieces: a synthetic corpus generator, an MFCC front end, two
//! speaker-classification architectures (a TDNN baseline and a Transformer
//! encoder) with embedding taps, a PLDA back-end, a Transformer pair
//! verifier, and EER/minDCF/DET evaluation. Everything runs on a small
//! f64 tensor library with reverse-mode autodiff; no external ML runtime.

pub mod corpus;
pub mod dsp;
pub mod error;
pub mod io;
pub mod metrics;
pub mod models;
pub mod plda;
pub mod tensor;
pub mod tesa;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParameterSet, Tape, TapeMode, Tensor, Var};
