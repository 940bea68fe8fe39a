//! Scoring back-end: LDA down-projection, two-covariance PLDA, the
//! center/length-norm/LDA/PLDA pipeline, and the concatenation ensemble.

pub mod linalg;

mod lda;
mod model;
mod pipeline;

pub use lda::{fit_lda, LdaTransform};
pub use model::{fit_plda, plda_llr, PldaModel};
pub use pipeline::{ensemble_concat, fit_backend, Backend, BackendConfig};
