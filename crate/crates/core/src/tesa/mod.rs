//! Pair verifier: a position-encoding-free Transformer encoder over the
//! CLS/SEP-delimited chunk embeddings of two utterances, classifying
//! same-speaker versus different-speaker and scoring by logit difference.

mod model;
mod pairs;
mod train;

pub use model::{
    assemble_pair_input, score_from_logits, PairInput, TesaConfig, TesaModel, TokenKind,
};
pub use pairs::{
    build_pair_dataset, read_pair_manifest, write_pair_manifest, PairDataset, PairExample,
};
pub use train::{train_tesa, TesaTrainConfig, TesaTrainReport};
