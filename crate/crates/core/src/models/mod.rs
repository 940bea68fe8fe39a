//! Speaker classifiers and embedding extraction: the Transformer-encoder
//! model, the TDNN baseline, and the tap/chunk/average extraction path.

pub mod config;
pub mod encoder;
pub mod extract;
pub mod init;
mod svector;
mod tdnn;

pub use config::{NormPosition, SvectorConfig, Tap, TdnnConfig};
pub use encoder::{
    encoder_layer_forward, encoder_stack, multihead_self_attention, sinusoidal_pe, EncoderSpec,
    Forward,
};
pub use extract::{average, chunk_embeddings, extract_embedding};
pub use svector::{SvectorModel, SvectorOutputs};
pub use tdnn::{TdnnModel, TdnnOutputs};

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::kv::{kv_get, parse_kv};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::tensor::ParameterSet;

/// Either classifier, behind one checkpoint and extraction surface.
#[derive(Debug, Clone)]
pub enum Model {
    Svector(SvectorModel),
    Tdnn(TdnnModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Svector(_) => "svector",
            Model::Tdnn(_) => "tdnn",
        }
    }

    pub fn emb_dim(&self) -> usize {
        match self {
            Model::Svector(m) => m.config.emb_dim,
            Model::Tdnn(m) => m.config.emb_dim,
        }
    }

    pub fn n_speakers(&self) -> usize {
        match self {
            Model::Svector(m) => m.config.n_speakers,
            Model::Tdnn(m) => m.config.n_speakers,
        }
    }

    pub fn default_tap(&self) -> Tap {
        match self {
            Model::Svector(_) => Tap::F3,
            Model::Tdnn(_) => Tap::Xvec,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        match self {
            Model::Svector(m) => &m.params,
            Model::Tdnn(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        match self {
            Model::Svector(m) => &mut m.params,
            Model::Tdnn(m) => &mut m.params,
        }
    }

    /// Forward to the classification logits.
    pub fn logits(
        &self,
        tape: &mut crate::tensor::Tape,
        input: &crate::tensor::Tensor,
    ) -> Result<crate::tensor::Var> {
        match self {
            Model::Svector(m) => Ok(m.forward(tape, input)?.logits),
            Model::Tdnn(m) => Ok(m.forward(tape, input)?.logits),
        }
    }

    /// Forward plus mean cross-entropy; returns the loss and the parameter
    /// bindings for gradient application.
    pub fn classifier_loss(
        &self,
        tape: &mut crate::tensor::Tape,
        input: &crate::tensor::Tensor,
        labels: &[usize],
    ) -> Result<(crate::tensor::Var, crate::tensor::TapeBindings)> {
        match self {
            Model::Svector(m) => {
                let (loss, out) = m.classifier_loss(tape, input, labels)?;
                Ok((loss, out.binds))
            }
            Model::Tdnn(m) => {
                let (loss, out) = m.classifier_loss(tape, input, labels)?;
                Ok((loss, out.binds))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = match self {
            Model::Svector(m) => m.config.to_header(),
            Model::Tdnn(m) => m.config.to_header(),
        };
        write_checkpoint(path, &header, self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        let map = parse_kv(&header)?;
        match kv_get(&map, "kind")? {
            "svector" => {
                let config = SvectorConfig::from_header(&map)?;
                Ok(Model::Svector(SvectorModel { config, params }))
            }
            "tdnn" => {
                let config = TdnnConfig::from_header(&map)?;
                Ok(Model::Tdnn(TdnnModel { config, params }))
            }
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}
