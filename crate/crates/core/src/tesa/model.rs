//! The pair-verifier model.
//!
//! Input for one trial: `[CLS, s_1..s_L, SEP, t_1..t_M, SEP]`, where the s
//! and t rows are the chunk embeddings of the two utterances. A learnable
//! utterance embedding is added to each utterance's rows (and to the SEP
//! that terminates it; CLS gets neither). There is no position table
//! anywhere: predictions must not depend on chunk order. The encoder output
//! at the CLS position feeds two affine+ReLU stages and a 2-way classifier;
//! all other encoder outputs are discarded.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::kv::{kv_f64, kv_get, kv_usize, parse_kv};
use crate::io::{read_checkpoint, write_checkpoint};
use crate::models::config::NormPosition;
use crate::models::encoder::{encoder_stack, EncoderSpec, Forward};
use crate::models::init;
use crate::tensor::{ParameterSet, SeqMask, Tape, TapeBindings, Tensor, Var};

/// Class index 0 is "different speaker", 1 is "same speaker".
pub const LABEL_DIFF: usize = 0;
pub const LABEL_SAME: usize = 1;

#[derive(Debug, Clone)]
pub struct TesaConfig {
    /// Chunk embedding width (512 at full scale).
    pub emb_dim: usize,
    pub n_layers: usize,
    pub adim: usize,
    /// Head count; defaults to 5, which divides the stock attention dim
    /// of 250.
    pub n_heads: usize,
    pub encoder_units: usize,
    /// Width of the two post-CLS affine stages (1000 at full scale).
    pub hidden_dim: usize,
    pub norm_position: NormPosition,
    pub dropout: f64,
}

impl TesaConfig {
    pub fn new(emb_dim: usize) -> Self {
        TesaConfig {
            emb_dim,
            n_layers: 9,
            adim: 250,
            n_heads: 5,
            encoder_units: 1024,
            hidden_dim: 1000,
            norm_position: NormPosition::Post,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("emb_dim", self.emb_dim),
            ("n_layers", self.n_layers),
            ("adim", self.adim),
            ("n_heads", self.n_heads),
            ("encoder_units", self.encoder_units),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.adim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "adim {} not divisible by n_heads {}",
                self.adim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn to_header(&self) -> String {
        format!(
            "kind=tesa\nemb_dim={}\nn_layers={}\nadim={}\nn_heads={}\nencoder_units={}\nhidden_dim={}\nnorm_position={}\ndropout={}\n",
            self.emb_dim,
            self.n_layers,
            self.adim,
            self.n_heads,
            self.encoder_units,
            self.hidden_dim,
            self.norm_position.as_str(),
            self.dropout
        )
    }

    fn from_header(map: &BTreeMap<String, String>) -> Result<Self> {
        let cfg = TesaConfig {
            emb_dim: kv_usize(map, "emb_dim")?,
            n_layers: kv_usize(map, "n_layers")?,
            adim: kv_usize(map, "adim")?,
            n_heads: kv_usize(map, "n_heads")?,
            encoder_units: kv_usize(map, "encoder_units")?,
            hidden_dim: kv_usize(map, "hidden_dim")?,
            norm_position: NormPosition::parse(kv_get(map, "norm_position")?)?,
            dropout: kv_f64(map, "dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-token segment kind of an assembled pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Cls,
    Utt1,
    Sep,
    Utt2,
}

/// An assembled pair before the input projection: `K x emb_dim` token rows
/// (special tokens and utterance embeddings already added) plus kinds.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub tokens: Tensor,
    pub kinds: Vec<TokenKind>,
}

impl PairInput {
    pub fn k(&self) -> usize {
        self.kinds.len()
    }
}

#[derive(Debug, Clone)]
pub struct TesaModel {
    pub config: TesaConfig,
    pub params: ParameterSet,
}

impl TesaModel {
    pub fn new(config: TesaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        for tok in ["tok.cls", "tok.sep", "tok.u1", "tok.u2"] {
            init::insert_embedding(&mut params, seed, tok, config.emb_dim)?;
        }
        init::insert_xavier(&mut params, seed, "ffnn1.w", config.emb_dim, config.adim)?;
        init::insert_bias(&mut params, "ffnn1.b", config.adim)?;
        for i in 0..config.n_layers {
            init::insert_encoder_layer(
                &mut params,
                seed,
                &format!("enc.{i}"),
                config.adim,
                config.n_heads,
                config.encoder_units,
            )?;
        }
        init::insert_xavier(&mut params, seed, "ffnn2.w", config.adim, config.hidden_dim)?;
        init::insert_bias(&mut params, "ffnn2.b", config.hidden_dim)?;
        init::insert_xavier(
            &mut params,
            seed,
            "ffnn3.w",
            config.hidden_dim,
            config.hidden_dim,
        )?;
        init::insert_bias(&mut params, "ffnn3.b", config.hidden_dim)?;
        init::insert_xavier(&mut params, seed, "clf.w", config.hidden_dim, 2)?;
        init::insert_bias(&mut params, "clf.b", 2)?;
        Ok(TesaModel { config, params })
    }

    fn check_svecs(&self, svecs: &Tensor, which: &str) -> Result<()> {
        if svecs.rank() != 2 || svecs.shape()[1] != self.config.emb_dim {
            return Err(Error::BadShape {
                op: "assemble_pair_input",
                shape: svecs.shape().to_vec(),
                reason: format!("{which}: expected [chunks, {}]", self.config.emb_dim),
            });
        }
        if svecs.shape()[0] == 0 {
            return Err(Error::EmptyUtterance(format!("{which} has no chunks")));
        }
        Ok(())
    }

    /// Token assembly on the tape: `[CLS, s.., SEP, t.., SEP]` with the
    /// utterance embeddings added (each SEP takes the embedding of the
    /// utterance it terminates). Gradients flow into the special tokens.
    fn assemble_on_tape(
        &self,
        fwd: &mut Forward<'_>,
        svecs1: Var,
        svecs2: Var,
    ) -> Result<(Var, Vec<TokenKind>)> {
        let l = fwd.tape.shape(svecs1)[0];
        let m = fwd.tape.shape(svecs2)[0];
        let cls = fwd.param("tok.cls")?;
        let sep = fwd.param("tok.sep")?;
        let u1 = fwd.param("tok.u1")?;
        let u2 = fwd.param("tok.u2")?;
        let seg1 = fwd.tape.add_bias(svecs1, u1)?;
        let sep1 = fwd.tape.add(sep, u1)?;
        let seg2 = fwd.tape.add_bias(svecs2, u2)?;
        let sep2 = fwd.tape.add(sep, u2)?;
        let tokens = fwd.tape.stack_rows(&[cls, seg1, sep1, seg2, sep2])?;
        let mut kinds = Vec::with_capacity(l + m + 3);
        kinds.push(TokenKind::Cls);
        kinds.extend(std::iter::repeat_n(TokenKind::Utt1, l));
        kinds.push(TokenKind::Sep);
        kinds.extend(std::iter::repeat_n(TokenKind::Utt2, m));
        kinds.push(TokenKind::Sep);
        Ok((tokens, kinds))
    }

    fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            adim: self.config.adim,
            n_heads: self.config.n_heads,
            norm_position: self.config.norm_position,
            dropout: self.config.dropout,
        }
    }

    fn head(&self, fwd: &mut Forward<'_>, cls_out: Var) -> Result<Var> {
        let h = fwd.affine(cls_out, "ffnn2.w", Some("ffnn2.b"))?;
        let h = fwd.tape.activation(h, 0.0)?;
        let h = fwd.affine(h, "ffnn3.w", Some("ffnn3.b"))?;
        let h = fwd.tape.activation(h, 0.0)?;
        fwd.affine(h, "clf.w", Some("clf.b"))
    }

    /// Forward one pair to the two logits.
    pub fn forward_single(
        &self,
        tape: &mut Tape,
        svecs1: &Tensor,
        svecs2: &Tensor,
    ) -> Result<(Var, TapeBindings)> {
        self.check_svecs(svecs1, "utterance 1")?;
        self.check_svecs(svecs2, "utterance 2")?;
        let v1 = tape.leaf(svecs1);
        let v2 = tape.leaf(svecs2);
        let mut fwd = Forward::new(&self.params, tape);
        let (tokens, _) = self.assemble_on_tape(&mut fwd, v1, v2)?;
        let h = fwd.affine(tokens, "ffnn1.w", Some("ffnn1.b"))?;
        let h = fwd.tape.dropout(h, self.config.dropout)?;
        let enc = encoder_stack(
            &mut fwd,
            h,
            self.config.n_layers,
            &self.encoder_spec(),
            None,
        )?;
        let cls_out = fwd.tape.select_row(enc, 0)?;
        let logits = self.head(&mut fwd, cls_out)?;
        Ok((logits, fwd.binds))
    }

    /// Forward a batch of variable-size pairs: pad to the longest token
    /// count, mask padded positions out of attention and normalization.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        pairs: &[(&Tensor, &Tensor)],
    ) -> Result<(Var, TapeBindings)> {
        if pairs.is_empty() {
            return Err(Error::Config("empty pair batch".into()));
        }
        for (a, b) in pairs {
            self.check_svecs(a, "utterance 1")?;
            self.check_svecs(b, "utterance 2")?;
        }
        let mut fwd_tokens = Vec::with_capacity(pairs.len());
        let mut lens = Vec::with_capacity(pairs.len());
        {
            let mut fwd = Forward::new(&self.params, tape);
            for (a, b) in pairs {
                let v1 = fwd.tape.leaf(a);
                let v2 = fwd.tape.leaf(b);
                let (tokens, kinds) = self.assemble_on_tape(&mut fwd, v1, v2)?;
                lens.push(kinds.len());
                fwd_tokens.push(tokens);
            }
            let max_k = *lens.iter().max().unwrap();
            let padded = fwd.tape.stack_pad(&fwd_tokens, max_k)?;
            let mask = SeqMask::new(lens);
            let h = fwd.affine(padded, "ffnn1.w", Some("ffnn1.b"))?;
            let h = fwd.tape.dropout(h, self.config.dropout)?;
            let enc = encoder_stack(
                &mut fwd,
                h,
                self.config.n_layers,
                &self.encoder_spec(),
                Some(&mask),
            )?;
            let cls_out = fwd.tape.select_row(enc, 0)?;
            let logits = self.head(&mut fwd, cls_out)?;
            Ok((logits, fwd.binds))
        }
    }

    /// Eval-mode verification score: same-speaker logit minus
    /// different-speaker logit.
    pub fn score(&self, svecs1: &Tensor, svecs2: &Tensor) -> Result<f64> {
        let mut tape = Tape::eval();
        let (logits, _) = self.forward_single(&mut tape, svecs1, svecs2)?;
        Ok(score_from_logits(tape.value(logits)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.config.to_header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint(path)?;
        let map = parse_kv(&header)?;
        if kv_get(&map, "kind")? != "tesa" {
            return Err(Error::Config("checkpoint is not a pair verifier".into()));
        }
        Ok(TesaModel {
            config: TesaConfig::from_header(&map)?,
            params,
        })
    }
}

/// `logit(same) - logit(different)`; higher means same speaker.
pub fn score_from_logits(logits: &[f64]) -> f64 {
    logits[LABEL_SAME] - logits[LABEL_DIFF]
}

/// Assemble one pair off-tape for inspection: the `K x emb` token matrix
/// (with special tokens and utterance embeddings added) and the token kinds.
pub fn assemble_pair_input(
    model: &TesaModel,
    svecs1: &Tensor,
    svecs2: &Tensor,
) -> Result<PairInput> {
    model.check_svecs(svecs1, "utterance 1")?;
    model.check_svecs(svecs2, "utterance 2")?;
    let mut tape = Tape::eval();
    let v1 = tape.leaf(svecs1);
    let v2 = tape.leaf(svecs2);
    let mut fwd = Forward::new(&model.params, &mut tape);
    let (tokens, kinds) = model.assemble_on_tape(&mut fwd, v1, v2)?;
    let tokens = tape.tensor(tokens);
    Ok(PairInput { tokens, kinds })
}
