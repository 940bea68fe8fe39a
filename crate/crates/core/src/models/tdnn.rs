//! TDNN speaker classifier baseline: five frame-splicing layers (ReLU and
//! batch norm at each), statistics pooling, then two affine+ReLU stages and
//! the classification layer. The x-vector taps the affine output of the
//! first post-pooling layer.

use super::config::TdnnConfig;
use super::encoder::Forward;
use super::init;
use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tape, TapeBindings, Tensor, Var};

const STATS_EPS: f64 = 1e-10;

#[derive(Debug)]
pub struct TdnnOutputs {
    pub logits: Var,
    /// Affine output of the first post-pooling layer (the x-vector tap).
    pub tap_xvec: Var,
    pub pooled: Var,
    pub binds: TapeBindings,
}

#[derive(Debug, Clone)]
pub struct TdnnModel {
    pub config: TdnnConfig,
    pub params: ParameterSet,
}

impl TdnnModel {
    pub fn new(config: TdnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let mut in_dim = config.input_dim;
        for (i, (ctx, &out_dim)) in config.contexts.iter().zip(&config.hidden_dims).enumerate() {
            init::insert_xavier(
                &mut params,
                seed,
                &format!("tdnn.{i}.w"),
                in_dim * ctx.len(),
                out_dim,
            )?;
            init::insert_bias(&mut params, &format!("tdnn.{i}.b"), out_dim)?;
            init::insert_batch_norm(&mut params, &format!("tdnn.{i}.bn"), out_dim)?;
            in_dim = out_dim;
        }
        let pooled = 2 * in_dim;
        init::insert_xavier(&mut params, seed, "ffnn1.w", pooled, config.emb_dim)?;
        init::insert_bias(&mut params, "ffnn1.b", config.emb_dim)?;
        init::insert_xavier(&mut params, seed, "ffnn2.w", config.emb_dim, config.emb_dim)?;
        init::insert_bias(&mut params, "ffnn2.b", config.emb_dim)?;
        init::insert_xavier(
            &mut params,
            seed,
            "clf.w",
            config.emb_dim,
            config.n_speakers,
        )?;
        init::insert_bias(&mut params, "clf.b", config.n_speakers)?;
        Ok(TdnnModel { config, params })
    }

    /// Forward over `[T, input_dim]` or `[B, T, input_dim]`; splicing is
    /// valid (no padding), so T must cover the receptive field.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<TdnnOutputs> {
        let shape = input.shape().to_vec();
        let (t_frames, in_dim) = match shape.as_slice() {
            [t, d] => (*t, *d),
            [_, t, d] => (*t, *d),
            _ => {
                return Err(Error::BadShape {
                    op: "tdnn_forward",
                    shape,
                    reason: "expected [T,D] or [B,T,D]".into(),
                })
            }
        };
        if in_dim != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "tdnn_forward",
                left: input.shape().to_vec(),
                right: vec![self.config.input_dim],
            });
        }
        let min = self.config.min_frames();
        if t_frames < min {
            return Err(Error::TooShort(format!(
                "tdnn_forward needs at least {min} frames (receptive field), got {t_frames}"
            )));
        }

        let x = tape.leaf(input);
        let mut fwd = Forward::new(&self.params, tape);
        let mut h = x;
        for (i, ctx) in self.config.contexts.iter().enumerate() {
            h = fwd.tape.splice(h, ctx)?;
            h = fwd.affine(h, &format!("tdnn.{i}.w"), Some(&format!("tdnn.{i}.b")))?;
            h = fwd.tape.activation(h, 0.0)?;
            h = fwd.batch_norm(&format!("tdnn.{i}.bn"), h, None)?;
            if self.config.dropout > 0.0 {
                h = fwd.tape.dropout(h, self.config.dropout)?;
            }
        }
        let pooled = fwd.tape.stats_pool(h, STATS_EPS)?;
        let tap_xvec = fwd.affine(pooled, "ffnn1.w", Some("ffnn1.b"))?;
        let h1 = fwd.tape.activation(tap_xvec, 0.0)?;
        let f2 = fwd.affine(h1, "ffnn2.w", Some("ffnn2.b"))?;
        let h2 = fwd.tape.activation(f2, 0.0)?;
        let logits = fwd.affine(h2, "clf.w", Some("clf.b"))?;
        Ok(TdnnOutputs {
            logits,
            tap_xvec,
            pooled,
            binds: fwd.binds,
        })
    }

    pub fn classifier_loss(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        labels: &[usize],
    ) -> Result<(Var, TdnnOutputs)> {
        let out = self.forward(tape, input)?;
        let loss = tape.cross_entropy(out.logits, labels)?;
        Ok((loss, out))
    }
}
