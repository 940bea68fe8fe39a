//! Transformer-encoder speaker classifier. The trunk maps MFCC frames to the
//! attention dimension, adds sinusoidal position encodings, runs the encoder
//! stack, widens to the pre-pool dimension with a leaky-ReLU affine, pools
//! mean and standard deviation over time, and classifies through two more
//! affine+ReLU stages. Speaker embeddings tap the affine (pre-activation)
//! output of the first or second post-pooling affine.

use super::config::SvectorConfig;
use super::encoder::{encoder_stack, sinusoidal_pe, EncoderSpec, Forward};
use super::init;
use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tape, TapeBindings, Tensor, Var};

const STATS_EPS: f64 = 1e-10;

/// Tap points and outputs of one forward pass.
#[derive(Debug)]
pub struct SvectorOutputs {
    pub logits: Var,
    /// Affine output of the first post-pooling layer (the s-vector tap).
    pub tap_f3: Var,
    /// Affine output of the second post-pooling layer.
    pub tap_f4: Var,
    /// Widened pre-pool activations `[.., T, stats_dim]`.
    pub pre_pool: Var,
    /// Pooled statistics `[.., 2 * stats_dim]`.
    pub pooled: Var,
    pub binds: TapeBindings,
}

#[derive(Debug, Clone)]
pub struct SvectorModel {
    pub config: SvectorConfig,
    pub params: ParameterSet,
}

impl SvectorModel {
    pub fn new(config: SvectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        init::insert_xavier(&mut params, seed, "ffnn1.w", config.input_dim, config.adim)?;
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
        init::insert_xavier(&mut params, seed, "ffnn2.w", config.adim, config.stats_dim)?;
        init::insert_bias(&mut params, "ffnn2.b", config.stats_dim)?;
        init::insert_xavier(
            &mut params,
            seed,
            "ffnn3.w",
            2 * config.stats_dim,
            config.emb_dim,
        )?;
        init::insert_bias(&mut params, "ffnn3.b", config.emb_dim)?;
        init::insert_xavier(&mut params, seed, "ffnn4.w", config.emb_dim, config.emb_dim)?;
        init::insert_bias(&mut params, "ffnn4.b", config.emb_dim)?;
        init::insert_xavier(
            &mut params,
            seed,
            "clf.w",
            config.emb_dim,
            config.n_speakers,
        )?;
        init::insert_bias(&mut params, "clf.b", config.n_speakers)?;
        Ok(SvectorModel { config, params })
    }

    fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            adim: self.config.adim,
            n_heads: self.config.n_heads,
            norm_position: self.config.norm_position,
            dropout: self.config.dropout,
        }
    }

    /// Forward over one chunk `[T, input_dim]` or an equal-length batch
    /// `[B, T, input_dim]`.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<SvectorOutputs> {
        let shape = input.shape().to_vec();
        let (t_frames, in_dim, batched) = match shape.as_slice() {
            [t, d] => (*t, *d, None),
            [b, t, d] => (*t, *d, Some(*b)),
            _ => {
                return Err(Error::BadShape {
                    op: "svector_forward",
                    shape,
                    reason: "expected [T,D] or [B,T,D]".into(),
                })
            }
        };
        if t_frames == 0 {
            return Err(Error::EmptyUtterance(
                "svector_forward on zero frames".into(),
            ));
        }
        if in_dim != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "svector_forward",
                left: input.shape().to_vec(),
                right: vec![self.config.input_dim],
            });
        }

        let x = tape.leaf(input);
        let mut fwd = Forward::new(&self.params, tape);
        let h = fwd.affine(x, "ffnn1.w", Some("ffnn1.b"))?;

        // Position encodings (a fixed table, not parameters), tiled over the
        // batch when needed, with dropout on the sum.
        let pe = sinusoidal_pe(t_frames, self.config.adim)?;
        let pe_var = match batched {
            None => fwd.tape.leaf(&pe),
            Some(b) => {
                let tiled: Vec<f64> = pe
                    .data()
                    .iter()
                    .copied()
                    .cycle()
                    .take(b * pe.numel())
                    .collect();
                fwd.tape
                    .constant(vec![b, t_frames, self.config.adim], tiled)?
            }
        };
        let h = fwd.tape.add(h, pe_var)?;
        let h = fwd.tape.dropout(h, self.config.dropout)?;

        let spec = self.encoder_spec();
        let h = encoder_stack(&mut fwd, h, self.config.n_layers, &spec, None)?;

        let pre_pool = fwd.affine(h, "ffnn2.w", Some("ffnn2.b"))?;
        let pre_pool = fwd.tape.activation(pre_pool, 0.01)?;
        let pooled = fwd.tape.stats_pool(pre_pool, STATS_EPS)?;

        let tap_f3 = fwd.affine(pooled, "ffnn3.w", Some("ffnn3.b"))?;
        let h3 = fwd.tape.activation(tap_f3, 0.0)?;
        let tap_f4 = fwd.affine(h3, "ffnn4.w", Some("ffnn4.b"))?;
        let h4 = fwd.tape.activation(tap_f4, 0.0)?;
        let logits = fwd.affine(h4, "clf.w", Some("clf.b"))?;

        Ok(SvectorOutputs {
            logits,
            tap_f3,
            tap_f4,
            pre_pool,
            pooled,
            binds: fwd.binds,
        })
    }

    /// Forward plus mean cross-entropy against speaker labels.
    pub fn classifier_loss(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        labels: &[usize],
    ) -> Result<(Var, SvectorOutputs)> {
        let out = self.forward(tape, input)?;
        let loss = tape.cross_entropy(out.logits, labels)?;
        Ok((loss, out))
    }
}
