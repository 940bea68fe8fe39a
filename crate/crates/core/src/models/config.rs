//! Architecture configurations for the two classifiers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::kv::{kv_f64, kv_get, kv_usize};

/// Where normalization sits relative to each encoder sublayer: after the
/// residual add (post, the default) or before the sublayer (pre).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPosition {
    Pre,
    Post,
}

impl NormPosition {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormPosition::Pre => "pre",
            NormPosition::Post => "post",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(NormPosition::Pre),
            "post" => Ok(NormPosition::Post),
            other => Err(Error::Config(format!("unknown norm position {other:?}"))),
        }
    }
}

/// Embedding tap: the affine (pre-activation) output of the named layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    /// First post-pooling affine of the Transformer classifier.
    F3,
    /// Second post-pooling affine of the Transformer classifier.
    F4,
    /// First post-pooling affine of the TDNN classifier.
    Xvec,
}

impl Tap {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tap::F3 => "f3",
            Tap::F4 => "f4",
            Tap::Xvec => "xvec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f3" => Ok(Tap::F3),
            "f4" => Ok(Tap::F4),
            "xvec" => Ok(Tap::Xvec),
            other => Err(Error::Config(format!("unknown tap {other:?}"))),
        }
    }
}

/// Transformer-encoder speaker classifier configuration. Stock full-scale
/// dimensions (6 layers, 512 attention dim, 8 heads, 2048 encoder units);
/// tests shrink everything.
#[derive(Debug, Clone)]
pub struct SvectorConfig {
    pub input_dim: usize,
    pub n_layers: usize,
    pub adim: usize,
    pub n_heads: usize,
    pub encoder_units: usize,
    pub stats_dim: usize,
    pub emb_dim: usize,
    pub n_speakers: usize,
    pub norm_position: NormPosition,
    pub dropout: f64,
}

impl SvectorConfig {
    pub fn new(n_speakers: usize) -> Self {
        SvectorConfig {
            input_dim: 30,
            n_layers: 6,
            adim: 512,
            n_heads: 8,
            encoder_units: 2048,
            stats_dim: 1500,
            emb_dim: 512,
            n_speakers,
            norm_position: NormPosition::Post,
            dropout: 0.1,
        }
    }

    /// Per-head key/value width; heads must divide the attention dimension.
    pub fn head_dim(&self) -> usize {
        self.adim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("n_layers", self.n_layers),
            ("adim", self.adim),
            ("n_heads", self.n_heads),
            ("encoder_units", self.encoder_units),
            ("stats_dim", self.stats_dim),
            ("emb_dim", self.emb_dim),
            ("n_speakers", self.n_speakers),
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

    pub fn to_header(&self) -> String {
        format!(
            "kind=svector\ninput_dim={}\nn_layers={}\nadim={}\nn_heads={}\nencoder_units={}\nstats_dim={}\nemb_dim={}\nn_speakers={}\nnorm_position={}\ndropout={}\n",
            self.input_dim,
            self.n_layers,
            self.adim,
            self.n_heads,
            self.encoder_units,
            self.stats_dim,
            self.emb_dim,
            self.n_speakers,
            self.norm_position.as_str(),
            self.dropout
        )
    }

    pub fn from_header(map: &BTreeMap<String, String>) -> Result<Self> {
        let cfg = SvectorConfig {
            input_dim: kv_usize(map, "input_dim")?,
            n_layers: kv_usize(map, "n_layers")?,
            adim: kv_usize(map, "adim")?,
            n_heads: kv_usize(map, "n_heads")?,
            encoder_units: kv_usize(map, "encoder_units")?,
            stats_dim: kv_usize(map, "stats_dim")?,
            emb_dim: kv_usize(map, "emb_dim")?,
            n_speakers: kv_usize(map, "n_speakers")?,
            norm_position: NormPosition::parse(kv_get(map, "norm_position")?)?,
            dropout: kv_f64(map, "dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// TDNN baseline configuration. Splice contexts follow the published
/// architecture; hidden widths are the standard recipe values consistent
/// with the 3000-dim pooled vector.
#[derive(Debug, Clone)]
pub struct TdnnConfig {
    pub input_dim: usize,
    pub contexts: Vec<Vec<i64>>,
    pub hidden_dims: Vec<usize>,
    pub emb_dim: usize,
    pub n_speakers: usize,
    pub dropout: f64,
}

impl TdnnConfig {
    pub fn new(n_speakers: usize) -> Self {
        TdnnConfig {
            input_dim: 30,
            contexts: vec![
                vec![-2, -1, 0, 1, 2],
                vec![-2, 0, 2],
                vec![-3, 0, 3],
                vec![0],
                vec![0],
            ],
            hidden_dims: vec![512, 512, 512, 512, 1500],
            emb_dim: 512,
            n_speakers,
            dropout: 0.0,
        }
    }

    /// Half-width of the total receptive field (7 for the stock contexts,
    /// i.e. 15 frames).
    pub fn context_radius(&self) -> usize {
        self.contexts
            .iter()
            .map(|c| {
                c.iter()
                    .map(|&o| o.unsigned_abs() as usize)
                    .max()
                    .unwrap_or(0)
            })
            .sum()
    }

    /// Minimum input length for a valid forward pass.
    pub fn min_frames(&self) -> usize {
        2 * self.context_radius() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts.len() != self.hidden_dims.len() || self.contexts.is_empty() {
            return Err(Error::Config(
                "contexts and hidden_dims must be equal-length and non-empty".into(),
            ));
        }
        for ctx in &self.contexts {
            if ctx.is_empty() {
                return Err(Error::Config("empty splice context".into()));
            }
            let mut sorted = ctx.clone();
            sorted.sort_unstable();
            if &sorted != ctx {
                return Err(Error::Config("splice offsets must be ascending".into()));
            }
            // Symmetric offsets: reversing and negating gives the same list.
            let neg: Vec<i64> = ctx.iter().rev().map(|o| -o).collect();
            if neg != *ctx {
                return Err(Error::Config(format!(
                    "splice context {ctx:?} is not symmetric"
                )));
            }
        }
        if self.n_speakers == 0 || self.emb_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("dimensions must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_header(&self) -> String {
        let ctx: Vec<String> = self
            .contexts
            .iter()
            .map(|c| {
                c.iter()
                    .map(|o| o.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        let dims: Vec<String> = self.hidden_dims.iter().map(|d| d.to_string()).collect();
        format!(
            "kind=tdnn\ninput_dim={}\ncontexts={}\nhidden_dims={}\nemb_dim={}\nn_speakers={}\ndropout={}\n",
            self.input_dim,
            ctx.join(";"),
            dims.join(";"),
            self.emb_dim,
            self.n_speakers,
            self.dropout
        )
    }

    pub fn from_header(map: &BTreeMap<String, String>) -> Result<Self> {
        let contexts = kv_get(map, "contexts")?
            .split(';')
            .map(|group| {
                group
                    .split(',')
                    .map(|o| {
                        o.parse::<i64>()
                            .map_err(|_| Error::Config(format!("bad context offset {o:?}")))
                    })
                    .collect::<Result<Vec<i64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let hidden_dims = kv_get(map, "hidden_dims")?
            .split(';')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad hidden dim {d:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = TdnnConfig {
            input_dim: kv_usize(map, "input_dim")?,
            contexts,
            hidden_dims,
            emb_dim: kv_usize(map, "emb_dim")?,
            n_speakers: kv_usize(map, "n_speakers")?,
            dropout: kv_f64(map, "dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
