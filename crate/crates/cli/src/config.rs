//! Experiment configuration: sectioned `key = value` text covering every
//! tunable. Unknown sections or keys are rejected; every run writes the
//! fully resolved configuration next to its outputs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use svkit_core::corpus::{CorpusConfig, CorpusMode};
use svkit_core::dsp::{CmnMode, DspConfig};
use svkit_core::io::fnv1a;
use svkit_core::models::{NormPosition, SvectorConfig, Tap, TdnnConfig};
use svkit_core::tesa::{TesaConfig, TesaTrainConfig};
use svkit_core::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    values: BTreeMap<(String, String), String>,
}

/// `(section, key, default)` for every accepted setting.
const SCHEMA: &[(&str, &str, &str)] = &[
    ("run", "seed", "42"),
    ("run", "threads", "0"),
    ("corpus", "mode", "features"),
    ("corpus", "n_speakers", "50"),
    ("corpus", "eval_speakers", "10"),
    ("corpus", "utts_per_speaker", "20"),
    ("corpus", "enroll_per_speaker", "5"),
    ("corpus", "min_len_s", "3.0"),
    ("corpus", "max_len_s", "8.0"),
    ("corpus", "variance_ratio", "10.0"),
    ("corpus", "ar_coeff", "0.3"),
    ("corpus", "feat_dim", "30"),
    ("corpus", "sample_rate", "16000"),
    ("corpus", "n_target_trials", "200"),
    ("corpus", "n_nontarget_trials", "200"),
    ("dsp", "sample_rate", "16000"),
    ("dsp", "frame_len_ms", "25.0"),
    ("dsp", "frame_shift_ms", "10.0"),
    ("dsp", "preemphasis", "0.97"),
    ("dsp", "n_mels", "30"),
    ("dsp", "n_ceps", "30"),
    ("dsp", "low_freq", "20.0"),
    ("dsp", "high_freq", "7600.0"),
    ("dsp", "vad_offset", "-3.0"),
    ("dsp", "vad_mean_scale", "1.0"),
    ("dsp", "cmn", "sliding"),
    ("dsp", "cmn_window", "300"),
    ("dsp", "vad_before_cmn", "true"),
    ("model", "kind", "svector"),
    ("model", "layers", "6"),
    ("model", "adim", "512"),
    ("model", "heads", "8"),
    ("model", "encoder_units", "2048"),
    ("model", "stats_dim", "1500"),
    ("model", "emb_dim", "512"),
    ("model", "tdnn_hidden", "512,512,512,512,1500"),
    ("model", "norm_position", "post"),
    ("model", "dropout", "0.1"),
    ("train", "batch_size", "32"),
    ("train", "epochs", "20"),
    ("train", "lr_factor", "10.0"),
    ("train", "warmup_steps", "25000"),
    ("train", "grad_clip", "5.0"),
    ("train", "min_chunk", "200"),
    ("train", "max_chunk", "400"),
    ("train", "holdout_frac", "0.1"),
    ("train", "target_acc", "0"),
    ("train", "checkpoint_every", "0"),
    ("extract", "chunk_len", "300"),
    ("extract", "tap", "f3"),
    ("backend", "lda_dim", "250"),
    ("backend", "length_norm", "true"),
    ("tesa", "layers", "9"),
    ("tesa", "adim", "250"),
    ("tesa", "heads", "5"),
    ("tesa", "encoder_units", "1024"),
    ("tesa", "hidden_dim", "1000"),
    ("tesa", "norm_position", "post"),
    ("tesa", "dropout", "0.1"),
    ("tesa", "pair_cap", "2000"),
    ("tesa", "batch_size", "64"),
    ("tesa", "epochs", "10"),
    ("tesa", "lr_factor", "10.0"),
    ("tesa", "warmup_steps", "25000"),
    ("tesa", "target_loss", "0"),
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut values = BTreeMap::new();
        for (section, key, default) in SCHEMA {
            values.insert((section.to_string(), key.to_string()), default.to_string());
        }
        ExperimentConfig { values }
    }
}

impl ExperimentConfig {
    /// Defaults overlaid with an optional config file; `SVKIT_SEED`
    /// overrides the seed when set.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
        }
        if let Ok(seed) = std::env::var("SVKIT_SEED") {
            let parsed: u64 = seed
                .parse()
                .with_context(|| format!("SVKIT_SEED {seed:?} is not an integer"))?;
            cfg.set("run", "seed", &parsed.to_string());
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) {
        self.values
            .insert((section.to_string(), key.to_string()), value.to_string());
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !SCHEMA.iter().any(|(s, _, _)| *s == section) {
                    bail!("line {}: unknown section [{section}]", lineno + 1);
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key = value, got {line:?}", lineno + 1);
            };
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                bail!("line {}: key {key:?} before any [section]", lineno + 1);
            }
            if !SCHEMA.iter().any(|(s, k, _)| *s == section && *k == key) {
                bail!(
                    "line {}: unknown key {key:?} in section [{section}]",
                    lineno + 1
                );
            }
            self.set(&section, key, value);
        }
        Ok(())
    }

    fn get(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .expect("schema key")
    }

    fn usize(&self, section: &str, key: &str) -> Result<usize> {
        self.get(section, key)
            .parse()
            .with_context(|| format!("[{section}] {key} must be an integer"))
    }

    fn u64(&self, section: &str, key: &str) -> Result<u64> {
        self.get(section, key)
            .parse()
            .with_context(|| format!("[{section}] {key} must be an integer"))
    }

    fn f64(&self, section: &str, key: &str) -> Result<f64> {
        self.get(section, key)
            .parse()
            .with_context(|| format!("[{section}] {key} must be a number"))
    }

    fn bool(&self, section: &str, key: &str) -> Result<bool> {
        match self.get(section, key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => bail!("[{section}] {key} must be true or false, got {other:?}"),
        }
    }

    /// The fully resolved configuration as sectioned text.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for ((section, key), value) in &self.values {
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.resolved().as_bytes())
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("run", "seed")
    }

    pub fn threads(&self) -> Result<usize> {
        self.usize("run", "threads")
    }

    pub fn corpus(&self) -> Result<CorpusConfig> {
        let mode = match self.get("corpus", "mode") {
            "features" => CorpusMode::Features,
            "waveform" => CorpusMode::Waveform,
            other => bail!("[corpus] mode must be features or waveform, got {other:?}"),
        };
        Ok(CorpusConfig {
            mode,
            n_speakers: self.usize("corpus", "n_speakers")?,
            eval_speakers: self.usize("corpus", "eval_speakers")?,
            utts_per_speaker: self.usize("corpus", "utts_per_speaker")?,
            enroll_per_speaker: self.usize("corpus", "enroll_per_speaker")?,
            len_range_s: (
                self.f64("corpus", "min_len_s")?,
                self.f64("corpus", "max_len_s")?,
            ),
            variance_ratio: self.f64("corpus", "variance_ratio")?,
            ar_coeff: self.f64("corpus", "ar_coeff")?,
            feat_dim: self.usize("corpus", "feat_dim")?,
            frames_per_second: 1000.0 / self.f64("dsp", "frame_shift_ms")?,
            sample_rate: self.usize("corpus", "sample_rate")? as u32,
            seed: self.seed()?,
        })
    }

    pub fn trial_counts(&self) -> Result<(usize, usize)> {
        Ok((
            self.usize("corpus", "n_target_trials")?,
            self.usize("corpus", "n_nontarget_trials")?,
        ))
    }

    pub fn dsp(&self) -> Result<DspConfig> {
        let cmn = match self.get("dsp", "cmn") {
            "sliding" => CmnMode::Sliding(self.usize("dsp", "cmn_window")?),
            "utterance" => CmnMode::Utterance,
            "none" => CmnMode::Off,
            other => bail!("[dsp] cmn must be sliding, utterance, or none, got {other:?}"),
        };
        Ok(DspConfig {
            sample_rate: self.usize("dsp", "sample_rate")? as u32,
            frame_len_ms: self.f64("dsp", "frame_len_ms")?,
            frame_shift_ms: self.f64("dsp", "frame_shift_ms")?,
            preemphasis: self.f64("dsp", "preemphasis")?,
            n_mels: self.usize("dsp", "n_mels")?,
            n_ceps: self.usize("dsp", "n_ceps")?,
            low_freq: self.f64("dsp", "low_freq")?,
            high_freq: self.f64("dsp", "high_freq")?,
            vad_offset: self.f64("dsp", "vad_offset")?,
            vad_mean_scale: self.f64("dsp", "vad_mean_scale")?,
            cmn,
            vad_before_cmn: self.bool("dsp", "vad_before_cmn")?,
        })
    }

    pub fn model_kind(&self) -> &str {
        self.get("model", "kind")
    }

    pub fn svector(&self, input_dim: usize, n_speakers: usize) -> Result<SvectorConfig> {
        Ok(SvectorConfig {
            input_dim,
            n_layers: self.usize("model", "layers")?,
            adim: self.usize("model", "adim")?,
            n_heads: self.usize("model", "heads")?,
            encoder_units: self.usize("model", "encoder_units")?,
            stats_dim: self.usize("model", "stats_dim")?,
            emb_dim: self.usize("model", "emb_dim")?,
            n_speakers,
            norm_position: NormPosition::parse(self.get("model", "norm_position"))
                .map_err(anyhow::Error::from)?,
            dropout: self.f64("model", "dropout")?,
        })
    }

    pub fn tdnn(&self, input_dim: usize, n_speakers: usize) -> Result<TdnnConfig> {
        let hidden: Vec<usize> = self
            .get("model", "tdnn_hidden")
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .context("[model] tdnn_hidden must be comma-separated integers")?;
        let mut cfg = TdnnConfig::new(n_speakers);
        cfg.input_dim = input_dim;
        cfg.hidden_dims = hidden;
        cfg.emb_dim = self.usize("model", "emb_dim")?;
        cfg.dropout = self.f64("model", "dropout")?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let target = self.f64("train", "target_acc")?;
        Ok(TrainConfig {
            batch_size: self.usize("train", "batch_size")?,
            epochs: self.usize("train", "epochs")?,
            lr_factor: self.f64("train", "lr_factor")?,
            warmup_steps: self.usize("train", "warmup_steps")?,
            grad_clip: self.f64("train", "grad_clip")?,
            min_chunk: self.usize("train", "min_chunk")?,
            max_chunk: self.usize("train", "max_chunk")?,
            holdout_frac: self.f64("train", "holdout_frac")?,
            target_acc: if target > 0.0 { Some(target) } else { None },
            max_steps: None,
            checkpoint_every: self.usize("train", "checkpoint_every")?,
            checkpoint_dir: None,
            seed: self.seed()?,
        })
    }

    pub fn chunk_len(&self) -> Result<usize> {
        self.usize("extract", "chunk_len")
    }

    pub fn tap(&self) -> Result<Tap> {
        Tap::parse(self.get("extract", "tap")).map_err(anyhow::Error::from)
    }

    pub fn backend_lda_dim(&self) -> Result<Option<usize>> {
        let dim = self.usize("backend", "lda_dim")?;
        Ok(if dim == 0 { None } else { Some(dim) })
    }

    pub fn backend_length_norm(&self) -> Result<bool> {
        self.bool("backend", "length_norm")
    }

    pub fn tesa(&self, emb_dim: usize) -> Result<TesaConfig> {
        Ok(TesaConfig {
            emb_dim,
            n_layers: self.usize("tesa", "layers")?,
            adim: self.usize("tesa", "adim")?,
            n_heads: self.usize("tesa", "heads")?,
            encoder_units: self.usize("tesa", "encoder_units")?,
            hidden_dim: self.usize("tesa", "hidden_dim")?,
            norm_position: NormPosition::parse(self.get("tesa", "norm_position"))
                .map_err(anyhow::Error::from)?,
            dropout: self.f64("tesa", "dropout")?,
        })
    }

    pub fn tesa_pair_cap(&self) -> Result<usize> {
        self.usize("tesa", "pair_cap")
    }

    pub fn tesa_train(&self) -> Result<TesaTrainConfig> {
        let target = self.f64("tesa", "target_loss")?;
        Ok(TesaTrainConfig {
            batch_size: self.usize("tesa", "batch_size")?,
            epochs: self.usize("tesa", "epochs")?,
            lr_factor: self.f64("tesa", "lr_factor")?,
            warmup_steps: self.usize("tesa", "warmup_steps")?,
            grad_clip: self.f64("train", "grad_clip")?,
            max_steps: None,
            target_loss: if target > 0.0 { Some(target) } else { None },
            seed: self.seed()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_hash_stably() {
        let cfg = ExperimentConfig::default();
        let text = cfg.resolved();
        assert!(text.contains("[model]"));
        assert!(text.contains("adim = 512"));
        assert_eq!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_text("[model]\nadim = 64\n").is_ok());
        assert!(cfg.apply_text("[model]\nbogus = 1\n").is_err());
        assert!(cfg.apply_text("[nonsense]\nx = 1\n").is_err());
        assert!(cfg.apply_text("adim = 64\n").is_err());
    }

    #[test]
    fn overrides_flow_into_typed_configs() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("[model]\nadim = 64\nheads = 4\n[train]\nbatch_size = 8\n")
            .unwrap();
        let sv = cfg.svector(30, 5).unwrap();
        assert_eq!(sv.adim, 64);
        assert_eq!(sv.n_heads, 4);
        assert_eq!(cfg.train().unwrap().batch_size, 8);
    }
}
