//! Waveform front end: MFCC extraction, energy VAD, cepstral mean
//! normalization, and the chunk decomposition used for training examples and
//! embedding extraction.

mod chunk;
mod mfcc;
mod vad;

pub use chunk::{chunk_indices, training_chunks, ChunkSpec};
pub use mfcc::{mel_filter_centers, mel_log_energies, mfcc};
pub use vad::{apply_cmn, energy_vad, CmnMode};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// A coefficient-major MFCC matrix (`n_coeffs x T`) with a voice-activity
/// mask and identity labels.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub speaker_id: String,
    n_coeffs: usize,
    n_frames: usize,
    /// Row-major `n_coeffs x T`: `feats[c * T + t]`.
    feats: Vec<f64>,
    /// One flag per frame; `true` keeps the frame.
    pub vad_mask: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(n_coeffs: usize, n_frames: usize, feats: Vec<f64>) -> Result<Self> {
        if feats.len() != n_coeffs * n_frames {
            return Err(Error::BadShape {
                op: "FeatureSequence::new",
                shape: vec![n_coeffs, n_frames],
                reason: format!("data length {}", feats.len()),
            });
        }
        Ok(FeatureSequence {
            utterance_id: String::new(),
            speaker_id: String::new(),
            n_coeffs,
            n_frames,
            feats,
            vad_mask: vec![true; n_frames],
        })
    }

    pub fn with_ids(mut self, utterance: impl Into<String>, speaker: impl Into<String>) -> Self {
        self.utterance_id = utterance.into();
        self.speaker_id = speaker.into();
        self
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn coeff(&self, c: usize) -> &[f64] {
        &self.feats[c * self.n_frames..(c + 1) * self.n_frames]
    }

    pub fn at(&self, c: usize, t: usize) -> f64 {
        self.feats[c * self.n_frames + t]
    }

    pub fn at_mut(&mut self, c: usize, t: usize) -> &mut f64 {
        &mut self.feats[c * self.n_frames + t]
    }

    pub fn data(&self) -> &[f64] {
        &self.feats
    }

    /// Coefficient-major matrix tensor (`n_coeffs x T`), the archive layout.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_coeffs, self.n_frames], self.feats.clone())
            .expect("feature values are finite")
    }

    pub fn from_tensor(t: &Tensor, utterance: &str, speaker: &str) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::BadShape {
                op: "FeatureSequence::from_tensor",
                shape: t.shape().to_vec(),
                reason: "expected a coefficient-major matrix".into(),
            });
        }
        Ok(
            FeatureSequence::new(t.shape()[0], t.shape()[1], t.data().to_vec())?
                .with_ids(utterance, speaker),
        )
    }

    /// Time-major `[T x n_coeffs]` tensor, the model input layout.
    pub fn to_time_major(&self) -> Tensor {
        let (c, t) = (self.n_coeffs, self.n_frames);
        let mut data = vec![0.0; c * t];
        for ci in 0..c {
            for ti in 0..t {
                data[ti * c + ci] = self.feats[ci * t + ti];
            }
        }
        Tensor::new(vec![t, c], data).expect("feature values are finite")
    }

    /// Copy of the frame range `[start, start+len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<FeatureSequence> {
        if start + len > self.n_frames {
            return Err(Error::IndexOutOfRange {
                what: "frame range",
                index: start + len,
                len: self.n_frames,
            });
        }
        let mut feats = Vec::with_capacity(self.n_coeffs * len);
        for c in 0..self.n_coeffs {
            feats.extend_from_slice(
                &self.feats[c * self.n_frames + start..c * self.n_frames + start + len],
            );
        }
        let mut out = FeatureSequence::new(self.n_coeffs, len, feats)?;
        out.utterance_id = self.utterance_id.clone();
        out.speaker_id = self.speaker_id.clone();
        out.vad_mask = self.vad_mask[start..start + len].to_vec();
        Ok(out)
    }

    /// Keep only frames with a set mask bit.
    pub fn retained(&self) -> Result<FeatureSequence> {
        let keep: Vec<usize> = (0..self.n_frames).filter(|&t| self.vad_mask[t]).collect();
        if keep.is_empty() {
            return Err(Error::EmptyUtterance(format!(
                "utterance {} has no frames after VAD",
                self.utterance_id
            )));
        }
        let mut feats = Vec::with_capacity(self.n_coeffs * keep.len());
        for c in 0..self.n_coeffs {
            for &t in &keep {
                feats.push(self.feats[c * self.n_frames + t]);
            }
        }
        let mut out = FeatureSequence::new(self.n_coeffs, keep.len(), feats)?;
        out.utterance_id = self.utterance_id.clone();
        out.speaker_id = self.speaker_id.clone();
        Ok(out)
    }
}

/// Front-end configuration. The models consume 30-dim MFCCs; frame and
/// filterbank settings default to the usual wideband recipe values and are
/// exposed here rather than hard-coded.
#[derive(Debug, Clone)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub low_freq: f64,
    pub high_freq: f64,
    /// VAD keep rule: log-energy > vad_mean_scale * mean + vad_offset.
    pub vad_offset: f64,
    pub vad_mean_scale: f64,
    pub cmn: CmnMode,
    /// Fixed pipeline order: VAD mask first, CMN over retained frames.
    /// Flipping this flag is the only way to change the order.
    pub vad_before_cmn: bool,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate: 16_000,
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            preemphasis: 0.97,
            n_mels: 30,
            n_ceps: 30,
            low_freq: 20.0,
            high_freq: 7600.0,
            vad_offset: -3.0,
            vad_mean_scale: 1.0,
            cmn: CmnMode::Sliding(300),
            vad_before_cmn: true,
        }
    }
}

impl DspConfig {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate as f64 * self.frame_len_ms / 1000.0).round() as usize
    }

    pub fn frame_shift(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.n_ceps > self.n_mels {
            return Err(Error::Config(format!(
                "n_ceps {} cannot exceed n_mels {}",
                self.n_ceps, self.n_mels
            )));
        }
        if self.high_freq <= self.low_freq || self.high_freq > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "mel band [{}, {}] invalid for sample rate {}",
                self.low_freq, self.high_freq, self.sample_rate
            )));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::Config("preemphasis must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Apply VAD and CMN in the configured order and drop non-speech frames.
/// This is the one place the order is decided; both training-example
/// generation and embedding extraction go through it.
pub fn prepare(fs: &FeatureSequence, cfg: &DspConfig) -> Result<FeatureSequence> {
    if cfg.vad_before_cmn {
        let mut fs = fs.clone();
        fs.vad_mask = energy_vad(&fs, cfg.vad_offset, cfg.vad_mean_scale)?;
        let retained = fs.retained()?;
        apply_cmn(&retained, cfg.cmn)
    } else {
        let normalized = apply_cmn(fs, cfg.cmn)?;
        let mut fs = normalized;
        fs.vad_mask = energy_vad(&fs, cfg.vad_offset, cfg.vad_mean_scale)?;
        fs.retained()
    }
}
