//! Synthetic speaker generator.
//!
//! Feature mode draws sequences `x_t = mu(speaker) + session + e_t` with an
//! AR(1) frame process, so the between/within variance ratio is directly
//! controllable; with the AR coefficient at zero the per-utterance means
//! follow a diagonal-covariance Gaussian latent-variable model exactly.
//! Waveform mode runs white noise through three speaker-dependent resonators
//! with slow amplitude modulation, which is enough to make MFCCs
//! speaker-separable and to exercise the VAD on padded near-silence.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::manifest::{CorpusManifest, ManifestEntry, Split};
use crate::dsp::{FeatureSequence, Waveform};
use crate::error::{Error, Result};
use crate::io::wav::write_wav;

const LATENT_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusMode {
    /// Emit feature sequences directly (no DSP involved).
    Features,
    /// Emit filtered-noise waveforms for the MFCC path.
    Waveform,
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub mode: CorpusMode,
    /// Training speakers.
    pub n_speakers: usize,
    /// Held-out speakers whose utterances form the enroll/test splits.
    pub eval_speakers: usize,
    pub utts_per_speaker: usize,
    /// Per eval speaker, how many utterances go to enroll (rest to test).
    pub enroll_per_speaker: usize,
    pub len_range_s: (f64, f64),
    /// Between-speaker variance over within-speaker variance.
    pub variance_ratio: f64,
    /// AR(1) coefficient of the frame noise; 0 keeps utterance means exactly
    /// Gaussian around the speaker mean.
    pub ar_coeff: f64,
    /// Feature dimension in feature mode.
    pub feat_dim: usize,
    /// Frame rate used to convert seconds to frames in feature mode.
    pub frames_per_second: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            mode: CorpusMode::Features,
            n_speakers: 50,
            eval_speakers: 10,
            utts_per_speaker: 20,
            enroll_per_speaker: 5,
            len_range_s: (3.0, 8.0),
            variance_ratio: 10.0,
            ar_coeff: 0.3,
            feat_dim: 30,
            frames_per_second: 100.0,
            sample_rate: 16_000,
            seed: 42,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers + self.eval_speakers < 2 {
            return Err(Error::Config("need at least 2 speakers".into()));
        }
        if self.variance_ratio.is_nan() || self.variance_ratio <= 0.0 {
            return Err(Error::Config(format!(
                "variance_ratio must be positive, got {}",
                self.variance_ratio
            )));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::Config("utts_per_speaker must be positive".into()));
        }
        if self.eval_speakers > 0 && self.enroll_per_speaker >= self.utts_per_speaker {
            return Err(Error::Config(
                "enroll_per_speaker must leave at least one test utterance".into(),
            ));
        }
        if !(self.ar_coeff >= 0.0 && self.ar_coeff < 1.0) {
            return Err(Error::Config("ar_coeff must be in [0, 1)".into()));
        }
        if self.len_range_s.0 <= 0.0 || self.len_range_s.1 < self.len_range_s.0 {
            return Err(Error::Config("bad utterance length range".into()));
        }
        Ok(())
    }
}

/// One synthetic speaker: a latent identity vector and, in waveform mode,
/// three resonance frequencies derived from it.
#[derive(Debug, Clone)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub latent: Vec<f64>,
    pub resonances_hz: [f64; 3],
}

impl SpeakerProfile {
    fn derive(speaker_id: String, latent: Vec<f64>) -> Self {
        // Deterministic latent -> formant-like map; logistic squashing keeps
        // each resonance inside a plausible band.
        let squash = |v: f64| 1.0 / (1.0 + (-v).exp());
        let resonances_hz = [
            300.0 + 500.0 * squash(latent[0]),
            900.0 + 1300.0 * squash(latent[1]),
            2300.0 + 1400.0 * squash(latent[2]),
        ];
        SpeakerProfile {
            speaker_id,
            latent,
            resonances_hz,
        }
    }
}

#[derive(Debug)]
pub struct SynthCorpus {
    pub manifest: CorpusManifest,
    pub profiles: Vec<SpeakerProfile>,
    /// Feature mode payload, one per manifest entry.
    pub features: Vec<FeatureSequence>,
    /// Waveform mode payload, one per manifest entry.
    pub waveforms: Vec<Waveform>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG stream for one utterance, derived from (seed, index) so generation
/// order and parallelism cannot change the output.
fn utt_rng(seed: u64, utt_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(utt_index.wrapping_add(1))))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Build the corpus in memory. Deterministic for a fixed config.
pub fn generate(cfg: &CorpusConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let total_speakers = cfg.n_speakers + cfg.eval_speakers;

    // Speaker profiles come from one sequential stream.
    let mut prof_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed));
    let profiles: Vec<SpeakerProfile> = (0..total_speakers)
        .map(|s| {
            let latent: Vec<f64> = (0..LATENT_DIM).map(|_| normal(&mut prof_rng)).collect();
            SpeakerProfile::derive(format!("spk{s:03}"), latent)
        })
        .collect();

    // Speaker feature-space means: N(0, between_var I) with within set to 1.
    let between_sd = cfg.variance_ratio.sqrt();
    let mut mean_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x5eaf00d));
    let speaker_means: Vec<Vec<f64>> = (0..total_speakers)
        .map(|_| {
            (0..cfg.feat_dim)
                .map(|_| between_sd * normal(&mut mean_rng))
                .collect()
        })
        .collect();

    let mut plan = Vec::new();
    for s in 0..total_speakers {
        for u in 0..cfg.utts_per_speaker {
            let split = if s < cfg.n_speakers {
                Split::Train
            } else if u < cfg.enroll_per_speaker {
                Split::Enroll
            } else {
                Split::Test
            };
            plan.push((s, u, split));
        }
    }

    let entries: Vec<ManifestEntry> = plan
        .iter()
        .map(|&(s, u, split)| {
            let utterance_id = format!("{}_u{u:02}", profiles[s].speaker_id);
            let path = match cfg.mode {
                CorpusMode::Features => "features.ark".to_string(),
                CorpusMode::Waveform => format!("wav/{utterance_id}.wav"),
            };
            ManifestEntry {
                utterance_id,
                speaker_id: profiles[s].speaker_id.clone(),
                split,
                path,
            }
        })
        .collect();

    let mut corpus = SynthCorpus {
        manifest: CorpusManifest::new(entries),
        profiles,
        features: Vec::new(),
        waveforms: Vec::new(),
    };

    match cfg.mode {
        CorpusMode::Features => {
            corpus.features = plan
                .par_iter()
                .enumerate()
                .map(|(idx, &(s, _, _))| {
                    let mut rng = utt_rng(cfg.seed, idx as u64);
                    feature_utterance(cfg, &speaker_means[s], &mut rng)
                })
                .collect::<Vec<_>>();
            for (fs, e) in corpus.features.iter_mut().zip(corpus.manifest.entries()) {
                fs.utterance_id = e.utterance_id.clone();
                fs.speaker_id = e.speaker_id.clone();
            }
        }
        CorpusMode::Waveform => {
            corpus.waveforms = plan
                .par_iter()
                .enumerate()
                .map(|(idx, &(s, _, _))| {
                    let mut rng = utt_rng(cfg.seed, idx as u64);
                    waveform_utterance(cfg, &corpus.profiles[s], &mut rng)
                })
                .collect::<Vec<_>>();
        }
    }
    Ok(corpus)
}

/// Within-speaker variance splits evenly between a per-utterance session
/// offset and stationary AR(1) frame noise.
fn feature_utterance(cfg: &CorpusConfig, mean: &[f64], rng: &mut ChaCha8Rng) -> FeatureSequence {
    let secs = cfg.len_range_s.0 + (cfg.len_range_s.1 - cfg.len_range_s.0) * rng.random::<f64>();
    let t = (secs * cfg.frames_per_second).round().max(1.0) as usize;
    let d = cfg.feat_dim;
    let session_sd = 0.5f64.sqrt();
    let frame_sd = 0.5f64.sqrt();
    let rho = cfg.ar_coeff;
    let innov = (1.0 - rho * rho).sqrt();

    let session: Vec<f64> = (0..d).map(|_| session_sd * normal(rng)).collect();
    let mut state: Vec<f64> = (0..d).map(|_| frame_sd * normal(rng)).collect();
    let mut feats = vec![0.0; d * t];
    for ti in 0..t {
        for c in 0..d {
            if ti > 0 {
                state[c] = rho * state[c] + innov * frame_sd * normal(rng);
            }
            feats[c * t + ti] = mean[c] + session[c] + state[c];
        }
    }
    FeatureSequence::new(d, t, feats).expect("finite synthetic features")
}

/// Second-order resonator (two conjugate poles) applied in place.
fn resonate(x: &mut [f64], freq_hz: f64, bandwidth_hz: f64, sr: f64) {
    let r = (-PI * bandwidth_hz / sr).exp();
    let theta = 2.0 * PI * freq_hz / sr;
    let a1 = -2.0 * r * theta.cos();
    let a2 = r * r;
    let gain = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = gain * *v - a1 * y1 - a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn waveform_utterance(
    cfg: &CorpusConfig,
    profile: &SpeakerProfile,
    rng: &mut ChaCha8Rng,
) -> Waveform {
    let sr = cfg.sample_rate as f64;
    let secs = cfg.len_range_s.0 + (cfg.len_range_s.1 - cfg.len_range_s.0) * rng.random::<f64>();
    let n = (secs * sr) as usize;

    // Per-utterance session jitter on the resonances shrinks as the
    // variance ratio grows.
    let jitter_sd = 40.0 / cfg.variance_ratio.sqrt();
    let freqs: Vec<f64> = profile
        .resonances_hz
        .iter()
        .map(|f| (f + jitter_sd * normal(rng)).max(120.0))
        .collect();

    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    for (i, &f) in freqs.iter().enumerate() {
        resonate(&mut x, f, 80.0 + 40.0 * i as f64, sr);
    }

    // Slow random-phase amplitude modulation gives the energy VAD contrast.
    let mod_hz = 2.0 + 2.0 * rng.random::<f64>();
    let phase = 2.0 * PI * rng.random::<f64>();
    for (i, v) in x.iter_mut().enumerate() {
        let m = 0.7 + 0.3 * (2.0 * PI * mod_hz * i as f64 / sr + phase).sin();
        *v *= m;
    }

    let peak = x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-9);
    let scale = 0.5 / peak;
    x.iter_mut().for_each(|v| *v *= scale);

    // Near-silent padding at both ends exercises the VAD.
    let pad = (0.25 * sr) as usize;
    let mut samples = Vec::with_capacity(n + 2 * pad);
    for _ in 0..pad {
        samples.push(0.002 * (rng.random::<f64>() * 2.0 - 1.0));
    }
    samples.extend_from_slice(&x);
    for _ in 0..pad {
        samples.push(0.002 * (rng.random::<f64>() * 2.0 - 1.0));
    }
    Waveform {
        samples,
        sample_rate: cfg.sample_rate,
    }
}

/// Write a generated corpus to a directory: the manifest plus either a
/// feature archive or per-utterance WAV files.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    corpus.manifest.write(&dir.join("manifest.txt"))?;
    if !corpus.features.is_empty() {
        let mut w = crate::io::ArchiveWriter::create(&dir.join("features.ark"))?;
        for fs in &corpus.features {
            w.write(&fs.utterance_id, &fs.to_tensor())?;
        }
        w.finish()?;
    }
    if !corpus.waveforms.is_empty() {
        let wav_dir = dir.join("wav");
        std::fs::create_dir_all(&wav_dir)
            .map_err(|e| Error::io(wav_dir.display().to_string(), e))?;
        for (w, e) in corpus.waveforms.iter().zip(corpus.manifest.entries()) {
            write_wav(&dir.join(&e.path), &w.samples, w.sample_rate)?;
        }
    }
    Ok(())
}
