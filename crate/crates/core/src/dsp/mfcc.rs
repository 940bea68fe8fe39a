//! MFCC extraction: pre-emphasis, Hamming-windowed DFT power spectrum, mel
//! filterbank, log, DCT-II.

use std::f64::consts::PI;

use super::{DspConfig, FeatureSequence, Waveform};
use crate::error::{Error, Result};

const LOG_ENERGY_FLOOR: f64 = 1e-10;

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// In-place iterative radix-2 FFT over interleaved (re, im) pairs.
fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0, 0.0);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

struct MelBank {
    /// Per filter: (first_bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
    centers: Vec<f64>,
}

fn build_mel_bank(cfg: &DspConfig, n_fft: usize) -> MelBank {
    let n_bins = n_fft / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    let mel_lo = hz_to_mel(cfg.low_freq);
    let mel_hi = hz_to_mel(cfg.high_freq);
    let n = cfg.n_mels;
    let edge = |i: usize| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n + 1) as f64);

    let mut filters = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    for f in 0..n {
        let (left, center, right) = (edge(f), edge(f + 1), edge(f + 2));
        centers.push(center);
        let first_bin = (left / bin_hz).ceil() as usize;
        let last_bin = ((right / bin_hz).floor() as usize).min(n_bins - 1);
        let mut weights = Vec::new();
        for b in first_bin..=last_bin {
            let freq = b as f64 * bin_hz;
            let w = if freq <= center {
                (freq - left) / (center - left)
            } else {
                (right - freq) / (right - center)
            };
            weights.push(w.max(0.0));
        }
        filters.push((first_bin, weights));
    }
    MelBank { filters, centers }
}

/// Center frequencies (Hz) of the triangular mel filters.
pub fn mel_filter_centers(cfg: &DspConfig) -> Vec<f64> {
    let n_fft = (cfg.frame_len()).next_power_of_two();
    build_mel_bank(cfg, n_fft).centers
}

/// Per-frame log mel filterbank energies (`n_mels x T`, coefficient-major).
pub fn mel_log_energies(w: &Waveform, cfg: &DspConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform sample rate {} != config {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let win = cfg.frame_len();
    let hop = cfg.frame_shift();
    if w.samples.len() < win {
        return Err(Error::TooShort(format!(
            "waveform of {} samples is shorter than one {win}-sample frame",
            w.samples.len()
        )));
    }
    let n_frames = 1 + (w.samples.len() - win) / hop;
    let n_fft = win.next_power_of_two();
    let bank = build_mel_bank(cfg, n_fft);

    let hamming: Vec<f64> = (0..win)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win - 1) as f64).cos())
        .collect();

    let mut out = vec![0.0; cfg.n_mels * n_frames];
    let mut re = vec![0.0; n_fft];
    let mut im = vec![0.0; n_fft];
    for t in 0..n_frames {
        let frame = &w.samples[t * hop..t * hop + win];
        re[..].iter_mut().for_each(|v| *v = 0.0);
        im[..].iter_mut().for_each(|v| *v = 0.0);
        // Pre-emphasis then Hamming window.
        re[0] = frame[0] * (1.0 - cfg.preemphasis) * hamming[0];
        for i in 1..win {
            re[i] = (frame[i] - cfg.preemphasis * frame[i - 1]) * hamming[i];
        }
        fft(&mut re, &mut im);
        for (f, (first_bin, weights)) in bank.filters.iter().enumerate() {
            let mut e = 0.0;
            for (j, &wgt) in weights.iter().enumerate() {
                let b = first_bin + j;
                let p = re[b] * re[b] + im[b] * im[b];
                e += wgt * p;
            }
            out[f * n_frames + t] = e.max(LOG_ENERGY_FLOOR).ln();
        }
    }
    Ok(out)
}

/// 30-dimensional (by default) MFCC features: log mel energies through an
/// orthonormal DCT-II, keeping `n_ceps` coefficients with c0 first.
pub fn mfcc(w: &Waveform, cfg: &DspConfig) -> Result<FeatureSequence> {
    let logmel = mel_log_energies(w, cfg)?;
    let n_frames = logmel.len() / cfg.n_mels;
    let n = cfg.n_mels;

    // DCT-II with orthonormal scaling.
    let mut dct = vec![0.0; cfg.n_ceps * n];
    for k in 0..cfg.n_ceps {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for j in 0..n {
            dct[k * n + j] = scale * (PI * k as f64 * (j as f64 + 0.5) / n as f64).cos();
        }
    }

    let mut feats = vec![0.0; cfg.n_ceps * n_frames];
    for t in 0..n_frames {
        for k in 0..cfg.n_ceps {
            let mut acc = 0.0;
            for j in 0..n {
                acc += dct[k * n + j] * logmel[j * n_frames + t];
            }
            feats[k * n_frames + t] = acc;
        }
    }
    FeatureSequence::new(cfg.n_ceps, n_frames, feats)
}
