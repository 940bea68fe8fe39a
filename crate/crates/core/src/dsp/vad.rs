//! Energy VAD and cepstral mean normalization.

use super::FeatureSequence;
use crate::error::{Error, Result};

/// Cepstral mean normalization window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmnMode {
    /// Centered sliding window of this many frames, clipped at the edges.
    Sliding(usize),
    /// Subtract the per-coefficient mean over the whole utterance.
    Utterance,
    /// Leave features untouched. Synthetic feature corpora carry speaker
    /// identity in the per-utterance mean, which normalization would erase.
    Off,
}

/// Energy-based voice activity detection. Frame `t` is kept iff its
/// log-energy (taken from c0, the log-energy-bearing coefficient) exceeds
/// `mean_scale * mean_log_energy + offset`. With `mean_scale = 1` this is the
/// plain mean-plus-offset rule.
pub fn energy_vad(fs: &FeatureSequence, offset: f64, mean_scale: f64) -> Result<Vec<bool>> {
    let t = fs.n_frames();
    if t == 0 {
        return Err(Error::EmptyUtterance("energy_vad on zero frames".into()));
    }
    let energy = fs.coeff(0);
    let mean = energy.iter().sum::<f64>() / t as f64;
    let threshold = mean_scale * mean + offset;
    Ok(energy.iter().map(|&e| e > threshold).collect())
}

/// Subtract per-coefficient means, either over the utterance or over a
/// centered sliding window (window clipped at the sequence edges).
pub fn apply_cmn(fs: &FeatureSequence, mode: CmnMode) -> Result<FeatureSequence> {
    let t = fs.n_frames();
    if t == 0 {
        return Err(Error::EmptyUtterance("apply_cmn on zero frames".into()));
    }
    let mut out = fs.clone();
    match mode {
        CmnMode::Off => {}
        CmnMode::Utterance => {
            for c in 0..fs.n_coeffs() {
                let mean = fs.coeff(c).iter().sum::<f64>() / t as f64;
                for ti in 0..t {
                    *out.at_mut(c, ti) -= mean;
                }
            }
        }
        CmnMode::Sliding(window) => {
            if window == 0 {
                return Err(Error::Config("CMN window must be positive".into()));
            }
            let half = window / 2;
            for c in 0..fs.n_coeffs() {
                let row = fs.coeff(c).to_vec();
                // Prefix sums make each windowed mean O(1).
                let mut prefix = vec![0.0; t + 1];
                for (i, &v) in row.iter().enumerate() {
                    prefix[i + 1] = prefix[i] + v;
                }
                for ti in 0..t {
                    let lo = ti.saturating_sub(half);
                    let hi = (ti + window - half).min(t);
                    let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
                    *out.at_mut(c, ti) -= mean;
                }
            }
        }
    }
    Ok(out)
}
