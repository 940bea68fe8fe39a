//! Embedding extraction: VAD+CMN, non-overlapping chunking, per-chunk
//! forward to the configured tap, and averaging of the chunk embeddings.

use super::config::Tap;
use super::Model;
use crate::dsp::{chunk_indices, prepare, DspConfig, FeatureSequence};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Per-chunk tap vectors for one utterance (inputs already prepared).
pub fn chunk_embeddings(
    model: &Model,
    prepared: &FeatureSequence,
    chunk_len: usize,
    tap: Tap,
) -> Result<Vec<Vec<f64>>> {
    let spec = chunk_indices(prepared.n_frames(), chunk_len)?;
    let mut out = Vec::with_capacity(spec.len());
    for &(start, len) in spec.spans() {
        let chunk = prepared.slice_frames(start, len)?;
        let mut input = chunk.to_time_major();
        if let Model::Tdnn(m) = model {
            input = pad_to_min_frames(&input, m.config.min_frames());
        }
        let mut tape = Tape::eval();
        let tap_var = match model {
            Model::Svector(m) => {
                let o = m.forward(&mut tape, &input)?;
                match tap {
                    Tap::F3 => o.tap_f3,
                    Tap::F4 => o.tap_f4,
                    Tap::Xvec => {
                        return Err(Error::Config(
                            "tap xvec is only valid for the tdnn model".into(),
                        ))
                    }
                }
            }
            Model::Tdnn(m) => {
                if tap != Tap::Xvec {
                    return Err(Error::Config(format!(
                        "tap {} is only valid for the svector model",
                        tap.as_str()
                    )));
                }
                let o = m.forward(&mut tape, &input)?;
                o.tap_xvec
            }
        };
        out.push(tape.value(tap_var).to_vec());
    }
    Ok(out)
}

/// Replicate edge frames so short remainder chunks still cover the TDNN
/// receptive field (extraction-time policy; training rejects them instead).
fn pad_to_min_frames(input: &Tensor, min_frames: usize) -> Tensor {
    let t = input.shape()[0];
    if t >= min_frames {
        return input.clone();
    }
    let d = input.shape()[1];
    let deficit = min_frames - t;
    let front = deficit / 2;
    let back = deficit - front;
    let mut data = Vec::with_capacity(min_frames * d);
    for _ in 0..front {
        data.extend_from_slice(&input.data()[..d]);
    }
    data.extend_from_slice(input.data());
    for _ in 0..back {
        data.extend_from_slice(&input.data()[(t - 1) * d..]);
    }
    Tensor::new(vec![min_frames, d], data).expect("padded frames are finite")
}

/// Full utterance embedding: prepare (VAD then CMN), chunk, tap each chunk,
/// average the chunk vectors.
pub fn extract_embedding(
    model: &Model,
    fs: &FeatureSequence,
    dsp: &DspConfig,
    chunk_len: usize,
    tap: Tap,
) -> Result<Vec<f64>> {
    let prepared = prepare(fs, dsp)?;
    let chunks = chunk_embeddings(model, &prepared, chunk_len, tap)?;
    Ok(average(&chunks))
}

pub fn average(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len();
    let dim = vectors.first().map_or(0, |v| v.len());
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}
