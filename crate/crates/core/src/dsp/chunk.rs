//! Chunk decomposition for embedding extraction and training examples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::FeatureSequence;
use crate::error::{Error, Result};

/// Contiguous, non-overlapping spans covering `[0, T)` exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSpec {
    spans: Vec<(usize, usize)>,
}

impl ChunkSpec {
    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Split `T` frames into consecutive `chunk_len`-frame chunks; whatever
/// remains becomes one final shorter chunk (an utterance shorter than
/// `chunk_len` yields a single short chunk).
pub fn chunk_indices(t: usize, chunk_len: usize) -> Result<ChunkSpec> {
    if t == 0 {
        return Err(Error::EmptyUtterance("chunk_indices on zero frames".into()));
    }
    if chunk_len == 0 {
        return Err(Error::Config("chunk_len must be positive".into()));
    }
    let mut spans = Vec::with_capacity(t / chunk_len + 1);
    let mut start = 0;
    while start + chunk_len <= t {
        spans.push((start, chunk_len));
        start += chunk_len;
    }
    if start < t {
        spans.push((start, t - start));
    }
    Ok(ChunkSpec { spans })
}

/// Random-length training chunks with random start frames: each chunk length
/// is uniform in `[min_len, max_len]`. The chunk count scales with the
/// utterance length (about one chunk per mean length, at least one).
/// Utterances shorter than `min_len` yield an empty list and are counted by
/// the caller. Deterministic for a fixed RNG state.
pub fn training_chunks(
    fs: &FeatureSequence,
    min_len: usize,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FeatureSequence>> {
    if min_len == 0 || max_len < min_len {
        return Err(Error::Config(format!(
            "bad training chunk range [{min_len}, {max_len}]"
        )));
    }
    let t = fs.n_frames();
    if t < min_len {
        return Ok(Vec::new());
    }
    let mean_len = (min_len + max_len) / 2;
    let count = (t / mean_len).max(1);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.random_range(min_len..=max_len.min(t));
        let start = rng.random_range(0..=t - len);
        out.push(fs.slice_frames(start, len)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn remainder_becomes_one_chunk() {
        let spec = chunk_indices(750, 300).unwrap();
        assert_eq!(spec.spans(), &[(0, 300), (300, 300), (600, 150)]);
    }

    #[test]
    fn exact_fit_is_one_chunk() {
        let spec = chunk_indices(300, 300).unwrap();
        assert_eq!(spec.spans(), &[(0, 300)]);
    }

    #[test]
    fn short_utterance_is_a_single_short_chunk() {
        let spec = chunk_indices(299, 300).unwrap();
        assert_eq!(spec.spans(), &[(0, 299)]);
    }

    #[test]
    fn zero_frames_is_an_error() {
        assert!(matches!(
            chunk_indices(0, 300),
            Err(Error::EmptyUtterance(_))
        ));
    }

    #[test]
    fn spans_cover_without_overlap() {
        for t in [1usize, 5, 299, 300, 301, 750, 1234] {
            let spec = chunk_indices(t, 300).unwrap();
            let mut pos = 0;
            for &(start, len) in spec.spans() {
                assert_eq!(start, pos);
                assert!(len > 0);
                pos += len;
            }
            assert_eq!(pos, t);
        }
    }

    fn toy_fs(t: usize) -> FeatureSequence {
        FeatureSequence::new(2, t, (0..2 * t).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn training_chunks_are_deterministic_and_in_range() {
        let fs = toy_fs(500);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            training_chunks(&fs, 100, 200, &mut rng).unwrap()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
        for c in &a {
            assert!(c.n_frames() >= 100 && c.n_frames() <= 200);
        }

        let short = toy_fs(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(training_chunks(&short, 100, 200, &mut rng)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn chunk_lengths_are_uniform_on_average() {
        // 1e5 draws; uniform on [100, 200] has sd (max-min)/sqrt(12).
        let fs = toy_fs(5000);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut lens = Vec::new();
        while lens.len() < 100_000 {
            for c in training_chunks(&fs, 100, 200, &mut rng).unwrap() {
                lens.push(c.n_frames() as f64);
            }
        }
        lens.truncate(100_000);
        let n = lens.len() as f64;
        let mean = lens.iter().sum::<f64>() / n;
        let sd = 100.0 / 12f64.sqrt();
        let sigma_of_mean = sd / n.sqrt();
        assert!(
            (mean - 150.0).abs() < 3.0 * sigma_of_mean + 0.5,
            "mean {mean}"
        );
    }
}
