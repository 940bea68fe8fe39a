//! Pair-dataset construction for the verifier.
//!
//! Same-speaker pairs: every unordered same-speaker pairing. Different-
//! speaker pairs: each utterance draws as many random other-speaker partners
//! as it has same-speaker pairings. Both sets are capped per speaker (2,000
//! at full scale, all available pairings below that) and balanced, then
//! combined and shuffled deterministically.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled pair, referring into [`PairDataset::utterances`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairExample {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug)]
pub struct PairDataset {
    /// `(utterance_id, speaker_id, chunk embeddings [n_chunks x emb])`.
    pub utterances: Vec<(String, String, Tensor)>,
    pub pairs: Vec<PairExample>,
    /// Speakers contributing no same-speaker pairs (single utterance).
    pub skipped_single: usize,
}

impl PairDataset {
    pub fn n_same(&self) -> usize {
        self.pairs.iter().filter(|p| p.same).count()
    }

    pub fn n_diff(&self) -> usize {
        self.pairs.len() - self.n_same()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Build the labeled pair set over per-utterance chunk embeddings.
pub fn build_pair_dataset(
    utterances: Vec<(String, String, Tensor)>,
    cap_per_speaker: usize,
    seed: u64,
) -> Result<PairDataset> {
    if cap_per_speaker == 0 {
        return Err(Error::Config("cap_per_speaker must be positive".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, spk, _)) in utterances.iter().enumerate() {
        by_speaker.entry(spk.as_str()).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(Error::Config(
            "pair dataset needs at least 2 speakers".into(),
        ));
    }

    let mut pairs = Vec::new();
    let mut skipped_single = 0usize;
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    for (spk_idx, (_spk, utts)) in by_speaker.iter().enumerate() {
        if utts.len() < 2 {
            skipped_single += 1;
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(spk_idx as u64)));

        // All unordered same-speaker pairs, capped.
        let mut same: Vec<(usize, usize)> = Vec::new();
        for i in 0..utts.len() {
            for j in i + 1..utts.len() {
                same.push((utts[i], utts[j]));
            }
        }
        if same.len() > cap_per_speaker {
            same.shuffle(&mut rng);
            same.truncate(cap_per_speaker);
        }
        let same_count = same.len();

        // Per utterance, as many random different-speaker partners as it has
        // same-speaker pairings; dedupe globally, then subsample to match
        // the same-speaker count for balance.
        let others: Vec<usize> = by_speaker
            .iter()
            .filter(|(s, _)| **s != *_spk)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        let per_utt = utts.len() - 1;
        let mut diff: Vec<(usize, usize)> = Vec::new();
        for &u in utts.iter() {
            let mut chosen: HashSet<usize> = HashSet::new();
            let want = per_utt.min(others.len());
            let mut guard = 0;
            while chosen.len() < want && guard < 50 * want {
                guard += 1;
                let cand = others[rng.random_range(0..others.len())];
                if chosen.insert(cand) {
                    let key = (u.min(cand), u.max(cand));
                    if seen.insert(key) {
                        diff.push(key);
                    }
                }
            }
        }
        diff.shuffle(&mut rng);
        diff.truncate(cap_per_speaker.min(same_count));

        pairs.extend(
            same.into_iter()
                .map(|(a, b)| PairExample { a, b, same: true }),
        );
        pairs.extend(
            diff.into_iter()
                .map(|(a, b)| PairExample { a, b, same: false }),
        );
    }
    if pairs.is_empty() {
        return Err(Error::State("no pairs could be built".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xbeef));
    pairs.shuffle(&mut rng);
    Ok(PairDataset {
        utterances,
        pairs,
        skipped_single,
    })
}

/// `utt_a utt_b same|different` per line.
pub fn write_pair_manifest(dataset: &PairDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in &dataset.pairs {
        out.push_str(&format!(
            "{} {} {}\n",
            dataset.utterances[p.a].0,
            dataset.utterances[p.b].0,
            if p.same { "same" } else { "different" }
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pair_manifest(path: &Path) -> Result<Vec<(String, String, bool)>> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&p, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::format(
                &p,
                format!("line {}: expected `utt_a utt_b label`", lineno + 1),
            ));
        }
        let same = match parts[2] {
            "same" => true,
            "different" => false,
            other => {
                return Err(Error::format(
                    &p,
                    format!("line {}: bad label {other:?}", lineno + 1),
                ))
            }
        };
        out.push((parts[0].to_string(), parts[1].to_string(), same));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utterances(per_speaker: &[usize]) -> Vec<(String, String, Tensor)> {
        let mut out = Vec::new();
        for (s, &n) in per_speaker.iter().enumerate() {
            for u in 0..n {
                out.push((
                    format!("spk{s}_u{u}"),
                    format!("spk{s}"),
                    Tensor::filled(vec![1, 4], (s * 100 + u) as f64),
                ));
            }
        }
        out
    }

    #[test]
    fn three_utterances_give_three_same_pairs() {
        let ds = build_pair_dataset(utterances(&[3, 3]), 2000, 1).unwrap();
        let spk0_same: Vec<_> = ds
            .pairs
            .iter()
            .filter(|p| p.same && ds.utterances[p.a].1 == "spk0")
            .collect();
        assert_eq!(spk0_same.len(), 3);
    }

    #[test]
    fn cap_limits_a_prolific_speaker() {
        // 80 utterances: C(80,2) = 3160 possible, capped to 2000.
        let ds = build_pair_dataset(utterances(&[80, 5]), 2000, 2).unwrap();
        let spk0_same = ds
            .pairs
            .iter()
            .filter(|p| p.same && ds.utterances[p.a].1 == "spk0")
            .count();
        assert_eq!(spk0_same, 2000);
    }

    #[test]
    fn classes_are_balanced() {
        let ds = build_pair_dataset(utterances(&[8, 8, 8, 8]), 2000, 3).unwrap();
        let ratio = ds.n_same() as f64 / ds.n_diff() as f64;
        assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn labels_are_correct_and_pairs_unique() {
        let ds = build_pair_dataset(utterances(&[5, 6, 4]), 2000, 4).unwrap();
        let mut seen = HashSet::new();
        for p in &ds.pairs {
            assert_ne!(p.a, p.b);
            assert!(seen.insert((p.a.min(p.b), p.a.max(p.b))));
            let same = ds.utterances[p.a].1 == ds.utterances[p.b].1;
            assert_eq!(same, p.same);
        }
    }

    #[test]
    fn single_utterance_speakers_are_skipped_and_counted() {
        let ds = build_pair_dataset(utterances(&[1, 4, 4]), 2000, 5).unwrap();
        assert_eq!(ds.skipped_single, 1);
        for p in &ds.pairs {
            if p.same {
                assert_ne!(ds.utterances[p.a].1, "spk0");
            }
        }
    }

    #[test]
    fn deterministic_per_seed_and_manifest_round_trip() {
        let a = build_pair_dataset(utterances(&[5, 5, 5]), 2000, 6).unwrap();
        let b = build_pair_dataset(utterances(&[5, 5, 5]), 2000, 6).unwrap();
        assert_eq!(a.pairs, b.pairs);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.txt");
        write_pair_manifest(&a, &path).unwrap();
        let back = read_pair_manifest(&path).unwrap();
        assert_eq!(back.len(), a.pairs.len());
        for (line, p) in back.iter().zip(&a.pairs) {
            assert_eq!(line.0, a.utterances[p.a].0);
            assert_eq!(line.2, p.same);
        }
    }
}
