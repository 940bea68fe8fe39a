//! Trial lists: enrollment/test utterance pairs labeled target or nontarget.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{CorpusManifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialPair {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// Sample a balanced trial list from the enroll and test splits:
/// `n_target` same-speaker pairs and `n_nontarget` cross-speaker pairs,
/// without duplicates or self-pairs, deterministic per seed.
pub fn build_trials(
    manifest: &CorpusManifest,
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<TrialPair>> {
    let enroll: Vec<_> = manifest.by_split(Split::Enroll).collect();
    let test: Vec<_> = manifest.by_split(Split::Test).collect();
    if enroll.is_empty() || test.is_empty() {
        return Err(Error::State(
            "enroll and test splits must be non-empty".into(),
        ));
    }

    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for e in &enroll {
        for t in &test {
            if e.utterance_id == t.utterance_id {
                continue;
            }
            if e.speaker_id == t.speaker_id {
                targets.push((e.utterance_id.clone(), t.utterance_id.clone()));
            } else {
                nontargets.push((e.utterance_id.clone(), t.utterance_id.clone()));
            }
        }
    }
    if targets.len() < n_target || nontargets.len() < n_nontarget {
        return Err(Error::Count(format!(
            "requested {n_target}+{n_nontarget} trials, available {}+{}",
            targets.len(),
            nontargets.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    targets.shuffle(&mut rng);
    nontargets.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n_target + n_nontarget);
    for (enroll, test) in targets.into_iter().take(n_target) {
        out.push(TrialPair {
            enroll,
            test,
            target: true,
        });
    }
    for (enroll, test) in nontargets.into_iter().take(n_nontarget) {
        out.push(TrialPair {
            enroll,
            test,
            target: false,
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn write_trials(trials: &[TrialPair], path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!(
            "{} {} {}\n",
            t.enroll,
            t.test,
            if t.target { "target" } else { "nontarget" }
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialPair>> {
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
                format!("line {}: expected `enroll test label`", lineno + 1),
            ));
        }
        let target = match parts[2] {
            "target" => true,
            "nontarget" => false,
            other => {
                return Err(Error::format(
                    &p,
                    format!("line {}: bad label {other:?}", lineno + 1),
                ))
            }
        };
        out.push(TrialPair {
            enroll: parts[0].to_string(),
            test: parts[1].to_string(),
            target,
        });
    }
    Ok(out)
}
