//! Corpus manifest: one `utterance_id speaker_id split path` record per line.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Enroll,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Enroll => "enroll",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "enroll" => Ok(Split::Enroll),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub split: Split,
    pub path: String,
}

#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        CorpusManifest { entries }
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn by_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn speaker_of(&self, utterance_id: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|e| e.utterance_id == utterance_id)
            .map(|e| e.speaker_id.as_str())
            .ok_or_else(|| Error::State(format!("utterance {utterance_id} not in manifest")))
    }

    pub fn speakers(&self, split: Split) -> BTreeSet<&str> {
        self.by_split(split)
            .map(|e| e.speaker_id.as_str())
            .collect()
    }

    /// Train speakers must not appear in enroll or test when evaluation is
    /// meant to be on unseen speakers.
    pub fn validate_unseen_eval(&self) -> Result<()> {
        let train = self.speakers(Split::Train);
        let mut eval = self.speakers(Split::Enroll);
        eval.extend(self.speakers(Split::Test));
        let overlap: Vec<&str> = train.intersection(&eval).copied().collect();
        if !overlap.is_empty() {
            return Err(Error::State(format!(
                "train and eval speaker sets overlap: {overlap:?}"
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {}\n",
                e.utterance_id,
                e.speaker_id,
                e.split.as_str(),
                e.path
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&p, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::format(
                    &p,
                    format!(
                        "line {}: expected 4 fields, got {}",
                        lineno + 1,
                        parts.len()
                    ),
                ));
            }
            entries.push(ManifestEntry {
                utterance_id: parts[0].to_string(),
                speaker_id: parts[1].to_string(),
                split: Split::parse(parts[2])?,
                path: parts[3].to_string(),
            });
        }
        Ok(CorpusManifest { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unseen_validation() {
        let m = CorpusManifest::new(vec![
            ManifestEntry {
                utterance_id: "s0_u0".into(),
                speaker_id: "s0".into(),
                split: Split::Train,
                path: "features.ark".into(),
            },
            ManifestEntry {
                utterance_id: "s1_u0".into(),
                speaker_id: "s1".into(),
                split: Split::Enroll,
                path: "features.ark".into(),
            },
            ManifestEntry {
                utterance_id: "s1_u1".into(),
                speaker_id: "s1".into(),
                split: Split::Test,
                path: "features.ark".into(),
            },
        ]);
        m.validate_unseen_eval().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        m.write(&path).unwrap();
        let back = CorpusManifest::read(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.speaker_of("s1_u1").unwrap(), "s1");
        assert_eq!(back.speakers(Split::Train).len(), 1);

        let bad = CorpusManifest::new(vec![
            ManifestEntry {
                utterance_id: "a".into(),
                speaker_id: "s0".into(),
                split: Split::Train,
                path: "x".into(),
            },
            ManifestEntry {
                utterance_id: "b".into(),
                speaker_id: "s0".into(),
                split: Split::Test,
                path: "x".into(),
            },
        ]);
        assert!(bad.validate_unseen_eval().is_err());
    }
}
