//! Synthetic labeled speaker corpus: controllable between/within-speaker
//! variance, deterministic per seed, with train / enroll / test splits and
//! trial lists. Stands in for a real corpus so the whole pipeline can be
//! exercised at desk scale.

mod manifest;
mod synth;
mod trials;

pub use manifest::{CorpusManifest, ManifestEntry, Split};
pub use synth::{generate, write_corpus, CorpusConfig, CorpusMode, SpeakerProfile, SynthCorpus};
pub use trials::{build_trials, read_trials, write_trials, TrialPair};
