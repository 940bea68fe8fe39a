//! Subcommand implementations.

pub mod backend;
pub mod data;
pub mod evaluate;
pub mod extract;
pub mod tesa;
pub mod train;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use svkit_core::corpus::CorpusManifest;
use svkit_core::dsp::FeatureSequence;
use svkit_core::io::ArchiveReader;
use svkit_core::tensor::Tensor;

/// Resolve a manifest entry's data path relative to the manifest location.
pub fn entry_path(manifest_path: &Path, entry_path: &str) -> PathBuf {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    base.join(entry_path)
}

/// Load every feature sequence referenced by a manifest (entries must point
/// at feature archives, one record per utterance id).
pub fn load_features(
    manifest_path: &Path,
    manifest: &CorpusManifest,
) -> Result<Vec<FeatureSequence>> {
    let mut readers: HashMap<PathBuf, ArchiveReader> = HashMap::new();
    let mut out = Vec::with_capacity(manifest.len());
    for e in manifest.entries() {
        if !e.path.ends_with(".ark") {
            bail!(
                "manifest entry {} points at {} (run featurize first)",
                e.utterance_id,
                e.path
            );
        }
        let path = entry_path(manifest_path, &e.path);
        if !readers.contains_key(&path) {
            readers.insert(path.clone(), ArchiveReader::open(&path)?);
        }
        let tensor = readers
            .get_mut(&path)
            .unwrap()
            .get(&e.utterance_id)
            .with_context(|| format!("feature record {}", e.utterance_id))?;
        out.push(FeatureSequence::from_tensor(
            &tensor,
            &e.utterance_id,
            &e.speaker_id,
        )?);
    }
    Ok(out)
}

/// Load an embedding archive into an utterance -> vector table.
pub fn load_embeddings(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let mut reader = ArchiveReader::open(path)?;
    let names = reader.names().to_vec();
    let mut out = HashMap::with_capacity(names.len());
    for name in names {
        let t = reader.get(&name)?;
        if t.rank() != 1 {
            bail!("record {name} in {} is not a vector", path.display());
        }
        out.insert(name, t.into_data());
    }
    Ok(out)
}

/// Load a chunk-embedding archive into (utterance, tensor) records.
pub fn load_chunk_table(path: &Path) -> Result<HashMap<String, Tensor>> {
    let mut reader = ArchiveReader::open(path)?;
    let names = reader.names().to_vec();
    let mut out = HashMap::with_capacity(names.len());
    for name in names {
        let t = reader.get(&name)?;
        if t.rank() != 2 {
            bail!("record {name} in {} is not a chunk matrix", path.display());
        }
        out.insert(name, t);
    }
    Ok(out)
}
