//! `fit-backend`, `score-plda`, and `ensemble`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use svkit_core::corpus::{read_trials, CorpusManifest, Split};
use svkit_core::io::{ArchiveReader, ArchiveWriter};
use svkit_core::metrics::write_scores;
use svkit_core::plda::{ensemble_concat, fit_backend, Backend, BackendConfig};
use svkit_core::tensor::Tensor;

use super::load_embeddings;
use crate::config::ExperimentConfig;
use crate::rundir::RunDir;

pub fn fit(
    cfg: &ExperimentConfig,
    manifest_path: &Path,
    embeddings_path: &Path,
    out: &Path,
    lda_dim_override: Option<usize>,
) -> Result<()> {
    let mut run = RunDir::create(out, "fit-backend")?;
    run.input("manifest", manifest_path);
    run.input("embeddings", embeddings_path);

    let manifest = CorpusManifest::read(manifest_path)?;
    let table = load_embeddings(embeddings_path)?;

    let mut speakers: Vec<&str> = manifest
        .by_split(Split::Train)
        .map(|e| e.speaker_id.as_str())
        .collect();
    speakers.sort();
    speakers.dedup();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for e in manifest.by_split(Split::Train) {
        let Some(emb) = table.get(&e.utterance_id) else {
            continue; // embeddings may cover a subset (skipped utterances)
        };
        let label = speakers.binary_search(&e.speaker_id.as_str()).unwrap();
        xs.push(emb.clone());
        ys.push(label);
    }
    if xs.is_empty() {
        bail!(
            "no train-split embeddings found in {}",
            embeddings_path.display()
        );
    }

    let lda_dim = match lda_dim_override {
        Some(0) => None,
        Some(d) => Some(d),
        None => cfg.backend_lda_dim()?,
    };
    let backend = fit_backend(
        &xs,
        &ys,
        BackendConfig {
            lda_dim,
            length_norm: cfg.backend_length_norm()?,
        },
    )?;
    if backend.plda.regularized {
        eprintln!("fit-backend: within-class covariance was regularized");
    }
    if backend.plda.clamped > 0 {
        eprintln!(
            "fit-backend: {} negative between-class eigenvalues clamped to zero",
            backend.plda.clamped
        );
    }
    backend.save(&run.path("backend.ckpt"))?;
    run.output("backend.ckpt");
    eprintln!(
        "fit-backend: {} embeddings, {} speakers, lda_dim {:?}",
        xs.len(),
        speakers.len(),
        lda_dim
    );
    run.finish(cfg)
}

pub fn score(
    cfg: &ExperimentConfig,
    backend_path: &Path,
    embeddings_path: &Path,
    trials_path: &Path,
    out: &Path,
) -> Result<()> {
    let mut run = RunDir::create(out, "score-plda")?;
    run.input("backend", backend_path);
    run.input("embeddings", embeddings_path);
    run.input("trials", trials_path);

    let backend = Backend::load(backend_path)?;
    let table = load_embeddings(embeddings_path)?;
    let trials = read_trials(trials_path)?;
    let records = backend.score_trials(&table, &trials)?;
    write_scores(&records, &run.path("scores.txt"))?;
    run.output("scores.txt");
    eprintln!("score-plda: {} trials", records.len());
    run.finish(cfg)
}

/// Concatenate two embedding archives utterance-by-utterance.
pub fn ensemble(cfg: &ExperimentConfig, a: &Path, b: &Path, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "ensemble")?;
    run.input("a", a);
    run.input("b", b);

    let mut ra = ArchiveReader::open(a)?;
    let mut rb = ArchiveReader::open(b)?;
    let names = ra.names().to_vec();
    let mut writer = ArchiveWriter::create(&run.path("embeddings.ark"))?;
    let mut count = 0usize;
    for name in &names {
        if !rb.contains(name) {
            bail!("{} missing from {}", name, b.display());
        }
        let ea = ra.get(name)?;
        let eb = rb.get(name)?;
        let joined = ensemble_concat(ea.data(), eb.data(), None)
            .with_context(|| format!("concatenating {name}"))?;
        let dim = joined.len();
        writer.write(name, &Tensor::new(vec![dim], joined)?)?;
        count += 1;
    }
    writer.finish()?;
    run.output("embeddings.ark");
    eprintln!("ensemble: {count} utterances concatenated");
    run.finish(cfg)
}
