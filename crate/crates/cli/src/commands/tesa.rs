//! `train-tesa` and `score-tesa`.

use std::path::Path;

use anyhow::{bail, Result};
use rayon::prelude::*;
use svkit_core::corpus::{read_trials, CorpusManifest, Split};
use svkit_core::metrics::{write_scores, ScoreRecord};
use svkit_core::tesa::{build_pair_dataset, train_tesa, write_pair_manifest, TesaModel};

use super::load_chunk_table;
use crate::config::ExperimentConfig;
use crate::rundir::RunDir;

pub fn train(
    cfg: &ExperimentConfig,
    manifest_path: &Path,
    chunks_path: &Path,
    out: &Path,
) -> Result<()> {
    let mut run = RunDir::create(out, "train-tesa")?;
    run.input("manifest", manifest_path);
    run.input("chunks", chunks_path);

    let manifest = CorpusManifest::read(manifest_path)?;
    let mut table = load_chunk_table(chunks_path)?;
    let mut utterances = Vec::new();
    for e in manifest.by_split(Split::Train) {
        if let Some(t) = table.remove(&e.utterance_id) {
            utterances.push((e.utterance_id.clone(), e.speaker_id.clone(), t));
        }
    }
    if utterances.is_empty() {
        bail!(
            "no train-split chunk embeddings found in {}",
            chunks_path.display()
        );
    }
    let emb_dim = utterances[0].2.shape()[1];

    let dataset = build_pair_dataset(utterances, cfg.tesa_pair_cap()?, cfg.seed()? ^ 0x9a17)?;
    if dataset.skipped_single > 0 {
        eprintln!(
            "train-tesa: {} single-utterance speakers contribute no same-speaker pairs",
            dataset.skipped_single
        );
    }
    write_pair_manifest(&dataset, &run.path("pairs.txt"))?;
    run.output("pairs.txt");

    let mut model = TesaModel::new(cfg.tesa(emb_dim)?, cfg.seed()?)?;
    let report = train_tesa(&mut model, &dataset, &cfg.tesa_train()?)?;
    model.save(&run.path("tesa.ckpt"))?;
    run.output("tesa.ckpt");
    let mut log = String::new();
    for (epoch, step, loss, lr) in &report.log {
        log.push_str(&format!("{epoch} {step} {loss:.6} {lr:.6e}\n"));
    }
    std::fs::write(run.path("metrics.log"), log)?;
    run.output("metrics.log");
    eprintln!(
        "train-tesa: {} pairs ({} same / {} different), final loss {:.4}",
        dataset.pairs.len(),
        dataset.n_same(),
        dataset.n_diff(),
        report.final_loss
    );
    run.finish(cfg)
}

pub fn score(
    cfg: &ExperimentConfig,
    model_path: &Path,
    chunks_path: &Path,
    trials_path: &Path,
    out: &Path,
) -> Result<()> {
    let mut run = RunDir::create(out, "score-tesa")?;
    run.input("model", model_path);
    run.input("chunks", chunks_path);
    run.input("trials", trials_path);

    let model = TesaModel::load(model_path)?;
    let table = load_chunk_table(chunks_path)?;
    let trials = read_trials(trials_path)?;
    let records: Result<Vec<ScoreRecord>, svkit_core::Error> = trials
        .par_iter()
        .map(|t| {
            let a = table
                .get(&t.enroll)
                .ok_or_else(|| svkit_core::Error::State(format!("no chunks for {}", t.enroll)))?;
            let b = table
                .get(&t.test)
                .ok_or_else(|| svkit_core::Error::State(format!("no chunks for {}", t.test)))?;
            Ok(ScoreRecord {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                target: t.target,
                score: model.score(a, b)?,
            })
        })
        .collect();
    let records = records?;
    write_scores(&records, &run.path("scores.txt"))?;
    run.output("scores.txt");
    eprintln!("score-tesa: {} trials", records.len());
    run.finish(cfg)
}
