//! `train-classifier`.

use std::path::Path;

use anyhow::{bail, Result};
use svkit_core::corpus::{CorpusManifest, Split};
use svkit_core::models::{Model, SvectorModel, TdnnModel};
use svkit_core::train::{build_chunk_set, train_classifier, Optimizer};

use super::load_features;
use crate::config::ExperimentConfig;
use crate::rundir::RunDir;

pub fn train(
    cfg: &ExperimentConfig,
    manifest_path: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let mut run = RunDir::create(out, "train-classifier")?;
    run.input("manifest", manifest_path);
    let manifest = CorpusManifest::read(manifest_path)?;
    let all = load_features(manifest_path, &manifest)?;
    let train_ids: std::collections::HashSet<&str> = manifest
        .by_split(Split::Train)
        .map(|e| e.utterance_id.as_str())
        .collect();
    let train_feats: Vec<_> = all
        .into_iter()
        .filter(|f| train_ids.contains(f.utterance_id.as_str()))
        .collect();
    if train_feats.is_empty() {
        bail!("manifest has no train-split utterances");
    }

    let dsp = cfg.dsp()?;
    let mut train_cfg = cfg.train()?;
    if train_cfg.checkpoint_every > 0 {
        train_cfg.checkpoint_dir = Some(out.to_path_buf());
    }
    let data = build_chunk_set(&train_feats, &dsp, &train_cfg)?;
    if data.skipped > 0 {
        eprintln!(
            "train-classifier: skipped {} utterances shorter than {} frames",
            data.skipped, train_cfg.min_chunk
        );
    }

    let input_dim = train_feats[0].n_coeffs();
    let (mut model, resume_opt) = match resume {
        Some(dir) => {
            let model = Model::load(&dir.join("model.ckpt"))?;
            let opt = Optimizer::load(&dir.join("optimizer.ckpt"))?;
            run.input("resume_model", &dir.join("model.ckpt"));
            (model, Some(opt))
        }
        None => {
            let model = match cfg.model_kind() {
                "svector" => Model::Svector(SvectorModel::new(
                    cfg.svector(input_dim, data.n_speakers())?,
                    cfg.seed()?,
                )?),
                "tdnn" => Model::Tdnn(TdnnModel::new(
                    cfg.tdnn(input_dim, data.n_speakers())?,
                    cfg.seed()?,
                )?),
                other => bail!("[model] kind must be svector or tdnn, got {other:?}"),
            };
            (model, None)
        }
    };

    let report = train_classifier(&mut model, &data, &train_cfg, resume_opt)?;

    model.save(&run.path("model.ckpt"))?;
    report.optimizer.save(&run.path("optimizer.ckpt"))?;
    let mut log = String::new();
    for e in &report.log {
        log.push_str(&e.line());
        log.push('\n');
    }
    std::fs::write(run.path("metrics.log"), log)?;
    let speakers: String = data.speakers.iter().map(|s| format!("{s}\n")).collect();
    std::fs::write(run.path("speakers.txt"), speakers)?;
    run.output("model.ckpt");
    run.output("optimizer.ckpt");
    run.output("metrics.log");
    run.output("speakers.txt");
    eprintln!(
        "train-classifier: {} steps, held-out accuracy {:.4}{}",
        report.optimizer.step,
        report.final_acc,
        if report.reached_target {
            " (target reached)"
        } else {
            ""
        }
    );
    run.finish(cfg)
}
