//! `synth` and `featurize`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use svkit_core::corpus::{build_trials, generate, write_corpus, write_trials, CorpusManifest};
use svkit_core::dsp::mfcc;
use svkit_core::io::{wav::read_wav, ArchiveWriter};

use super::entry_path;
use crate::config::ExperimentConfig;
use crate::rundir::RunDir;

/// Generate the synthetic corpus, its manifest, and a trial list.
pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "synth")?;
    let corpus_cfg = cfg.corpus()?;
    let corpus = generate(&corpus_cfg)?;
    write_corpus(&corpus, out)?;
    run.output("manifest.txt");
    match corpus_cfg.mode {
        svkit_core::corpus::CorpusMode::Features => run.output("features.ark"),
        svkit_core::corpus::CorpusMode::Waveform => run.output("wav/"),
    }
    if corpus_cfg.eval_speakers > 0 {
        let (n_target, n_nontarget) = cfg.trial_counts()?;
        let trials = build_trials(
            &corpus.manifest,
            n_target,
            n_nontarget,
            cfg.seed()? ^ 0x7215,
        )?;
        write_trials(&trials, &out.join("trials.txt"))?;
        run.output("trials.txt");
    }
    eprintln!(
        "synth: {} utterances from {} speakers",
        corpus.manifest.len(),
        corpus_cfg.n_speakers + corpus_cfg.eval_speakers
    );
    run.finish(cfg)
}

/// Turn WAV utterances into a raw MFCC archive plus a rewritten manifest.
pub fn featurize(cfg: &ExperimentConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "featurize")?;
    run.input("manifest", manifest_path);
    let manifest = CorpusManifest::read(manifest_path)?;
    let dsp = cfg.dsp()?;

    let feats: Result<Vec<_>> = manifest
        .entries()
        .par_iter()
        .map(|e| {
            if !e.path.ends_with(".wav") {
                bail!(
                    "manifest entry {} points at {}, not a wav file (already featurized?)",
                    e.utterance_id,
                    e.path
                );
            }
            let wav_path = entry_path(manifest_path, &e.path);
            let (samples, sample_rate) = read_wav(&wav_path)?;
            let fs = mfcc(
                &svkit_core::dsp::Waveform {
                    samples,
                    sample_rate,
                },
                &dsp,
            )
            .with_context(|| format!("featurizing {}", e.utterance_id))?;
            Ok(fs.to_tensor())
        })
        .collect();
    let feats = feats?;

    let mut writer = ArchiveWriter::create(&run.path("features.ark"))?;
    for (e, t) in manifest.entries().iter().zip(&feats) {
        writer.write(&e.utterance_id, t)?;
    }
    writer.finish()?;
    run.output("features.ark");

    let rewritten = CorpusManifest::new(
        manifest
            .entries()
            .iter()
            .map(|e| svkit_core::corpus::ManifestEntry {
                utterance_id: e.utterance_id.clone(),
                speaker_id: e.speaker_id.clone(),
                split: e.split,
                path: "features.ark".to_string(),
            })
            .collect(),
    );
    rewritten.write(&run.path("manifest.txt"))?;
    run.output("manifest.txt");
    eprintln!("featurize: {} utterances", manifest.len());
    run.finish(cfg)
}
