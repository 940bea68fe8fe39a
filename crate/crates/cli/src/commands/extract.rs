//! `extract`: utterance embeddings (and optionally per-chunk embeddings for
//! the pair verifier) from a trained classifier.

use std::path::Path;

use anyhow::{bail, Result};
use rayon::prelude::*;
use svkit_core::corpus::{CorpusManifest, Split};
use svkit_core::dsp::prepare;
use svkit_core::io::ArchiveWriter;
use svkit_core::models::{average, chunk_embeddings, Model, Tap};
use svkit_core::tensor::Tensor;

use super::load_features;
use crate::config::ExperimentConfig;
use crate::rundir::RunDir;

pub struct ExtractArgs<'a> {
    pub manifest: &'a Path,
    pub model: &'a Path,
    pub out: &'a Path,
    pub chunk_len: Option<usize>,
    pub tap: Option<String>,
    pub split: Option<String>,
    pub with_chunks: bool,
}

pub fn extract(cfg: &ExperimentConfig, args: &ExtractArgs<'_>) -> Result<()> {
    let mut run = RunDir::create(args.out, "extract")?;
    run.input("manifest", args.manifest);
    run.input("model", args.model);

    let manifest = CorpusManifest::read(args.manifest)?;
    let model = Model::load(args.model)?;
    let dsp = cfg.dsp()?;
    let chunk_len = match args.chunk_len {
        Some(n) => n,
        None => cfg.chunk_len()?,
    };
    let tap = match &args.tap {
        Some(t) => Tap::parse(t)?,
        None => cfg.tap()?,
    };
    let split_filter = match args.split.as_deref() {
        None | Some("all") => None,
        Some(s) => Some(Split::parse(s)?),
    };

    let feats = load_features(args.manifest, &manifest)?;
    let selected: Vec<_> = feats
        .iter()
        .zip(manifest.entries())
        .filter(|(_, e)| split_filter.is_none_or(|s| e.split == s))
        .map(|(f, _)| f)
        .collect();
    if selected.is_empty() {
        bail!("no utterances selected for extraction");
    }

    // Parallel across utterances against the immutable model; results are
    // collected in manifest order.
    let results: Result<Vec<(String, Vec<Vec<f64>>)>> = selected
        .par_iter()
        .map(|fs| {
            let prepared = prepare(fs, &dsp)?;
            let chunks = chunk_embeddings(&model, &prepared, chunk_len, tap)?;
            Ok((fs.utterance_id.clone(), chunks))
        })
        .collect();
    let results = results?;

    let emb_dim = model.emb_dim();
    let mut emb_writer = ArchiveWriter::create(&run.path("embeddings.ark"))?;
    let mut chunk_writer = if args.with_chunks {
        Some(ArchiveWriter::create(&run.path("chunks.ark"))?)
    } else {
        None
    };
    for (utt, chunks) in &results {
        let mean = average(chunks);
        emb_writer.write(utt, &Tensor::new(vec![emb_dim], mean)?)?;
        if let Some(w) = &mut chunk_writer {
            let flat: Vec<f64> = chunks.iter().flatten().copied().collect();
            w.write(utt, &Tensor::new(vec![chunks.len(), emb_dim], flat)?)?;
        }
    }
    emb_writer.finish()?;
    run.output("embeddings.ark");
    if let Some(w) = chunk_writer {
        w.finish()?;
        run.output("chunks.ark");
    }
    eprintln!(
        "extract: {} utterances, chunk_len {}, tap {}",
        results.len(),
        chunk_len,
        tap.as_str()
    );
    run.finish(cfg)
}
