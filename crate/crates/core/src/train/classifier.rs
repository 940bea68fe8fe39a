//! Speaker-classifier training loop: pre-generated random chunks, batches
//! bucketed by exact length (batch norm then sees true batch statistics with
//! no padding), Noam-scaled Adam updates with gradient clipping, per-epoch
//! held-out accuracy, and deterministic resume from a step checkpoint.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::optimizer::Optimizer;
use super::schedule::NoamSchedule;
use crate::dsp::{prepare, training_chunks, DspConfig, FeatureSequence};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_factor: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub min_chunk: usize,
    pub max_chunk: usize,
    /// Fraction of chunks held out for the accuracy metric.
    pub holdout_frac: f64,
    /// Stop once held-out accuracy reaches this value.
    pub target_acc: Option<f64>,
    /// Hard cap on optimizer steps (resume-aware); `None` runs all epochs.
    pub max_steps: Option<u64>,
    /// Write model/optimizer snapshots into `checkpoint_dir` every this
    /// many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<std::path::PathBuf>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            lr_factor: 10.0,
            warmup_steps: 25_000,
            grad_clip: 5.0,
            min_chunk: 200,
            max_chunk: 400,
            holdout_frac: 0.1,
            target_acc: None,
            max_steps: None,
            checkpoint_every: 0,
            checkpoint_dir: None,
            seed: 42,
        }
    }
}

/// Labeled training examples: time-major chunk tensors plus class indices.
#[derive(Debug)]
pub struct ChunkSet {
    pub train: Vec<(Tensor, usize)>,
    pub holdout: Vec<(Tensor, usize)>,
    /// Class index -> speaker id.
    pub speakers: Vec<String>,
    /// Utterances skipped because they were shorter than `min_chunk`.
    pub skipped: usize,
}

impl ChunkSet {
    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Prepare (VAD + CMN) every utterance, draw random chunks, and split off a
/// held-out fraction. Deterministic for a fixed seed.
pub fn build_chunk_set(
    features: &[FeatureSequence],
    dsp: &DspConfig,
    cfg: &TrainConfig,
) -> Result<ChunkSet> {
    let mut speakers: Vec<String> = features.iter().map(|f| f.speaker_id.clone()).collect();
    speakers.sort();
    speakers.dedup();
    if speakers.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 speakers, got {}",
            speakers.len()
        )));
    }
    let label_of = |spk: &str| speakers.iter().position(|s| s == spk).unwrap();

    let mut chunks = Vec::new();
    let mut skipped = 0usize;
    for (idx, fs) in features.iter().enumerate() {
        let prepared = match prepare(fs, dsp) {
            Ok(p) => p,
            Err(Error::EmptyUtterance(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(idx as u64)));
        let drawn = training_chunks(&prepared, cfg.min_chunk, cfg.max_chunk, &mut rng)?;
        if drawn.is_empty() {
            skipped += 1;
            continue;
        }
        let label = label_of(&fs.speaker_id);
        for c in drawn {
            chunks.push((c.to_time_major(), label));
        }
    }
    if chunks.is_empty() {
        return Err(Error::State("no training chunks were produced".into()));
    }

    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x9d1e5));
    order.shuffle(&mut rng);
    let n_holdout = ((chunks.len() as f64) * cfg.holdout_frac).round() as usize;
    let n_holdout = n_holdout.min(chunks.len() - 1);
    let holdout_idx: std::collections::HashSet<usize> =
        order[..n_holdout].iter().copied().collect();

    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (i, c) in chunks.into_iter().enumerate() {
        if holdout_idx.contains(&i) {
            holdout.push(c);
        } else {
            train.push(c);
        }
    }
    Ok(ChunkSet {
        train,
        holdout,
        speakers,
        skipped,
    })
}

/// Batches for one epoch: shuffle, bucket by exact length, emit index
/// batches, shuffle the batch order. Count is identical across epochs.
fn epoch_batches(data: &ChunkSet, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(0xe9 + epoch as u64)));
    order.shuffle(&mut rng);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for idx in order {
        let t = data.train[idx].0.shape()[0];
        buckets.entry(t).or_default().push(idx);
    }
    let mut batches = Vec::new();
    for bucket in buckets.values() {
        for group in bucket.chunks(cfg.batch_size) {
            batches.push(group.to_vec());
        }
    }
    batches.shuffle(&mut rng);
    batches
}

fn assemble(data: &[(Tensor, usize)], batch: &[usize]) -> (Tensor, Vec<usize>) {
    let t = data[batch[0]].0.shape()[0];
    let d = data[batch[0]].0.shape()[1];
    let mut raw = Vec::with_capacity(batch.len() * t * d);
    let mut labels = Vec::with_capacity(batch.len());
    for &i in batch {
        raw.extend_from_slice(data[i].0.data());
        labels.push(data[i].1);
    }
    (
        Tensor::new(vec![batch.len(), t, d], raw).expect("chunk data is finite"),
        labels,
    )
}

/// Eval-mode accuracy over the held-out chunks (parallel over chunks, the
/// model is immutable; results are collected in index order).
pub fn holdout_accuracy(model: &Model, data: &ChunkSet) -> Result<f64> {
    if data.holdout.is_empty() {
        return Ok(f64::NAN);
    }
    let hits: Result<Vec<bool>> = data
        .holdout
        .par_iter()
        .map(|(chunk, label)| {
            let mut tape = Tape::eval();
            let logits = model.logits(&mut tape, chunk)?;
            let v = tape.value(logits);
            let argmax = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            Ok(argmax == *label)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// One `epoch step loss acc lr` record.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "{} {} {:.6} {:.4} {:.6e}",
            self.epoch, self.step, self.loss, self.acc, self.lr
        )
    }
}

#[derive(Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub final_acc: f64,
    pub optimizer: Optimizer,
    pub reached_target: bool,
}

/// Train the classifier in place. `resume` continues from a saved optimizer
/// state: completed steps are skipped by replaying the deterministic batch
/// plan, so split runs match an unbroken one exactly.
pub fn train_classifier(
    model: &mut Model,
    data: &ChunkSet,
    cfg: &TrainConfig,
    resume: Option<Optimizer>,
) -> Result<TrainReport> {
    if data.n_speakers() < 2 {
        return Err(Error::Config("need at least 2 speakers".into()));
    }
    if data.train.is_empty() {
        return Err(Error::State("empty training chunk set".into()));
    }
    for (_, label) in &data.train {
        if *label >= model.n_speakers() {
            return Err(Error::IndexOutOfRange {
                what: "speaker label",
                index: *label,
                len: model.n_speakers(),
            });
        }
    }

    let model_dim = match model {
        Model::Svector(m) => m.config.adim,
        Model::Tdnn(m) => m.config.emb_dim,
    };
    let mut opt = match resume {
        Some(o) => o,
        None => Optimizer::new(
            NoamSchedule::new(cfg.lr_factor, model_dim, cfg.warmup_steps)?,
            cfg.grad_clip,
        ),
    };

    // Last-good snapshot for divergence recovery (params + optimizer).
    let mut snapshot = (model.params().clone(), opt.clone());
    let mut log = Vec::new();
    let mut reached_target = false;
    let mut final_acc = f64::NAN;

    'epochs: for epoch in 0..cfg.epochs {
        let batches = epoch_batches(data, cfg, epoch);
        let steps_per_epoch = batches.len() as u64;
        let epoch_start = epoch as u64 * steps_per_epoch;
        if opt.step >= epoch_start + steps_per_epoch {
            continue; // already completed before resume
        }

        let mut loss_sum = 0.0;
        let mut loss_count = 0u64;
        let mut last_lr = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let global = epoch_start + bi as u64;
            if global < opt.step {
                continue; // replayed portion of a resumed epoch
            }
            if let Some(max) = cfg.max_steps {
                if opt.step >= max {
                    break 'epochs;
                }
            }
            let (input, labels) = assemble(&data.train, batch);
            let dropout_seed = splitmix(cfg.seed ^ splitmix(opt.step + 1));
            let mut tape = Tape::train(dropout_seed);

            let step_result: Result<f64> = (|| {
                let (loss, binds) = model.classifier_loss(&mut tape, &input, &labels)?;
                let loss_val = tape.value(loss)[0];
                tape.backward(loss)?;
                let params = model.params_mut();
                params.apply_gradients(&tape, &binds)?;
                params.apply_stat_updates(tape.take_stat_updates())?;
                let info = opt.step(params)?;
                last_lr = info.lr;
                Ok(loss_val)
            })();

            match step_result {
                Ok(loss_val) => {
                    loss_sum += loss_val;
                    loss_count += 1;
                }
                Err(e @ (Error::Diverged(_) | Error::NonFinite(_))) => {
                    // Roll back to the last epoch boundary and stop.
                    *model.params_mut() = snapshot.0;
                    return Err(Error::Diverged(format!(
                        "step {}: {e}; restored last-good checkpoint at step {}",
                        opt.step, snapshot.1.step
                    )));
                }
                Err(e) => return Err(e),
            }
        }

        let acc = holdout_accuracy(model, data)?;
        final_acc = acc;
        log.push(EpochLog {
            epoch,
            step: opt.step,
            loss: if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                f64::NAN
            },
            acc,
            lr: last_lr,
        });
        snapshot = (model.params().clone(), opt.clone());
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Error::io(dir.display().to_string(), e))?;
                model.save(&dir.join(format!("model_epoch{epoch}.ckpt")))?;
                opt.save(&dir.join(format!("optimizer_epoch{epoch}.ckpt")))?;
            }
        }
        if let Some(target) = cfg.target_acc {
            if acc >= target {
                reached_target = true;
                break;
            }
        }
        if let Some(max) = cfg.max_steps {
            if opt.step >= max {
                break;
            }
        }
    }

    Ok(TrainReport {
        log,
        final_acc,
        optimizer: opt,
        reached_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusConfig};
    use crate::models::{SvectorConfig, SvectorModel};

    fn tiny_model(n_speakers: usize, seed: u64) -> Model {
        Model::Svector(
            SvectorModel::new(
                SvectorConfig {
                    input_dim: 30,
                    n_layers: 1,
                    adim: 16,
                    n_heads: 2,
                    encoder_units: 24,
                    stats_dim: 16,
                    emb_dim: 12,
                    ..SvectorConfig::new(n_speakers)
                },
                seed,
            )
            .unwrap(),
        )
    }

    fn tiny_data(n_speakers: usize, cfg: &TrainConfig) -> ChunkSet {
        let corpus = generate(&CorpusConfig {
            n_speakers,
            eval_speakers: 0,
            utts_per_speaker: 4,
            len_range_s: (0.8, 1.2),
            variance_ratio: 12.0,
            seed: 7,
            ..CorpusConfig::default()
        })
        .unwrap();
        let dsp = DspConfig {
            vad_offset: -100.0,
            cmn: crate::dsp::CmnMode::Off,
            ..DspConfig::default()
        };
        build_chunk_set(&corpus.features, &dsp, cfg).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 3,
            lr_factor: 1.0,
            warmup_steps: 50,
            min_chunk: 30,
            max_chunk: 50,
            holdout_frac: 0.2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_mostly_decreases_on_a_fixed_batch() {
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg()
        };
        let data = tiny_data(3, &cfg);
        let mut model = tiny_model(3, 1);
        // Single fixed batch of 8 equal-length chunks trained for 10 steps.
        let same_len: Vec<usize> = {
            let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, (c, _)) in data.train.iter().enumerate() {
                by_len.entry(c.shape()[0]).or_default().push(i);
            }
            by_len.into_values().max_by_key(|v| v.len()).unwrap()
        };
        let batch: Vec<usize> = same_len.into_iter().take(8).collect();
        let (input, labels) = assemble(&data.train, &batch);
        let mut opt = Optimizer::new(NoamSchedule::new(1.0, 16, 20).unwrap(), 5.0);
        let mut losses = Vec::new();
        for step in 0..10 {
            let mut tape = Tape::train(step);
            let (loss, binds) = model.classifier_loss(&mut tape, &input, &labels).unwrap();
            losses.push(tape.value(loss)[0]);
            tape.backward(loss).unwrap();
            let params = model.params_mut();
            params.apply_gradients(&tape, &binds).unwrap();
            params.apply_stat_updates(tape.take_stat_updates()).unwrap();
            opt.step(params).unwrap();
        }
        let non_decreasing = losses.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(non_decreasing <= 2, "losses {losses:?}");
    }

    #[test]
    fn single_batch_overfit_reaches_near_zero_loss() {
        let cfg = tiny_cfg();
        let data = tiny_data(3, &cfg);
        let mut model = tiny_model(3, 2);
        let same_len: Vec<usize> = {
            let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, (c, _)) in data.train.iter().enumerate() {
                by_len.entry(c.shape()[0]).or_default().push(i);
            }
            by_len.into_values().max_by_key(|v| v.len()).unwrap()
        };
        let batch: Vec<usize> = same_len.into_iter().take(8).collect();
        assert!(batch.len() >= 2);
        let (input, labels) = assemble(&data.train, &batch);
        let mut opt = Optimizer::new(NoamSchedule::new(2.0, 16, 30).unwrap(), 5.0);
        let mut last = f64::INFINITY;
        for step in 0..500u64 {
            // No dropout noise: evaluate the loss on a train-mode tape with
            // dropout disabled via the model config (dropout 0 default here).
            let mut tape = Tape::train(step);
            let (loss, binds) = model.classifier_loss(&mut tape, &input, &labels).unwrap();
            last = tape.value(loss)[0];
            if last < 0.01 {
                break;
            }
            tape.backward(loss).unwrap();
            let params = model.params_mut();
            params.apply_gradients(&tape, &binds).unwrap();
            params.apply_stat_updates(tape.take_stat_updates()).unwrap();
            opt.step(params).unwrap();
        }
        assert!(last < 0.01, "final loss {last}");
    }

    #[test]
    fn periodic_checkpoints_are_written_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            checkpoint_every: 2,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..tiny_cfg()
        };
        let data = tiny_data(3, &cfg);
        let mut model = tiny_model(3, 8);
        train_classifier(&mut model, &data, &cfg, None).unwrap();
        for epoch in [1usize, 3] {
            let m = Model::load(&dir.path().join(format!("model_epoch{epoch}.ckpt"))).unwrap();
            assert_eq!(m.n_speakers(), 3);
            Optimizer::load(&dir.path().join(format!("optimizer_epoch{epoch}.ckpt"))).unwrap();
        }
        assert!(!dir.path().join("model_epoch0.ckpt").exists());
    }

    #[test]
    fn four_speaker_run_clears_ninety_percent_heldout_accuracy() {
        // Four speakers at roughly fifty chunks each; the tiny model must
        // clear 90% held-out accuracy within 20 epochs.
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 20,
            lr_factor: 0.3,
            warmup_steps: 150,
            min_chunk: 30,
            max_chunk: 50,
            holdout_frac: 0.15,
            target_acc: Some(0.9),
            seed: 13,
            ..TrainConfig::default()
        };
        let corpus = generate(&CorpusConfig {
            n_speakers: 4,
            eval_speakers: 0,
            utts_per_speaker: 12,
            len_range_s: (1.4, 2.0),
            variance_ratio: 12.0,
            seed: 19,
            ..CorpusConfig::default()
        })
        .unwrap();
        let dsp = DspConfig {
            vad_offset: -100.0,
            cmn: crate::dsp::CmnMode::Off,
            ..DspConfig::default()
        };
        let data = build_chunk_set(&corpus.features, &dsp, &cfg).unwrap();
        assert!(
            data.train.len() + data.holdout.len() >= 180,
            "{} chunks",
            data.train.len()
        );
        let mut model = tiny_model(4, 3);
        let report = train_classifier(&mut model, &data, &cfg, None).unwrap();
        assert!(
            report.final_acc >= 0.9,
            "held-out accuracy {} after {} steps",
            report.final_acc,
            report.optimizer.step
        );
    }

    #[test]
    fn same_seed_reproduces_identical_parameters() {
        let cfg = tiny_cfg();
        let data = tiny_data(3, &cfg);
        let run = || {
            let mut model = tiny_model(3, 3);
            train_classifier(&mut model, &data, &cfg, None).unwrap();
            let mut out = Vec::new();
            for (_, t) in model.params().iter() {
                out.extend(t.data().iter().map(|v| v.to_bits()));
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn split_run_matches_unbroken_run() {
        let data = tiny_data(3, &tiny_cfg());
        let full_cfg = TrainConfig {
            epochs: 4,
            max_steps: Some(20),
            ..tiny_cfg()
        };

        let mut model_a = tiny_model(3, 4);
        train_classifier(&mut model_a, &data, &full_cfg, None).unwrap();

        let mut model_b = tiny_model(3, 4);
        let half_cfg = TrainConfig {
            max_steps: Some(10),
            ..full_cfg.clone()
        };
        let report = train_classifier(&mut model_b, &data, &half_cfg, None).unwrap();
        assert_eq!(report.optimizer.step, 10);

        // Round-trip both model and optimizer through disk.
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("m.ckpt");
        let opath = dir.path().join("o.ckpt");
        model_b.save(&mpath).unwrap();
        report.optimizer.save(&opath).unwrap();
        let mut model_b = Model::load(&mpath).unwrap();
        let opt = Optimizer::load(&opath).unwrap();

        train_classifier(&mut model_b, &data, &full_cfg, Some(opt)).unwrap();

        for (name, t) in model_a.params().iter() {
            let other = model_b.params().get(name).unwrap();
            for (x, y) in t.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn divergence_aborts_with_restored_parameters() {
        let cfg = tiny_cfg();
        let mut data = tiny_data(3, &cfg);
        // Inflate the inputs until the attention logits overflow f64; the
        // first non-finite forward value must abort the run and leave the
        // model at the last-good snapshot.
        for (chunk, _) in &mut data.train {
            chunk.data_mut().iter_mut().for_each(|v| *v *= 1e160);
        }
        let mut model = tiny_model(3, 5);
        let before: Vec<u64> = model
            .params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        let err = train_classifier(&mut model, &data, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
        let after: Vec<u64> = model
            .params()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        assert_eq!(before, after);
    }
}
