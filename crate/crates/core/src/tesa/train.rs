//! Training loop for the pair verifier: binary cross-entropy over batches of
//! padded pairs, Noam-scaled Adam with clipping, same determinism contract
//! as the classifier loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{TesaModel, LABEL_DIFF, LABEL_SAME};
use super::pairs::PairDataset;
use crate::error::{Error, Result};
use crate::tensor::Tape;
use crate::train::{NoamSchedule, Optimizer};

#[derive(Debug, Clone)]
pub struct TesaTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_factor: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub max_steps: Option<u64>,
    /// Stop early once the epoch-mean loss falls below this.
    pub target_loss: Option<f64>,
    pub seed: u64,
}

impl Default for TesaTrainConfig {
    fn default() -> Self {
        TesaTrainConfig {
            batch_size: 64,
            epochs: 10,
            lr_factor: 10.0,
            warmup_steps: 25_000,
            grad_clip: 5.0,
            max_steps: None,
            target_loss: None,
            seed: 42,
        }
    }
}

#[derive(Debug)]
pub struct TesaTrainReport {
    /// `(epoch, step, mean loss, lr)` per epoch.
    pub log: Vec<(usize, u64, f64, f64)>,
    pub final_loss: f64,
    pub steps: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn train_tesa(
    model: &mut TesaModel,
    data: &PairDataset,
    cfg: &TesaTrainConfig,
) -> Result<TesaTrainReport> {
    if data.pairs.is_empty() {
        return Err(Error::State("empty pair dataset".into()));
    }
    let mut opt = Optimizer::new(
        NoamSchedule::new(cfg.lr_factor, model.config.adim, cfg.warmup_steps)?,
        cfg.grad_clip,
    );
    let snapshot = model.params.clone();
    let mut log = Vec::new();
    let mut final_loss = f64::NAN;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(epoch as u64)));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut loss_count = 0u64;
        let mut last_lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            if let Some(max) = cfg.max_steps {
                if opt.step >= max {
                    break 'epochs;
                }
            }
            let pairs: Vec<(&crate::tensor::Tensor, &crate::tensor::Tensor)> = batch
                .iter()
                .map(|&i| {
                    let p = &data.pairs[i];
                    (&data.utterances[p.a].2, &data.utterances[p.b].2)
                })
                .collect();
            let labels: Vec<usize> = batch
                .iter()
                .map(|&i| {
                    if data.pairs[i].same {
                        LABEL_SAME
                    } else {
                        LABEL_DIFF
                    }
                })
                .collect();

            let mut tape = Tape::train(splitmix(cfg.seed ^ splitmix(opt.step + 0x7e5a)));
            let step_result: Result<f64> = (|| {
                let (logits, binds) = model.forward_batch(&mut tape, &pairs)?;
                let loss = tape.cross_entropy(logits, &labels)?;
                let loss_val = tape.value(loss)[0];
                tape.backward(loss)?;
                model.params.apply_gradients(&tape, &binds)?;
                model.params.apply_stat_updates(tape.take_stat_updates())?;
                opt.step(&mut model.params)?;
                Ok(loss_val)
            })();
            match step_result {
                Ok(v) => {
                    loss_sum += v;
                    loss_count += 1;
                    last_lr = opt.schedule.lr(opt.step)?;
                }
                Err(e @ (Error::Diverged(_) | Error::NonFinite(_))) => {
                    model.params = snapshot;
                    return Err(Error::Diverged(format!("step {}: {e}", opt.step)));
                }
                Err(e) => return Err(e),
            }
        }
        let mean = loss_sum / loss_count.max(1) as f64;
        final_loss = mean;
        log.push((epoch, opt.step, mean, last_lr));
        if let Some(target) = cfg.target_loss {
            if mean < target {
                break;
            }
        }
    }

    Ok(TesaTrainReport {
        log,
        final_loss,
        steps: opt.step,
    })
}
