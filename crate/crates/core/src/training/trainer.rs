use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, TrainerSnapshot};
use super::{clip_tensor_gradients, AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{LossStats, Mode, Model};
use crate::numerics::Rng;
use crate::text::{make_batch, Batch, Vocab};

/// Source of the `seconds` field in log records. `Off` writes zero, which
/// makes logs of identical runs byte-comparable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Clock {
    #[default]
    Wall,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: u64,
    pub epoch: usize,
    pub dev_loss: f64,
    pub dev_acc: f64,
    /// Greedy exact-match on a prefix of the dev set.
    pub dev_exact: f64,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Model, optimizer and the stream that drives shuffling and dropout.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub adam: AdamState<f32>,
    pub rng: Rng,
    pub step: u64,
    pub epoch: usize,
    pub best_dev_acc: Option<f64>,
    pub stale_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub stats: LossStats,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
}

impl Trainer {
    pub fn new(mut model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.config.dropout = config.dropout;
        let shapes: Vec<Vec<usize>> = model
            .params
            .tensors()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let adam = AdamState::from_config(&shapes, &config);
        let rng = Rng::new(config.seed);
        Ok(Self {
            model,
            config,
            adam,
            rng,
            step: 0,
            epoch: 0,
            best_dev_acc: None,
            stale_epochs: 0,
        })
    }

    /// Rebuilds a trainer from checkpointed parts.
    pub fn restore(
        model: Model<f32>,
        config: TrainConfig,
        adam: AdamState<f32>,
        snapshot: &TrainerSnapshot,
    ) -> Result<Self> {
        let mut t = Self::new(model, config)?;
        if adam.m.len() != t.adam.m.len() || adam.t != snapshot.adam_steps {
            return Err(Error::StateCorruption("optimizer state does not match the model".into()));
        }
        t.adam = adam;
        t.rng = Rng::from_state(snapshot.rng);
        t.step = snapshot.step;
        t.epoch = snapshot.epoch;
        t.best_dev_acc = snapshot.best_dev_acc;
        t.stale_epochs = snapshot.stale_epochs;
        Ok(t)
    }

    pub fn snapshot(&self) -> TrainerSnapshot {
        TrainerSnapshot {
            step: self.step,
            epoch: self.epoch,
            best_dev_acc: self.best_dev_acc,
            stale_epochs: self.stale_epochs,
            rng: self.rng.state(),
            adam_steps: self.adam.t,
        }
    }

    /// Forward, backward, clip, Adam. Parameters are untouched on error.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let step = self.step + 1;
        let non_finite = |e: Error| match e {
            Error::Numeric(_) => Error::NonFiniteLoss {
                step,
                diagnostic: None,
            },
            other => other,
        };
        self.model.params.zero_grad();
        let out = self
            .model
            .forward_batch(batch, Mode::Train(&mut self.rng))
            .map_err(non_finite)?;
        self.model.backward(&out.cache)?;
        let mut tensors: Vec<_> = self.model.params.tensors_mut().into_iter().map(|(_, t)| t).collect();
        let clip = clip_tensor_gradients(&mut tensors, self.config.clip_norm).map_err(non_finite)?;
        self.adam.step(&mut tensors)?;
        self.step = step;
        Ok(StepOutcome {
            stats: out.stats,
            grad_norm: clip.norm,
        })
    }
}

/// Teacher-forced loss and token accuracy in inference mode.
pub fn evaluate(model: &Model<f32>, sequences: &[Vec<u32>], batch_size: usize) -> Result<LossStats> {
    let mut total = LossStats::default();
    for chunk in sequences.chunks(batch_size.max(1)) {
        let stats = model.evaluate_batch(&make_batch(chunk, None)?)?;
        total.merge(&stats);
    }
    Ok(total)
}

/// Fraction of sequences whose greedy reconstruction equals the input ids.
pub fn exact_match(model: &Model<f32>, sequences: &[Vec<u32>]) -> Result<f64> {
    if sequences.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for s in sequences {
        let z = model.encode_ids(s)?;
        // A longer decode cannot match, so stop at the target length.
        if model.greedy_decode(&z, s.len())? == *s {
            hits += 1;
        }
    }
    Ok(hits as f64 / sequences.len() as f64)
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// JSON-lines training log.
    pub log: Option<&'a mut dyn Write>,
    pub clock: Clock,
    /// Best checkpoint, rewritten on every dev improvement.
    pub checkpoint: Option<PathBuf>,
    /// Where to dump parameters if the loss goes non-finite.
    pub diagnostic: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters and trainer state at the best dev epoch.
    pub best: Trainer,
    pub best_dev_acc: f64,
    pub best_epoch: usize,
    /// State after the last epoch run.
    pub last: Trainer,
    pub history: Vec<EpochRecord>,
}

fn write_record(log: &mut Option<&mut dyn Write>, record: &LogRecord) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::to_string(record)?;
        writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
    }
    Ok(())
}

/// Epoch loop with seeded shuffling and early stopping on dev token accuracy.
///
/// The untrained model is evaluated first (epoch 0) unless resuming. A dev
/// result counts as an improvement only if strictly better than the best.
pub fn train(
    mut trainer: Trainer,
    vocab: &Vocab,
    corpus: &[Vec<u32>],
    dev: &[Vec<u32>],
    mut opts: TrainOptions,
) -> Result<TrainOutcome> {
    if corpus.is_empty() || dev.is_empty() {
        return Err(Error::Ingestion("training and dev sets must be non-empty".into()));
    }
    let start = Instant::now();
    let seconds = |clock: Clock| match clock {
        Clock::Wall => start.elapsed().as_secs_f64(),
        Clock::Off => 0.0,
    };
    let batch_size = trainer.config.batch_size;
    let exact_dev = &dev[..dev.len().min(trainer.config.exact_match_limit)];
    let mut history = Vec::new();

    let evaluate_dev = |t: &Trainer| -> Result<(LossStats, f64)> {
        Ok((evaluate(&t.model, dev, batch_size)?, exact_match(&t.model, exact_dev)?))
    };
    let save = |t: &Trainer, path: &Option<PathBuf>| -> Result<()> {
        match path {
            Some(p) => save_checkpoint(p, &t.model, vocab, Some(&t.config), Some((&t.snapshot(), &t.adam))),
            None => Ok(()),
        }
    };

    if trainer.best_dev_acc.is_none() {
        let (stats, exact) = evaluate_dev(&trainer)?;
        trainer.best_dev_acc = Some(stats.accuracy());
        let record = EpochRecord {
            step: trainer.step,
            epoch: trainer.epoch,
            dev_loss: stats.loss,
            dev_acc: stats.accuracy(),
            dev_exact: exact,
            improved: true,
            seconds: seconds(opts.clock),
        };
        write_record(&mut opts.log, &LogRecord::Epoch(record.clone()))?;
        history.push(record);
        save(&trainer, &opts.checkpoint)?;
    }
    let mut best = trainer.clone();
    let mut best_epoch = trainer.epoch;

    while trainer.epoch < trainer.config.max_epochs && trainer.stale_epochs < trainer.config.patience {
        trainer.epoch += 1;
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        trainer.rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
            let batch = make_batch(&seqs, None)?;
            let outcome = match trainer.train_step(&batch) {
                Ok(o) => o,
                Err(Error::NonFiniteLoss { step, .. }) => {
                    if let Some(path) = &opts.diagnostic {
                        save(&trainer, &Some(path.clone()))?;
                    }
                    return Err(Error::NonFiniteLoss {
                        step,
                        diagnostic: opts.diagnostic.clone(),
                    });
                }
                Err(e) => return Err(e),
            };
            let record = StepRecord {
                step: trainer.step,
                epoch: trainer.epoch,
                loss: outcome.stats.loss,
                acc: outcome.stats.accuracy(),
                grad_norm: outcome.grad_norm,
                seconds: seconds(opts.clock),
            };
            write_record(&mut opts.log, &LogRecord::Step(record))?;
        }

        let (stats, exact) = evaluate_dev(&trainer)?;
        let acc = stats.accuracy();
        let improved = trainer.best_dev_acc.is_none_or(|b| acc > b);
        if improved {
            trainer.best_dev_acc = Some(acc);
            trainer.stale_epochs = 0;
        } else {
            trainer.stale_epochs += 1;
        }
        let record = EpochRecord {
            step: trainer.step,
            epoch: trainer.epoch,
            dev_loss: stats.loss,
            dev_acc: acc,
            dev_exact: exact,
            improved,
            seconds: seconds(opts.clock),
        };
        log::info!(
            "epoch {} step {} dev loss {:.4} acc {:.4} exact {:.3}{}",
            record.epoch,
            record.step,
            record.dev_loss,
            record.dev_acc,
            record.dev_exact,
            if improved { " *" } else { "" }
        );
        write_record(&mut opts.log, &LogRecord::Epoch(record.clone()))?;
        history.push(record);
        if improved {
            best = trainer.clone();
            best_epoch = trainer.epoch;
            save(&trainer, &opts.checkpoint)?;
        }
    }

    Ok(TrainOutcome {
        best_dev_acc: best.best_dev_acc.unwrap_or(0.0),
        best,
        best_epoch,
        last: trainer,
        history,
    })
}
