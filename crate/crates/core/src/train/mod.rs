//! Training loop, evaluation and optimizer.

mod metrics;
mod optimizer;
mod schedule;

pub use metrics::{MetricsRecord, MetricsSink};
pub use optimizer::{OptimizerConfig, Sgd};
pub use schedule::{lr_at, LRSchedule};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, StatUpdate, Tape, Targets};
use crate::data::{augment, mixup, normalize, one_hot, AugmentConfig, LabeledImageSet, Normalization};
use crate::error::{Error, Result};
use crate::network::{ForwardCtx, Network};
use crate::regularizers::derive_seed;
use crate::tensor::Tensor;

/// Batch size used when evaluating; evaluation results do not depend on it
/// beyond floating-point summation order.
pub const EVAL_BATCH: usize = 256;

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Augment,
    Regularizer,
}

impl Stream {
    pub fn seed(self, run_seed: u64) -> u64 {
        let tag = match self {
            Stream::Init => 0x1417,
            Stream::Shuffle => 0x5bff,
            Stream::Augment => 0xa06e,
            Stream::Regularizer => 0x4e60,
        };
        derive_seed(&[run_seed, tag])
    }

    pub fn rng(self, run_seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(run_seed))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: LRSchedule,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Number of replicas sharing each minibatch.
    pub replicas: usize,
    /// When false the wall-time column is written as zero, keeping metrics
    /// files bitwise reproducible.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn validate(&self, train_len: usize, image_shape: [usize; 3]) -> Result<()> {
        self.optimizer.validate_for(train_len)?;
        self.schedule.validate()?;
        self.augment.validate(image_shape[1], image_shape[2])?;
        if self.replicas == 0 {
            return Err(Error::Invalid("at least one replica is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub steps: u64,
    /// Reason training stopped early, if it diverged.
    pub diverged: Option<String>,
    pub normalization: Normalization,
}

/// Normalization used for a run: training-split statistics, or identity when
/// normalization is disabled.
pub fn run_normalization(train_set: &LabeledImageSet, augment: &AugmentConfig) -> Normalization {
    if augment.normalize {
        Normalization::from_set(train_set)
    } else {
        Normalization::identity(train_set.image_shape()[0])
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Mean cross-entropy and top-1 error (percent) in the evaluation phase.
/// No random numbers are drawn.
pub fn evaluate(network: &Network, set: &LabeledImageSet, norm: &Normalization) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = set.batch(chunk)?;
        let images = normalize(&images, norm)?;
        let mut tape = Tape::new();
        let input = tape.input(images);
        let mut ctx = ForwardCtx::eval();
        let (loss, logits) = network.loss(&mut tape, input, Targets::Labels(&labels), &mut ctx)?;
        debug_assert_eq!(ctx.streams_opened(), 0);
        loss_sum += tape.value(loss).item() * chunk.len() as f64;
        correct += count_correct(tape.value(logits), &labels);
    }
    let n = set.len() as f64;
    Ok((loss_sum / n, 100.0 * (n - correct as f64) / n))
}

/// Result of one replica's forward/backward pass over its shard.
struct ShardPass {
    loss: f64,
    correct: usize,
    updates: Vec<StatUpdate>,
}

#[allow(clippy::too_many_arguments)]
fn shard_pass(
    network: &Network,
    grads: &mut ParamStore,
    images: Tensor,
    labels: &[usize],
    soft: Option<&Tensor>,
    seed: u64,
    step: u64,
    replica: u32,
) -> Result<ShardPass> {
    grads.zero_grads();
    let mut tape = Tape::new();
    let input = tape.input(images);
    let mut ctx = ForwardCtx::train(seed, step).with_replica(replica);
    let targets = match soft {
        Some(t) => Targets::Soft(t),
        None => Targets::Labels(labels),
    };
    let (loss, logits) = network.loss(&mut tape, input, targets, &mut ctx)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Diverged(format!("loss is {loss_value}")));
    }
    let correct = count_correct(tape.value(logits), labels);
    tape.backward(loss, grads)?;
    Ok(ShardPass {
        loss: loss_value,
        correct,
        updates: tape.take_stat_updates(),
    })
}

/// Contiguous shard boundaries of `n` samples over `r` replicas; the first
/// `n % r` shards get one extra sample and empty shards are dropped.
fn shard_ranges(n: usize, r: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (n / r, n % r);
    let mut start = 0;
    let mut out = Vec::new();
    for i in 0..r {
        let len = base + usize::from(i < extra);
        if len > 0 {
            out.push(start..start + len);
        }
        start += len;
    }
    out
}

fn rows(t: &Tensor, range: &std::ops::Range<usize>) -> Result<Tensor> {
    t.slice_batch(range.start, range.len())
}

/// Trains `network` on `train_set`, evaluating on `eval_set` after every
/// epoch. Each epoch reshuffles with the seeded shuffle stream and runs
/// `ceil(len / batch_size)` optimizer steps, the last one possibly partial.
///
/// With several replicas each minibatch is split into contiguous shards,
/// every replica draws its own regularizer randomness, and the gradients and
/// batch-norm statistics are averaged weighted by shard size.
///
/// Divergence stops training; the report then holds the records so far plus
/// one for the failing epoch with a NaN training loss.
pub fn train(
    network: &mut Network,
    train_set: &LabeledImageSet,
    eval_set: &LabeledImageSet,
    config: &TrainConfig,
    sinks: &mut [&mut dyn MetricsSink],
) -> Result<TrainReport> {
    config.validate(train_set.len(), train_set.image_shape())?;
    if eval_set.is_empty() {
        return Err(Error::Invalid("evaluation split is empty".into()));
    }
    let norm = run_normalization(train_set, &config.augment);
    let mut shuffle_rng = Stream::Shuffle.rng(config.seed);
    let mut augment_rng = Stream::Augment.rng(config.seed);
    let reg_seed = Stream::Regularizer.seed(config.seed);
    let mut sgd = Sgd::new(&network.params);
    let mut scratch: Vec<ParamStore> = (0..config.replicas).map(|_| network.params.clone()).collect();
    let start = Instant::now();
    let batch_size = config.optimizer.batch_size;
    let mut step: u64 = 0;
    let mut records = Vec::new();
    let mut diverged = None;

    for epoch in 0..config.schedule.total_epochs {
        let lr = lr_at(epoch, &config.schedule, config.optimizer.base_lr)?;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);

        for batch in order.chunks(batch_size) {
            let (images, labels) = train_set.batch(batch)?;
            let images = augment(&images, &norm, &config.augment, &mut augment_rng)?;
            let (images, soft) = match config.augment.mixup {
                Some(a) => {
                    let (x, y) = mixup(&images, &one_hot(&labels, train_set.classes())?, a, &mut augment_rng)?;
                    (x, Some(y))
                }
                None => (images, None),
            };
            match run_step(network, &mut scratch, &images, &labels, soft.as_ref(), reg_seed, step) {
                Ok((loss, ok, updates)) => {
                    loss_sum += loss;
                    correct += ok;
                    seen += batch.len();
                    let result = if updates.iter().all(|u| u.value.all_finite()) {
                        sgd.step(&mut network.params, &config.optimizer, lr)
                    } else {
                        network.params.zero_grads();
                        Err(Error::Diverged("non-finite batch statistics".into()))
                    };
                    if let Err(e) = result {
                        diverged = Some(e.to_string());
                        break;
                    }
                    network.apply_stat_updates(&updates);
                }
                Err(Error::Diverged(reason)) => {
                    network.params.zero_grads();
                    diverged = Some(format!("training diverged: {reason}"));
                    break;
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }

        let (eval_loss, eval_top1_error) = evaluate(network, eval_set, &norm)?;
        let train_loss = if diverged.is_some() {
            f64::NAN
        } else {
            loss_sum / seen as f64
        };
        let train_top1_error = if seen == 0 {
            100.0
        } else {
            100.0 * (seen - correct) as f64 / seen as f64
        };
        let record = MetricsRecord {
            epoch,
            train_loss,
            train_top1_error,
            eval_loss,
            eval_top1_error,
            lr,
            wall_time_seconds: if config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4} err {train_top1_error:.2}% | eval loss {eval_loss:.4} err {eval_top1_error:.2}% | lr {lr} | {:.1}s",
            start.elapsed().as_secs_f64()
        );
        for sink in sinks.iter_mut() {
            sink.emit(&record)?;
        }
        records.push(record);
        if diverged.is_some() {
            break;
        }
    }
    if let Some(reason) = &diverged {
        log::warn!("{reason}");
    }
    Ok(TrainReport {
        records,
        steps: step,
        diverged,
        normalization: norm,
    })
}

/// Forward/backward over all shards of one minibatch. Leaves the averaged
/// gradient in `network.params` and returns the summed per-sample loss, the
/// number of correct predictions and the averaged statistic updates.
fn run_step(
    network: &mut Network,
    scratch: &mut [ParamStore],
    images: &Tensor,
    labels: &[usize],
    soft: Option<&Tensor>,
    seed: u64,
    step: u64,
) -> Result<(f64, usize, Vec<StatUpdate>)> {
    let n = labels.len();
    let ranges = shard_ranges(n, scratch.len());
    let mut shards = Vec::with_capacity(ranges.len());
    for range in &ranges {
        let soft_rows = soft.map(|s| rows(s, range)).transpose()?;
        shards.push((rows(images, range)?, soft_rows));
    }

    let net: &Network = network;
    let passes: Vec<Result<ShardPass>> = if ranges.len() == 1 {
        let (x, y) = shards.pop().expect("one shard");
        vec![shard_pass(net, &mut scratch[0], x, labels, y.as_ref(), seed, step, 0)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .into_iter()
                .zip(scratch.iter_mut())
                .zip(&ranges)
                .enumerate()
                .map(|(r, (((x, y), store), range))| {
                    let labels = &labels[range.clone()];
                    scope.spawn(move || shard_pass(net, store, x, labels, y.as_ref(), seed, step, r as u32))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("replica thread panicked"))
                .collect()
        })
    };
    let passes: Vec<ShardPass> = passes.into_iter().collect::<Result<_>>()?;

    let weights: Vec<f64> = ranges.iter().map(|r| r.len() as f64 / n as f64).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for (pass, range) in passes.iter().zip(&ranges) {
        loss += pass.loss * range.len() as f64;
        correct += pass.correct;
    }
    for (i, param) in network.params.iter_mut().enumerate() {
        let grad = param.grad.data_mut();
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (store, &w) in scratch.iter().zip(&weights) {
            let id = store.ids().nth(i).expect("scratch mirrors the network store");
            for (g, &s) in grad.iter_mut().zip(store.grad(id).data()) {
                *g += w * s;
            }
        }
    }
    let mut updates = passes[0].updates.clone();
    if passes.len() > 1 {
        for (k, update) in updates.iter_mut().enumerate() {
            let data: Vec<f64> = (0..update.value.len())
                .map(|j| {
                    passes
                        .iter()
                        .zip(&weights)
                        .map(|(p, &w)| w * p.updates[k].value.data()[j])
                        .sum()
                })
                .collect();
            update.value = Tensor::new(update.value.shape(), data)?;
        }
    }
    Ok((loss, correct, updates))
}
