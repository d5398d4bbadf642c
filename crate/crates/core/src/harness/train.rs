//! Mini-batch training and evaluation.
//!
//! A batch is split into fixed-size chunks. Each chunk is recorded on its
//! own graph, possibly in parallel, and the chunk gradients are summed in
//! chunk order, so results do not depend on the thread count.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, Progress};
use super::config::TrainConfig;
use super::metrics::{emit_metrics_csv, read_metrics_csv, MetricsRow};
use crate::data::{read_dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::model::{forward_batch, init_params, predict, InputEncoder, ModelConfig};
use crate::optim::{self, activation_penalty, clip_gradients, l2_penalty, OptimizerState};
use crate::par;
use crate::tensor::{Graph, ParamSet, Real, Tensor};

/// Deterministic 64-bit hash of a sequence of words (splitmix64 steps).
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &w in words {
        h ^= w;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Loss terms and hit count of one batch, as batch means.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub task_loss: f64,
    pub activation_penalty: f64,
    pub l2: f64,
    pub correct: usize,
    pub count: usize,
}

impl BatchStats {
    pub fn total_loss(&self) -> f64 {
        self.task_loss + self.activation_penalty + self.l2
    }
}

struct ChunkResult<T> {
    grads: Vec<Tensor<T>>,
    task: f64,
    penalty: f64,
    correct: usize,
}

fn first_non_finite<T: Real>(params: &ParamSet<T>) -> Option<&str> {
    params.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
}

fn chunk_gradients<T: Real>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    encoder: &InputEncoder<T>,
    chunk: &[&SampleRecord],
    weight: f64,
    dropout_seed: Option<u64>,
) -> Result<ChunkResult<T>> {
    let mut g = Graph::new(params);
    let fwd = forward_batch(&mut g, model, encoder, chunk, dropout_seed)?;
    let targets: Vec<usize> = chunk.iter().map(|s| s.target).collect();
    let ce = g.softmax_cross_entropy_rows(fwd.scores, &targets)?;
    let pen = activation_penalty(&mut g, fwd.phi_in, fwd.phi_out)?;
    let sum = g.add(ce, pen)?;
    let loss = g.scale(sum, T::of(weight))?;
    let task = g.value(ce).data()[0].as_f64();
    let penalty = g.value(pen).data()[0].as_f64();
    if !(task.is_finite() && penalty.is_finite()) {
        let culprit = first_non_finite(params)
            .map(str::to_string)
            .or_else(|| {
                [
                    ("phi_in", fwd.phi_in),
                    ("phi_out", fwd.phi_out),
                    ("scores", fwd.scores),
                ]
                .into_iter()
                .find(|(_, v)| !g.value(*v).is_finite())
                .map(|(n, _)| n.to_string())
            })
            .unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite(culprit));
    }
    let scores = g.value(fwd.scores).clone();
    let mut correct = 0;
    for (row, s) in scores.data().chunks(scores.shape()[1]).zip(chunk) {
        let p = predict(&Tensor::new(&[row.len()], row.to_vec())?)?;
        correct += (p == s.target) as usize;
    }
    let grads = g.backward(loss)?;
    Ok(ChunkResult {
        grads,
        task,
        penalty,
        correct,
    })
}

/// Gradient of the batch objective: mean cross-entropy plus the activation
/// penalty, plus `l2 * sum ‖w‖^2` when `l2 > 0`.
pub fn batch_gradients<T: Real>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    encoder: &InputEncoder<T>,
    batch: &[&SampleRecord],
    chunk_size: usize,
    l2: f64,
    dropout_seed: Option<u64>,
) -> Result<(Vec<Tensor<T>>, BatchStats)> {
    if batch.is_empty() || chunk_size == 0 {
        return Err(Error::Invalid("empty batch or zero chunk size".into()));
    }
    let chunks: Vec<(usize, &[&SampleRecord])> = batch.chunks(chunk_size).enumerate().collect();
    let n = batch.len() as f64;
    let results = par::map(&chunks, |&(i, c)| {
        let seed = dropout_seed.map(|s| mix_seed(&[s, i as u64]));
        chunk_gradients(params, model, encoder, c, c.len() as f64 / n, seed)
    });
    let mut stats = BatchStats {
        count: batch.len(),
        ..Default::default()
    };
    let mut total: Option<Vec<Tensor<T>>> = None;
    for (r, (_, c)) in results.into_iter().zip(&chunks) {
        let r = r?;
        let w = c.len() as f64 / n;
        stats.task_loss += w * r.task;
        stats.activation_penalty += w * r.penalty;
        stats.correct += r.correct;
        accumulate(&mut total, r.grads);
    }
    if l2 > 0.0 {
        let mut g = Graph::new(params);
        let pen = l2_penalty(&mut g, l2)?;
        stats.l2 = g.value(pen).data()[0].as_f64();
        accumulate(&mut total, g.backward(pen)?);
    }
    Ok((total.expect("at least one chunk"), stats))
}

fn accumulate<T: Real>(total: &mut Option<Vec<Tensor<T>>>, grads: Vec<Tensor<T>>) {
    match total {
        None => *total = Some(grads),
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(grads) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
        }
    }
}

/// Predictions and mean cross-entropy over a dataset, without dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub loss: f64,
    pub correct: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.predictions.is_empty() {
            0.0
        } else {
            self.correct as f64 / self.predictions.len() as f64
        }
    }
}

pub fn evaluate<T: Real>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    samples: &[SampleRecord],
    chunk_size: usize,
) -> Result<Evaluation> {
    let encoder = InputEncoder::new(model)?;
    let refs: Vec<&SampleRecord> = samples.iter().collect();
    let chunks: Vec<&[&SampleRecord]> = refs.chunks(chunk_size.max(1)).collect();
    let results = par::map(&chunks, |c| -> Result<(Vec<usize>, f64)> {
        let mut g = Graph::new(params);
        let fwd = forward_batch(&mut g, model, &encoder, c, None)?;
        let targets: Vec<usize> = c.iter().map(|s| s.target).collect();
        let ce = g.softmax_cross_entropy_rows(fwd.scores, &targets)?;
        let scores = g.value(fwd.scores);
        let k = scores.shape()[1];
        let preds = scores
            .data()
            .chunks(k)
            .map(|row| predict(&Tensor::new(&[k], row.to_vec())?))
            .collect::<Result<Vec<_>>>()?;
        Ok((preds, g.value(ce).data()[0].as_f64() * c.len() as f64))
    });
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for r in results {
        let (p, l) = r?;
        predictions.extend(p);
        loss += l;
    }
    let correct = predictions
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.target)
        .count();
    Ok(Evaluation {
        loss: if samples.is_empty() {
            0.0
        } else {
            loss / samples.len() as f64
        },
        predictions,
        correct,
    })
}

/// Per-epoch summary beyond the metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub task_loss: f64,
    pub activation_penalty: f64,
    pub l2: f64,
    pub total_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub optimizer: OptimizerState<f32>,
    pub progress: Progress,
    pub rows: Vec<MetricsRow>,
    pub logs: Vec<EpochLog>,
    pub reached_target: bool,
}

/// Everything known just before an optimizer step.
pub struct StepContext<'a> {
    pub epoch: u64,
    pub iteration: u64,
    pub lr: f64,
    pub params: &'a ParamSet<f32>,
    /// Gradients after clipping.
    pub grads: &'a [Tensor<f32>],
    pub state: &'a OptimizerState<f32>,
    pub stats: &'a BatchStats,
}

/// Hooks around every optimizer step.
pub trait StepObserver {
    fn before_step(&mut self, _ctx: &StepContext<'_>) {}
    /// `state` is the optimizer state after the step. `ratios` holds the
    /// LAMB trust ratios, empty for Adam.
    fn after_step(&mut self, _state: &OptimizerState<f32>, _ratios: &[f64]) {}
}

impl StepObserver for () {}

/// Shuffled sample order of `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
        seed,
        epoch,
        0x5348_5546,
    ])));
    order
}

/// Reads the datasets named in `cfg` and trains.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let train = read_dataset(&cfg.train_data)?;
    let val = read_dataset(&cfg.val_data)?;
    train_on(cfg, &train, &val, &mut ())
}

/// Trains on in-memory datasets. Writes the checkpoint and metrics file
/// after every epoch when their paths are set.
pub fn train_on(
    cfg: &TrainConfig,
    train: &[SampleRecord],
    val: &[SampleRecord],
    observer: &mut dyn StepObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let model = &cfg.model;
    if let Some(s) = train
        .iter()
        .chain(val)
        .find(|s| s.image_size != model.image_size)
    {
        return Err(Error::Invalid(format!(
            "dataset image size {} differs from model image size {}",
            s.image_size, model.image_size
        )));
    }
    let (mut params, mut state, mut progress, mut rows) = match &cfg.resume {
        Some(path) => resume_from(cfg, path)?,
        None => {
            let params = init_params(model, cfg.seed)?;
            let state = OptimizerState::new(&params);
            (params, state, Progress::default(), Vec::new())
        }
    };
    let encoder = InputEncoder::<f32>::new(model)?;
    let ipe = train.len().div_ceil(cfg.batch_size);
    let l2 = match cfg.optimizer.kind {
        optim::OptimizerKind::Adam => cfg.optimizer.l2,
        optim::OptimizerKind::Lamb => 0.0,
    };
    let mut logs = Vec::new();
    let mut reached_target = rows
        .last()
        .zip(cfg.target_accuracy)
        .is_some_and(|(r, t): (&MetricsRow, f64)| r.validation_acc >= t);

    while (progress.epoch as usize) < cfg.epochs && !reached_target {
        let epoch = progress.epoch;
        let started = Instant::now();
        let order = epoch_order(cfg.seed, epoch, train.len());
        let mut sum = BatchStats::default();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&SampleRecord> = idx.iter().map(|&i| &train[i]).collect();
            let it = progress.iteration;
            let lr = cfg.optimizer.lr_at(it, ipe);
            let dropout = cfg
                .dropout
                .then(|| mix_seed(&[cfg.seed, epoch, it, 0x4452_4f50]));
            let (mut grads, stats) = batch_gradients(
                &params,
                model,
                &encoder,
                &batch,
                cfg.chunk_size,
                l2,
                dropout,
            )?;
            clip_gradients(&mut grads, &cfg.optimizer)?;
            observer.before_step(&StepContext {
                epoch,
                iteration: it,
                lr,
                params: &params,
                grads: &grads,
                state: &state,
                stats: &stats,
            });
            let ratios = optim::step(&mut params, &grads, &mut state, &cfg.optimizer, lr)?;
            observer.after_step(&state, &ratios);
            if let Some(name) = first_non_finite(&params) {
                return Err(Error::NonFinite(name.to_string()));
            }
            progress.iteration += 1;
            let w = batch.len() as f64;
            sum.task_loss += w * stats.task_loss;
            sum.activation_penalty += w * stats.activation_penalty;
            sum.l2 += w * stats.l2;
            sum.correct += stats.correct;
            sum.count += batch.len();
        }
        let n = sum.count as f64;
        let log = EpochLog {
            epoch: epoch + 1,
            task_loss: sum.task_loss / n,
            activation_penalty: sum.activation_penalty / n,
            l2: sum.l2 / n,
            total_loss: (sum.task_loss + sum.activation_penalty + sum.l2) / n,
            seconds: 0.0,
        };
        let eval = evaluate(&params, model, val, cfg.chunk_size.max(32))?;
        let row = MetricsRow {
            epoch: epoch + 1,
            training_acc: sum.correct as f64 / n,
            training_loss: log.total_loss,
            validation_acc: eval.accuracy(),
            validation_loss: eval.loss,
        };
        progress.epoch += 1;
        rows.push(row);
        let log = EpochLog {
            seconds: started.elapsed().as_secs_f64(),
            ..log
        };
        log::info!(
            "epoch {} train acc {:.4} loss {:.5} (task {:.5} act {:.5} l2 {:.5}) val acc {:.4} loss {:.5} [{:.1}s]",
            row.epoch,
            row.training_acc,
            log.total_loss,
            log.task_loss,
            log.activation_penalty,
            log.l2,
            row.validation_acc,
            row.validation_loss,
            log.seconds
        );
        logs.push(log);
        if !cfg.checkpoint.as_os_str().is_empty() {
            Checkpoint {
                model: model.clone(),
                params: params.clone(),
                optimizer: Some(state.clone()),
                progress,
            }
            .save(&cfg.checkpoint)?;
        }
        if !cfg.metrics.as_os_str().is_empty() {
            emit_metrics_csv(&rows, &cfg.metrics)?;
        }
        reached_target = cfg.target_accuracy.is_some_and(|t| row.validation_acc >= t);
    }
    Ok(TrainOutcome {
        params,
        optimizer: state,
        progress,
        rows,
        logs,
        reached_target,
    })
}

type Resumed = (
    ParamSet<f32>,
    OptimizerState<f32>,
    Progress,
    Vec<MetricsRow>,
);

fn resume_from(cfg: &TrainConfig, path: &PathBuf) -> Result<Resumed> {
    let ck = Checkpoint::load(path)?;
    if ck.model != cfg.model {
        return Err(Error::Config(
            "checkpoint model config differs from the run config".into(),
        ));
    }
    let state = ck
        .optimizer
        .ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
    let rows = if !cfg.metrics.as_os_str().is_empty() && cfg.metrics.exists() {
        let mut rows = read_metrics_csv(&cfg.metrics)?;
        rows.retain(|r| r.epoch <= ck.progress.epoch);
        rows
    } else {
        Vec::new()
    };
    Ok((ck.params, state, ck.progress, rows))
}

/// Loads a checkpoint and evaluates it on a dataset.
pub fn evaluate_checkpoint(ck: &Checkpoint, samples: &[SampleRecord]) -> Result<Evaluation> {
    evaluate(&ck.params, &ck.model, samples, 32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorConfig};

    #[test]
    fn mixing_separates_inputs() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
        assert_eq!(mix_seed(&[5, 6, 7]), mix_seed(&[5, 6, 7]));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(1, 0, 100);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(1, 0, 100));
        assert_ne!(a, epoch_order(1, 1, 100));
    }

    #[test]
    fn chunking_does_not_change_the_gradient() {
        let model = ModelConfig::tiny();
        let data = generate_dataset(
            &GeneratorConfig {
                seed: 3,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let data: Vec<SampleRecord> = data
            .iter()
            .map(|s| {
                let mut small = s.clone();
                small.image_size = 16;
                small.panels = (0..16)
                    .flat_map(|p| {
                        let panel = s.panel(p);
                        (0..256).map(move |i| panel[(i / 16) * 2 * 32 + (i % 16) * 2])
                    })
                    .collect();
                small
            })
            .collect();
        let params = init_params(&model, 1).unwrap().cast::<f64>();
        let enc = InputEncoder::<f64>::new(&model).unwrap();
        let batch: Vec<&SampleRecord> = data.iter().collect();
        let (g1, s1) = batch_gradients(&params, &model, &enc, &batch, 5, 0.0, None).unwrap();
        let (g2, s2) = batch_gradients(&params, &model, &enc, &batch, 2, 0.0, None).unwrap();
        assert!((s1.total_loss() - s2.total_loss()).abs() < 1e-12);
        assert_eq!(s1.correct, s2.correct);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
