//! Fine-tuning loop: AdamW, linear warmup/decay schedule, adapter dropout,
//! next-token cross-entropy on synthetic tasks.

mod optimizer;
mod schedule;
mod task;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterCheckpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::AdaptedModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use optimizer::AdamW;
pub use schedule::{lr_at, Schedule};
pub use task::{Example, Task, TaskKind};

/// Consecutive steps above `DIVERGENCE_FACTOR × initial loss` before aborting.
pub const DIVERGENCE_PATIENCE: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Evaluate every this many steps; 0 evaluates only after the last step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            warmup_steps: 100,
            schedule: Schedule::Linear,
            batch_size: 16,
            epochs: 2,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, task: &Task) -> usize {
        task.train_examples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, task: &Task) -> usize {
        self.epochs * self.steps_per_epoch(task)
    }
}

/// Trips after `DIVERGENCE_PATIENCE` consecutive losses above
/// `DIVERGENCE_FACTOR` times the first observed loss.
#[derive(Clone, Debug, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    above: usize,
}

impl DivergenceGuard {
    /// Returns the initial loss when the guard trips.
    pub fn observe(&mut self, loss: f64) -> Option<f64> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.above += 1;
        } else {
            self.above = 0;
        }
        (self.above >= DIVERGENCE_PATIENCE).then_some(initial)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsHistory {
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// `(step, accuracy)` pairs; `step` counts completed updates.
    pub accuracies: Vec<(usize, f64)>,
    pub wall_time_secs: f64,
}

impl MetricsHistory {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracies.last().map(|&(_, a)| a)
    }

    /// The stream as emitted: one record per step, accuracy attached to the
    /// step after which it was measured.
    pub fn records(&self) -> Vec<MetricRecord> {
        self.losses
            .iter()
            .zip(&self.learning_rates)
            .enumerate()
            .map(|(i, (&loss, &lr))| MetricRecord {
                step: i + 1,
                loss,
                lr,
                accuracy: self.accuracies.iter().find(|(s, _)| *s == i + 1).map(|&(_, a)| a),
            })
            .collect()
    }

    /// Line-delimited JSON without wall time, so reruns compare byte-for-byte.
    pub fn to_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    /// Equality of everything except wall time.
    pub fn same_trajectory(&self, other: &MetricsHistory) -> bool {
        bits(&self.losses) == bits(&other.losses)
            && bits(&self.learning_rates) == bits(&other.learning_rates)
            && self.accuracies == other.accuracies
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: MetricsHistory,
    /// Adapter parameters at attach time.
    pub before: AdapterCheckpoint,
    /// Adapter parameters after the last step.
    pub after: AdapterCheckpoint,
}

pub fn train(model: &mut AdaptedModel, task: &Task, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, task, config, |_| {})
}

/// Trains the model's adapters, calling `on_record` once per step in order.
pub fn train_with(
    model: &mut AdaptedModel,
    task: &Task,
    config: &TrainConfig,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    task.validate()?;
    if model.groups().is_empty() {
        return Err(Error::Config("model has no adapters attached".into()));
    }
    if task.vocab_size > model.config().vocab_size || task.input_len() > model.config().max_seq_len {
        return Err(Error::Config(format!(
            "task (vocab {}, input length {}) does not fit model (vocab {}, max_seq_len {})",
            task.vocab_size,
            task.input_len(),
            model.config().vocab_size,
            model.config().max_seq_len
        )));
    }
    let started = Instant::now();
    let before = model.adapter_checkpoint(true);
    let mut history = MetricsHistory::default();
    let total = config.total_steps(task);
    if total == 0 {
        return Ok(TrainOutcome {
            history,
            after: model.adapter_checkpoint(false),
            before,
        });
    }
    // validates warmup < total up front
    lr_at(0, total, config)?;

    let train_set = task.train_set(config.seed)?;
    let eval_set = task.eval_set(config.seed)?;
    let mut shuffle_rng = Rng::derive(config.seed, 4);
    let mut dropout_rng = Rng::derive(config.seed, 3);
    let mut opt = AdamW::new(config.betas, config.eps, config.weight_decay);
    let mut guard = DivergenceGuard::default();
    let mut step = 0usize;

    model.store_mut().zero_grads();
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.below(i + 1));
        }
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut loss_sum = 0.0;
            for &idx in batch {
                let ex = &train_set[idx];
                let mut g = Graph::new();
                let logits = model.forward(&mut g, &ex.inputs, Some(&mut dropout_rng))?;
                let ce = g.cross_entropy(logits, &ex.targets)?;
                let scaled = g.scale(ce, scale);
                loss_sum += g.value(ce).item()? * scale;
                g.backward(scaled, model.store_mut())?;
            }
            if !loss_sum.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss_sum} at step {}", step + 1)));
            }
            let lr = lr_at(step, total, config)?;
            opt.step(model.store_mut(), lr)?;
            step += 1;
            history.losses.push(loss_sum);
            history.learning_rates.push(lr);

            if let Some(initial) = guard.observe(loss_sum) {
                history.wall_time_secs = started.elapsed().as_secs_f64();
                return Err(Error::Diverged {
                    step,
                    loss: loss_sum,
                    initial,
                    history: Box::new(history),
                });
            }

            let mut accuracy = None;
            if step == total || (config.eval_every > 0 && step % config.eval_every == 0) {
                let acc = accuracy_of(&eval_set, |t| model.logits(t))?;
                history.accuracies.push((step, acc));
                accuracy = Some(acc);
            }
            on_record(&MetricRecord {
                step,
                loss: loss_sum,
                lr,
                accuracy,
            });
        }
    }
    history.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        history,
        before,
        after: model.adapter_checkpoint(false),
    })
}

/// Eval-mode accuracy on the task's evaluation split.
pub fn evaluate(model: &AdaptedModel, task: &Task, seed: u64) -> Result<f64> {
    let eval_set = task.eval_set(seed)?;
    accuracy_of(&eval_set, |t| model.logits(t))
}

/// Fraction of target positions where the greedy argmax equals the target.
pub fn accuracy_of(examples: &[Example], mut logits: impl FnMut(&[usize]) -> Result<Tensor>) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let out = logits(&ex.inputs)?;
        for (i, t) in ex.targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            total += 1;
            if argmax(out.row(i)) == t {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Input("no target positions to evaluate".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
