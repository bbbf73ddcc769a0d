use serde::{Deserialize, Serialize};

use super::{Dropout, ParamMode, Transformer};
use crate::data::{length_batches, sequential_batches, Example};
use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::optim::{Adam, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSchedule {
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: Schedule,
    pub batch_size: usize,
    pub num_epochs: usize,
    pub seed: u64,
}

impl Default for ClassifierSchedule {
    fn default() -> Self {
        Self { learning_rate: 1e-3, schedule: Schedule::Constant, batch_size: 32, num_epochs: 20, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub dev_accuracy: Vec<f64>,
}

/// Argmax class per example; ties go to the lower class index.
pub fn predict(model: &Transformer<f32>, examples: &[Example]) -> Result<Vec<usize>> {
    let lengths: Vec<usize> = examples.iter().map(|e| e.seq.len()).collect();
    let mut out = vec![0; examples.len()];
    for batch in sequential_batches(&lengths, 64) {
        let seqs: Vec<_> = batch.iter().map(|&i| &examples[i].seq).collect();
        let mut g = Graph::new();
        let fwd = model.forward_graph(&mut g, &seqs, ParamMode::Frozen, None)?;
        let c = model.config().num_classes;
        for (row, &i) in g.value(fwd.logits).chunks_exact(c).zip(&batch) {
            out[i] = argmax(row);
        }
    }
    Ok(out)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy(model: &Transformer<f32>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let preds = predict(model, examples)?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Supervised training with cross-entropy on gold labels (used to produce teachers).
pub fn train_classifier(
    model: &mut Transformer<f32>,
    train: &[Example],
    dev: &[Example],
    schedule: &ClassifierSchedule,
) -> Result<TrainHistory> {
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(schedule.batch_size > 0, "batch_size must be positive");
    ensure!(schedule.learning_rate >= 0.0, "learning_rate must be non-negative");
    let lengths: Vec<usize> = train.iter().map(|e| e.seq.len()).collect();
    let per_epoch = length_batches(&lengths, schedule.batch_size, schedule.seed, 0).len();
    let total = per_epoch * schedule.num_epochs;
    let mut adam = Adam::new();
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 0..schedule.num_epochs {
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for batch in length_batches(&lengths, schedule.batch_size, schedule.seed, epoch as u64) {
            let seqs: Vec<_> = batch.iter().map(|&i| &train[i].seq).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let mut dropout = Dropout::new(model.config().dropout, schedule.seed, step as u64);
            let mut g = Graph::new();
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } | Error::NumericLayer { .. } => {
                    Error::Diverged { epoch, step, loss: f64::NAN }
                }
                other => other,
            };
            let fwd = model
                .forward_graph(&mut g, &seqs, ParamMode::Trainable(0), Some(&mut dropout))
                .map_err(diverged)?;
            let loss = g.cross_entropy(fwd.logits, &labels).map_err(diverged)?;
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            let c = model.config().num_classes;
            hits += g.value(fwd.logits).chunks_exact(c).zip(&labels).filter(|(r, &l)| argmax(r) == l).count();
            loss_sum += value * batch.len() as f64;
            let grads = g.backward(loss)?;
            let lr = schedule.schedule.rate(schedule.learning_rate, step, total);
            for (id, grad) in grads.params() {
                adam.update(id, &mut model.params_mut()[id], grad, lr);
            }
            step += 1;
        }
        history.train_loss.push(loss_sum / train.len() as f64);
        history.train_accuracy.push(hits as f64 / train.len() as f64);
        history.dev_accuracy.push(accuracy(model, dev)?);
    }
    Ok(history)
}
