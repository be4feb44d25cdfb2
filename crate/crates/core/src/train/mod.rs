//! Desk-scale training: synthetic datasets, optimizers and the loop.

mod data;
mod optim;

pub use data::{region_grid, Dataset, GeneratorKind, SyntheticDatasetSpec, DATASET_MAGIC, HELD_OUT_SEED_OFFSET};
pub use optim::{clip_global_norm, Optimizer, OptimizerConfig, OptimizerKind};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Mode, Model, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Training accuracy is measured over the whole training set this often;
/// the best-scoring weights are kept.
pub const EVAL_EVERY: usize = 50;

/// Mean softmax cross-entropy of `[b, k]` logits.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Accuracy on this step's batch.
    pub acc: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// Eval-mode accuracy of the kept weights on the training set.
    pub train_accuracy: f64,
    pub held_out_accuracy: Option<f64>,
    /// Step after which the kept weights were captured.
    pub best_step: usize,
    pub clip: Option<f64>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// One `step loss acc` line per step, then summary lines.
    pub fn metrics_log(&self) -> String {
        let mut out = String::from("# step loss acc\n");
        for r in &self.records {
            let _ = writeln!(out, "{} {:.6} {:.4}", r.step, r.loss, r.acc);
        }
        let _ = writeln!(out, "# best_step {}", self.best_step);
        let _ = writeln!(out, "# train_acc {:.4}", self.train_accuracy);
        if let Some(h) = self.held_out_accuracy {
            let _ = writeln!(out, "# held_out_acc {h:.4}");
        }
        match self.clip {
            Some(c) => {
                let _ = writeln!(out, "# grad_clip {c}");
            }
            None => out.push_str("# grad_clip off\n"),
        }
        out
    }
}

/// Fraction of `data` classified correctly in evaluation mode.
pub fn evaluate(model: &Model, data: &Dataset, batch: usize) -> Result<f64> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch.max(1)) {
        let probs = model.predict(data.batch(chunk))?;
        let k = probs.shape()[1];
        for (row, label) in probs.data().chunks(k).zip(data.batch_labels(chunk)) {
            correct += (argmax(row) == label) as usize;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let res = model.cfg.res;
    if data.height != res || data.width != res || data.channels != 3 {
        return Err(Error::config(format!(
            "dataset images are {}×{}×{}, model expects {res}×{res}×3",
            data.height, data.width, data.channels
        )));
    }
    if data.n_classes != model.cfg.n_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model has {}",
            data.n_classes, model.cfg.n_classes
        )));
    }
    Ok(())
}

fn diverged(step: usize, lr: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged { step, lr },
        other => other,
    }
}

/// Loss and per-parameter gradients of one training-mode batch.
pub fn loss_and_grads(
    model: &Model,
    images: Tensor<f32>,
    labels: &[usize],
    drop_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, f64, BTreeMap<String, Tensor<f32>>, Graph<f32>, Vec<(String, Var)>)> {
    let mut g = Graph::new();
    let x = g.constant(images);
    let out = model.forward(&mut g, x, Mode::Train, drop_rng)?;
    let loss = cross_entropy(&mut g, out.logits, labels)?;
    let k = model.cfg.n_classes;
    let correct = g.value(out.logits).data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    let grads = g.backward(loss)?;
    let mut by_name = BTreeMap::new();
    for e in model.params.entries() {
        if e.kind != ParamKind::Buffer {
            if let Some(t) = grads.param(&e.name) {
                by_name.insert(e.name.clone(), t.clone());
            }
        }
    }
    let loss_value = g.value(loss).data()[0] as f64;
    let acc = correct as f64 / labels.len() as f64;
    Ok((loss_value, acc, by_name, g, out.bn_nodes))
}

/// Trains `model` in place and leaves it holding the best weights seen.
pub fn train_loop(
    model: &mut Model,
    data: &Dataset,
    held_out: Option<&Dataset>,
    opt: &OptimizerConfig,
) -> Result<TrainReport> {
    opt.validate()?;
    check_compatible(model, data)?;
    if let Some(h) = held_out {
        check_compatible(model, h)?;
    }
    if data.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(opt.seed);
    drop_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;

    let mut optimizer = Optimizer::new(opt.clone());
    let mut records = Vec::with_capacity(opt.steps);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;

    for step in 1..=opt.steps {
        let mut idx = Vec::with_capacity(opt.batch);
        while idx.len() < opt.batch {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        // a fixed in-batch order keeps reductions bit-identical for equal batches
        idx.sort_unstable();
        let (loss, acc, mut grads, g, bn_nodes) =
            loss_and_grads(model, data.batch(&idx), &data.batch_labels(&idx), Some(&mut drop_rng))
                .map_err(diverged(step, opt.lr))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, lr: opt.lr });
        }
        let grad_norm = match opt.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step, lr: opt.lr });
        }
        optimizer.step(&mut model.params, &grads);
        model.update_running_stats(&g, &bn_nodes)?;
        records.push(StepRecord { step, loss, acc, grad_norm });

        if step % EVAL_EVERY == 0 || step == opt.steps {
            let score = evaluate(model, data, 128).map_err(diverged(step, opt.lr))?;
            if best.as_ref().is_none_or(|(b, _, _)| score >= *b) {
                best = Some((score, step, model.params.clone()));
            }
        }
    }

    let (train_accuracy, best_step, params) = best.expect("at least one evaluation");
    model.params = params;
    let held_out_accuracy = held_out.map(|h| evaluate(model, h, 128)).transpose()?;
    Ok(TrainReport { records, train_accuracy, held_out_accuracy, best_step, clip: opt.clip })
}
