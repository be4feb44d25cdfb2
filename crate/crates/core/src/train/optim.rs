use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::blocks::{ConfigFile, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    /// Adam with decoupled weight decay.
    #[default]
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::config(format!("unknown optimizer `{other}` (expected sgd-momentum or adamw)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.05,
            steps: 500,
            batch: 32,
            seed: 7,
            clip: Some(5.0),
            momentum: 0.9,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// Defaults overridden by `lr`, `wd`, `steps`, `batch`, `seed`,
    /// `optimizer` and `clip` (`clip = 0` disables clipping).
    pub fn from_config(file: &ConfigFile) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(v) = file.get("lr")? {
            cfg.lr = v;
        }
        if let Some(v) = file.get("wd")? {
            cfg.weight_decay = v;
        }
        if let Some(v) = file.get("steps")? {
            cfg.steps = v;
        }
        if let Some(v) = file.get("batch")? {
            cfg.batch = v;
        }
        if let Some(v) = file.get("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = file.get("optimizer")? {
            cfg.kind = v;
        }
        if let Some(v) = file.get::<f64>("clip")? {
            cfg.clip = (v > 0.0).then_some(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("lr {} and wd {} must be finite and ≥ 0", self.lr, self.weight_decay)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::config("steps and batch must be positive"));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip must be positive"));
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping, accumulated in name order.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Optimizer state over the trainable tensors of a [`ParamStore`]. Weight
/// decay applies only to [`ParamKind::Weight`] tensors.
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: HashMap<String, Vec<f32>>,
    second: HashMap<String, Vec<f32>>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, first: HashMap::new(), second: HashMap::new(), t: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// One update. Parameters without a gradient are left unchanged.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) {
        self.t += 1;
        let lr = self.cfg.lr as f32;
        let wd = self.cfg.weight_decay as f32;
        for e in params.entries_mut() {
            if e.kind == ParamKind::Buffer {
                continue;
            }
            let Some(g) = grads.get(&e.name) else {
                continue;
            };
            let decay = if e.kind == ParamKind::Weight { wd } else { 0.0 };
            let n = e.value.len();
            let w = e.value.data_mut();
            let m = self.first.entry(e.name.clone()).or_insert_with(|| vec![0.0; n]);
            match self.cfg.kind {
                OptimizerKind::SgdMomentum => {
                    let mu = self.cfg.momentum as f32;
                    for ((wi, &gi), mi) in w.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = mu * *mi + gi + decay * *wi;
                        *wi -= lr * *mi;
                    }
                }
                OptimizerKind::AdamW => {
                    let v = self.second.entry(e.name.clone()).or_insert_with(|| vec![0.0; n]);
                    let (b1, b2) = (self.cfg.betas.0 as f32, self.cfg.betas.1 as f32);
                    let c1 = 1.0 - b1.powi(self.t);
                    let c2 = 1.0 - b2.powi(self.t);
                    let eps = self.cfg.adam_eps as f32;
                    for (((wi, &gi), mi), vi) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *wi -= lr * decay * *wi;
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
