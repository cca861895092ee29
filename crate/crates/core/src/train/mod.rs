//! Toy-scale training: exact backprop, AdamW, and the activation experiments.

mod backward;
mod corpus;
mod experiments;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backward::{backward, loss, Batch};
pub use corpus::{to_tokens, Corpus};
pub use experiments::{
    beta_sweep, beta_sweep_csv, default_sweep_members, ffn_histogram, ffn_sparsity, finetune_budget,
    recovery_experiment, recovery_from, shifted_relu_experiment, shifted_relu_from, sparsity_tau, BetaSweepRow,
    RecoveryReport, ShiftedReluReport,
};

use crate::error::{Error, Result};
use crate::instrument::PreactHistogram;
use crate::model::{Model, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: Option<f64>,
    /// Seed for batch sampling.
    pub seed: u64,
    /// Validation loss is recorded every `eval_every` steps and at the end.
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Validation windows used per evaluation.
    #[serde(default = "defaults::eval_windows")]
    pub eval_windows: usize,
    /// Steps (counted in completed updates) at which FFN preactivation
    /// histograms are recorded over the evaluation windows.
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.95
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        0.1
    }
    pub fn grad_clip() -> Option<f64> {
        Some(1.0)
    }
    pub fn eval_every() -> usize {
        100
    }
    pub fn eval_windows() -> usize {
        16
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            seq_len: 128,
            lr: 3e-3,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            weight_decay: defaults::weight_decay(),
            grad_clip: defaults::grad_clip(),
            seed: 0,
            eval_every: defaults::eval_every(),
            eval_windows: defaults::eval_windows(),
            snapshot_steps: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("eval_every", self.eval_every),
            ("eval_windows", self.eval_windows),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name}"), "must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("train.{name}"), "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam. Norm parameters are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Params,
    v: Params,
    t: u32,
}

impl AdamW {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let clip = match cfg.grad_clip {
            Some(c) => {
                let norm = grads.sq_norm().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let gs = grads.tensors();
        for (((name, p), (_, m)), ((_, v), (_, g))) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut().into_iter().zip(gs))
        {
            let wd = if name.contains("norm") { 0.0 } else { cfg.weight_decay };
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    /// Validation loss before the first update.
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub snapshots: Vec<(usize, PreactHistogram)>,
}

impl TrainResult {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss\n");
        for p in &self.curve {
            let val = p.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{val}", p.step, p.train_loss);
        }
        out
    }
}

/// Mean validation NLL over the first `cfg.eval_windows` windows.
pub fn eval_loss(model: &Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<f64> {
    let windows = corpus.validation_windows(cfg.seq_len + 1, cfg.eval_windows);
    loss(model, &windows)
}

pub fn train_model(model: Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if cfg.seq_len > model.config.max_seq {
        return Err(Error::config(
            "train.seq_len",
            format!("{} exceeds model.max_seq {}", cfg.seq_len, model.config.max_seq),
        ));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.params);
    let eval_windows = corpus.validation_windows(cfg.seq_len + 1, cfg.eval_windows);
    if eval_windows.is_empty() {
        return Err(Error::input("validation split shorter than one evaluation window"));
    }
    let mut snapshots = Vec::new();
    let mut curve = Vec::new();
    let initial_val_loss = loss(&model, &eval_windows)?;
    let mut final_val_loss = initial_val_loss;

    for step in 0..cfg.steps {
        if cfg.snapshot_steps.contains(&step) {
            snapshots.push((step, ffn_histogram(&model, &eval_windows)?));
        }
        let batch = corpus.sample_batch(&mut rng, cfg.batch_size, cfg.seq_len)?;
        let (train_loss, grads) = backward(&model, &batch)?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { step, loss: train_loss });
        }
        opt.step(&mut model.params, &grads, cfg);
        if !model.params.all_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        let done = step + 1;
        let val_loss = if done % cfg.eval_every == 0 || done == cfg.steps {
            let v = loss(&model, &eval_windows)?;
            if !v.is_finite() {
                return Err(Error::Diverged { step, loss: v });
            }
            final_val_loss = v;
            Some(v)
        } else {
            None
        };
        curve.push(CurvePoint {
            step: done,
            train_loss,
            val_loss,
        });
    }
    if cfg.snapshot_steps.contains(&cfg.steps) {
        snapshots.push((cfg.steps, ffn_histogram(&model, &eval_windows)?));
    }
    Ok(TrainResult {
        model,
        curve,
        initial_val_loss,
        final_val_loss,
        snapshots,
    })
}
