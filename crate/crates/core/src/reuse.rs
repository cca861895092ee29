//! Weight-reuse generation: after a warmup prefix, blocks of `gamma` tokens
//! alternate between conventional decoding, which may load new
//! down-projection rows, and reuse, which restricts the down projection to
//! rows already loaded.
//!
//! Everything is teacher-forced so the policies are scored on identical
//! text. Row loads follow cache semantics: a row is loaded the first time
//! it enters a layer's resident set and stays resident afterwards.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::ActiveSet;
use crate::model::{Hooks, KvCache, Model, Site};
use crate::train::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReuseKind {
    /// Never restrict; the quality reference.
    None,
    /// Restrict to the neurons activated so far.
    Aggregated,
    /// Restrict to a uniformly random set of the same size, redrawn per
    /// reuse block and layer.
    Random { seed: u64 },
}

impl ReuseKind {
    pub fn label(&self) -> &'static str {
        match self {
            ReuseKind::None => "none",
            ReuseKind::Aggregated => "aggregated",
            ReuseKind::Random { .. } => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReusePolicy {
    pub kind: ReuseKind,
    /// Tokens read conventionally before the schedule starts.
    #[serde(default = "default_len")]
    pub warmup: usize,
    pub gamma: usize,
    /// Scored tokens after the warmup.
    #[serde(default = "default_len")]
    pub horizon: usize,
}

fn default_len() -> usize {
    128
}

impl ReusePolicy {
    pub fn new(kind: ReuseKind, gamma: usize) -> Self {
        Self {
            kind,
            warmup: default_len(),
            gamma,
            horizon: default_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::config("reuse.gamma", "must be at least 1"));
        }
        if self.warmup == 0 {
            return Err(Error::config("reuse.warmup", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("reuse.horizon", "must be at least 1"));
        }
        Ok(())
    }

    /// Tokens per window: warmup, horizon, and the final target.
    pub fn window_len(&self) -> usize {
        self.warmup + self.horizon + 1
    }

    /// Whether position `pos` falls in a reuse block. Blocks after the
    /// warmup start with a conventional one.
    pub fn is_reuse(&self, pos: usize) -> bool {
        if self.kind == ReuseKind::None || pos < self.warmup {
            return false;
        }
        ((pos - self.warmup) / self.gamma) % 2 == 1
    }

    fn block(&self, pos: usize) -> usize {
        (pos - self.warmup) / self.gamma
    }
}

/// Averages over the windows of one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseReport {
    pub policy: ReusePolicy,
    pub windows: usize,
    /// Mean NLL of the true next tokens over the horizon.
    pub nll: f64,
    /// Row loads per layer, summed over windows.
    pub row_loads: Vec<u64>,
    /// Mean resident-set size per position (rows) and layer (columns).
    pub active_sizes: Vec<Vec<f64>>,
    /// Down-projection inputs that were nonzero outside the allowed set
    /// during a reuse block. Always zero for a correct restriction.
    pub restriction_violations: u64,
    /// Reuse blocks whose random set size differed from the aggregated set.
    pub budget_mismatches: u64,
}

impl ReuseReport {
    pub fn total_row_loads(&self) -> u64 {
        self.row_loads.iter().sum()
    }
}

struct ReuseHook {
    policy: ReusePolicy,
    /// Neurons activated in warmup and conventional positions.
    aggregated: Vec<ActiveSet>,
    /// Rows loaded so far; differs from `aggregated` only for random sets.
    resident: Vec<ActiveSet>,
    /// Current random set per layer with the block it was drawn for.
    random: Vec<Option<(usize, Vec<bool>)>>,
    rng: Option<ChaCha8Rng>,
    row_loads: Vec<u64>,
    violations: u64,
    mismatches: u64,
}

impl ReuseHook {
    fn new(policy: ReusePolicy, n_layers: usize, d_ffn: usize) -> Self {
        let rng = match policy.kind {
            ReuseKind::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        Self {
            policy,
            aggregated: vec![ActiveSet::new(d_ffn); n_layers],
            resident: vec![ActiveSet::new(d_ffn); n_layers],
            random: vec![None; n_layers],
            rng,
            row_loads: vec![0; n_layers],
            violations: 0,
            mismatches: 0,
        }
    }

    fn load(&mut self, layer: usize, i: usize) {
        if self.resident[layer].insert(i).unwrap_or(false) {
            self.row_loads[layer] += 1;
        }
    }

    fn allowed(&self, layer: usize, i: usize) -> bool {
        match (&self.policy.kind, &self.random[layer]) {
            (ReuseKind::Random { .. }, Some((_, mask))) => mask[i],
            _ => self.aggregated[layer].contains(i),
        }
    }

    fn draw_random(&mut self, layer: usize, block: usize) {
        if matches!(&self.random[layer], Some((b, _)) if *b == block) {
            return;
        }
        let d = self.aggregated[layer].capacity();
        let size = self.aggregated[layer].len();
        let rng = self.rng.as_mut().expect("random policy has an rng");
        let mut mask = vec![false; d];
        for i in sample(rng, d, size).into_iter() {
            mask[i] = true;
        }
        if mask.iter().filter(|m| **m).count() != size {
            self.mismatches += 1;
        }
        for (i, &m) in mask.iter().enumerate() {
            if m {
                self.load(layer, i);
            }
        }
        self.random[layer] = Some((block, mask));
    }
}

impl Hooks for ReuseHook {
    fn restrict_down(&mut self, layer: usize, pos: usize, down_in: &mut [f64]) {
        if !self.policy.is_reuse(pos) {
            return;
        }
        if matches!(self.policy.kind, ReuseKind::Random { .. }) {
            self.draw_random(layer, self.policy.block(pos));
        }
        for (i, x) in down_in.iter_mut().enumerate() {
            if !self.allowed(layer, i) {
                *x = 0.0;
            }
        }
    }

    fn on_site_input(&mut self, layer: usize, site: Site, pos: usize, input: &[f64]) {
        if site != Site::DownIn {
            return;
        }
        if self.policy.is_reuse(pos) {
            let bad = input
                .iter()
                .enumerate()
                .filter(|(i, x)| **x != 0.0 && !self.allowed(layer, *i))
                .count();
            self.violations += bad as u64;
            return;
        }
        for (i, &x) in input.iter().enumerate() {
            if x != 0.0 {
                // indices come from the input itself
                let _ = self.aggregated[layer].insert(i);
                self.load(layer, i);
            }
        }
    }
}

fn nll_of(logits: &[f64], target: u32) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

fn check_inputs(model: &Model, windows: &Batch, policy: &ReusePolicy) -> Result<()> {
    policy.validate()?;
    if !model.config.ffn_activation.produces_exact_zeros() {
        return Err(Error::input(format!(
            "weight reuse needs an FFN activation with exact zeros, got {}",
            model.config.ffn_activation.label()
        )));
    }
    if windows.is_empty() {
        return Err(Error::input("no prompt windows"));
    }
    let need = policy.window_len();
    if let Some(w) = windows.iter().find(|w| w.len() < need) {
        return Err(Error::input(format!(
            "prompt window of {} tokens is shorter than warmup + horizon + 1 = {need}",
            w.len()
        )));
    }
    if need - 1 > model.config.max_seq {
        return Err(Error::SequenceTooLong {
            len: need - 1,
            max: model.config.max_seq,
        });
    }
    Ok(())
}

/// Teacher-forced decoding of every window under `policy`.
pub fn generate_with_reuse(model: &Model, windows: &Batch, policy: &ReusePolicy) -> Result<ReuseReport> {
    check_inputs(model, windows, policy)?;
    let cfg = &model.config;
    let steps = policy.warmup + policy.horizon;
    let mut nll = 0.0;
    let mut row_loads = vec![0u64; cfg.n_layers];
    let mut active_sizes = vec![vec![0.0; cfg.n_layers]; steps];
    let mut violations = 0;
    let mut mismatches = 0;
    for w in windows {
        let mut hook = ReuseHook::new(*policy, cfg.n_layers, cfg.d_ffn);
        let mut cache = KvCache::new(cfg.n_layers);
        for pos in 0..steps {
            let logits = model.decode_step(&mut cache, w[pos], &mut hook)?;
            if pos >= policy.warmup {
                model.check_token(w[pos + 1])?;
                nll += nll_of(&logits, w[pos + 1]);
            }
            for (l, size) in active_sizes[pos].iter_mut().enumerate() {
                *size += hook.resident[l].len() as f64;
            }
        }
        for (acc, r) in row_loads.iter_mut().zip(&hook.row_loads) {
            *acc += r;
        }
        violations += hook.violations;
        mismatches += hook.mismatches;
    }
    let n = windows.len() as f64;
    for row in &mut active_sizes {
        for s in row.iter_mut() {
            *s /= n;
        }
    }
    Ok(ReuseReport {
        policy: *policy,
        windows: windows.len(),
        nll: nll / (n * policy.horizon as f64),
        row_loads,
        active_sizes,
        restriction_violations: violations,
        budget_mismatches: mismatches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: usize,
    pub policy: String,
    pub seed: u64,
    pub nll: f64,
    pub row_loads: u64,
}

/// Every `(gamma, policy, seed)` cell, in that nesting order. The `none` and
/// `aggregated` policies do not use the seed and repeat across seeds.
pub fn sweep_gamma(
    model: &Model,
    windows: &Batch,
    gammas: &[usize],
    seeds: &[u64],
    warmup: usize,
    horizon: usize,
) -> Result<Vec<SweepRow>> {
    if gammas.is_empty() || seeds.is_empty() {
        return Err(Error::input("gamma and seed lists must be non-empty"));
    }
    let mut rows = Vec::new();
    for &gamma in gammas {
        let policy = |kind| ReusePolicy {
            kind,
            warmup,
            gamma,
            horizon,
        };
        let none = generate_with_reuse(model, windows, &policy(ReuseKind::None))?;
        let agg = generate_with_reuse(model, windows, &policy(ReuseKind::Aggregated))?;
        for &seed in seeds {
            let random = generate_with_reuse(model, windows, &policy(ReuseKind::Random { seed }))?;
            for r in [&none, &agg, &random] {
                rows.push(SweepRow {
                    gamma,
                    policy: r.policy.kind.label().to_string(),
                    seed,
                    nll: r.nll,
                    row_loads: r.total_row_loads(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma,policy,seed,nll,row_loads\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.gamma, r.policy, r.seed, r.nll, r.row_loads);
    }
    out
}
