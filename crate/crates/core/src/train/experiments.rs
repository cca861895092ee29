//! Activation comparisons, surgery recovery and shifted-ReLU finetuning.

use serde::{Deserialize, Serialize};

use super::{loss, train_model, Batch, Corpus, TrainConfig};
use crate::activations::{choose_shift, ActivationSpec};
use crate::error::{Error, Result};
use crate::instrument::{total_variation, HistogramRecorder, PreactHistogram, SparsityRecorder};
use crate::model::{Model, ModelConfig, PreactSite, Site, SurgeryStage};

/// Inputs of every window (the final token is only ever a target).
fn inputs(windows: &Batch) -> impl Iterator<Item = &[u32]> {
    windows.iter().filter(|w| w.len() >= 2).map(|w| &w[..w.len() - 1])
}

/// FFN activation inputs pooled over all layers and positions.
pub fn ffn_histogram(model: &Model, windows: &Batch) -> Result<PreactHistogram> {
    let mut rec = HistogramRecorder::new(PreactSite::Ffn, PreactHistogram::default());
    for w in inputs(windows) {
        model.forward_with(w, &mut rec, None)?;
    }
    Ok(rec.hist)
}

/// Mean down-projection input sparsity at threshold `tau`.
pub fn ffn_sparsity(model: &Model, windows: &Batch, tau: f64) -> Result<f64> {
    let mut rec = SparsityRecorder::new(tau);
    for w in inputs(windows) {
        model.forward_with(w, &mut rec, None)?;
    }
    Ok(rec.report()?.site_mean(Site::DownIn))
}

/// Threshold used to call an activation output zero: exact for activations
/// with true zeros, `1e-2` otherwise.
pub fn sparsity_tau(act: &ActivationSpec) -> f64 {
    if act.produces_exact_zeros() {
        0.0
    } else {
        1e-2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweepRow {
    pub activation: ActivationSpec,
    pub final_val_loss: f64,
    pub tau: f64,
    pub sparsity: f64,
}

pub fn default_sweep_members() -> Vec<ActivationSpec> {
    vec![
        ActivationSpec::Gated { beta: 1.0 },
        ActivationSpec::Gated { beta: 1.7 },
        ActivationSpec::Gated { beta: 8.0 },
        ActivationSpec::Relu,
    ]
}

/// Trains one model per FFN activation from the same initialization seed
/// and data order.
pub fn beta_sweep(
    corpus: &Corpus,
    base: &ModelConfig,
    members: &[ActivationSpec],
    init_seed: u64,
    cfg: &TrainConfig,
) -> Result<Vec<BetaSweepRow>> {
    if members.is_empty() {
        return Err(Error::input("activation sweep needs at least one member"));
    }
    let windows = corpus.validation_windows(cfg.seq_len + 1, cfg.eval_windows);
    members
        .iter()
        .map(|act| {
            let mut mc = base.clone();
            mc.ffn_activation = *act;
            let run = train_model(Model::init_random(mc, init_seed)?, corpus, cfg)?;
            let tau = sparsity_tau(act);
            Ok(BetaSweepRow {
                activation: *act,
                final_val_loss: run.final_val_loss,
                tau,
                sparsity: ffn_sparsity(&run.model, &windows, tau)?,
            })
        })
        .collect()
}

pub fn beta_sweep_csv(rows: &[BetaSweepRow]) -> String {
    let mut out = String::from("activation,final_val_loss,tau,sparsity\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.activation.label(), r.final_val_loss, r.tau, r.sparsity));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RecoveryReport {
    pub pretrained: Model,
    pub finetuned: Model,
    pub finetune_steps: usize,
    pub pre_surgery_loss: f64,
    pub post_surgery_loss: f64,
    pub finetuned_loss: f64,
    /// FFN preactivations of the surgered model before and after finetuning.
    pub hist_before: PreactHistogram,
    pub hist_after: PreactHistogram,
    pub tv_distance: f64,
    pub finetune_curve: Vec<super::CurvePoint>,
}

impl RecoveryReport {
    pub fn to_csv(&self) -> String {
        format!(
            "phase,val_loss\npre_surgery,{}\npost_surgery,{}\nfinetuned,{}\n",
            self.pre_surgery_loss, self.post_surgery_loss, self.finetuned_loss
        )
    }
}

/// Finetune budget: a tenth of the pretraining steps, at least one.
pub fn finetune_budget(pretrain_steps: usize) -> usize {
    (pretrain_steps / 10).max(1)
}

/// Pretrains `base` under `cfg`, then applies surgery and finetunes.
pub fn recovery_experiment(
    corpus: &Corpus,
    base: &ModelConfig,
    init_seed: u64,
    cfg: &TrainConfig,
    stage: SurgeryStage,
) -> Result<RecoveryReport> {
    let pre = train_model(Model::init_random(base.clone(), init_seed)?, corpus, cfg)?;
    let mut ft = cfg.clone();
    ft.steps = finetune_budget(cfg.steps);
    ft.seed = cfg.seed.wrapping_add(1);
    ft.snapshot_steps.clear();
    recovery_from(pre.model, corpus, &ft, stage)
}

/// Surgery and finetuning of an already pretrained model; `ft.steps` is the
/// finetune budget.
pub fn recovery_from(pretrained: Model, corpus: &Corpus, ft: &TrainConfig, stage: SurgeryStage) -> Result<RecoveryReport> {
    let windows = corpus.validation_windows(ft.seq_len + 1, ft.eval_windows);
    if windows.is_empty() {
        return Err(Error::input("validation split shorter than one evaluation window"));
    }
    let pre_surgery_loss = loss(&pretrained, &windows)?;
    let surgered = pretrained.relufy(stage);
    let post_surgery_loss = loss(&surgered, &windows)?;
    let hist_before = ffn_histogram(&surgered, &windows)?;
    let run = train_model(surgered, corpus, ft)?;
    let hist_after = ffn_histogram(&run.model, &windows)?;
    let tv_distance = total_variation(&hist_before, &hist_after)?;
    Ok(RecoveryReport {
        pretrained,
        finetuned: run.model,
        finetune_steps: ft.steps,
        pre_surgery_loss,
        post_surgery_loss,
        finetuned_loss: run.final_val_loss,
        hist_before,
        hist_after,
        tv_distance,
        finetune_curve: run.curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedReluReport {
    pub target: f64,
    pub shift: f64,
    pub bin_width: f64,
    /// Target quantile of the held-out preactivation histogram.
    pub heldout_quantile: f64,
    /// Fraction of held-out preactivations at or below the shift.
    pub heldout_sparsity: f64,
    pub relu_loss: f64,
    pub shifted_loss: f64,
    /// Measured down-projection input sparsity of the two finetuned models.
    pub relu_sparsity: f64,
    pub shifted_sparsity: f64,
}

impl ShiftedReluReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Pretrains `base`, then compares ReLU and shifted-ReLU finetunes under
/// the recovery budget.
pub fn shifted_relu_experiment(
    corpus: &Corpus,
    base: &ModelConfig,
    init_seed: u64,
    cfg: &TrainConfig,
    target: f64,
) -> Result<ShiftedReluReport> {
    let pre = train_model(Model::init_random(base.clone(), init_seed)?, corpus, cfg)?;
    let mut ft = cfg.clone();
    ft.steps = finetune_budget(cfg.steps);
    ft.seed = cfg.seed.wrapping_add(1);
    ft.snapshot_steps.clear();
    shifted_relu_from(&pre.model, corpus, &ft, target)
}

/// Chooses the shift on training windows, checks it on validation windows,
/// and finetunes ReLU and shifted-ReLU copies of `pretrained` identically.
pub fn shifted_relu_from(pretrained: &Model, corpus: &Corpus, ft: &TrainConfig, target: f64) -> Result<ShiftedReluReport> {
    let train_windows = corpus.train_windows(ft.seq_len + 1, ft.eval_windows);
    let val_windows = corpus.validation_windows(ft.seq_len + 1, ft.eval_windows);
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::input("corpus split shorter than one evaluation window"));
    }
    let fit = ffn_histogram(pretrained, &train_windows)?;
    let shift = choose_shift(&fit, target)?;
    let heldout = ffn_histogram(pretrained, &val_windows)?;
    let heldout_quantile = heldout.quantile(target)?;
    let heldout_sparsity = heldout.mass_below(shift);

    let relu = train_model(pretrained.relufy(SurgeryStage::Stage1), corpus, ft)?;
    let shifted_model = pretrained.with_ffn_activation(ActivationSpec::ShiftedRelu { b: shift })?;
    let shifted = train_model(shifted_model, corpus, ft)?;
    Ok(ShiftedReluReport {
        target,
        shift,
        bin_width: fit.bin_width(),
        heldout_quantile,
        heldout_sparsity,
        relu_loss: relu.final_val_loss,
        shifted_loss: shifted.final_val_loss,
        relu_sparsity: ffn_sparsity(&relu.model, &val_windows, 0.0)?,
        shifted_sparsity: ffn_sparsity(&shifted.model, &val_windows, 0.0)?,
    })
}
