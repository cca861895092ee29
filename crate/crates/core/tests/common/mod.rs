//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relufy::activations::ActivationSpec;
use relufy::model::{FfnKind, Hooks, Model, ModelConfig, NormKind, PreactSite};
use relufy::train::{backward, loss};

/// Records which side of each kink every activation input falls on.
#[derive(Default)]
struct KinkSides {
    ffn_kink: Option<f64>,
    norm_kink: Option<f64>,
    sides: Vec<bool>,
}

impl Hooks for KinkSides {
    fn on_preact(&mut self, _layer: usize, site: PreactSite, _pos: usize, preact: &[f64]) {
        let kink = match site {
            PreactSite::Ffn => self.ffn_kink,
            PreactSite::AttnNorm | PreactSite::FfnNorm => self.norm_kink,
        };
        if let Some(k) = kink {
            self.sides.extend(preact.iter().map(|x| *x > k));
        }
    }
}

fn kink_sides(model: &Model, batch: &[Vec<u32>]) -> Vec<bool> {
    let mut rec = KinkSides {
        ffn_kink: model.config.ffn_activation.kink(),
        norm_kink: model.config.post_norm_activation.and_then(|a| a.kink()),
        sides: Vec::new(),
    };
    for s in batch {
        model.forward_with(&s[..s.len() - 1], &mut rec, None).unwrap();
    }
    rec.sides
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

/// Relative error with a floor so that coordinates with vanishing gradient
/// are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central differences with step `h` on `samples` random coordinates.
/// Coordinates whose perturbation moves any activation input across a
/// kink are skipped.
pub fn grad_check(model: &Model, batch: &[Vec<u32>], samples: usize, h: f64, seed: u64) -> GradCheck {
    let (_, grads) = backward(model, batch).unwrap();
    let analytic: Vec<f64> = grads.tensors().into_iter().flat_map(|(_, t)| t.to_vec()).collect();
    let total = analytic.len();
    let base_sides = kink_sides(model, batch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
    };
    let mut attempts = 0;
    while out.checked < samples && attempts < samples * 20 {
        attempts += 1;
        let idx = rng.gen_range(0..total);
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut offset = 0;
            for (_, t) in m.params.tensors_mut() {
                if idx < offset + t.len() {
                    t[idx - offset] += delta;
                    break;
                }
                offset += t.len();
            }
            let sides = kink_sides(&m, batch);
            (loss(&m, batch).unwrap(), sides == base_sides)
        };
        let (lp, same_p) = eval(h);
        let (lm, same_m) = eval(-h);
        if !(same_p && same_m) {
            out.skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        out.max_rel_err = out.max_rel_err.max(rel);
        out.checked += 1;
    }
    out
}

pub fn tiny_config(ffn_kind: FfnKind, norm_kind: NormKind, act: ActivationSpec) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 13,
        max_seq: 8,
        ffn_kind,
        norm_kind,
        ffn_activation: act,
        ..ModelConfig::default()
    }
}

pub fn tiny_batch(vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2).map(|_| (0..7).map(|_| rng.gen_range(0..vocab)).collect()).collect()
}

/// Every configuration the gradient check covers: each activation kind on
/// both FFN kinds and norm kinds, a tied head, and both surgery stages.
pub fn grad_check_cases() -> Vec<(String, Model)> {
    use relufy::model::SurgeryStage;
    let acts = [
        ActivationSpec::Gated { beta: 1.7 },
        ActivationSpec::Silu,
        ActivationSpec::Gelu,
        ActivationSpec::Relu,
        ActivationSpec::ShiftedRelu { b: 0.1 },
    ];
    let mut cases = Vec::new();
    let mut seed = 0;
    for act in acts {
        for (fk, nk) in [(FfnKind::Plain, NormKind::Layernorm), (FfnKind::Gated, NormKind::Rmsnorm)] {
            seed += 1;
            let m = Model::init_random(tiny_config(fk, nk, act), seed).unwrap();
            cases.push((format!("{} {fk:?} {nk:?}", act.label()), m));
        }
    }
    let mut tied = tiny_config(FfnKind::Plain, NormKind::Rmsnorm, ActivationSpec::Gelu);
    tied.tie_head = true;
    cases.push(("tied head".into(), Model::init_random(tied, 99).unwrap()));
    for fk in [FfnKind::Plain, FfnKind::Gated] {
        let base = Model::init_random(tiny_config(fk, NormKind::Layernorm, ActivationSpec::Gelu), 7).unwrap();
        cases.push((format!("stage1 {fk:?}"), base.relufy(SurgeryStage::Stage1)));
        cases.push((format!("stage2 {fk:?}"), base.relufy(SurgeryStage::Stage2)));
    }
    cases
}
