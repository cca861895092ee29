//! Backprop against central finite differences.

mod common;

use common::{grad_check, grad_check_cases, tiny_batch};
use relufy::activations::ActivationSpec;
use relufy::model::{FfnKind, Model, NormKind};
use relufy::train::{backward, loss};

#[test]
fn gradients_match_finite_differences() {
    for (i, (name, model)) in grad_check_cases().into_iter().enumerate() {
        let batch = tiny_batch(model.config.vocab_size as u32, i as u64);
        let r = grad_check(&model, &batch, 200, 1e-5, 100 + i as u64);
        println!(
            "{name}: checked {}, kink skips {}, max rel err {:.2e}",
            r.checked, r.skipped_kinks, r.max_rel_err
        );
        assert_eq!(r.checked, 200, "{name}");
        assert!(r.max_rel_err < 1e-4, "{name}: {}", r.max_rel_err);
    }
}

#[test]
fn backward_loss_equals_forward_loss() {
    let cfg = common::tiny_config(FfnKind::Gated, NormKind::Layernorm, ActivationSpec::Relu);
    let m = Model::init_random(cfg, 4).unwrap();
    let batch = tiny_batch(13, 4);
    let (l, _) = backward(&m, &batch).unwrap();
    assert!((l - loss(&m, &batch).unwrap()).abs() < 1e-12);
}

#[test]
fn confident_correct_predictions_have_small_gradients() {
    // with the residual branches silenced, a tied head with large
    // embeddings predicts the input token itself; make it the target
    let mut cfg = common::tiny_config(FfnKind::Plain, NormKind::Rmsnorm, ActivationSpec::Relu);
    cfg.tie_head = true;
    let mut m = Model::init_random(cfg, 1).unwrap();
    for blk in &mut m.params.blocks {
        blk.wo.data_mut().fill(0.0);
        blk.w_down.data_mut().fill(0.0);
    }
    for v in m.params.tok_emb.data_mut() {
        *v *= 40.0;
    }
    for v in m.params.pos_emb.data_mut() {
        *v = 0.0;
    }
    for v in m.params.norm_f.scale.iter_mut() {
        *v = 40.0;
    }
    let batch = vec![vec![3, 3, 3, 3]];
    let (l, g) = backward(&m, &batch).unwrap();
    assert!(l < 1e-6, "{l}");
    assert!(g.sq_norm().sqrt() < 1e-4);
}
