//! Next-token cross-entropy and its exact reverse-mode gradient.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matmul, matmul_grad_input, matmul_grad_weight};
use crate::model::{FfnKind, Model, NoHooks, NormKind, Params, Tape};

/// Token windows; each sequence of length `n + 1` contributes `n` targets.
pub type Batch = [Vec<u32>];

fn check_batch(batch: &Batch) -> Result<usize> {
    let positions: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if batch.is_empty() || positions == 0 {
        return Err(Error::input("empty batch"));
    }
    Ok(positions)
}

fn log_softmax_nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Mean negative log-likelihood over every predicted position of the batch.
pub fn loss(model: &Model, batch: &Batch) -> Result<f64> {
    let positions = check_batch(batch)?;
    let mut total = 0.0;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let inputs = &seq[..seq.len() - 1];
        let logits = model.forward(inputs)?;
        for (t, &target) in seq[1..].iter().enumerate() {
            model.check_token(target)?;
            total += log_softmax_nll(logits.row(t), target as usize);
        }
    }
    Ok(total / positions as f64)
}

/// Loss and gradients of [`loss`] with respect to every parameter.
pub fn backward(model: &Model, batch: &Batch) -> Result<(f64, Params)> {
    let positions = check_batch(batch)?;
    let mut grads = model.params.zeros_like();
    let mut total = 0.0;
    let inv_n = 1.0 / positions as f64;
    for seq in batch {
        if seq.len() < 2 {
            continue;
        }
        let inputs = &seq[..seq.len() - 1];
        let targets = &seq[1..];
        for &t in targets {
            model.check_token(t)?;
        }
        let mut tape = Tape::default();
        model.run(inputs, &mut NoHooks, None, Some(&mut tape))?;
        total += backprop_sequence(model, &tape, targets, inv_n, &mut grads);
    }
    Ok((total * inv_n, grads))
}

fn norm_backward(
    kind: NormKind,
    scale: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    dy: &[f64],
    dscale: &mut [f64],
    mut doffset: Option<&mut Vec<f64>>,
    dx: &mut [f64],
) {
    let d = scale.len();
    let mut g = vec![0.0; d];
    for (t, (dyr, xr)) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
        for i in 0..d {
            g[i] = dyr[i] * scale[i];
            dscale[i] += dyr[i] * xr[i];
        }
        if let Some(off) = doffset.as_deref_mut() {
            axpy(1.0, dyr, off);
        }
        let mean_gx = dot(&g, xr) / d as f64;
        let mean_g = match kind {
            NormKind::Layernorm => g.iter().sum::<f64>() / d as f64,
            NormKind::Rmsnorm => 0.0,
        };
        let r = rstd[t];
        for (i, out) in dx[t * d..(t + 1) * d].iter_mut().enumerate() {
            *out += r * (g[i] - mean_g - xr[i] * mean_gx);
        }
    }
}

fn backprop_sequence(model: &Model, tape: &Tape, targets: &[u32], inv_n: f64, grads: &mut Params) -> f64 {
    let cfg = &model.config;
    let p = &model.params;
    let (d, v, h) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
    let dh = d / h;
    let n = targets.len();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut nll = 0.0;
    let mut dlogits = tape.logits.clone();
    for (t, &target) in targets.iter().enumerate() {
        let row = &mut dlogits[t * v..(t + 1) * v];
        nll += log_softmax_nll(row, target as usize);
        crate::linalg::softmax_in_place(row);
        row[target as usize] -= 1.0;
        for x in row.iter_mut() {
            *x *= inv_n;
        }
    }

    let dn_out = match (&p.head, grads.head.as_mut()) {
        (Some(head), Some(dhead)) => {
            matmul_grad_weight(&tape.n_out, &dlogits, dhead);
            matmul_grad_input(&dlogits, head)
        }
        _ => {
            matmul_grad_weight(&dlogits, &tape.n_out, &mut grads.tok_emb);
            matmul(&dlogits, &p.tok_emb)
        }
    };

    let mut dx = vec![0.0; n * d];
    norm_backward(
        cfg.norm_kind,
        &p.norm_f.scale,
        &tape.nf_xhat,
        &tape.nf_rstd,
        &dn_out,
        &mut grads.norm_f.scale,
        grads.norm_f.offset.as_mut(),
        &mut dx,
    );

    for l in (0..cfg.n_layers).rev() {
        let blk = &p.blocks[l];
        let gb = &mut grads.blocks[l];
        let lt = &tape.layers[l];
        let act = cfg.ffn_activation;

        // FFN
        let dy = &dx;
        matmul_grad_weight(&lt.z, dy, &mut gb.w_down);
        let dz = matmul_grad_input(dy, &blk.w_down);
        let db = match cfg.ffn_kind {
            FfnKind::Plain => {
                let dpre: Vec<f64> = dz
                    .iter()
                    .zip(&lt.pre)
                    .map(|(g, x)| g * act.eval_derivative(*x))
                    .collect();
                matmul_grad_weight(&lt.b, &dpre, &mut gb.w_up);
                matmul_grad_input(&dpre, &blk.w_up)
            }
            FfnKind::Gated => {
                let mut dg = vec![0.0; dz.len()];
                let mut du = vec![0.0; dz.len()];
                for i in 0..dz.len() {
                    let g = lt.pre[i];
                    dg[i] = dz[i] * lt.u[i] * act.eval_derivative(g);
                    du[i] = dz[i] * act.eval(g);
                }
                let gate = blk.w_gate.as_ref().expect("gated block has a gate matrix");
                matmul_grad_weight(&lt.b, &dg, gb.w_gate.as_mut().expect("gate gradient"));
                matmul_grad_weight(&lt.b, &du, &mut gb.w_up);
                let mut db = matmul_grad_input(&dg, gate);
                axpy(1.0, &matmul_grad_input(&du, &blk.w_up), &mut db);
                db
            }
        };
        let db_pre = match &cfg.post_norm_activation {
            Some(a2) => db
                .iter()
                .zip(&lt.b_pre)
                .map(|(g, x)| g * a2.eval_derivative(*x))
                .collect(),
            None => db,
        };
        let mut dx_mid = dx.clone();
        norm_backward(
            cfg.norm_kind,
            &blk.norm2.scale,
            &lt.n2_xhat,
            &lt.n2_rstd,
            &db_pre,
            &mut gb.norm2.scale,
            gb.norm2.offset.as_mut(),
            &mut dx_mid,
        );

        // attention
        matmul_grad_weight(&lt.ctx, &dx_mid, &mut gb.wo);
        let dctx = matmul_grad_input(&dx_mid, &blk.wo);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for i in 0..n {
            let probs = &lt.probs[i];
            let len = i + 1;
            for hh in 0..h {
                let off = hh * dh;
                let dci = &dctx[i * d + off..i * d + off + dh];
                let pi = &probs[hh * len..(hh + 1) * len];
                let mut dp = vec![0.0; len];
                for j in 0..len {
                    dp[j] = dot(dci, &lt.v[j * d + off..j * d + off + dh]);
                    axpy(pi[j], dci, &mut dv[j * d + off..j * d + off + dh]);
                }
                let inner = dot(pi, &dp);
                for j in 0..len {
                    let ds = pi[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(ds, &lt.k[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                    axpy(ds, &lt.q[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                }
            }
        }
        matmul_grad_weight(&lt.a, &dq, &mut gb.wq);
        matmul_grad_weight(&lt.a, &dk, &mut gb.wk);
        matmul_grad_weight(&lt.a, &dv, &mut gb.wv);
        let mut da = matmul_grad_input(&dq, &blk.wq);
        axpy(1.0, &matmul_grad_input(&dk, &blk.wk), &mut da);
        axpy(1.0, &matmul_grad_input(&dv, &blk.wv), &mut da);
        let da_pre = match &cfg.post_norm_activation {
            Some(a2) => da
                .iter()
                .zip(&lt.a_pre)
                .map(|(g, x)| g * a2.eval_derivative(*x))
                .collect(),
            None => da,
        };
        let mut dx_in = dx_mid;
        norm_backward(
            cfg.norm_kind,
            &blk.norm1.scale,
            &lt.n1_xhat,
            &lt.n1_rstd,
            &da_pre,
            &mut gb.norm1.scale,
            gb.norm1.offset.as_mut(),
            &mut dx_in,
        );
        dx = dx_in;
    }

    for (t, &tok) in tape.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        axpy(1.0, row, grads.tok_emb.row_mut(tok as usize));
        axpy(1.0, row, grads.pos_emb.row_mut(t));
    }
    nll
}
