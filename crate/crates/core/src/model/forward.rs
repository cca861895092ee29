//! Position-at-a-time forward pass shared by full-sequence evaluation,
//! cached decoding and training.

use super::config::{FfnKind, NormKind};
use super::hooks::{Hooks, PreactSite, Site};
use super::params::Norm;
use super::Model;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matmul, MacCounter};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Logits for every position, row-major `positions × vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub positions: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// Per-layer key/value rows for every position processed so far.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Row-wise activations of one layer, appended position by position.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerTape {
    pub x_in: Vec<f64>,
    pub n1_xhat: Vec<f64>,
    pub n1_rstd: Vec<f64>,
    /// Normalized stream before the optional post-norm activation.
    pub a_pre: Vec<f64>,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Per position, `n_heads × (pos + 1)` attention weights.
    pub probs: Vec<Vec<f64>>,
    pub ctx: Vec<f64>,
    pub n2_xhat: Vec<f64>,
    pub n2_rstd: Vec<f64>,
    pub b_pre: Vec<f64>,
    pub b: Vec<f64>,
    /// FFN activation input (gate branch when gated).
    pub pre: Vec<f64>,
    /// Up-projection output, gated FFN only.
    pub u: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Tape {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTape>,
    pub nf_xhat: Vec<f64>,
    pub nf_rstd: Vec<f64>,
    pub n_out: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) fn norm_row(kind: NormKind, norm: &Norm, x: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let (xhat, rstd): (Vec<f64>, f64) = match kind {
        NormKind::Layernorm => {
            let mean = x.iter().sum::<f64>() / d;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            (x.iter().map(|v| (v - mean) * rstd).collect(), rstd)
        }
        NormKind::Rmsnorm => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
            let rstd = 1.0 / (ms + NORM_EPS).sqrt();
            (x.iter().map(|v| v * rstd).collect(), rstd)
        }
    };
    let mut y: Vec<f64> = xhat.iter().zip(&norm.scale).map(|(h, g)| h * g).collect();
    if let Some(off) = &norm.offset {
        for (yi, o) in y.iter_mut().zip(off) {
            *yi += o;
        }
    }
    (y, xhat, rstd)
}

/// Causal attention for one query row over `n` cached key/value rows.
pub(crate) fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    n_heads: usize,
    ctx: &mut [f64],
    probs: &mut Vec<f64>,
) {
    let d = q.len();
    let dh = d / n_heads;
    let n = keys.len() / d;
    let scale = 1.0 / (dh as f64).sqrt();
    probs.clear();
    probs.resize(n_heads * n, 0.0);
    ctx.fill(0.0);
    for h in 0..n_heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let p = &mut probs[h * n..(h + 1) * n];
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
        }
        crate::linalg::softmax_in_place(p);
        let out = &mut ctx[h * dh..(h + 1) * dh];
        for (j, &pj) in p.iter().enumerate() {
            axpy(pj, &values[j * d + h * dh..j * d + (h + 1) * dh], out);
        }
    }
}

fn nnz(v: &[f64]) -> u64 {
    v.iter().filter(|x| **x != 0.0).count() as u64
}

pub(crate) fn site_label(layer: usize, proj: &str) -> String {
    format!("layer{layer}/{proj}")
}

impl Model {
    pub(crate) fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Processes one token at position `cache.len()` through every layer and
    /// returns its logits.
    pub(crate) fn step(
        &self,
        cache: &mut KvCache,
        token: u32,
        hooks: &mut dyn Hooks,
        mut macs: Option<&mut MacCounter>,
        mut tape: Option<&mut Tape>,
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        self.check_token(token)?;
        let pos = cache.len;
        if pos >= cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: cfg.max_seq,
            });
        }
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        let p = &self.params;

        let mut x: Vec<f64> = p
            .tok_emb
            .row(token as usize)
            .iter()
            .zip(p.pos_emb.row(pos))
            .map(|(a, b)| a + b)
            .collect();

        let mut ctx = vec![0.0; d];
        let mut probs = Vec::new();
        for (l, blk) in p.blocks.iter().enumerate() {
            let x_in = x.clone();
            let (a_pre, n1_xhat, n1_rstd) = norm_row(cfg.norm_kind, &blk.norm1, &x);
            hooks.on_preact(l, PreactSite::AttnNorm, pos, &a_pre);
            let a = match &cfg.post_norm_activation {
                Some(act) => act.apply(&a_pre),
                None => a_pre.clone(),
            };
            hooks.on_site_input(l, Site::QkvIn, pos, &a);

            let q = matmul(&a, &blk.wq);
            let k = matmul(&a, &blk.wk);
            let v = matmul(&a, &blk.wv);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            attend_row(&q, &cache.keys[l], &cache.values[l], cfg.n_heads, &mut ctx, &mut probs);
            let o = matmul(&ctx, &blk.wo);
            let x_mid: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();

            let (b_pre, n2_xhat, n2_rstd) = norm_row(cfg.norm_kind, &blk.norm2, &x_mid);
            hooks.on_preact(l, PreactSite::FfnNorm, pos, &b_pre);
            let b = match &cfg.post_norm_activation {
                Some(act) => act.apply(&b_pre),
                None => b_pre.clone(),
            };
            hooks.on_site_input(l, Site::UpIn, pos, &b);

            let act = cfg.ffn_activation;
            let (pre, u, mut z) = match cfg.ffn_kind {
                FfnKind::Plain => {
                    let pre = matmul(&b, &blk.w_up);
                    let z = act.apply(&pre);
                    (pre, Vec::new(), z)
                }
                FfnKind::Gated => {
                    let gate = blk.w_gate.as_ref().expect("gated block has a gate matrix");
                    let pre = matmul(&b, gate);
                    let u = matmul(&b, &blk.w_up);
                    let z = pre.iter().zip(&u).map(|(g, u)| act.eval(*g) * u).collect();
                    (pre, u, z)
                }
            };
            hooks.on_preact(l, PreactSite::Ffn, pos, &pre);
            hooks.restrict_down(l, pos, &mut z);
            hooks.on_site_input(l, Site::DownIn, pos, &z);
            let y = matmul(&z, &blk.w_down);
            x = x_mid.iter().zip(&y).map(|(a, b)| a + b).collect();

            if let Some(m) = macs.as_deref_mut() {
                let (na, nb, nz) = (nnz(&a), nnz(&b), nnz(&z));
                for proj in ["q", "k", "v"] {
                    let s = site_label(l, proj);
                    m.add_macs(&s, na * d as u64);
                    m.add_row_loads(&s, na);
                }
                m.add_macs(&site_label(l, "o"), (d * d) as u64);
                m.add_row_loads(&site_label(l, "o"), d as u64);
                match cfg.ffn_kind {
                    FfnKind::Plain => {
                        m.add_macs(&site_label(l, "up"), nb * f as u64);
                        m.add_row_loads(&site_label(l, "up"), nb);
                    }
                    FfnKind::Gated => {
                        // up columns whose gate output is zero are never needed
                        let live = pre.iter().filter(|g| act.eval(**g) != 0.0).count() as u64;
                        m.add_macs(&site_label(l, "gate"), nb * f as u64);
                        m.add_row_loads(&site_label(l, "gate"), nb);
                        m.add_macs(&site_label(l, "up"), nb * live);
                        m.add_row_loads(&site_label(l, "up"), nb);
                    }
                }
                m.add_macs(&site_label(l, "down"), nz * d as u64);
                m.add_row_loads(&site_label(l, "down"), nz);
            }

            if let Some(t) = tape.as_deref_mut() {
                if t.layers.len() < cfg.n_layers {
                    t.layers.resize_with(cfg.n_layers, LayerTape::default);
                }
                let lt = &mut t.layers[l];
                lt.x_in.extend_from_slice(&x_in);
                lt.n1_xhat.extend_from_slice(&n1_xhat);
                lt.n1_rstd.push(n1_rstd);
                lt.a_pre.extend_from_slice(&a_pre);
                lt.a.extend_from_slice(&a);
                lt.q.extend_from_slice(&q);
                lt.k.extend_from_slice(&k);
                lt.v.extend_from_slice(&v);
                lt.probs.push(probs.clone());
                lt.ctx.extend_from_slice(&ctx);
                lt.n2_xhat.extend_from_slice(&n2_xhat);
                lt.n2_rstd.push(n2_rstd);
                lt.b_pre.extend_from_slice(&b_pre);
                lt.b.extend_from_slice(&b);
                lt.pre.extend_from_slice(&pre);
                lt.u.extend_from_slice(&u);
                lt.z.extend_from_slice(&z);
            }
        }
        cache.len += 1;

        let (n_out, nf_xhat, nf_rstd) = norm_row(cfg.norm_kind, &p.norm_f, &x);
        let logits = match &p.head {
            Some(h) => matmul(&n_out, h),
            None => (0..cfg.vocab_size)
                .map(|v| dot(&n_out, p.tok_emb.row(v)))
                .collect(),
        };
        if let Some(m) = macs {
            m.add_macs("head", (d * cfg.vocab_size) as u64);
            m.add_row_loads("head", d as u64);
        }
        if let Some(t) = tape {
            t.tokens.push(token);
            t.nf_xhat.extend_from_slice(&nf_xhat);
            t.nf_rstd.push(nf_rstd);
            t.n_out.extend_from_slice(&n_out);
            t.logits.extend_from_slice(&logits);
        }
        Ok(logits)
    }

    pub(crate) fn run(
        &self,
        tokens: &[u32],
        hooks: &mut dyn Hooks,
        mut macs: Option<&mut MacCounter>,
        mut tape: Option<&mut Tape>,
    ) -> Result<Logits> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let mut cache = KvCache::new(self.config.n_layers);
        let mut data = Vec::with_capacity(tokens.len() * self.config.vocab_size);
        for &t in tokens {
            let row = self.step(&mut cache, t, hooks, macs.as_deref_mut(), tape.as_deref_mut())?;
            data.extend_from_slice(&row);
        }
        Ok(Logits {
            positions: tokens.len(),
            vocab: self.config.vocab_size,
            data,
        })
    }
}
