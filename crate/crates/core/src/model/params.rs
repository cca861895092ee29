use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{FfnKind, ModelConfig, NormKind};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub scale: Vec<f64>,
    /// Present for layernorm only.
    pub offset: Option<Vec<f64>>,
}

impl Norm {
    fn new(kind: NormKind, d: usize) -> Self {
        Self {
            scale: vec![1.0; d],
            offset: match kind {
                NormKind::Layernorm => Some(vec![0.0; d]),
                NormKind::Rmsnorm => None,
            },
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            scale: vec![0.0; self.scale.len()],
            offset: self.offset.as_ref().map(|o| vec![0.0; o.len()]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    pub wo: DenseMatrix,
    pub norm2: Norm,
    /// Present for gated FFNs only.
    pub w_gate: Option<DenseMatrix>,
    pub w_up: DenseMatrix,
    pub w_down: DenseMatrix,
}

/// All trainable tensors. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: DenseMatrix,
    pub pos_emb: DenseMatrix,
    pub blocks: Vec<Block>,
    pub norm_f: Norm,
    /// Absent when the head is tied to `tok_emb`.
    pub head: Option<DenseMatrix>,
}

impl Params {
    /// Normal init with std `1/√fan_in`; embeddings use `1/√d_model` and the
    /// LM head `1/d_model` so untrained logits are near-uniform.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size);
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let tok_emb = DenseMatrix::random_normal(v, d, sd, &mut rng);
        let pos_emb = DenseMatrix::random_normal(cfg.max_seq, d, sd, &mut rng);
        let blocks = (0..cfg.n_layers)
            .map(|_| {
                let wq = DenseMatrix::random_normal(d, d, sd, &mut rng);
                let wk = DenseMatrix::random_normal(d, d, sd, &mut rng);
                let wv = DenseMatrix::random_normal(d, d, sd, &mut rng);
                let wo = DenseMatrix::random_normal(d, d, sd, &mut rng);
                let w_gate = match cfg.ffn_kind {
                    FfnKind::Gated => Some(DenseMatrix::random_normal(d, f, sd, &mut rng)),
                    FfnKind::Plain => None,
                };
                let w_up = DenseMatrix::random_normal(d, f, sd, &mut rng);
                let w_down = DenseMatrix::random_normal(f, d, sf, &mut rng);
                Block {
                    norm1: Norm::new(cfg.norm_kind, d),
                    wq,
                    wk,
                    wv,
                    wo,
                    norm2: Norm::new(cfg.norm_kind, d),
                    w_gate,
                    w_up,
                    w_down,
                }
            })
            .collect();
        let head = (!cfg.tie_head).then(|| DenseMatrix::random_normal(d, v, 1.0 / d as f64, &mut rng));
        Self {
            tok_emb,
            pos_emb,
            blocks,
            norm_f: Norm::new(cfg.norm_kind, d),
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1: b.norm1.zeros_like(),
                    wq: z(&b.wq),
                    wk: z(&b.wk),
                    wv: z(&b.wv),
                    wo: z(&b.wo),
                    norm2: b.norm2.zeros_like(),
                    w_gate: b.w_gate.as_ref().map(z),
                    w_up: z(&b.w_up),
                    w_down: z(&b.w_down),
                })
                .collect(),
            norm_f: self.norm_f.zeros_like(),
            head: self.head.as_ref().map(z),
        }
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("tok_emb".into(), self.tok_emb.data()),
            ("pos_emb".into(), self.pos_emb.data()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.norm1.scale"), &b.norm1.scale));
            if let Some(o) = &b.norm1.offset {
                out.push((format!("blocks.{l}.norm1.offset"), o));
            }
            out.push((format!("blocks.{l}.wq"), b.wq.data()));
            out.push((format!("blocks.{l}.wk"), b.wk.data()));
            out.push((format!("blocks.{l}.wv"), b.wv.data()));
            out.push((format!("blocks.{l}.wo"), b.wo.data()));
            out.push((format!("blocks.{l}.norm2.scale"), &b.norm2.scale));
            if let Some(o) = &b.norm2.offset {
                out.push((format!("blocks.{l}.norm2.offset"), o));
            }
            if let Some(g) = &b.w_gate {
                out.push((format!("blocks.{l}.w_gate"), g.data()));
            }
            out.push((format!("blocks.{l}.w_up"), b.w_up.data()));
            out.push((format!("blocks.{l}.w_down"), b.w_down.data()));
        }
        out.push(("norm_f.scale".into(), &self.norm_f.scale));
        if let Some(o) = &self.norm_f.offset {
            out.push(("norm_f.offset".into(), o));
        }
        if let Some(h) = &self.head {
            out.push(("head".into(), h.data()));
        }
        out
    }

    /// Mutable tensors in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("tok_emb".into(), self.tok_emb.data_mut()),
            ("pos_emb".into(), self.pos_emb.data_mut()),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{l}.norm1.scale"), &mut b.norm1.scale));
            if let Some(o) = &mut b.norm1.offset {
                out.push((format!("blocks.{l}.norm1.offset"), o));
            }
            out.push((format!("blocks.{l}.wq"), b.wq.data_mut()));
            out.push((format!("blocks.{l}.wk"), b.wk.data_mut()));
            out.push((format!("blocks.{l}.wv"), b.wv.data_mut()));
            out.push((format!("blocks.{l}.wo"), b.wo.data_mut()));
            out.push((format!("blocks.{l}.norm2.scale"), &mut b.norm2.scale));
            if let Some(o) = &mut b.norm2.offset {
                out.push((format!("blocks.{l}.norm2.offset"), o));
            }
            if let Some(g) = &mut b.w_gate {
                out.push((format!("blocks.{l}.w_gate"), g.data_mut()));
            }
            out.push((format!("blocks.{l}.w_up"), b.w_up.data_mut()));
            out.push((format!("blocks.{l}.w_down"), b.w_down.data_mut()));
        }
        out.push(("norm_f.scale".into(), &mut self.norm_f.scale));
        if let Some(o) = &mut self.norm_f.offset {
            out.push(("norm_f.offset".into(), o));
        }
        if let Some(h) = &mut self.head {
            out.push(("head".into(), h.data_mut()));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|x| x * x)
            .sum()
    }
}
