//! Binary checkpoint format.
//!
//! ```text
//! "RLFC"                       magic
//! u8  = 1                      version
//! u32 LE N, N bytes            canonical ModelConfig JSON
//! repeated, in Params::tensors order:
//!     u32 LE element count, count × f64 LE
//! ```
//!
//! Tensor order: `tok_emb`, `pos_emb`, then per block `norm1.scale`,
//! `norm1.offset` (layernorm), `wq`, `wk`, `wv`, `wo`, `norm2.scale`,
//! `norm2.offset` (layernorm), `w_gate` (gated), `w_up`, `w_down`; then
//! `norm_f.scale`, `norm_f.offset` (layernorm), `head` (untied).

use std::path::Path;

use super::{Model, ModelConfig, Params};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"RLFC";
pub const VERSION: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

impl Model {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(9 + cfg.len() + 8 * self.n_params());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        for (_, t) in self.params.tensors() {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = match r.take(4, "magic") {
            Ok(m) => m.try_into().expect("4 bytes"),
            Err(_) => {
                let mut m = [0u8; 4];
                m[..buf.len()].copy_from_slice(buf);
                return Err(Error::BadMagic(m));
            }
        };
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32("config length")? as usize;
        let cfg_bytes = r.take(n, "config")?;
        let config: ModelConfig =
            serde_json::from_slice(cfg_bytes).map_err(|e| Error::CheckpointConfig(e.to_string()))?;
        config
            .validate()
            .map_err(|e| Error::CheckpointConfig(e.to_string()))?;

        let mut params = Params::init(&config, 0);
        for (name, dst) in params.tensors_mut() {
            let count = r.u32(&format!("{name} element count"))? as usize;
            if count != dst.len() {
                return Err(Error::ShapeMismatch {
                    tensor: name,
                    expected: dst.len(),
                    found: count,
                });
            }
            let raw = r.take(count * 8, &name)?;
            for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::TrailingBytes(buf.len() - r.pos));
        }
        if !params.all_finite() {
            return Err(Error::CheckpointConfig("non-finite parameter".into()));
        }
        Ok(Model { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FfnKind, NormKind};

    fn model() -> Model {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 11,
            max_seq: 6,
            ffn_kind: FfnKind::Gated,
            norm_kind: NormKind::Layernorm,
            ..ModelConfig::default()
        };
        Model::init_random(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back, m);
        let p2 = dir.path().join("m2.ckpt");
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic() {
        let mut b = model().to_bytes().unwrap();
        b[0] = b'X';
        assert!(matches!(Model::from_bytes(&b), Err(Error::BadMagic(_))));
        assert!(matches!(Model::from_bytes(b"RL"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn bad_version() {
        let mut b = model().to_bytes().unwrap();
        b[4] = 9;
        assert!(matches!(Model::from_bytes(&b), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn truncated_tensor_is_named() {
        let b = model().to_bytes().unwrap();
        let cut = &b[..b.len() - 8];
        match Model::from_bytes(cut) {
            Err(Error::Truncated(what)) => assert_eq!(what, "head"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_named() {
        let m = model();
        let mut b = m.to_bytes().unwrap();
        let cfg_len = u32::from_le_bytes(b[5..9].try_into().unwrap()) as usize;
        let first = 9 + cfg_len;
        b[first..first + 4].copy_from_slice(&5u32.to_le_bytes());
        match Model::from_bytes(&b) {
            Err(Error::ShapeMismatch { tensor, expected, found }) => {
                assert_eq!(tensor, "tok_emb");
                assert_eq!((expected, found), (88, 5));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut b = model().to_bytes().unwrap();
        b.push(0);
        assert!(matches!(Model::from_bytes(&b), Err(Error::TrailingBytes(1))));
    }
}
