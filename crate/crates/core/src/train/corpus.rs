use rand::Rng;

use crate::error::{Error, Result};

/// Latin text of Cicero's *De finibus*, Book I (public domain).
static BUNDLED: &[u8] = include_bytes!("../../data/corpus.txt");

/// Byte-level corpus with a contiguous train/validation split.
#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
}

impl Corpus {
    pub fn bundled() -> Self {
        Self::from_bytes(BUNDLED.to_vec(), 0.1).expect("bundled corpus is large enough")
    }

    /// The last `val_fraction` of the bytes form the validation split.
    pub fn from_bytes(bytes: Vec<u8>, val_fraction: f64) -> Result<Self> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::input(format!("validation fraction must lie in (0, 1), got {val_fraction}")));
        }
        let split = ((1.0 - val_fraction) * bytes.len() as f64).round() as usize;
        if split < 2 || bytes.len() - split < 2 {
            return Err(Error::input("corpus too small to split"));
        }
        Ok(Self { bytes, split })
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn validation(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    /// `batch_size` random training windows of `seq_len + 1` tokens.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, batch_size: usize, seq_len: usize) -> Result<Vec<Vec<u32>>> {
        let train = self.train();
        if train.len() < seq_len + 1 {
            return Err(Error::input(format!(
                "training split of {} bytes is shorter than a window of {}",
                train.len(),
                seq_len + 1
            )));
        }
        Ok((0..batch_size)
            .map(|_| {
                let start = rng.gen_range(0..=train.len() - seq_len - 1);
                to_tokens(&train[start..start + seq_len + 1])
            })
            .collect())
    }

    /// Consecutive non-overlapping windows of `len` tokens, at most `max`.
    pub fn windows(split: &[u8], len: usize, max: usize) -> Vec<Vec<u32>> {
        split
            .chunks_exact(len)
            .take(max)
            .map(to_tokens)
            .collect()
    }

    pub fn validation_windows(&self, len: usize, max: usize) -> Vec<Vec<u32>> {
        Self::windows(self.validation(), len, max)
    }

    pub fn train_windows(&self, len: usize, max: usize) -> Vec<Vec<u32>> {
        Self::windows(self.train(), len, max)
    }
}

pub fn to_tokens(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}
