//! Toy decoder-only transformer: pre-norm residual blocks, learned absolute
//! positions, plain or gated FFN, layernorm or RMSNorm, and the two ReLU
//! surgery stages.

mod checkpoint;
mod config;
mod forward;
mod hooks;
mod params;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{FfnKind, ModelConfig, NormKind};
pub use forward::{KvCache, Logits};
pub(crate) use forward::Tape;
pub use hooks::{HookSet, Hooks, NoHooks, PreactSite, Site};
pub use params::{Block, Norm, Params};

use crate::activations::ActivationSpec;
use crate::error::{Error, Result};
use crate::linalg::MacCounter;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurgeryStage {
    /// Replace the FFN activation with ReLU.
    Stage1,
    /// Stage 1 plus ReLU after both pre-sublayer norms.
    Stage2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

impl Model {
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Logits> {
        self.run(tokens, &mut NoHooks, None, None)
    }

    /// Forward pass with instrumentation hooks and optional MAC accounting.
    pub fn forward_with(
        &self,
        tokens: &[u32],
        hooks: &mut dyn Hooks,
        macs: Option<&mut MacCounter>,
    ) -> Result<Logits> {
        self.run(tokens, hooks, macs, None)
    }

    /// Feeds one token through the cache and returns its logits.
    pub fn decode_step(&self, cache: &mut KvCache, token: u32, hooks: &mut dyn Hooks) -> Result<Vec<f64>> {
        self.step(cache, token, hooks, None, None)
    }

    /// Autoregressive continuation of `prompt` using the key-value cache.
    pub fn generate(&self, prompt: &[u32], n_new: usize, mode: DecodeMode) -> Result<Vec<u32>> {
        self.check_generation(prompt, n_new)?;
        let mut out = prompt.to_vec();
        if n_new == 0 {
            return Ok(out);
        }
        let mut sampler = Sampler::new(mode)?;
        let mut cache = KvCache::new(self.config.n_layers);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = self.decode_step(&mut cache, t, &mut NoHooks)?;
        }
        for i in 0..n_new {
            let next = sampler.pick(&logits);
            out.push(next);
            if i + 1 < n_new {
                logits = self.decode_step(&mut cache, next, &mut NoHooks)?;
            }
        }
        Ok(out)
    }

    /// Reference generation that re-runs the full prefix for every token.
    pub fn generate_uncached(&self, prompt: &[u32], n_new: usize, mode: DecodeMode) -> Result<Vec<u32>> {
        self.check_generation(prompt, n_new)?;
        let mut out = prompt.to_vec();
        let mut sampler = Sampler::new(mode)?;
        for _ in 0..n_new {
            let logits = self.forward(&out)?;
            let next = sampler.pick(logits.row(logits.positions - 1));
            out.push(next);
        }
        Ok(out)
    }

    fn check_generation(&self, prompt: &[u32], n_new: usize) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::input("generation needs a non-empty prompt"));
        }
        let needed = prompt.len() + n_new.saturating_sub(1);
        if needed > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: needed,
                max: self.config.max_seq,
            });
        }
        for &t in prompt {
            self.check_token(t)?;
        }
        Ok(())
    }

    /// Activation surgery. Weights are left untouched.
    pub fn relufy(&self, stage: SurgeryStage) -> Model {
        let mut m = self.clone();
        m.config.ffn_activation = ActivationSpec::Relu;
        if stage == SurgeryStage::Stage2 {
            m.config.post_norm_activation = Some(ActivationSpec::Relu);
        }
        m
    }

    /// Copy with a different FFN activation and identical weights.
    pub fn with_ffn_activation(&self, act: ActivationSpec) -> Result<Model> {
        act.validate()?;
        let mut m = self.clone();
        m.config.ffn_activation = act;
        Ok(m)
    }
}

struct Sampler {
    mode: DecodeMode,
    rng: Option<ChaCha8Rng>,
}

impl Sampler {
    fn new(mode: DecodeMode) -> Result<Self> {
        let rng = match mode {
            DecodeMode::Greedy => None,
            DecodeMode::Temperature { temperature, seed } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::input(format!("temperature must be positive, got {temperature}")));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
        };
        Ok(Self { mode, rng })
    }

    fn pick(&mut self, logits: &[f64]) -> u32 {
        match (self.mode, self.rng.as_mut()) {
            (DecodeMode::Temperature { temperature, .. }, Some(rng)) => {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                let probs = crate::linalg::softmax(&scaled);
                let dist = WeightedIndex::new(&probs).expect("softmax output is a valid distribution");
                dist.sample(rng) as u32
            }
            _ => argmax(logits) as u32,
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
