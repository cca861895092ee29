//! Latency model of speculative decoding combined with aggregated sparsity.
//!
//! A draft model costs `c` target-model units per proposed token. Verifying
//! `γ` drafted tokens touches only the `1 − s̄_agg(γ)` fraction of the target
//! model that is used by any of them, so a round costs `cγ + 1 − s̄_agg(γ)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(c: f64, gamma: u32, s: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::input(format!("cost ratio c must be positive, got {c}")));
    }
    if gamma < 1 {
        return Err(Error::input("draft length gamma must be at least 1"));
    }
    if !(0.0..1.0).contains(&s) {
        return Err(Error::input(format!("aggregated sparsity must lie in [0, 1), got {s}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::input(format!("acceptance probability must lie in [0, 1), got {alpha}")));
    }
    Ok(())
}

/// Speedup of sparse over standard speculative decoding:
/// `(cγ + 1) / (cγ + 1 − s)`.
pub fn thm1_speedup(c: f64, gamma: u32, s: f64) -> Result<f64> {
    check(c, gamma, s)?;
    let cg = c * gamma as f64;
    Ok((cg + 1.0) / (cg + (1.0 - s)))
}

/// Mean tokens produced per verification round: `(1 − α^{γ+1}) / (1 − α)`.
pub fn expected_tokens(alpha: f64, gamma: u32) -> Result<f64> {
    check_alpha(alpha)?;
    if gamma < 1 {
        return Err(Error::input("draft length gamma must be at least 1"));
    }
    Ok((1.0 - alpha.powi(gamma as i32 + 1)) / (1.0 - alpha))
}

/// Speedup of sparse speculative decoding over plain autoregressive decoding:
/// `(1 − α^{γ+1}) / ((cγ + 1 − s)(1 − α))`.
pub fn thm2_speedup(alpha: f64, c: f64, gamma: u32, s: f64) -> Result<f64> {
    check(c, gamma, s)?;
    let tokens = expected_tokens(alpha, gamma)?;
    Ok(tokens / (c * gamma as f64 + (1.0 - s)))
}

/// Aggregated sparsity as a function of the draft length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SaggCurve {
    Constant { value: f64 },
    /// Independent per-token sparsity `s`: `s^γ`.
    Random { s: f64 },
    /// Measured values, `values[γ − 1]`; the last value extends to larger γ.
    Table { values: Vec<f64> },
}

impl SaggCurve {
    pub fn at(&self, gamma: u32) -> f64 {
        match self {
            SaggCurve::Constant { value } => *value,
            SaggCurve::Random { s } => s.powi(gamma as i32),
            SaggCurve::Table { values } => {
                let i = (gamma.max(1) as usize - 1).min(values.len().saturating_sub(1));
                values.get(i).copied().unwrap_or(0.0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |v: f64| !(0.0..1.0).contains(&v);
        match self {
            SaggCurve::Constant { value } if bad(*value) => {
                Err(Error::config("s_agg.value", format!("{value} outside [0, 1)")))
            }
            SaggCurve::Random { s } if bad(*s) => Err(Error::config("s_agg.s", format!("{s} outside [0, 1)"))),
            SaggCurve::Table { values } => {
                if values.is_empty() {
                    return Err(Error::config("s_agg.values", "empty table"));
                }
                if let Some(v) = values.iter().find(|v| bad(**v)) {
                    return Err(Error::config("s_agg.values", format!("{v} outside [0, 1)")));
                }
                if values.windows(2).any(|w| w[1] > w[0]) {
                    return Err(Error::config("s_agg.values", "curve must be non-increasing in gamma"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Integer γ in `[1, gamma_max]` maximizing [`thm2_speedup`]; ties resolve to
/// the smaller γ.
pub fn optimal_gamma(alpha: f64, c: f64, curve: &SaggCurve, gamma_max: u32) -> Result<u32> {
    if gamma_max < 1 {
        return Err(Error::input("gamma_max must be at least 1"));
    }
    let mut best = (1, f64::NEG_INFINITY);
    for g in 1..=gamma_max {
        let v = thm2_speedup(alpha, c, g, curve.at(g))?;
        if v > best.1 {
            best = (g, v);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDecParams {
    pub alpha: f64,
    pub c: f64,
    pub gamma: u32,
    pub s_agg: SaggCurve,
    /// Target-model latency per full forward; cancels in every ratio.
    #[serde(default = "unit_latency")]
    pub target_latency: f64,
}

fn unit_latency() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub rounds: usize,
    pub mean_tokens: f64,
    /// Sample standard error of `mean_tokens`.
    pub tokens_stderr: f64,
    pub sparse_latency: f64,
    pub dense_latency: f64,
    /// Sparse vs standard speculative decoding on the same token stream.
    pub thm1_empirical: f64,
    /// Sparse speculative vs autoregressive decoding of the same tokens.
    pub thm2_empirical: f64,
}

/// Monte-Carlo rounds with i.i.d. Bernoulli(α) acceptances.
pub fn simulate_rounds(params: &SpecDecParams, n_rounds: usize, seed: u64) -> Result<SimulationResult> {
    if n_rounds == 0 {
        return Err(Error::input("n_rounds must be at least 1"));
    }
    if !(0.0..=1.0).contains(&params.alpha) {
        return Err(Error::input(format!("alpha must lie in [0, 1], got {}", params.alpha)));
    }
    let s = params.s_agg.at(params.gamma);
    check(params.c, params.gamma, s)?;
    let t = params.target_latency;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_rounds {
        let mut accepted = 0u32;
        while accepted < params.gamma && rng.gen::<f64>() < params.alpha {
            accepted += 1;
        }
        let tokens = (accepted + 1) as f64;
        sum += tokens;
        sum_sq += tokens * tokens;
    }
    let n = n_rounds as f64;
    let mean = sum / n;
    let var = if n_rounds > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    let cg = params.c * params.gamma as f64;
    let sparse_latency = n * (cg * t + (1.0 - s) * t);
    let dense_latency = n * (cg * t + t);
    Ok(SimulationResult {
        rounds: n_rounds,
        mean_tokens: mean,
        tokens_stderr: (var / n).sqrt(),
        sparse_latency,
        dense_latency,
        thm1_empirical: dense_latency / sparse_latency,
        thm2_empirical: sum * t / sparse_latency,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: u32,
    pub alpha: f64,
    pub c: f64,
    pub s_agg: f64,
    pub thm1: f64,
    pub thm2: f64,
    pub expected_tokens: f64,
}

pub fn sweep(alphas: &[f64], cs: &[f64], curve: &SaggCurve, gamma_max: u32) -> Result<Vec<SweepRow>> {
    curve.validate()?;
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &c in cs {
            for gamma in 1..=gamma_max {
                let s = curve.at(gamma);
                rows.push(SweepRow {
                    gamma,
                    alpha,
                    c,
                    s_agg: s,
                    thm1: thm1_speedup(c, gamma, s)?,
                    thm2: thm2_speedup(alpha, c, gamma, s)?,
                    expected_tokens: expected_tokens(alpha, gamma)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma,alpha,c,s_agg,thm1,thm2,expected_tokens\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.gamma, r.alpha, r.c, r.s_agg, r.thm1, r.thm2, r.expected_tokens
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thm1_examples() {
        for (c, g) in [(0.05, 1), (0.5, 7), (2.0, 64)] {
            assert_eq!(thm1_speedup(c, g, 0.0).unwrap(), 1.0);
        }
        let v = thm1_speedup(0.05, 4, 0.5).unwrap();
        assert!((v - 1.2 / 0.7).abs() < 1e-12);
        assert!(thm1_speedup(0.05, 4, 1.0).is_err());
        assert!(thm1_speedup(0.0, 4, 0.1).is_err());
        assert!(thm1_speedup(0.1, 0, 0.1).is_err());
    }

    #[test]
    fn expected_tokens_examples() {
        assert_eq!(expected_tokens(0.0, 5).unwrap(), 1.0);
        assert!((expected_tokens(0.8, 4).unwrap() - 3.3616).abs() < 1e-12);
        assert!(expected_tokens(1.0, 4).is_err());
    }

    #[test]
    fn thm2_examples() {
        let v = thm2_speedup(0.8, 0.02, 12, 0.0).unwrap();
        let direct = (1.0 - 0.8f64.powi(13)) / ((0.02 * 12.0 + 1.0) * 0.2);
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 3.8106).abs() < 1e-4);
        for g in [1, 3, 9] {
            let v = thm2_speedup(0.0, 0.1, g, 0.0).unwrap();
            assert!((v - 1.0 / (0.1 * g as f64 + 1.0)).abs() < 1e-15);
            assert!(v < 1.0);
        }
    }

    #[test]
    fn optimal_gamma_examples() {
        let dense = SaggCurve::Constant { value: 0.0 };
        let g = optimal_gamma(0.8, 0.02, &dense, 64).unwrap();
        assert!(matches!(g, 11 | 12), "{g}");
        assert_eq!(optimal_gamma(0.0, 0.02, &dense, 64).unwrap(), 1);
    }

    #[test]
    fn curve_validation() {
        assert!(SaggCurve::Table { values: vec![0.5, 0.6] }.validate().is_err());
        assert!(SaggCurve::Table { values: vec![] }.validate().is_err());
        assert!(SaggCurve::Constant { value: 1.0 }.validate().is_err());
        let t = SaggCurve::Table { values: vec![0.5, 0.4] };
        assert_eq!(t.at(1), 0.5);
        assert_eq!(t.at(9), 0.4);
    }

    #[test]
    fn simulation_near_certain_acceptance() {
        let p = SpecDecParams {
            alpha: 1.0 - 1e-9,
            c: 0.05,
            gamma: 6,
            s_agg: SaggCurve::Constant { value: 0.0 },
            target_latency: 1.0,
        };
        let r = simulate_rounds(&p, 10_000, 1).unwrap();
        assert!(r.mean_tokens > 6.999);
    }

    #[test]
    fn sweep_csv_shape() {
        let rows = sweep(&[0.8], &[0.02, 0.05], &SaggCurve::Random { s: 0.9 }, 4).unwrap();
        assert_eq!(rows.len(), 8);
        let csv = sweep_to_csv(&rows);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.starts_with("gamma,alpha,c,s_agg,thm1,thm2,expected_tokens\n1,0.8,0.02,0.9,"));
    }
}
