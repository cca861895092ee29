//! The gated-sigmoid activation family `x·σ(βx)`, ReLU, shifted ReLU and the
//! exact GELU/SiLU references.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::PreactHistogram;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationSpec {
    /// `x·σ(βx)`; β = 1 is SiLU, β ≈ 1.7 approximates GELU, β → ∞ tends to ReLU.
    Gated { beta: f64 },
    Relu,
    /// `max(0, x − b)`
    ShiftedRelu { b: f64 },
    /// `x·Φ(x)` with the erf-based normal CDF.
    Gelu,
    Silu,
}

impl ActivationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationSpec::Gated { beta } if !(beta > 0.0 && beta.is_finite()) => {
                Err(Error::config("beta", format!("must be positive and finite, got {beta}")))
            }
            ActivationSpec::ShiftedRelu { b } if !b.is_finite() => {
                Err(Error::config("b", "must be finite"))
            }
            _ => Ok(()),
        }
    }

    /// True for members whose output is exactly zero on a half-line.
    pub fn produces_exact_zeros(&self) -> bool {
        matches!(self, ActivationSpec::Relu | ActivationSpec::ShiftedRelu { .. })
    }

    /// Location of the non-differentiable point, if any.
    pub fn kink(&self) -> Option<f64> {
        match *self {
            ActivationSpec::Relu => Some(0.0),
            ActivationSpec::ShiftedRelu { b } => Some(b),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            ActivationSpec::Gated { beta } => format!("gated({beta})"),
            ActivationSpec::Relu => "relu".into(),
            ActivationSpec::ShiftedRelu { b } => format!("shifted_relu({b})"),
            ActivationSpec::Gelu => "gelu".into(),
            ActivationSpec::Silu => "silu".into(),
        }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            ActivationSpec::Gated { beta } => x * sigmoid(beta * x),
            ActivationSpec::Silu => ActivationSpec::Gated { beta: 1.0 }.eval(x),
            ActivationSpec::Relu => relu(x),
            ActivationSpec::ShiftedRelu { b } => relu(x - b),
            ActivationSpec::Gelu => x * normal_cdf(x),
        }
    }

    /// Analytic derivative; the ReLU kink has derivative 0.
    #[inline]
    pub fn eval_derivative(&self, x: f64) -> f64 {
        match *self {
            ActivationSpec::Gated { beta } => {
                let s = sigmoid(beta * x);
                s * (1.0 + beta * x * (1.0 - s))
            }
            ActivationSpec::Silu => ActivationSpec::Gated { beta: 1.0 }.eval_derivative(x),
            ActivationSpec::Relu => step(x),
            ActivationSpec::ShiftedRelu { b } => step(x - b),
            ActivationSpec::Gelu => normal_cdf(x) + x * normal_pdf(x),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.eval(x)).collect()
    }

    pub fn derivative(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.eval_derivative(x)).collect()
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Fraction of entries with `|v_i| ≤ tau`.
pub fn sparsity(v: &[f64], tau: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::input("sparsity of an empty vector"));
    }
    if !(tau >= 0.0) {
        return Err(Error::input(format!("threshold must be non-negative, got {tau}")));
    }
    Ok(count_sparse(v, tau) as f64 / v.len() as f64)
}

#[inline]
pub(crate) fn count_sparse(v: &[f64], tau: f64) -> usize {
    v.iter().filter(|x| x.abs() <= tau).count()
}

/// Shift `b` for `ReLU(x − b)` such that at least `target` of the histogram
/// mass falls at or below `b`.
pub fn choose_shift(hist: &PreactHistogram, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::input(format!("target sparsity must lie in (0, 1), got {target}")));
    }
    hist.quantile(target)
}
