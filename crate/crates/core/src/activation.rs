//! Pointwise activations with their first and second derivatives.

use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{domain, Error, Result};

/// Beyond this magnitude the softplus branches switch to their asymptotic forms.
const SOFTPLUS_SWITCH: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    /// `log(1 + e^z) - log 2`, shifted so that `σ(0) = 0`.
    Softplus,
    /// `max(0, z)` with `σ'(0) = 0` and `σ'' ≡ 0`.
    Relu,
}

/// Value and derivatives of an activation at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationEval {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 2] = [ActivationKind::Softplus, ActivationKind::Relu];

    /// Evaluates `σ(z)`, `σ'(z)` and `σ''(z)`, rejecting non-finite input.
    pub fn eval(self, z: f64) -> Result<ActivationEval> {
        if !z.is_finite() {
            return Err(domain(format!("activation input must be finite, got {z}")));
        }
        Ok(self.eval_unchecked(z))
    }

    #[inline]
    pub(crate) fn eval_unchecked(self, z: f64) -> ActivationEval {
        match self {
            ActivationKind::Softplus => {
                let value = self.value(z);
                let first = sigmoid(z);
                // 1 - σ(z) = σ(-z); avoids cancellation for large z.
                let second = first * sigmoid(-z);
                ActivationEval { value, first, second }
            }
            ActivationKind::Relu => {
                if z > 0.0 {
                    ActivationEval { value: z, first: 1.0, second: 0.0 }
                } else {
                    ActivationEval { value: 0.0, first: 0.0, second: 0.0 }
                }
            }
        }
    }

    /// `σ(z)` alone.
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            ActivationKind::Softplus => {
                if z > SOFTPLUS_SWITCH {
                    z - LN_2 + (-z).exp().ln_1p()
                } else {
                    // exp(z) underflows gracefully for very negative z, and ln_1p
                    // stays exact there.
                    z.exp().ln_1p() - LN_2
                }
            }
            ActivationKind::Relu => z.max(0.0),
        }
    }

    /// `σ'(z)` alone.
    #[inline]
    pub fn first(self, z: f64) -> f64 {
        match self {
            ActivationKind::Softplus => sigmoid(z),
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Softplus => "softplus",
            ActivationKind::Relu => "relu",
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softplus" => Ok(ActivationKind::Softplus),
            "relu" => Ok(ActivationKind::Relu),
            other => Err(domain(format!("unknown activation `{other}`"))),
        }
    }
}
