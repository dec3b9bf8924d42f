//! Scalar activation functions with derivatives and their classification.
//!
//! Activations split three ways: nonnegative concave on the positive orthant
//! (ReLU6, tanh, softsign), positive concave (sigmoid, whose output is
//! strictly positive even at zero input), and conditioners (softplus, ReLU)
//! which are only used to pre-process layer inputs, never inside an
//! equilibrium layer.

use crate::numeric::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    ReLU6,
    Tanh,
    Softsign,
    Sigmoid,
    Softplus,
    ReLU,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationClass {
    /// Nonnegative concave on the nonnegative reals; needs strictly positive
    /// layer input to yield a strictly positive map.
    NonnegativeConcave,
    /// Positive concave: strictly positive output for any nonnegative input.
    PositiveConcave,
    /// Input conditioning only (maps reals onto the nonnegative half-line).
    Conditioner,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 6] = [
        ActivationKind::ReLU6,
        ActivationKind::Tanh,
        ActivationKind::Softsign,
        ActivationKind::Sigmoid,
        ActivationKind::Softplus,
        ActivationKind::ReLU,
    ];

    /// The four activations allowed inside an equilibrium layer.
    pub const LAYER_KINDS: [ActivationKind; 4] = [
        ActivationKind::ReLU6,
        ActivationKind::Tanh,
        ActivationKind::Softsign,
        ActivationKind::Sigmoid,
    ];

    pub fn class(self) -> ActivationClass {
        match self {
            ActivationKind::ReLU6 | ActivationKind::Tanh | ActivationKind::Softsign => {
                ActivationClass::NonnegativeConcave
            }
            ActivationKind::Sigmoid => ActivationClass::PositiveConcave,
            ActivationKind::Softplus | ActivationKind::ReLU => ActivationClass::Conditioner,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::ReLU6 => "relu6",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Softsign => "softsign",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Softplus => "softplus",
            ActivationKind::ReLU => "relu",
        }
    }

    pub fn from_name(name: &str) -> Option<ActivationKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Evaluate the scalar activation.
///
/// The concave kinds are meant for nonnegative arguments (softsign in
/// particular is `x / (1 + x)`, the form valid on the nonnegative half-line);
/// the conditioners accept any real.
pub fn activate(kind: ActivationKind, v: f64) -> f64 {
    match kind {
        ActivationKind::ReLU6 => v.min(6.0),
        ActivationKind::Tanh => v.tanh(),
        ActivationKind::Softsign => v / (1.0 + v),
        ActivationKind::Sigmoid => sigmoid(v),
        ActivationKind::Softplus => softplus(v),
        ActivationKind::ReLU => v.max(0.0),
    }
}

/// Derivative of the scalar activation. At the ReLU6 kink (v = 6) and the
/// ReLU kink (v = 0) this returns the left derivative: 1 and 0 respectively.
pub fn activate_deriv(kind: ActivationKind, v: f64) -> f64 {
    match kind {
        ActivationKind::ReLU6 => {
            if v <= 6.0 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::Tanh => {
            let t = v.tanh();
            1.0 - t * t
        }
        ActivationKind::Softsign => {
            let d = 1.0 + v;
            1.0 / (d * d)
        }
        ActivationKind::Sigmoid => {
            let s = sigmoid(v);
            s * (1.0 - s)
        }
        ActivationKind::Softplus => sigmoid(v),
        ActivationKind::ReLU => {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe softplus: `ln(1 + e^v)` computed in whichever branch keeps
/// the exponent nonpositive.
#[inline]
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Shape-preserving elementwise application.
pub fn map_elementwise(kind: ActivationKind, m: &Matrix) -> Matrix {
    m.map(|v| activate(kind, v))
}
