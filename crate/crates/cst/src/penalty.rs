//! Folded-concave penalty calculus and the weighted soft-threshold operator.
//!
//! Penalties are exposed in un-normalized form: `derivative(spec, t)` is
//! d/dt q_λ(t), so its value at t = 0⁺ is λ itself. That is the weight the
//! second-stage reweighting applies per coordinate, which keeps call sites
//! free of λ-rescaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use ndarray::Array1;

/// Penalty family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    L1,
    Scad,
    Mcp,
}

/// A penalty family with its shape parameter and level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    /// Shape parameter; ignored for L1. SCAD requires a > 2, MCP a > 1.
    pub a: f64,
    /// Penalty level λ ≥ 0.
    pub lambda: f64,
}

impl PenaltySpec {
    /// Construct with the conventional default shape (SCAD 3.7, MCP 3.0).
    pub fn new(kind: PenaltyKind, lambda: f64) -> Result<Self> {
        let a = match kind {
            PenaltyKind::L1 => 0.0,
            PenaltyKind::Scad => 3.7,
            PenaltyKind::Mcp => 3.0,
        };
        Self::with_shape(kind, a, lambda)
    }

    /// Construct with an explicit shape parameter.
    pub fn with_shape(kind: PenaltyKind, a: f64, lambda: f64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::InvalidArg(format!(
                "penalty level must be non-negative, got {lambda}"
            )));
        }
        match kind {
            PenaltyKind::Scad if a <= 2.0 => {
                return Err(Error::InvalidArg(format!("SCAD requires a > 2, got {a}")))
            }
            PenaltyKind::Mcp if a <= 1.0 => {
                return Err(Error::InvalidArg(format!("MCP requires a > 1, got {a}")))
            }
            _ => {}
        }
        Ok(Self { kind, a, lambda })
    }
}

/// d/dt q_λ(t) for t ≥ 0. Non-increasing in t, equal to λ at t = 0.
pub fn derivative(spec: &PenaltySpec, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::NegativeArg(t));
    }
    let lam = spec.lambda;
    Ok(match spec.kind {
        PenaltyKind::L1 => lam,
        PenaltyKind::Scad => {
            if t <= lam {
                lam
            } else if t < spec.a * lam {
                (spec.a * lam - t) / (spec.a - 1.0)
            } else {
                0.0
            }
        }
        PenaltyKind::Mcp => (lam - t / spec.a).max(0.0),
    })
}

/// q_λ(t): the antiderivative of [`derivative`] with q_λ(0) = 0.
pub fn value(spec: &PenaltySpec, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::NegativeArg(t));
    }
    let lam = spec.lambda;
    Ok(match spec.kind {
        PenaltyKind::L1 => lam * t,
        PenaltyKind::Scad => {
            let a = spec.a;
            if t <= lam {
                lam * t
            } else if t < a * lam {
                // λ² + ∫_λ^t (aλ−u)/(a−1) du
                lam * lam + (a * lam * (t - lam) - 0.5 * (t * t - lam * lam)) / (a - 1.0)
            } else {
                0.5 * (a + 1.0) * lam * lam
            }
        }
        PenaltyKind::Mcp => {
            let a = spec.a;
            if t < a * lam {
                lam * t - t * t / (2.0 * a)
            } else {
                0.5 * a * lam * lam
            }
        }
    })
}

/// Coordinate-wise weighted soft threshold: the minimizer of
/// `½‖u − v‖² + η Σ wⱼ|uⱼ|`.
///
/// Thresholded coordinates come out exactly zero, so support extraction
/// downstream needs no magnitude cutoff. A weight of `+∞` pins the
/// coordinate to zero.
pub fn prox_weighted_l1(v: &Array1<f64>, w: &Array1<f64>, eta: f64) -> Result<Array1<f64>> {
    if v.len() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "prox input length {} vs weight length {}",
            v.len(),
            w.len()
        )));
    }
    if eta <= 0.0 {
        return Err(Error::NonpositiveStep(eta));
    }
    let mut out = Array1::<f64>::zeros(v.len());
    for j in 0..v.len() {
        let shrink = v[j].abs() - eta * w[j];
        out[j] = if shrink > 0.0 { v[j].signum() * shrink } else { 0.0 };
    }
    Ok(out)
}
