//! Subjective-logic layer over classifier logits.
//!
//! Logits become evidence, evidence parameterizes a Dirichlet (`alpha = e + 1`),
//! and the Dirichlet yields an opinion: per-class belief masses plus one
//! uncertainty mass, summing to 1. Two uncertainty readings are provided
//! side by side because each backs a different use:
//!
//! * [`uncertainty_mass_sl`] — `K / S` with `S = sum(alpha)`; feeds the
//!   adaptation-loop telemetry.
//! * [`uncertainty_mass_lse`] — `K / logsumexp(f)`; the variant the
//!   closed-form bounds ([`lemma1_bounds`], [`theorem1_confidence_bound`])
//!   are proved for. Not confined to `[0, 1]`.
//!
//! All functions here are pure; the differentiable path lives in the
//! objectives module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How evidence is read off the raw logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceActivation {
    /// `alpha = exp(f)`, so evidence `e = exp(f) - 1`. Matches a softmax
    /// cross-entropy pretrained model exactly, but negative logits yield
    /// negative belief masses.
    #[default]
    Exponential,
    /// `alpha = exp(max(f, 0))`, guaranteeing `alpha >= 1` and a valid
    /// opinion simplex.
    RectifiedExponential,
}

/// Dirichlet concentration derived from one logit row.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    strength: f64,
}

impl DirichletParams {
    /// Builds from explicit concentrations. All entries must be positive.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::ClassCount(alpha.len()));
        }
        let strength = alpha.iter().sum();
        Ok(DirichletParams { alpha, strength })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn class_count(&self) -> usize {
        self.alpha.len()
    }
}

/// Belief masses plus uncertainty mass; `u + sum(b) = 1` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Opinion {
    pub beliefs: Vec<f64>,
    pub uncertainty: f64,
}

impl Opinion {
    pub fn class_count(&self) -> usize {
        self.beliefs.len()
    }
}

/// `alpha = exp(f)` (or `exp(max(f, 0))` rectified), `S = sum(alpha)`.
pub fn dirichlet_from_logits(logits: &[f64], act: EvidenceActivation) -> Result<DirichletParams> {
    if logits.len() < 2 {
        return Err(Error::ClassCount(logits.len()));
    }
    let alpha: Vec<f64> = match act {
        EvidenceActivation::Exponential => logits.iter().map(|f| f.exp()).collect(),
        EvidenceActivation::RectifiedExponential => {
            logits.iter().map(|f| f.max(0.0).exp()).collect()
        }
    };
    DirichletParams::new(alpha)
}

/// `b_k = (alpha_k - 1) / S`, `u = K / S`.
pub fn opinion_from_dirichlet(d: &DirichletParams) -> Opinion {
    let k = d.class_count() as f64;
    let beliefs = d.alpha.iter().map(|a| (a - 1.0) / d.strength).collect();
    Opinion { beliefs, uncertainty: k / d.strength }
}

/// Mean of the Dirichlet: `p_k = alpha_k / S`.
pub fn expected_probability(d: &DirichletParams) -> Vec<f64> {
    d.alpha.iter().map(|a| a / d.strength).collect()
}

const MASS_FLOOR: f64 = 1e-12;

/// Shannon entropy of the `(K+1)`-mass vector `[b_1..b_K, u]`.
///
/// Each mass is clamped into `[1e-12, 1]` before entering the entropy term,
/// which keeps the value in `[0, ln(K+1)]` up to the floor: a zero mass
/// contributes ~1e-12 ln(1e-12) and the exponential activation's negative
/// beliefs are treated as vanishing masses rather than rewarded (the bias
/// is documented; use the rectified activation for strictly valid opinions).
pub fn opinion_entropy(m: &Opinion) -> f64 {
    let term = |mass: f64| {
        let c = mass.clamp(MASS_FLOOR, 1.0);
        -c * c.ln()
    };
    m.beliefs.iter().map(|&b| term(b)).sum::<f64>() + term(m.uncertainty)
}

/// Telemetry-flavor uncertainty: `K / S`.
pub fn uncertainty_mass_sl(logits: &[f64], act: EvidenceActivation) -> Result<f64> {
    let d = dirichlet_from_logits(logits, act)?;
    Ok(d.class_count() as f64 / d.strength())
}

/// Bound-flavor uncertainty: `K / logsumexp(f)`. Errors when `LSE <= 0`.
pub fn uncertainty_mass_lse(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::ClassCount(logits.len()));
    }
    let lse = logsumexp(logits);
    if lse <= 0.0 {
        return Err(Error::NonPositiveLse(lse));
    }
    Ok(logits.len() as f64 / lse)
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Sandwich on the LSE uncertainty for strictly positive logits:
/// `K / (||f||_p + ln K) <= K/LSE(f) <= K^(1 + 1/p) / ||f||_p`.
pub fn lemma1_bounds(logits: &[f64], p: f64) -> Result<(f64, f64)> {
    if logits.len() < 2 {
        return Err(Error::ClassCount(logits.len()));
    }
    if !(p >= 1.0) {
        return Err(Error::NormOrder(p));
    }
    if let Some((index, &value)) = logits.iter().enumerate().find(|(_, &f)| f <= 0.0) {
        return Err(Error::NonPositiveLogit { index, value });
    }
    let k = logits.len() as f64;
    let norm = logits.iter().map(|f| f.abs().powf(p)).sum::<f64>().powf(1.0 / p);
    let lower = k / (norm + k.ln());
    let upper = k.powf(1.0 + 1.0 / p) / norm;
    Ok((lower, upper))
}

/// Closed-form confidence ceiling `1 / (1 + (K-1) exp(-K / (u0 - delta)))`.
///
/// Mathematically strictly below 1 (the f64 value saturates to 1.0 once the
/// exponential underflows), decreasing in `u0` for fixed `delta`, and only
/// defined for `u0 - delta > 0`.
pub fn theorem1_confidence_bound(u0: f64, delta: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::ClassCount(k));
    }
    if u0 - delta <= 0.0 {
        return Err(Error::BoundPrecondition { u0, delta });
    }
    let kf = k as f64;
    Ok(1.0 / (1.0 + (kf - 1.0) * (-kf / (u0 - delta)).exp()))
}
