//! Differentiable adaptation objectives over a batch of logits.
//!
//! Every loss takes a `[B, K]` logits node on a live tape and reduces to a
//! scalar by the arithmetic mean over the batch. Log-probabilities are always
//! formed as `f - logsumexp(f)`; nothing here exponentiates and then logs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::opinion::EvidenceActivation;

/// Which unsupervised loss drives adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Softmax predictive-entropy minimization.
    Em,
    /// Opinion-entropy minimization with the stop-gradient norm constraint.
    Come,
    /// Cross-entropy against the frozen pretrained model's argmax.
    #[serde(alias = "pl")]
    PseudoLabel,
    /// Negative free energy, `-mean(logsumexp(f))`.
    Energy,
}

/// Objective selection plus the knobs that only the opinion objective uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Norm order for the constraint reparameterization.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Magnitude multiplier for the recovered logits.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub activation: EvidenceActivation,
}

fn default_p() -> f64 {
    2.0
}

fn default_tau() -> f64 {
    1.0
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveConfig {
            kind,
            p: default_p(),
            tau: default_tau(),
            activation: EvidenceActivation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0) {
            return Err(Error::NormOrder(self.p));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

fn batch_rows(tape: &Tape, logits: Var) -> Result<(usize, usize)> {
    let shape = tape.shape(logits);
    match *shape {
        [b, k] if b >= 1 && k >= 2 => Ok((b, k)),
        [k] if k >= 2 => Ok((1, k)),
        _ => Err(Error::ShapeMismatch { left: shape.to_vec(), right: vec![0, 2] }),
    }
}

fn mean_over_batch(tape: &mut Tape, per_row: Var, batch: usize) -> Var {
    let total = tape.sum(per_row);
    tape.scale(total, 1.0 / batch as f64)
}

/// Mean softmax entropy: `mean_i -sum_k p_ik log p_ik` via log-softmax.
pub fn em_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (b, _) = batch_rows(tape, logits)?;
    let lse = tape.logsumexp(logits);
    let logp = tape.sub_rows(logits, lse)?;
    let p = tape.softmax(logits);
    let plogp = tape.mul(p, logp)?;
    let row_neg_entropy = tape.row_sum(plogp);
    let neg = mean_over_batch(tape, row_neg_entropy, b);
    Ok(tape.scale(neg, -1.0))
}

/// Per-row `f <- f / ||f||_p * detach(||f||_p) * tau`.
///
/// With `tau = 1` the forward values are unchanged; gradients flow only
/// through the direction vector, never the magnitude.
pub fn come_reparameterize(tape: &mut Tape, logits: Var, p: f64, tau: f64) -> Result<Var> {
    let (_, _) = batch_rows(tape, logits)?;
    let norm = tape.p_norm(logits, p)?;
    if let Some(row) = tape.values(norm).iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNormRow(row));
    }
    let direction = tape.div_rows(logits, norm)?;
    let frozen_norm = tape.detach(norm);
    let recovered = tape.mul_rows(direction, frozen_norm)?;
    Ok(tape.scale(recovered, tau))
}

/// Mean opinion entropy of the reparameterized logits.
pub fn come_loss(tape: &mut Tape, logits: Var, cfg: &ObjectiveConfig) -> Result<Var> {
    cfg.validate()?;
    let (b, k) = batch_rows(tape, logits)?;
    let f = come_reparameterize(tape, logits, cfg.p, cfg.tau)?;

    let alpha = match cfg.activation {
        EvidenceActivation::Exponential => tape.exp(f),
        EvidenceActivation::RectifiedExponential => {
            let rect = tape.relu(f);
            tape.exp(rect)
        }
    };
    let strength = tape.row_sum(alpha);
    let evidence = tape.add_scalar(alpha, -1.0);
    let beliefs = tape.div_rows(evidence, strength)?;

    // Reductions over [B, K] come back as [B]; over a bare [K] row, as a
    // scalar. Match the constant K tensor to whichever shape appeared.
    let ks = if tape.shape(strength).is_empty() {
        tape.scalar(k as f64)
    } else {
        tape.vector(vec![k as f64; b])
    };
    let uncertainty = tape.div(ks, strength)?;

    let entropy_rows = opinion_entropy_rows(tape, beliefs, uncertainty)?;
    Ok(mean_over_batch(tape, entropy_rows, b))
}

const MASS_FLOOR: f64 = 1e-12;

/// `-sum(b * log b) - u * log u` per row with every mass clamped into
/// `[1e-12, 1]` (gradient zero outside the band). Clamping the multiplier as
/// well as the log keeps the term nonnegative, so out-of-simplex masses from
/// the exponential activation are inert instead of an unbounded reward.
fn opinion_entropy_rows(tape: &mut Tape, beliefs: Var, uncertainty: Var) -> Result<Var> {
    let b_clamped = tape.clamp(beliefs, MASS_FLOOR, 1.0);
    let log_b = tape.log_clamped(beliefs, MASS_FLOOR, 1.0);
    let b_terms = tape.mul(b_clamped, log_b)?;
    let b_sum = tape.row_sum(b_terms);

    let u_clamped = tape.clamp(uncertainty, MASS_FLOOR, 1.0);
    let log_u = tape.log_clamped(uncertainty, MASS_FLOOR, 1.0);
    let u_term = tape.mul(u_clamped, log_u)?;

    let neg_entropy = tape.add(b_sum, u_term)?;
    Ok(tape.scale(neg_entropy, -1.0))
}

/// Mean `-log softmax(f)[pseudo]` with indices from the frozen model.
pub fn pseudo_label_loss(tape: &mut Tape, logits: Var, pseudo: &[usize]) -> Result<Var> {
    let (b, k) = batch_rows(tape, logits)?;
    if pseudo.len() != b {
        return Err(Error::ShapeMismatch { left: vec![pseudo.len()], right: vec![b] });
    }
    let mut one_hot = vec![0.0; b * k];
    for (row, &label) in pseudo.iter().enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange { row, label, classes: k });
        }
        one_hot[row * k + label] = 1.0;
    }
    let logits_shape = tape.shape(logits).to_vec();
    let mask = tape.leaf(one_hot, &logits_shape)?;
    let lse = tape.logsumexp(logits);
    let logp = tape.sub_rows(logits, lse)?;
    let picked = tape.mul(logp, mask)?;
    let picked_rows = tape.row_sum(picked);
    let mean = mean_over_batch(tape, picked_rows, b);
    Ok(tape.scale(mean, -1.0))
}

/// Mean negative free energy: `-mean_i logsumexp(f_i)`.
pub fn energy_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (b, _) = batch_rows(tape, logits)?;
    let lse = tape.logsumexp(logits);
    let mean = mean_over_batch(tape, lse, b);
    Ok(tape.scale(mean, -1.0))
}

/// Dispatches on the configured kind. `pseudo` is required only for the
/// pseudo-label objective.
pub fn objective_loss(
    tape: &mut Tape,
    logits: Var,
    cfg: &ObjectiveConfig,
    pseudo: Option<&[usize]>,
) -> Result<Var> {
    match cfg.kind {
        ObjectiveKind::Em => em_loss(tape, logits),
        ObjectiveKind::Come => come_loss(tape, logits, cfg),
        ObjectiveKind::PseudoLabel => {
            let labels = pseudo.ok_or_else(|| {
                Error::InvalidConfig("pseudo_label objective needs pseudo labels".into())
            })?;
            pseudo_label_loss(tape, logits, labels)
        }
        ObjectiveKind::Energy => energy_loss(tape, logits),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    fn loss_value(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, rows: usize, logits: Vec<f64>) -> f64 {
        let mut t = Tape::new();
        let cols = logits.len() / rows;
        let x = t.matrix(rows, cols, logits).unwrap();
        let l = f(&mut t, x).unwrap();
        t.values(l)[0]
    }

    #[test]
    fn em_uniform_logits_is_log_k() {
        let v = loss_value(em_loss, 1, vec![0.0; 4]);
        assert!(close(v, 4.0f64.ln(), 1e-12));
    }

    #[test]
    fn em_near_point_mass_is_near_zero() {
        let v = loss_value(em_loss, 1, vec![100.0, 0.0]);
        assert!(v >= 0.0 && v < 1e-10);
    }

    #[test]
    fn em_matches_direct_formula_oracle() {
        // Direct -sum p log p with p computed the naive way.
        let mut state = 0x51ab_cdefu64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
        };
        for _ in 0..50 {
            let b = 3;
            let k = 5;
            let logits: Vec<f64> = (0..b * k).map(|_| next()).collect();
            let mut expect = 0.0;
            for i in 0..b {
                let row = &logits[i * k..(i + 1) * k];
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                let h: f64 = -row.iter().map(|x| (x.exp() / z) * (x.exp() / z).ln()).sum::<f64>();
                expect += h / b as f64;
            }
            let got = loss_value(em_loss, b, logits);
            assert!(close(got, expect, 1e-10));
        }
    }

    #[test]
    fn reparameterization_is_value_transparent_at_tau_one() {
        let mut t = Tape::new();
        let logits = vec![0.7, -1.3, 2.4, 0.2, 1.1, -0.5];
        let x = t.matrix(2, 3, logits.clone()).unwrap();
        let y = come_reparameterize(&mut t, x, 2.0, 1.0).unwrap();
        for (a, b) in t.values(y).iter().zip(&logits) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn reparameterization_scales_with_tau() {
        let mut t = Tape::new();
        let logits = vec![0.7, -1.3, 2.4];
        let x = t.matrix(1, 3, logits.clone()).unwrap();
        let y = come_reparameterize(&mut t, x, 2.0, 2.0).unwrap();
        for (a, b) in t.values(y).iter().zip(&logits) {
            assert!(close(*a, 2.0 * b, 1e-12));
        }
    }

    #[test]
    fn reparameterization_rejects_zero_norm_row() {
        let mut t = Tape::new();
        let x = t.matrix(2, 2, vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        assert!(matches!(come_reparameterize(&mut t, x, 2.0, 1.0), Err(Error::ZeroNormRow(1))));
    }

    #[test]
    fn come_gradient_is_orthogonal_to_logits() {
        let mut state = 0xfeed_5eedu64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..20 {
            let k = 6;
            let logits: Vec<f64> = (0..k).map(|_| next()).collect();
            let mut t = Tape::new();
            let x = t.matrix(1, k, logits.clone()).unwrap();
            let cfg = ObjectiveConfig::new(ObjectiveKind::Come);
            let loss = come_loss(&mut t, x, &cfg).unwrap();
            t.backward(loss).unwrap();
            let g = t.grad(x).unwrap();
            let dot: f64 = g.iter().zip(&logits).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-8, "tangential gradient violated: {dot}");
        }
    }

    #[test]
    fn come_single_row_matches_opinion_entropy() {
        let mut t = Tape::new();
        let x = t.matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let cfg = ObjectiveConfig::new(ObjectiveKind::Come);
        let loss = come_loss(&mut t, x, &cfg).unwrap();
        // tau = 1 leaves forward values alone, so this is the opinion-module
        // value for [2, 1] under the exponential activation.
        assert!(close(t.values(loss)[0], 0.9117551205214535, 1e-12));
    }

    #[test]
    fn come_zero_evidence_row_under_rectification_is_zero_loss() {
        let mut t = Tape::new();
        let x = t.matrix(1, 3, vec![-2.0, -0.5, -1.0]).unwrap();
        let cfg = ObjectiveConfig {
            activation: EvidenceActivation::RectifiedExponential,
            ..ObjectiveConfig::new(ObjectiveKind::Come)
        };
        let loss = come_loss(&mut t, x, &cfg).unwrap();
        // All alpha = 1: beliefs 0, u = 1, entropy 0 up to the mass floor.
        assert!(close(t.values(loss)[0], 0.0, 1e-9));
    }

    #[test]
    fn come_batch_mean_is_invariant_to_duplication() {
        let row = vec![1.4, -0.3, 0.8];
        let one = {
            let mut t = Tape::new();
            let x = t.matrix(1, 3, row.clone()).unwrap();
            let loss = come_loss(&mut t, x, &ObjectiveConfig::new(ObjectiveKind::Come)).unwrap();
            t.values(loss)[0]
        };
        let two = {
            let mut t = Tape::new();
            let mut doubled = row.clone();
            doubled.extend_from_slice(&row);
            let x = t.matrix(2, 3, doubled).unwrap();
            let loss = come_loss(&mut t, x, &ObjectiveConfig::new(ObjectiveKind::Come)).unwrap();
            t.values(loss)[0]
        };
        assert!(close(one, two, 1e-12));
    }

    #[test]
    fn pseudo_label_reference_values() {
        let mut t = Tape::new();
        let x = t.matrix(1, 2, vec![std::f64::consts::LN_2, 0.0]).unwrap();
        let loss = pseudo_label_loss(&mut t, x, &[0]).unwrap();
        // -ln(2/3) in extended precision.
        assert!(close(t.values(loss)[0], 0.4054651081081644, 1e-12));

        let mut t = Tape::new();
        let x = t.matrix(1, 5, vec![0.0; 5]).unwrap();
        let loss = pseudo_label_loss(&mut t, x, &[3]).unwrap();
        assert!(close(t.values(loss)[0], 5.0f64.ln(), 1e-12));

        let mut t = Tape::new();
        let x = t.matrix(1, 3, vec![40.0, 0.0, 0.0]).unwrap();
        let loss = pseudo_label_loss(&mut t, x, &[0]).unwrap();
        assert!(t.values(loss)[0].abs() < 1e-10);
    }

    #[test]
    fn pseudo_label_rejects_out_of_range() {
        let mut t = Tape::new();
        let x = t.matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            pseudo_label_loss(&mut t, x, &[3]),
            Err(Error::LabelOutOfRange { row: 0, label: 3, classes: 3 })
        ));
    }

    #[test]
    fn energy_reference_values() {
        let v = loss_value(energy_loss, 1, vec![0.0, 0.0]);
        assert!(close(v, -std::f64::consts::LN_2, 1e-12));

        for k in 2..=6usize {
            let c = 1.7;
            let v = loss_value(energy_loss, 1, vec![c; k]);
            assert!(close(v, -(c + (k as f64).ln()), 1e-12));
        }
    }

    #[test]
    fn energy_matches_direct_oracle() {
        let logits: Vec<f64> = vec![0.3, -1.2, 2.2, 0.4, 1.5, -0.7];
        let mut expect = 0.0;
        for row in logits.chunks(3) {
            expect -= row.iter().map(|x| x.exp()).sum::<f64>().ln() / 2.0;
        }
        let got = loss_value(energy_loss, 2, logits);
        assert!(close(got, expect, 1e-10));
    }

    #[test]
    fn losses_are_permutation_invariant_over_classes() {
        let base = vec![0.9, -0.4, 1.7, 0.1];
        let perm = vec![1.7, 0.9, 0.1, -0.4];
        let cfg = ObjectiveConfig::new(ObjectiveKind::Come);
        let em_a = loss_value(em_loss, 1, base.clone());
        let em_b = loss_value(em_loss, 1, perm.clone());
        assert!(close(em_a, em_b, 1e-12));
        let en_a = loss_value(energy_loss, 1, base.clone());
        let en_b = loss_value(energy_loss, 1, perm.clone());
        assert!(close(en_a, en_b, 1e-12));
        let co_a = loss_value(|t, x| come_loss(t, x, &cfg), 1, base);
        let co_b = loss_value(|t, x| come_loss(t, x, &cfg), 1, perm);
        assert!(close(co_a, co_b, 1e-12));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ObjectiveConfig::new(ObjectiveKind::Come);
        cfg.p = 0.5;
        assert!(cfg.validate().is_err());
        cfg.p = 2.0;
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
    }
}
