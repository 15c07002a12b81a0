//! Randomized verification suites for the opinion algebra, the closed-form
//! bounds, and objective gradients.
//!
//! These back the `verify` CLI command and the acceptance tests. Every suite
//! is deterministic in its seed and reports violations with the offending
//! input vector, so a failure is reproducible and inspectable.

use std::fmt;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::model::MlpClassifier;
use crate::objectives::{self, ObjectiveConfig, ObjectiveKind};
use crate::opinion::{self, EvidenceActivation};

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub seed: u64,
    pub trials: usize,
    pub violations: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "[{}] {} — seed {} trials {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.seed,
            self.trials
        )?;
        for v in self.violations.iter().take(5) {
            writeln!(f, "    counterexample: {v}")?;
        }
        if self.violations.len() > 5 {
            writeln!(f, "    ... and {} more", self.violations.len() - 5)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed())
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for suite in &self.suites {
            write!(f, "{suite}")?;
        }
        writeln!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub trials: usize,
    pub grad_batches: usize,
    /// Deliberately narrows one bound so real samples violate it; exercises
    /// the failure path end to end.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 7, trials: 10_000, grad_batches: 100, inject_fault: false }
    }
}

pub fn run_all(opts: &VerifyOptions) -> Result<VerifyReport> {
    Ok(VerifyReport {
        suites: vec![
            opinion_algebra_suite(opts.seed, opts.trials)?,
            lemma1_suite(opts.seed.wrapping_add(1), opts.trials, opts.inject_fault)?,
            theorem1_suite(opts.seed.wrapping_add(2), opts.trials)?,
            gradient_suite(opts.seed.wrapping_add(3), opts.grad_batches)?,
        ],
    })
}

fn random_logits(rng: &mut ChaCha8Rng, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_positive_logits(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| 0.05 + 4.95 * rng.random::<f64>()).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Opinion masses close to 1 and, under the exponential activation, expected
/// probabilities coincide with softmax.
pub fn opinion_algebra_suite(seed: u64, trials: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    for _ in 0..trials {
        let k = rng.random_range(2..=10);
        let logits = random_logits(&mut rng, k, 2.0);
        let d = opinion::dirichlet_from_logits(&logits, EvidenceActivation::Exponential)?;
        let m = opinion::opinion_from_dirichlet(&d);
        let total = m.beliefs.iter().sum::<f64>() + m.uncertainty;
        if (total - 1.0).abs() > 1e-9 {
            violations.push(format!("mass sum {total} for logits {logits:?}"));
            continue;
        }
        let expected = opinion::expected_probability(&d);
        let soft = softmax(&logits);
        let diff = expected
            .iter()
            .zip(&soft)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if diff > 1e-12 {
            violations.push(format!("softmax equivalence diff {diff} for logits {logits:?}"));
        }
    }
    Ok(SuiteReport { name: "opinion-algebra", seed, trials, violations })
}

/// `K/(||f||_p + ln K) <= K/LSE(f) <= K^(1+1/p)/||f||_p` on strictly
/// positive logits, p in {1, 2, 4}, slack 1e-12.
pub fn lemma1_suite(seed: u64, trials: usize, inject_fault: bool) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    let fault = if inject_fault { 0.5 } else { 1.0 };
    for _ in 0..trials {
        let k = rng.random_range(2..=10);
        let logits = random_positive_logits(&mut rng, k);
        let p = [1.0, 2.0, 4.0][rng.random_range(0..3)];
        let (lower, upper) = opinion::lemma1_bounds(&logits, p)?;
        let u = opinion::uncertainty_mass_lse(&logits)?;
        if u < lower - 1e-12 || u > fault * upper + 1e-12 {
            violations.push(format!(
                "u={u} outside [{lower}, {}] at p={p} for logits {logits:?}",
                fault * upper
            ));
        }
    }
    Ok(SuiteReport { name: "lemma1-sandwich", seed, trials, violations })
}

/// `max softmax(f) <= 1/(1 + (K-1) exp(-K/(u0-delta))) + 1e-12` whenever
/// `|K/LSE(f) - u0| <= delta` and `u0 - delta > 0`, on positive logits (the
/// bound's proof chain needs `min f >= 0`).
pub fn theorem1_suite(seed: u64, trials: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    for _ in 0..trials {
        let k = rng.random_range(2..=10);
        let logits = random_positive_logits(&mut rng, k);
        let u = opinion::uncertainty_mass_lse(&logits)?;
        // Sample a constraint pair consistent with the observed u.
        let (u0, delta) = loop {
            let delta = 0.3 * rng.random::<f64>();
            let u0 = u + delta * (2.0 * rng.random::<f64>() - 1.0);
            if u0 - delta > 0.0 {
                break (u0, delta);
            }
        };
        let bound = opinion::theorem1_confidence_bound(u0, delta, k)?;
        let confidence = softmax(&logits).into_iter().fold(f64::NEG_INFINITY, f64::max);
        if confidence > bound + 1e-12 {
            violations.push(format!(
                "confidence {confidence} exceeds bound {bound} (u={u}, u0={u0}, delta={delta}) for logits {logits:?}"
            ));
        }
    }
    Ok(SuiteReport { name: "theorem1-bound", seed, trials, violations })
}

/// Central finite difference of a scalar function of a flat vector.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error metric used by every gradient check.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

fn objective_value(
    values: &[f64],
    rows: usize,
    cols: usize,
    cfg: &ObjectiveConfig,
    pseudo: Option<&[usize]>,
) -> f64 {
    let mut tape = Tape::new();
    let x = tape.matrix(rows, cols, values.to_vec()).expect("logit matrix");
    let loss = objectives::objective_loss(&mut tape, x, cfg, pseudo).expect("objective");
    tape.values(loss)[0]
}

fn objective_gradient(
    values: &[f64],
    rows: usize,
    cols: usize,
    cfg: &ObjectiveConfig,
    pseudo: Option<&[usize]>,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.matrix(rows, cols, values.to_vec()).expect("logit matrix");
    let loss = objectives::objective_loss(&mut tape, x, cfg, pseudo).expect("objective");
    tape.backward(loss).expect("backward");
    tape.grad(x).expect("gradient").to_vec()
}

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-6;

fn p_norm_row(row: &[f64], p: f64) -> f64 {
    row.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Plain-f64 opinion-entropy loss with the per-row norm factor pinned to
/// `base_norms`. Finite differences of this surrogate are the correct
/// oracle for the stop-gradient objective: the detached norm must not move
/// with the probe.
fn come_surrogate_value(
    values: &[f64],
    rows: usize,
    cols: usize,
    cfg: &ObjectiveConfig,
    base_norms: &[f64],
) -> f64 {
    let entropy_term = |m: f64| {
        let c = m.clamp(1e-12, 1.0);
        -c * c.ln()
    };
    let mut total = 0.0;
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        let live_norm = p_norm_row(row, cfg.p);
        let mut strength = 0.0;
        let mut alpha = vec![0.0; cols];
        for (a, &x) in alpha.iter_mut().zip(row) {
            let rep = x / live_norm * base_norms[r] * cfg.tau;
            let pre = match cfg.activation {
                EvidenceActivation::Exponential => rep,
                EvidenceActivation::RectifiedExponential => rep.max(0.0),
            };
            *a = pre.exp();
            strength += *a;
        }
        let mut entropy = 0.0;
        for &a in &alpha {
            entropy += entropy_term((a - 1.0) / strength);
        }
        entropy += entropy_term(cols as f64 / strength);
        total += entropy;
    }
    total / rows as f64
}

/// Analytic vs central-difference gradients for every objective variant,
/// plus an MLP-parameter check to exercise the layered backward path.
pub fn gradient_suite(seed: u64, batches: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();

    let come = |p: f64, tau: f64| ObjectiveConfig {
        p,
        tau,
        ..ObjectiveConfig::new(ObjectiveKind::Come)
    };
    let variants: Vec<(String, ObjectiveConfig)> = vec![
        ("em".into(), ObjectiveConfig::new(ObjectiveKind::Em)),
        ("come-p2-tau1".into(), come(2.0, 1.0)),
        ("come-p2-tau2".into(), come(2.0, 2.0)),
        ("come-p1-tau1".into(), come(1.0, 1.0)),
        ("come-p1-tau2".into(), come(1.0, 2.0)),
        ("pseudo_label".into(), ObjectiveConfig::new(ObjectiveKind::PseudoLabel)),
        ("energy".into(), ObjectiveConfig::new(ObjectiveKind::Energy)),
    ];

    let mut trials = 0;
    for (name, cfg) in &variants {
        for _ in 0..batches {
            trials += 1;
            let rows = rng.random_range(1..=4);
            let cols = rng.random_range(2..=6);
            // Keep components away from 0 so the p=1 norm and the FD probe
            // never straddle a kink.
            let values: Vec<f64> = (0..rows * cols)
                .map(|_| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * (0.2 + 2.3 * rng.random::<f64>())
                })
                .collect();
            let pseudo: Option<Vec<usize>> = if cfg.kind == ObjectiveKind::PseudoLabel {
                Some((0..rows).map(|_| rng.random_range(0..cols)).collect())
            } else {
                None
            };
            let analytic = objective_gradient(&values, rows, cols, cfg, pseudo.as_deref());
            // The opinion objective embeds a stop-gradient, so its finite
            // differences run against the frozen-norm surrogate; every other
            // objective differentiates the plain loss.
            let fd = if cfg.kind == ObjectiveKind::Come {
                let base_norms: Vec<f64> =
                    (0..rows).map(|r| p_norm_row(&values[r * cols..(r + 1) * cols], cfg.p)).collect();
                central_difference(
                    |v| come_surrogate_value(v, rows, cols, cfg, &base_norms),
                    &values,
                    FD_STEP,
                )
            } else {
                central_difference(
                    |v| objective_value(v, rows, cols, cfg, pseudo.as_deref()),
                    &values,
                    FD_STEP,
                )
            };
            let worst = analytic
                .iter()
                .zip(&fd)
                .map(|(&a, &n)| relative_error(a, n))
                .fold(0.0f64, f64::max);
            if worst > GRAD_TOL {
                violations.push(format!(
                    "{name}: max relative error {worst} on logits {values:?}"
                ));
            }
        }
    }

    // MLP-parameter gradients through matmul, standardization, and the
    // affine: finite differences over a flattened parameter vector.
    for _ in 0..3 {
        trials += 1;
        let model = MlpClassifier::new(4, &[5, 4], 3, rng.random::<u64>())?;
        let features: Vec<f64> =
            (0..2 * 4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ids = model.param_ids();

        let loss_of = |m: &MlpClassifier| -> f64 {
            let mut tape = Tape::new();
            let staged = m.stage(&mut tape);
            let x = tape.matrix(2, 4, features.clone()).expect("batch");
            let out = m.forward_staged(&mut tape, &staged, x).expect("forward");
            let loss = objectives::em_loss(&mut tape, out).expect("loss");
            tape.values(loss)[0]
        };

        let mut tape = Tape::new();
        let staged = model.stage(&mut tape);
        let x = tape.matrix(2, 4, features.clone())?;
        let out = model.forward_staged(&mut tape, &staged, x)?;
        let loss = objectives::em_loss(&mut tape, out)?;
        tape.backward(loss)?;

        for &id in &ids {
            let analytic = tape.grad(staged.var(id)).expect("grad").to_vec();
            let base = model.param(id).to_vec();
            let fd = central_difference(
                |v| {
                    let mut probe = model.clone();
                    probe.param_mut(id).copy_from_slice(v);
                    loss_of(&probe)
                },
                &base,
                FD_STEP,
            );
            let worst = analytic
                .iter()
                .zip(&fd)
                .map(|(&a, &n)| relative_error(a, n))
                .fold(0.0f64, f64::max);
            if worst > GRAD_TOL {
                violations.push(format!("mlp {id:?}: max relative error {worst}"));
            }
        }
    }

    Ok(SuiteReport { name: "gradient-check", seed, trials, violations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_at_reduced_trials() {
        let opts = VerifyOptions { seed: 7, trials: 500, grad_batches: 10, inject_fault: false };
        let report = run_all(&opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn fault_injection_produces_counterexample() {
        let report = lemma1_suite(7, 500, true).unwrap();
        assert!(!report.passed());
        assert!(report.violations[0].contains("logits"));
    }

    #[test]
    fn report_is_deterministic() {
        let opts = VerifyOptions { seed: 11, trials: 200, grad_batches: 5, inject_fault: false };
        let a = run_all(&opts).unwrap().to_string();
        let b = run_all(&opts).unwrap().to_string();
        assert_eq!(a, b);
    }
}
