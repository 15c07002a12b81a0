//! Online test-time adaptation: forward, objective, optional entropy
//! filtering, momentum-SGD update of the normalization affine parameters,
//! and per-step telemetry.
//!
//! Telemetry always describes the pre-update model — step `t`'s record is
//! about the model that actually processed batch `t`. Only gamma/beta move;
//! the frozen snapshot `theta0` never changes. Collapse is an observable,
//! not a crash: a non-finite loss or gradient aborts the run with the
//! partial trajectory, and a sustained near-zero entropy plateau flags the
//! run as collapsed while it keeps going.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::RowOutcome;
use crate::model::{MlpClassifier, ParamId};
use crate::objectives::{self, ObjectiveConfig, ObjectiveKind};
use crate::opinion::{self, EvidenceActivation};
use crate::scenarios::LabeledBatch;

/// Entropy plateau that counts as collapse when sustained.
pub const COLLAPSE_ENTROPY: f64 = 1e-4;
/// Number of consecutive plateau steps before flagging collapse.
pub const COLLAPSE_STREAK: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub objective: ObjectiveConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rows with softmax entropy >= this are excluded from the loss.
    #[serde(default)]
    pub entropy_filter: Option<f64>,
    /// Reset to theta0 (and zero momentum) at scenario segment boundaries.
    #[serde(default)]
    pub episodic_reset: bool,
    pub seed: u64,
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if let Some(e0) = self.entropy_filter {
            if !(e0 > 0.0) {
                return Err(Error::InvalidConfig("entropy_filter threshold must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Per-row telemetry tuple.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RowRecord {
    /// Max expected class probability.
    pub confidence: f64,
    /// Subjective-logic uncertainty mass K/S (exponential activation).
    pub uncertainty: f64,
    pub correct: bool,
    pub outlier: bool,
}

/// Telemetry for one adaptation step, computed from pre-update logits.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub loss: f64,
    /// Accuracy over in-distribution rows; `None` when the batch has none.
    pub accuracy: Option<f64>,
    pub mean_confidence: f64,
    pub mean_uncertainty: f64,
    pub mean_entropy: f64,
    pub filtered: usize,
    pub rows: Vec<RowRecord>,
}

impl TrajectoryRecord {
    pub fn row_outcomes(&self) -> Vec<RowOutcome> {
        self.rows.iter().map(|r| RowOutcome { correct: r.correct, outlier: r.outlier }).collect()
    }
}

/// Live adaptation state: the moving model, the frozen snapshot, and the
/// momentum buffers over the adaptable parameters.
pub struct AdaptState {
    pub model: MlpClassifier,
    pub theta0: MlpClassifier,
    velocity: Vec<(ParamId, Vec<f64>)>,
    step: usize,
}

impl AdaptState {
    pub fn new(model: MlpClassifier, theta0: MlpClassifier) -> Self {
        let velocity = model
            .adaptable_parameters()
            .into_iter()
            .map(|id| (id, vec![0.0; model.param(id).len()]))
            .collect();
        AdaptState { model, theta0, velocity, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Restores theta0 and zeroes the momentum buffers.
    pub fn reset_to_pretrained(&mut self) {
        self.model = self.theta0.clone();
        for (_, v) in self.velocity.iter_mut() {
            v.fill(0.0);
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn softmax_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

/// One online step: telemetry from the pre-update logits, entropy filter,
/// objective on the retained rows, momentum-SGD update of gamma/beta.
pub fn adapt_step(
    state: &mut AdaptState,
    batch: &LabeledBatch,
    cfg: &AdaptConfig,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    if batch.dim != state.model.input_dim {
        return Err(Error::ShapeMismatch {
            left: vec![batch.rows, batch.dim],
            right: vec![batch.rows, state.model.input_dim],
        });
    }
    let k = state.model.classes;
    let logits = state.model.logits(&batch.features, batch.rows)?;

    // Pre-update telemetry.
    let mut probs = vec![0.0; k];
    let mut rows = Vec::with_capacity(batch.rows);
    let mut entropies = Vec::with_capacity(batch.rows);
    let mut correct = 0usize;
    let mut in_dist = 0usize;
    let mut conf_sum = 0.0;
    let mut unc_sum = 0.0;
    for r in 0..batch.rows {
        let row_logits = &logits[r * k..(r + 1) * k];
        softmax_row(row_logits, &mut probs);
        let entropy = softmax_entropy(&probs);
        entropies.push(entropy);
        let confidence = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let uncertainty =
            opinion::uncertainty_mass_sl(row_logits, EvidenceActivation::Exponential)?;
        let predicted = crate::model::argmax(row_logits);
        let (is_correct, is_outlier) = match batch.labels[r] {
            Some(label) => {
                in_dist += 1;
                if predicted == label {
                    correct += 1;
                }
                (predicted == label, false)
            }
            None => (false, true),
        };
        conf_sum += confidence;
        unc_sum += uncertainty;
        rows.push(RowRecord { confidence, uncertainty, correct: is_correct, outlier: is_outlier });
    }
    let mean_entropy = entropies.iter().sum::<f64>() / batch.rows as f64;

    // Entropy filter selects the rows that feed the loss.
    let retained: Vec<usize> = match cfg.entropy_filter {
        Some(e0) => (0..batch.rows).filter(|&r| entropies[r] < e0).collect(),
        None => (0..batch.rows).collect(),
    };
    let filtered = batch.rows - retained.len();

    let mut loss_value = f64::NAN;
    if !retained.is_empty() {
        let mut features = Vec::with_capacity(retained.len() * batch.dim);
        for &r in &retained {
            features.extend_from_slice(batch.row(r));
        }
        // Pseudo labels come from the frozen pretrained model.
        let pseudo: Option<Vec<usize>> = if cfg.objective.kind == ObjectiveKind::PseudoLabel {
            Some(state.theta0.predict(&features, retained.len())?)
        } else {
            None
        };

        let mut tape = Tape::new();
        let staged = state.model.stage(&mut tape);
        let input = tape.matrix(retained.len(), batch.dim, features)?;
        let out = state.model.forward_staged(&mut tape, &staged, input)?;
        let loss = objectives::objective_loss(&mut tape, out, &cfg.objective, pseudo.as_deref())?;
        loss_value = tape.values(loss)[0];
        if !loss_value.is_finite() {
            return Err(Error::Collapse {
                step: state.step,
                reason: format!("non-finite loss {loss_value}"),
            });
        }
        tape.backward(loss)?;
        if cfg.learning_rate > 0.0 {
            for (id, v) in state.velocity.iter_mut() {
                let grad = tape.grad(staged.var(*id)).expect("gradient after backward");
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Collapse {
                        step: state.step,
                        reason: format!("non-finite gradient in {id:?}"),
                    });
                }
                let param = state.model.param_mut(*id);
                for ((vi, pi), &gi) in v.iter_mut().zip(param.iter_mut()).zip(grad) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
        }
    }

    let record = TrajectoryRecord {
        step: state.step,
        loss: loss_value,
        accuracy: if in_dist > 0 { Some(correct as f64 / in_dist as f64) } else { None },
        mean_confidence: conf_sum / batch.rows as f64,
        mean_uncertainty: unc_sum / batch.rows as f64,
        mean_entropy,
        filtered,
        rows,
    };
    state.step += 1;
    Ok(record)
}

/// Why a run ended flagged as collapsed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapseInfo {
    pub step: usize,
    pub reason: String,
}

/// Full-run result: the trajectory (partial if the run aborted), the final
/// model, and the collapse flag.
pub struct RunOutcome {
    pub records: Vec<TrajectoryRecord>,
    pub collapsed: bool,
    pub collapse: Option<CollapseInfo>,
    pub state: AdaptState,
}

/// Applies [`adapt_step`] over the stream in order. With `episodic_reset`,
/// restores theta0 and zeroes momentum whenever the segment index changes.
pub fn run(mut state: AdaptState, stream: &[LabeledBatch], cfg: &AdaptConfig) -> Result<RunOutcome> {
    if stream.is_empty() {
        return Err(Error::InvalidConfig("stream is empty".into()));
    }
    cfg.validate()?;
    let mut records = Vec::with_capacity(stream.len());
    let mut collapsed = false;
    let mut collapse = None;
    let mut low_entropy_streak = 0usize;
    let mut segment = stream[0].segment;

    for batch in stream {
        if cfg.episodic_reset && batch.segment != segment {
            state.reset_to_pretrained();
        }
        segment = batch.segment;

        match adapt_step(&mut state, batch, cfg) {
            Ok(record) => {
                if record.mean_entropy < COLLAPSE_ENTROPY {
                    low_entropy_streak += 1;
                    if low_entropy_streak >= COLLAPSE_STREAK && !collapsed {
                        collapsed = true;
                        collapse = Some(CollapseInfo {
                            step: record.step,
                            reason: format!(
                                "mean entropy below {COLLAPSE_ENTROPY} for {COLLAPSE_STREAK} steps"
                            ),
                        });
                    }
                } else {
                    low_entropy_streak = 0;
                }
                records.push(record);
            }
            Err(Error::Collapse { step, reason }) => {
                collapsed = true;
                collapse = Some(CollapseInfo { step, reason });
                break;
            }
            Err(other) => return Err(other),
        }
    }
    Ok(RunOutcome { records, collapsed, collapse, state })
}

/// Pure evaluation pass: learning rate zero, nothing moves.
pub fn no_adapt_baseline(
    model: &MlpClassifier,
    stream: &[LabeledBatch],
    objective: ObjectiveConfig,
) -> Result<RunOutcome> {
    let cfg = AdaptConfig {
        objective,
        learning_rate: 0.0,
        momentum: 0.0,
        entropy_filter: None,
        episodic_reset: false,
        seed: 0,
    };
    let state = AdaptState::new(model.clone(), model.clone());
    run(state, stream, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{pretrain, MlpClassifier, PretrainConfig};
    use crate::scenarios::{
        build_stream, make_source_task, CorruptionKind, CorruptionSpec, ScenarioMode, ScenarioSpec,
    };

    fn fixture() -> (MlpClassifier, MlpClassifier, Vec<LabeledBatch>) {
        let (task, train) = make_source_task(3, 8, 60, 0.15, 60.0, 17).unwrap();
        let mut model = MlpClassifier::new(8, &[12], 3, 5).unwrap();
        let cfg = PretrainConfig {
            epochs: 40,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 23,
        };
        let outcome = pretrain(&mut model, &train, &cfg).unwrap();
        let spec = ScenarioSpec {
            mode: ScenarioMode::Standard,
            schedule: vec![CorruptionSpec { kind: CorruptionKind::AdditiveGaussian, severity: 3 }],
            outlier_ratio: 0.0,
            batch_size: 16,
            stream_length: 6,
            seed: 31,
        };
        let stream = build_stream(&task, &spec).unwrap();
        (model, outcome.theta0, stream)
    }

    fn come_config(lr: f64) -> AdaptConfig {
        AdaptConfig {
            objective: ObjectiveConfig::new(ObjectiveKind::Come),
            learning_rate: lr,
            momentum: 0.9,
            entropy_filter: None,
            episodic_reset: false,
            seed: 3,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (model, theta0, stream) = fixture();
        let mut state = AdaptState::new(model.clone(), theta0);
        let record = adapt_step(&mut state, &stream[0], &come_config(0.0)).unwrap();
        assert_eq!(state.model, model);
        assert_eq!(record.step, 0);
        assert!(record.loss.is_finite());
    }

    #[test]
    fn tight_filter_drops_every_row_and_skips_update() {
        let (model, theta0, stream) = fixture();
        let mut cfg = come_config(0.1);
        cfg.entropy_filter = Some(1e-12);
        let mut state = AdaptState::new(model.clone(), theta0);
        let record = adapt_step(&mut state, &stream[0], &cfg).unwrap();
        assert_eq!(record.filtered, stream[0].rows);
        assert!(record.loss.is_nan());
        assert_eq!(state.model, model);
    }

    #[test]
    fn momentum_update_matches_scalar_recursion() {
        // Drive two steps on the same batch and check gamma against the
        // closed-form momentum recursion computed from observed gradients.
        let (model, theta0, stream) = fixture();
        let cfg = come_config(0.05);

        // Step 1: capture the gradient at theta, then verify.
        let grads_at = |m: &MlpClassifier, batch: &LabeledBatch| -> Vec<(ParamId, Vec<f64>)> {
            let mut tape = Tape::new();
            let staged = m.stage(&mut tape);
            let input = tape.matrix(batch.rows, batch.dim, batch.features.clone()).unwrap();
            let out = m.forward_staged(&mut tape, &staged, input).unwrap();
            let loss =
                objectives::objective_loss(&mut tape, out, &cfg.objective, None).unwrap();
            tape.backward(loss).unwrap();
            m.adaptable_parameters()
                .into_iter()
                .map(|id| (id, tape.grad(staged.var(id)).unwrap().to_vec()))
                .collect()
        };

        let g1 = grads_at(&model, &stream[0]);
        let mut state = AdaptState::new(model.clone(), theta0);
        adapt_step(&mut state, &stream[0], &cfg).unwrap();
        let g2 = grads_at(&state.model, &stream[0]);
        adapt_step(&mut state, &stream[0], &cfg).unwrap();

        for ((id, grad1), (_, grad2)) in g1.iter().zip(&g2) {
            let p0 = model.param(*id);
            let p2 = state.model.param(*id);
            for i in 0..p0.len() {
                // v1 = g1, p1 = p0 - lr v1; v2 = m v1 + g2, p2 = p1 - lr v2.
                let v1 = grad1[i];
                let v2 = cfg.momentum * v1 + grad2[i];
                let expect = p0[i] - cfg.learning_rate * v1 - cfg.learning_rate * v2;
                assert!(
                    (p2[i] - expect).abs() < 1e-12,
                    "momentum recursion mismatch at {id:?}[{i}]"
                );
            }
        }
    }

    #[test]
    fn frozen_parameters_never_move() {
        let (model, theta0, stream) = fixture();
        let frozen_before: Vec<Vec<u64>> = model
            .frozen_parameters()
            .iter()
            .map(|&id| model.param(id).iter().map(|x| x.to_bits()).collect())
            .collect();
        let state = AdaptState::new(model.clone(), theta0);
        let outcome = run(state, &stream, &come_config(0.1)).unwrap();
        for (id, before) in model.frozen_parameters().iter().zip(&frozen_before) {
            let after: Vec<u64> =
                outcome.state.model.param(*id).iter().map(|x| x.to_bits()).collect();
            assert_eq!(&after, before);
        }
        assert_eq!(outcome.state.theta0, outcome.state.theta0.clone());
    }

    #[test]
    fn filtered_rows_contribute_zero_gradient() {
        // Gradients with the filter on must match gradients computed on the
        // manually reduced batch.
        let (model, theta0, stream) = fixture();
        let batch = &stream[0];
        let logits = model.logits(&batch.features, batch.rows).unwrap();
        let k = model.classes;
        let mut entropies = Vec::new();
        let mut probs = vec![0.0; k];
        for r in 0..batch.rows {
            softmax_row(&logits[r * k..(r + 1) * k], &mut probs);
            entropies.push(softmax_entropy(&probs));
        }
        let mut sorted = entropies.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let e0 = sorted[batch.rows / 2]; // keep roughly half

        let mut cfg = come_config(0.1);
        cfg.entropy_filter = Some(e0);
        let mut state = AdaptState::new(model.clone(), theta0.clone());
        let record = adapt_step(&mut state, batch, &cfg).unwrap();
        assert!(record.filtered > 0 && record.filtered < batch.rows);

        let keep: Vec<usize> = (0..batch.rows).filter(|&r| entropies[r] < e0).collect();
        let mut reduced_features = Vec::new();
        let mut reduced_labels = Vec::new();
        for &r in &keep {
            reduced_features.extend_from_slice(batch.row(r));
            reduced_labels.push(batch.labels[r]);
        }
        let reduced = LabeledBatch {
            features: reduced_features,
            rows: keep.len(),
            dim: batch.dim,
            labels: reduced_labels,
            segment: batch.segment,
            corruption: batch.corruption,
        };
        let mut cfg_plain = come_config(0.1);
        cfg_plain.entropy_filter = None;
        let mut state_reduced = AdaptState::new(model.clone(), theta0);
        adapt_step(&mut state_reduced, &reduced, &cfg_plain).unwrap();

        for id in model.adaptable_parameters() {
            let a = state.model.param(id);
            let b = state_reduced.model.param(id);
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn telemetry_counts_are_complete() {
        let (model, theta0, stream) = fixture();
        let mut cfg = come_config(0.05);
        cfg.entropy_filter = Some(0.5 * (model.classes as f64).ln());
        let state = AdaptState::new(model, theta0);
        let outcome = run(state, &stream, &cfg).unwrap();
        assert_eq!(outcome.records.len(), stream.len());
        for (record, batch) in outcome.records.iter().zip(&stream) {
            assert_eq!(record.rows.len(), batch.rows);
            let retained = batch.rows - record.filtered;
            assert_eq!(retained + record.filtered, batch.rows);
            if let Some(acc) = record.accuracy {
                assert!((0.0..=1.0).contains(&acc));
            }
            for row in &record.rows {
                assert!(row.confidence > 0.0 && row.confidence <= 1.0);
            }
        }
    }

    #[test]
    fn rerun_is_bit_identical() {
        let (model, theta0, stream) = fixture();
        let cfg = come_config(0.05);
        let a = run(AdaptState::new(model.clone(), theta0.clone()), &stream, &cfg).unwrap();
        let b = run(AdaptState::new(model, theta0), &stream, &cfg).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.mean_confidence.to_bits(), rb.mean_confidence.to_bits());
            assert_eq!(ra.mean_uncertainty.to_bits(), rb.mean_uncertainty.to_bits());
        }
    }

    #[test]
    fn no_adapt_matches_offline_evaluation() {
        let (model, _, stream) = fixture();
        let outcome =
            no_adapt_baseline(&model, &stream, ObjectiveConfig::new(ObjectiveKind::Em)).unwrap();
        assert_eq!(outcome.records.len(), stream.len());
        assert_eq!(outcome.state.model, model);
        for (record, batch) in outcome.records.iter().zip(&stream) {
            let offline = model.accuracy_on(batch).unwrap();
            assert_eq!(record.accuracy, Some(offline));
        }
    }

    #[test]
    fn episodic_reset_restores_pretrained_parameters() {
        let (task, train) = make_source_task(3, 8, 60, 0.15, 60.0, 17).unwrap();
        let mut model = MlpClassifier::new(8, &[12], 3, 5).unwrap();
        let pcfg = PretrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 23,
        };
        let outcome = pretrain(&mut model, &train, &pcfg).unwrap();
        let spec = ScenarioSpec {
            mode: ScenarioMode::Lifelong,
            schedule: vec![
                CorruptionSpec { kind: CorruptionKind::AdditiveGaussian, severity: 2 },
                CorruptionSpec { kind: CorruptionKind::FeatureDropout, severity: 4 },
            ],
            outlier_ratio: 0.0,
            batch_size: 8,
            stream_length: 4,
            seed: 31,
        };
        let stream = build_stream(&task, &spec).unwrap();

        // With reset: adapt one segment, then verify the boundary restores.
        let mut cfg = come_config(0.2);
        cfg.episodic_reset = true;
        let mut state = AdaptState::new(model.clone(), outcome.theta0.clone());
        adapt_step(&mut state, &stream[0], &cfg).unwrap();
        adapt_step(&mut state, &stream[1], &cfg).unwrap();
        assert_ne!(state.model, outcome.theta0);
        // run() handles the boundary; emulate it directly here.
        state.reset_to_pretrained();
        assert_eq!(state.model, outcome.theta0);
    }

    #[test]
    fn pseudo_label_objective_runs() {
        let (model, theta0, stream) = fixture();
        let mut cfg = come_config(0.05);
        cfg.objective = ObjectiveConfig::new(ObjectiveKind::PseudoLabel);
        let state = AdaptState::new(model, theta0);
        let outcome = run(state, &stream, &cfg).unwrap();
        assert!(outcome.records.iter().all(|r| r.loss.is_finite()));
    }
}
