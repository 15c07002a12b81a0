//! Command implementations behind the binary: pretrain, adapt, compare,
//! verify. All file writes are atomic (temp + rename) and every artifact
//! embeds the effective config hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{run_id, sha256_hex, ExperimentConfig};
use crate::engine::{self, AdaptState, RunOutcome, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{self, ScoredSample};
use crate::model::{pretrain, Checkpoint, MlpClassifier, CHECKPOINT_VERSION};
use crate::objectives::ObjectiveKind;
use crate::opinion::{self, EvidenceActivation};
use crate::scenarios::{self, build_stream, LabeledBatch, ScenarioMode, ScenarioSpec};

// ── pretrain ────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub clean_acc: f64,
    pub train_acc: f64,
    pub task_seed: u64,
    pub pretrain_seed: u64,
}

/// Builds the source task, trains the classifier, and writes the checkpoint
/// plus a JSON report.
pub fn cmd_pretrain(config_path: &Path) -> Result<PretrainReport> {
    let cfg = ExperimentConfig::load(config_path)?;
    let config_hash = cfg.hash()?;

    let (task, train) = scenarios::make_source_task(
        cfg.task.classes,
        cfg.task.feature_dim,
        cfg.task.samples_per_class,
        cfg.task.sigma_clean,
        cfg.task.min_separation_deg,
        cfg.task.seed,
    )?;
    let mut model = MlpClassifier::new(
        cfg.task.feature_dim,
        &cfg.model.hidden,
        cfg.task.classes,
        cfg.model.seed,
    )?;
    let outcome = pretrain(&mut model, &train, &cfg.pretrain)?;

    // Held-out clean accuracy on a fresh draw from the same clusters.
    let clean_test = scenarios::sample_clean(
        &task,
        cfg.task.samples_per_class.min(200),
        cfg.task.seed.wrapping_add(0x5eed),
    );
    let clean_acc = model.accuracy_on(&clean_test)?;

    let checkpoint_path = cfg.checkpoint_path()?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.clone(),
        task,
        model,
        theta0: outcome.theta0,
        clean_accuracy: clean_acc,
    };
    ckpt.save(&checkpoint_path)?;

    let report = PretrainReport {
        config_hash: config_hash.clone(),
        checkpoint: checkpoint_path,
        clean_acc,
        train_acc: outcome.train_accuracy,
        task_seed: cfg.task.seed,
        pretrain_seed: cfg.pretrain.seed,
    };
    let report_path = cfg
        .output_dir
        .join(format!("pretrain-report-{}.json", run_id(&cfg.pretrain_hash()?)));
    write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

// ── adapt ───────────────────────────────────────────────────────────

/// Summary JSON written beside each trajectory.
#[derive(Debug, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub acc: f64,
    /// `null` when the stream yields no positives (or no negatives).
    pub fpr95: Option<f64>,
    pub auroc: Option<f64>,
    pub mean_conf: f64,
    pub mean_u: f64,
    pub n: usize,
    pub config_hash: String,
    pub objective: ObjectiveKind,
    pub scenario: ScenarioMode,
    pub stream_hash: String,
    pub collapsed: bool,
    pub collapse_step: Option<usize>,
    pub collapse_reason: Option<String>,
    /// Mean realized |u - u0| between adapted and pretrained model.
    pub mean_abs_u_drift: f64,
    pub baseline_acc: f64,
    pub steps: usize,
}

#[derive(Debug)]
pub struct AdaptArtifacts {
    pub summary: AdaptSummary,
    pub trajectory_path: PathBuf,
    pub rows_path: PathBuf,
    pub summary_path: PathBuf,
}

pub fn cmd_adapt(
    config_path: &Path,
    objective: Option<ObjectiveKind>,
    scenario: Option<ScenarioMode>,
) -> Result<AdaptArtifacts> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(kind) = objective {
        cfg.adapt.objective.kind = kind;
    }
    if let Some(mode) = scenario {
        cfg.scenario = derive_scenario(&cfg.scenario, mode)?;
    }
    cfg.validate()?;
    let ckpt = load_checkpoint(&cfg)?;
    run_adapt(&cfg, &ckpt, &cfg.scenario, cfg.adapt.objective.kind)
}

/// Executes one adaptation run against a loaded checkpoint and writes the
/// trajectory CSV, per-row sidecar, and summary JSON.
pub fn run_adapt(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
    scenario: &ScenarioSpec,
    objective: ObjectiveKind,
) -> Result<AdaptArtifacts> {
    let mut effective = cfg.clone();
    effective.scenario = scenario.clone();
    effective.adapt.objective.kind = objective;
    let config_hash = effective.hash()?;
    let id = run_id(&config_hash).to_string();

    let stream = build_stream(&ckpt.task, scenario)?;
    let stream_hash = hash_stream(scenario.mode, &stream)?;

    let mut adapt_cfg = effective.adapt.clone();
    adapt_cfg.objective.kind = objective;
    let state = AdaptState::new(ckpt.theta0.clone(), ckpt.theta0.clone());
    let outcome = engine::run(state, &stream, &adapt_cfg)?;

    let baseline =
        engine::no_adapt_baseline(&ckpt.theta0, &stream, adapt_cfg.objective)?;
    let summary = summarize(
        &effective,
        &outcome,
        &baseline,
        &stream,
        &ckpt.theta0,
        config_hash.clone(),
        stream_hash,
    )?;

    let trajectory_path = effective.output_dir.join(format!("trajectory-{id}.csv"));
    write_atomic(&trajectory_path, trajectory_csv(&outcome.records, &config_hash).as_bytes())?;

    let rows_path = effective.output_dir.join(format!("rows-{id}.jsonl"));
    write_atomic(&rows_path, rows_jsonl(&outcome.records, &config_hash)?.as_bytes())?;

    let summary_path = effective.output_dir.join(format!("summary-{id}.json"));
    write_atomic(&summary_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;

    Ok(AdaptArtifacts { summary, trajectory_path, rows_path, summary_path })
}

fn load_checkpoint(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path()?;
    if !path.exists() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint {} not found; run `pretrain` with this config first",
            path.display()
        )));
    }
    Checkpoint::load(&path)
}

/// Swaps the scenario mode, adjusting only the fields the new mode needs:
/// open-world gets a positive outlier ratio, lifelong/mixed get a cycled
/// multi-corruption schedule when the config carries a single entry.
pub fn derive_scenario(base: &ScenarioSpec, mode: ScenarioMode) -> Result<ScenarioSpec> {
    let mut spec = base.clone();
    spec.mode = mode;
    match mode {
        ScenarioMode::OpenWorld => {
            if spec.outlier_ratio <= 0.0 {
                spec.outlier_ratio = 0.5;
            }
        }
        ScenarioMode::Lifelong | ScenarioMode::Mixed => {
            if spec.schedule.len() < 2 {
                let severity = spec.schedule[0].severity;
                spec.schedule = vec![
                    scenarios::CorruptionSpec {
                        kind: scenarios::CorruptionKind::AdditiveGaussian,
                        severity,
                    },
                    scenarios::CorruptionSpec {
                        kind: scenarios::CorruptionKind::FeatureDropout,
                        severity,
                    },
                    scenarios::CorruptionSpec {
                        kind: scenarios::CorruptionKind::AffineShift,
                        severity,
                    },
                ];
            }
        }
        _ => {}
    }
    spec.validate()?;
    Ok(spec)
}

fn hash_stream(mode: ScenarioMode, stream: &[LabeledBatch]) -> Result<String> {
    let mut buf = Vec::new();
    scenarios::write_stream(&mut buf, mode, stream)?;
    Ok(sha256_hex(&buf)[..12].to_string())
}

fn summarize(
    cfg: &ExperimentConfig,
    outcome: &RunOutcome,
    baseline: &RunOutcome,
    stream: &[LabeledBatch],
    theta0: &MlpClassifier,
    config_hash: String,
    stream_hash: String,
) -> Result<AdaptSummary> {
    let mut samples = Vec::new();
    let mut outcomes = Vec::new();
    let mut conf_sum = 0.0;
    let mut u_sum = 0.0;
    let mut drift_sum = 0.0;
    let mut n = 0usize;

    for (record, batch) in outcome.records.iter().zip(stream) {
        // Realized uncertainty divergence against the frozen model.
        let theta0_logits = theta0.logits(&batch.features, batch.rows)?;
        for (r, row) in record.rows.iter().enumerate() {
            let score =
                metrics::score_from_scalars(row.confidence, row.uncertainty, cfg.metrics.score);
            samples.push(ScoredSample::new(score, !row.correct, row.outlier));
            outcomes.push(metrics::RowOutcome { correct: row.correct, outlier: row.outlier });
            conf_sum += row.confidence;
            u_sum += row.uncertainty;
            let u0 = opinion::uncertainty_mass_sl(
                &theta0_logits[r * theta0.classes..(r + 1) * theta0.classes],
                EvidenceActivation::Exponential,
            )?;
            drift_sum += (row.uncertainty - u0).abs();
            n += 1;
        }
    }

    let baseline_outcomes: Vec<metrics::RowOutcome> =
        baseline.records.iter().flat_map(|r| r.row_outcomes()).collect();

    // Degenerate streams (every row correct, or none) leave the detection
    // metrics undefined; record null rather than failing the run.
    let fpr95 = match metrics::fpr_at_tpr(&samples, cfg.metrics.tpr_target) {
        Ok(v) => Some(v),
        Err(Error::EmptyClass { .. }) => None,
        Err(e) => return Err(e),
    };
    let auroc = match metrics::auroc(&samples) {
        Ok(v) => Some(v),
        Err(Error::EmptyClass { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(AdaptSummary {
        acc: metrics::accuracy(&outcomes)?,
        fpr95,
        auroc,
        mean_conf: conf_sum / n as f64,
        mean_u: u_sum / n as f64,
        n,
        config_hash,
        objective: cfg.adapt.objective.kind,
        scenario: cfg.scenario.mode,
        stream_hash,
        collapsed: outcome.collapsed,
        collapse_step: outcome.collapse.as_ref().map(|c| c.step),
        collapse_reason: outcome.collapse.as_ref().map(|c| c.reason.clone()),
        mean_abs_u_drift: drift_sum / n as f64,
        baseline_acc: metrics::accuracy(&baseline_outcomes)?,
        steps: outcome.records.len(),
    })
}

fn trajectory_csv(records: &[TrajectoryRecord], config_hash: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash={config_hash}");
    let _ = writeln!(out, "step,loss,acc,mean_conf,mean_u,mean_entropy,filtered");
    for r in records {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.loss, acc, r.mean_confidence, r.mean_uncertainty, r.mean_entropy, r.filtered
        );
    }
    out
}

#[derive(Serialize)]
struct RowLine<'a> {
    step: usize,
    row: usize,
    confidence: f64,
    uncertainty: f64,
    correct: bool,
    outlier: bool,
    config_hash: &'a str,
}

fn rows_jsonl(records: &[TrajectoryRecord], config_hash: &str) -> Result<String> {
    let mut out = String::new();
    for record in records {
        for (i, row) in record.rows.iter().enumerate() {
            let line = RowLine {
                step: record.step,
                row: i,
                confidence: row.confidence,
                uncertainty: row.uncertainty,
                correct: row.correct,
                outlier: row.outlier,
                config_hash,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    Ok(out)
}

// ── compare ─────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct CompareArtifacts {
    pub table_path: PathBuf,
    pub rows: Vec<CompareRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub objective: ObjectiveKind,
    pub scenario: ScenarioMode,
    pub stream_hash: String,
    pub acc: f64,
    pub fpr95: Option<f64>,
    pub auroc: Option<f64>,
    pub collapsed: bool,
}

const COMPARE_MODES: [ScenarioMode; 5] = [
    ScenarioMode::Standard,
    ScenarioMode::OpenWorld,
    ScenarioMode::Lifelong,
    ScenarioMode::Imbalanced,
    ScenarioMode::Mixed,
];

/// Runs each objective over every scenario mode on identical streams and
/// writes a long-format CSV with deltas against the entropy-minimization
/// rows when present.
pub fn cmd_compare(config_path: &Path, objectives: &[ObjectiveKind]) -> Result<CompareArtifacts> {
    if objectives.is_empty() {
        return Err(Error::InvalidConfig("compare needs at least one objective".into()));
    }
    let cfg = ExperimentConfig::load(config_path)?;
    let ckpt = load_checkpoint(&cfg)?;

    let mut rows = Vec::new();
    for mode in COMPARE_MODES {
        let scenario = derive_scenario(&cfg.scenario, mode)?;
        for &objective in objectives {
            let artifacts = run_adapt(&cfg, &ckpt, &scenario, objective)?;
            rows.push(CompareRow {
                objective,
                scenario: mode,
                stream_hash: artifacts.summary.stream_hash.clone(),
                acc: artifacts.summary.acc,
                fpr95: artifacts.summary.fpr95,
                auroc: artifacts.summary.auroc,
                collapsed: artifacts.summary.collapsed,
            });
        }
    }

    let config_hash = cfg.hash()?;
    let mut out = String::new();
    let _ = writeln!(out, "# config_hash={config_hash}");
    let _ = writeln!(
        out,
        "objective,scenario,stream_hash,acc,fpr95,auroc,collapsed,d_acc_vs_em,d_fpr95_vs_em,d_auroc_vs_em"
    );
    for row in &rows {
        let em = rows
            .iter()
            .find(|r| r.objective == ObjectiveKind::Em && r.scenario == row.scenario);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let diff = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).to_string(),
            _ => String::new(),
        };
        let (da, df, du) = match em {
            Some(em) if row.objective != ObjectiveKind::Em => (
                format!("{}", row.acc - em.acc),
                diff(row.fpr95, em.fpr95),
                diff(row.auroc, em.auroc),
            ),
            _ => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            kind_name(row.objective),
            mode_name(row.scenario),
            row.stream_hash,
            row.acc,
            opt(row.fpr95),
            opt(row.auroc),
            row.collapsed,
            da,
            df,
            du
        );
    }
    let table_path = cfg.output_dir.join(format!("compare-{}.csv", run_id(&config_hash)));
    write_atomic(&table_path, out.as_bytes())?;
    Ok(CompareArtifacts { table_path, rows })
}

pub fn kind_name(kind: ObjectiveKind) -> &'static str {
    match kind {
        ObjectiveKind::Em => "em",
        ObjectiveKind::Come => "come",
        ObjectiveKind::PseudoLabel => "pl",
        ObjectiveKind::Energy => "energy",
    }
}

pub fn mode_name(mode: ScenarioMode) -> &'static str {
    match mode {
        ScenarioMode::Standard => "standard",
        ScenarioMode::OpenWorld => "open_world",
        ScenarioMode::Lifelong => "lifelong",
        ScenarioMode::Imbalanced => "imbalanced",
        ScenarioMode::Mixed => "mixed",
    }
}

// ── verify ──────────────────────────────────────────────────────────

pub use crate::verify::{run_all as run_verify, VerifyOptions, VerifyReport};
