//! Synthetic source tasks and distribution-shifted test streams.
//!
//! The source task is a set of unit-norm gaussian cluster means on the
//! sphere, pairwise repelled to a minimum angular separation. Test streams
//! corrupt samples from those clusters at severities 1..5 and optionally mix
//! in outliers drawn around fresh means far from every class. Stream
//! construction is fully determined by `(task, spec)` — same inputs, same
//! bytes.

use std::io::{BufRead, Write};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const REPULSION_STEP: f64 = 0.05;
const MAX_SEPARATION_ITERS: usize = 10_000;
const OUTLIER_CLUSTERS: usize = 4;

/// Severity 1..5 noise-scale multipliers (times `sigma_clean`).
pub const GAUSSIAN_SEVERITY_SCALE: [f64; 5] = [0.25, 0.5, 1.0, 1.5, 2.0];
/// Severity 1..5 per-feature dropout probabilities.
pub const DROPOUT_SEVERITY_P: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Severity 1..5 rotation angles (radians) for the affine shift.
pub const AFFINE_SEVERITY_ANGLE: [f64; 5] = [0.08, 0.15, 0.3, 0.45, 0.6];

/// Gaussian-cluster classification task on the unit sphere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTask {
    pub classes: usize,
    pub feature_dim: usize,
    /// Unit-norm class means, row-major `[classes, feature_dim]`.
    pub means: Vec<f64>,
    pub sigma_clean: f64,
    /// Minimum pairwise angular separation between means, degrees.
    pub min_separation_deg: f64,
    pub seed: u64,
}

impl SourceTask {
    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.feature_dim..(class + 1) * self.feature_dim]
    }

    fn cos_threshold(&self) -> f64 {
        self.min_separation_deg.to_radians().cos()
    }
}

/// One kind of synthetic corruption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    AdditiveGaussian,
    FeatureDropout,
    AffineShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5; the per-kind scale tables are strictly increasing in severity.
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::InvalidConfig(format!(
                "corruption severity must be 1..=5, got {}",
                self.severity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    Standard,
    OpenWorld,
    Lifelong,
    Imbalanced,
    Mixed,
}

/// Declarative description of a test stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub mode: ScenarioMode,
    pub schedule: Vec<CorruptionSpec>,
    /// Fraction of each batch drawn from outlier clusters (open-world only).
    #[serde(default)]
    pub outlier_ratio: f64,
    pub batch_size: usize,
    pub stream_length: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.stream_length < 1 {
            return Err(Error::InvalidConfig("stream_length must be >= 1".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::InvalidConfig("corruption schedule must be nonempty".into()));
        }
        for spec in &self.schedule {
            spec.validate()?;
        }
        if !(0.0..1.0).contains(&self.outlier_ratio) {
            return Err(Error::InvalidConfig(format!(
                "outlier_ratio must be in [0, 1), got {}",
                self.outlier_ratio
            )));
        }
        if self.mode == ScenarioMode::OpenWorld && self.outlier_ratio <= 0.0 {
            return Err(Error::InvalidConfig("open_world requires outlier_ratio > 0".into()));
        }
        if self.mode == ScenarioMode::Lifelong && self.schedule.len() < 2 {
            return Err(Error::InvalidConfig("lifelong requires a schedule of length >= 2".into()));
        }
        Ok(())
    }
}

/// A batch of feature rows with labels; `None` marks an outlier row
/// (written as -1 in external files).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub labels: Vec<Option<usize>>,
    /// Index of the schedule entry this batch was corrupted with.
    pub segment: usize,
    pub corruption: Option<CorruptionSpec>,
}

impl LabeledBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn outlier_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

fn unit_gaussian_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn renormalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Samples class means and repels them on the unit sphere until every pair
/// is separated by at least `min_separation_deg`, then draws the clean
/// training set (`samples_per_class` gaussian points per class).
pub fn make_source_task(
    classes: usize,
    feature_dim: usize,
    samples_per_class: usize,
    sigma_clean: f64,
    min_separation_deg: f64,
    seed: u64,
) -> Result<(SourceTask, LabeledBatch)> {
    if classes < 2 {
        return Err(Error::ClassCount(classes));
    }
    if feature_dim < 2 {
        return Err(Error::InvalidConfig("feature_dim must be >= 2".into()));
    }
    if !(sigma_clean > 0.0) {
        return Err(Error::InvalidConfig("sigma_clean must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<Vec<f64>> =
        (0..classes).map(|_| unit_gaussian_vector(feature_dim, &mut rng)).collect();

    let cos_threshold = min_separation_deg.to_radians().cos();
    let mut iters = 0;
    loop {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..classes {
            for j in (i + 1)..classes {
                worst = worst.max(dot(&means[i], &means[j]));
            }
        }
        if worst <= cos_threshold {
            break;
        }
        iters += 1;
        if iters > MAX_SEPARATION_ITERS {
            return Err(Error::SeparationUnachievable {
                attempts: MAX_SEPARATION_ITERS,
                dim: feature_dim,
            });
        }
        // Push every too-close pair apart along their difference.
        for i in 0..classes {
            for j in (i + 1)..classes {
                if dot(&means[i], &means[j]) > cos_threshold {
                    let diff: Vec<f64> =
                        means[i].iter().zip(&means[j]).map(|(a, b)| a - b).collect();
                    for (a, d) in means[i].iter_mut().zip(&diff) {
                        *a += REPULSION_STEP * d;
                    }
                    for (b, d) in means[j].iter_mut().zip(&diff) {
                        *b -= REPULSION_STEP * d;
                    }
                    renormalize(&mut means[i]);
                    renormalize(&mut means[j]);
                }
            }
        }
    }

    let task = SourceTask {
        classes,
        feature_dim,
        means: means.into_iter().flatten().collect(),
        sigma_clean,
        min_separation_deg,
        seed,
    };

    let rows = classes * samples_per_class;
    let mut features = Vec::with_capacity(rows * feature_dim);
    let mut labels = Vec::with_capacity(rows);
    for class in 0..classes {
        for _ in 0..samples_per_class {
            let mean = task.mean(class);
            for &m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(m + sigma_clean * noise);
            }
            labels.push(Some(class));
        }
    }
    let train =
        LabeledBatch { features, rows, dim: feature_dim, labels, segment: 0, corruption: None };
    Ok((task, train))
}

/// Fresh clean draws from an existing task's clusters.
pub fn sample_clean(task: &SourceTask, samples_per_class: usize, seed: u64) -> LabeledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = task.classes * samples_per_class;
    let mut features = Vec::with_capacity(rows * task.feature_dim);
    let mut labels = Vec::with_capacity(rows);
    for class in 0..task.classes {
        for _ in 0..samples_per_class {
            for &m in task.mean(class) {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(m + task.sigma_clean * noise);
            }
            labels.push(Some(class));
        }
    }
    LabeledBatch { features, rows, dim: task.feature_dim, labels, segment: 0, corruption: None }
}

/// Fresh cluster means rejected to stay at least the task's separation angle
/// away from every class mean.
#[derive(Debug, Clone)]
pub struct OutlierPool {
    means: Vec<Vec<f64>>,
    sigma: f64,
}

impl OutlierPool {
    pub fn generate(task: &SourceTask, clusters: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cos_threshold = task.cos_threshold();
        let mut means = Vec::with_capacity(clusters);
        let mut attempts = 0;
        while means.len() < clusters {
            attempts += 1;
            if attempts > MAX_SEPARATION_ITERS {
                return Err(Error::SeparationUnachievable {
                    attempts: MAX_SEPARATION_ITERS,
                    dim: task.feature_dim,
                });
            }
            let candidate = unit_gaussian_vector(task.feature_dim, &mut rng);
            let clear = (0..task.classes).all(|c| dot(&candidate, task.mean(c)) <= cos_threshold);
            if clear {
                means.push(candidate);
            }
        }
        Ok(OutlierPool { means, sigma: task.sigma_clean })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    fn sample_row(&self, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        let cluster = rng.random_range(0..self.means.len());
        for &m in &self.means[cluster] {
            let noise: f64 = rng.sample(StandardNormal);
            out.push(m + self.sigma * noise);
        }
    }
}

/// `count` outlier rows, all labeled with the sentinel.
pub fn make_outliers(task: &SourceTask, count: usize, seed: u64) -> Result<LabeledBatch> {
    if count < 1 {
        return Err(Error::InvalidConfig("outlier count must be >= 1".into()));
    }
    let pool = OutlierPool::generate(task, OUTLIER_CLUSTERS, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut features = Vec::with_capacity(count * task.feature_dim);
    for _ in 0..count {
        pool.sample_row(&mut rng, &mut features);
    }
    Ok(LabeledBatch {
        features,
        rows: count,
        dim: task.feature_dim,
        labels: vec![None; count],
        segment: 0,
        corruption: None,
    })
}

/// Resolved noise scale for a corruption at its severity.
pub fn corruption_scale(spec: &CorruptionSpec, sigma_clean: f64) -> f64 {
    let idx = (spec.severity - 1) as usize;
    match spec.kind {
        CorruptionKind::AdditiveGaussian => GAUSSIAN_SEVERITY_SCALE[idx] * sigma_clean,
        CorruptionKind::FeatureDropout => DROPOUT_SEVERITY_P[idx],
        CorruptionKind::AffineShift => AFFINE_SEVERITY_ANGLE[idx],
    }
}

/// Applies `spec` to a batch. `structure_seed` fixes the stream-constant
/// random structure (rotation planes, shift direction); `draw_seed` drives
/// the per-batch noise. Labels pass through untouched.
pub fn corrupt(
    batch: &LabeledBatch,
    spec: &CorruptionSpec,
    sigma_clean: f64,
    structure_seed: u64,
    draw_seed: u64,
) -> Result<LabeledBatch> {
    spec.validate()?;
    let scale = corruption_scale(spec, sigma_clean);
    Ok(corrupt_scaled(batch, spec.kind, scale, sigma_clean, structure_seed, draw_seed))
}

/// Same as [`corrupt`] with an explicit scale; scale 0 returns the batch
/// unchanged for every kind.
pub fn corrupt_scaled(
    batch: &LabeledBatch,
    kind: CorruptionKind,
    scale: f64,
    sigma_clean: f64,
    structure_seed: u64,
    draw_seed: u64,
) -> LabeledBatch {
    let mut out = batch.clone();
    if scale == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    match kind {
        CorruptionKind::AdditiveGaussian => {
            for x in out.features.iter_mut() {
                let noise: f64 = rng.sample(StandardNormal);
                *x += scale * noise;
            }
        }
        CorruptionKind::FeatureDropout => {
            for x in out.features.iter_mut() {
                if rng.random::<f64>() < scale {
                    *x = 0.0;
                }
            }
        }
        CorruptionKind::AffineShift => {
            // Fixed random structure: a permutation pairing up coordinates
            // into rotation planes, plus a unit shift direction.
            let mut srng = ChaCha8Rng::seed_from_u64(structure_seed);
            let mut perm: Vec<usize> = (0..out.dim).collect();
            perm.shuffle(&mut srng);
            let shift = unit_gaussian_vector(out.dim, &mut srng);
            let (sin, cos) = scale.sin_cos();
            let shift_norm = scale * sigma_clean * 10.0;
            for r in 0..out.rows {
                let row = &mut out.features[r * out.dim..(r + 1) * out.dim];
                for pair in perm.chunks_exact(2) {
                    let (i, j) = (pair[0], pair[1]);
                    let (a, b) = (row[i], row[j]);
                    row[i] = cos * a - sin * b;
                    row[j] = sin * a + cos * b;
                }
                for (x, s) in row.iter_mut().zip(&shift) {
                    *x += shift_norm * s;
                }
            }
        }
    }
    out
}

fn sample_class_rows(
    task: &SourceTask,
    class_of_row: impl Fn(usize) -> usize,
    rows: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut features = Vec::with_capacity(rows * task.feature_dim);
    let mut labels = Vec::with_capacity(rows);
    for r in 0..rows {
        let class = class_of_row(r);
        for &m in task.mean(class) {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(m + task.sigma_clean * noise);
        }
        labels.push(Some(class));
    }
    (features, labels)
}

/// Builds the ordered batch sequence for a scenario. Deterministic in
/// `(task, spec)`.
pub fn build_stream(task: &SourceTask, spec: &ScenarioSpec) -> Result<Vec<LabeledBatch>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let structure_seed = spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    let pool = if spec.mode == ScenarioMode::OpenWorld {
        Some(OutlierPool::generate(task, OUTLIER_CLUSTERS, structure_seed)?)
    } else {
        None
    };

    let b = spec.batch_size;
    let len = spec.stream_length;
    let mut stream = Vec::with_capacity(len);
    for index in 0..len {
        let segment = match spec.mode {
            ScenarioMode::Standard | ScenarioMode::OpenWorld | ScenarioMode::Imbalanced => 0,
            ScenarioMode::Lifelong => (index * spec.schedule.len()) / len,
            ScenarioMode::Mixed => rng.random_range(0..spec.schedule.len()),
        };
        let corruption = spec.schedule[segment];

        let outliers = match spec.mode {
            ScenarioMode::OpenWorld => (b as f64 * spec.outlier_ratio).round() as usize,
            _ => 0,
        };
        let in_dist = b - outliers;

        let (features, labels) = match spec.mode {
            ScenarioMode::Imbalanced => {
                // Batches sorted by class; every batch single-class.
                let class = (index * task.classes) / len;
                sample_class_rows(task, |_| class, in_dist, &mut rng)
            }
            _ => {
                let classes: Vec<usize> =
                    (0..in_dist).map(|_| rng.random_range(0..task.classes)).collect();
                sample_class_rows(task, |r| classes[r], in_dist, &mut rng)
            }
        };

        let clean = LabeledBatch {
            features,
            rows: in_dist,
            dim: task.feature_dim,
            labels,
            segment,
            corruption: Some(corruption),
        };
        let draw_seed = rng.random::<u64>();
        let mut batch = corrupt(&clean, &corruption, task.sigma_clean, structure_seed, draw_seed)?;

        if outliers > 0 {
            let pool = pool.as_ref().expect("open-world pool");
            // Outlier rows are appended uncorrupted, then the whole batch
            // is shuffled so outliers interleave with in-distribution rows.
            let mut rows: Vec<(Vec<f64>, Option<usize>)> = (0..batch.rows)
                .map(|r| (batch.row(r).to_vec(), batch.labels[r]))
                .collect();
            for _ in 0..outliers {
                let mut row = Vec::with_capacity(task.feature_dim);
                pool.sample_row(&mut rng, &mut row);
                rows.push((row, None));
            }
            rows.shuffle(&mut rng);
            batch.features = rows.iter().flat_map(|(f, _)| f.iter().copied()).collect();
            batch.labels = rows.into_iter().map(|(_, l)| l).collect();
            batch.rows = b;
        }
        stream.push(batch);
    }
    Ok(stream)
}

// ── stream dump format ──────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct StreamRecord {
    index: usize,
    mode: ScenarioMode,
    corruption: Option<CorruptionSpec>,
    features: Vec<f64>,
    labels: Vec<i64>,
}

/// Writes one JSON record per batch (labels use -1 for outlier rows).
pub fn write_stream<W: Write>(
    mut w: W,
    mode: ScenarioMode,
    stream: &[LabeledBatch],
) -> Result<()> {
    for (index, batch) in stream.iter().enumerate() {
        let record = StreamRecord {
            index,
            mode,
            corruption: batch.corruption,
            features: batch.features.clone(),
            labels: batch
                .labels
                .iter()
                .map(|l| l.map(|c| c as i64).unwrap_or(-1))
                .collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a stream dump back. Segment indices are reconstructed from
/// corruption changes (the dump format does not carry them).
pub fn read_stream<R: BufRead>(r: R, dim: usize) -> Result<Vec<LabeledBatch>> {
    let mut stream = Vec::new();
    let mut segment = 0usize;
    let mut last_corruption: Option<CorruptionSpec> = None;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StreamRecord = serde_json::from_str(&line)?;
        if !stream.is_empty() && record.corruption != last_corruption {
            segment += 1;
        }
        last_corruption = record.corruption;
        let rows = record.labels.len();
        if record.features.len() != rows * dim {
            return Err(Error::InvalidConfig(format!(
                "stream record {}: {} features for {} rows of dim {}",
                record.index,
                record.features.len(),
                rows,
                dim
            )));
        }
        stream.push(LabeledBatch {
            features: record.features,
            rows,
            dim,
            labels: record
                .labels
                .into_iter()
                .map(|l| if l < 0 { None } else { Some(l as usize) })
                .collect(),
            segment,
            corruption: record.corruption,
        });
    }
    Ok(stream)
}
