//! Accuracy, FPR at fixed TPR, AUROC, confidence histograms.
//!
//! Positives are the suspect rows — misclassified in-distribution samples
//! and outliers — so a closed-world run still has a meaningful FPR. Scores
//! are oriented so that higher means more suspect.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opinion::Opinion;

/// One scored row for the detection metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    /// Higher = more suspect.
    pub score: f64,
    /// Misclassified or outlier.
    pub positive: bool,
    pub outlier: bool,
}

impl ScoredSample {
    pub fn new(score: f64, positive: bool, outlier: bool) -> Self {
        // An outlier is positive by definition.
        ScoredSample { score, positive: positive || outlier, outlier }
    }
}

/// Per-row correctness record, as emitted by the adaptation engine.
#[derive(Debug, Clone, Copy)]
pub struct RowOutcome {
    pub correct: bool,
    pub outlier: bool,
}

/// Fraction correct over in-distribution rows; outliers are excluded.
pub fn accuracy(rows: &[RowOutcome]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for row in rows {
        if !row.outlier {
            total += 1;
            if row.correct {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::NoInDistribution);
    }
    Ok(correct as f64 / total as f64)
}

/// False-positive rate at the largest threshold `t` whose true-positive rate
/// (fraction of positives with score >= t) still reaches `tpr_target`.
///
/// Ties sit on the inclusive side: every sample scoring exactly `t` counts.
/// With all-identical scores the threshold must include everything and the
/// FPR is 1.
pub fn fpr_at_tpr(samples: &[ScoredSample], tpr_target: f64) -> Result<f64> {
    let mut positives: Vec<f64> =
        samples.iter().filter(|s| s.positive).map(|s| s.score).collect();
    let negatives: Vec<f64> = samples.iter().filter(|s| !s.positive).map(|s| s.score).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::EmptyClass {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    if !(0.0 < tpr_target && tpr_target <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "tpr_target must be in (0, 1], got {tpr_target}"
        )));
    }
    // TPR(t) >= target iff t <= the k-th largest positive score,
    // k = ceil(target * P); that k-th score is the largest valid threshold.
    positives.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let k = (tpr_target * positives.len() as f64).ceil() as usize;
    let threshold = positives[k.max(1) - 1];
    let fp = negatives.iter().filter(|&&s| s >= threshold).count();
    Ok(fp as f64 / negatives.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let p = samples.iter().filter(|s| s.positive).count();
    let n = samples.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::EmptyClass { positives: p, negatives: n });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].score.partial_cmp(&samples[b].score).expect("finite"));

    // Midrank assignment over tie groups, accumulating positive rank sum.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && samples[order[j]].score == samples[order[i]].score {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for &idx in &order[i..j] {
            if samples[idx].positive {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let p_f = p as f64;
    let u = rank_sum_pos - p_f * (p_f + 1.0) / 2.0;
    Ok(u / (p_f * n as f64))
}

/// Which scalar suspicion score to derive from a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `1 - max_k p_k` over the expected class probabilities.
    #[default]
    OneMinusMaxProb,
    /// The opinion's uncertainty mass.
    UncertaintyMass,
}

/// Scores a prediction given its probability vector and its opinion.
pub fn score_from_prediction(probabilities: &[f64], opinion: &Opinion, kind: ScoreKind) -> f64 {
    match kind {
        ScoreKind::OneMinusMaxProb => {
            1.0 - probabilities.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        }
        ScoreKind::UncertaintyMass => opinion.uncertainty,
    }
}

/// Same scoring applied to pre-extracted scalars (max probability and
/// uncertainty mass), as carried by trajectory rows.
pub fn score_from_scalars(max_prob: f64, uncertainty_mass: f64, kind: ScoreKind) -> f64 {
    match kind {
        ScoreKind::OneMinusMaxProb => 1.0 - max_prob,
        ScoreKind::UncertaintyMass => uncertainty_mass,
    }
}

/// Equal-width histogram over [0, 1]; out-of-range values clamp into the
/// end bins, so counts always sum to the sample count.
pub fn histogram(values: &[f64], bins: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if bins < 1 {
        return Err(Error::InvalidConfig("histogram needs bins >= 1".into()));
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = ((v * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok((counts, edges))
}

/// Aggregate summary written next to each trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub acc: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub mean_conf: f64,
    pub mean_u: f64,
    pub n: usize,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    fn rows(correct: &[bool], outlier: &[bool]) -> Vec<RowOutcome> {
        correct
            .iter()
            .zip(outlier)
            .map(|(&c, &o)| RowOutcome { correct: c, outlier: o })
            .collect()
    }

    #[test]
    fn accuracy_basics() {
        let all = rows(&[true, true, true], &[false, false, false]);
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let half = rows(&[true, false], &[false, false]);
        assert_eq!(accuracy(&half).unwrap(), 0.5);
        let mut with_outliers = half.clone();
        with_outliers.push(RowOutcome { correct: false, outlier: true });
        with_outliers.push(RowOutcome { correct: false, outlier: true });
        assert_eq!(accuracy(&with_outliers).unwrap(), 0.5);
        assert!(accuracy(&rows(&[false], &[true])).is_err());
    }

    fn sample(score: f64, positive: bool) -> ScoredSample {
        ScoredSample::new(score, positive, false)
    }

    #[test]
    fn fpr_hand_case() {
        let samples = [
            sample(0.9, true),
            sample(0.8, true),
            sample(0.1, false),
            sample(0.85, false),
        ];
        // Threshold lands on 0.8 (both positives needed for TPR 0.95);
        // one of two negatives scores >= 0.8.
        assert!(close(fpr_at_tpr(&samples, 0.95).unwrap(), 0.5, 1e-15));
    }

    #[test]
    fn fpr_perfect_separation_is_zero() {
        let samples = [
            sample(0.9, true),
            sample(0.8, true),
            sample(0.2, false),
            sample(0.1, false),
        ];
        assert_eq!(fpr_at_tpr(&samples, 0.95).unwrap(), 0.0);
    }

    #[test]
    fn fpr_identical_scores_is_one() {
        let samples = [sample(0.5, true), sample(0.5, false), sample(0.5, false)];
        assert_eq!(fpr_at_tpr(&samples, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn fpr_requires_both_classes() {
        assert!(matches!(
            fpr_at_tpr(&[sample(0.5, true)], 0.95),
            Err(Error::EmptyClass { .. })
        ));
    }

    #[test]
    fn outlier_flag_forces_positive() {
        let s = ScoredSample::new(0.4, false, true);
        assert!(s.positive);
    }

    #[test]
    fn auroc_perfect_and_degenerate() {
        let perfect = [sample(0.9, true), sample(0.8, true), sample(0.2, false)];
        assert_eq!(auroc(&perfect).unwrap(), 1.0);
        let flat = [sample(0.5, true), sample(0.5, false)];
        assert_eq!(auroc(&flat).unwrap(), 0.5);
    }

    #[test]
    fn auroc_matches_pairwise_oracle_on_hand_case() {
        let samples = [
            sample(0.9, true),
            sample(0.4, true),
            sample(0.7, true),
            sample(0.7, false),
            sample(0.3, false),
            sample(0.1, false),
        ];
        // Exhaustive pair count with half-credit ties.
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for p in samples.iter().filter(|s| s.positive) {
            for n in samples.iter().filter(|s| !s.positive) {
                pairs += 1.0;
                if p.score > n.score {
                    wins += 1.0;
                } else if p.score == n.score {
                    wins += 0.5;
                }
            }
        }
        assert!(close(auroc(&samples).unwrap(), wins / pairs, 1e-15));
    }

    #[test]
    fn score_kinds() {
        let uniform = [0.25; 4];
        let op = Opinion { beliefs: vec![0.0; 4], uncertainty: 1.0 };
        assert!(close(
            score_from_prediction(&uniform, &op, ScoreKind::OneMinusMaxProb),
            0.75,
            1e-15
        ));
        let point = [1.0, 0.0, 0.0];
        assert!(close(
            score_from_prediction(&point, &op, ScoreKind::OneMinusMaxProb),
            0.0,
            1e-15
        ));
        assert!(close(
            score_from_prediction(&uniform, &op, ScoreKind::UncertaintyMass),
            1.0,
            1e-15
        ));
    }

    #[test]
    fn histogram_basics() {
        let (counts, edges) = histogram(&[0.5], 2).unwrap();
        assert_eq!(counts, vec![0, 1]);
        assert_eq!(edges, vec![0.0, 0.5, 1.0]);

        let grid: Vec<f64> = (0..10).map(|i| (i as f64 + 0.5) / 10.0).collect();
        let (counts, _) = histogram(&grid, 10).unwrap();
        assert!(counts.iter().all(|&c| c == 1));

        let values = [0.01, 0.99, 1.0, -0.2, 0.5, 0.5];
        let (counts, _) = histogram(&values, 7).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), values.len());
    }
}
