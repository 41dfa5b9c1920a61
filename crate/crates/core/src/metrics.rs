//! Black-box evaluation metrics and the cross-entropy surrogate.
//!
//! Metrics are only ever queried for their value. Every metric is reported
//! twice: in its natural orientation (`raw`) and converted so that lower is
//! better (`oriented`, `1 − raw` for higher-better metrics), which is the
//! orientation used on every optimization path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Probability clamp of the cross-entropy surrogate.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Misclassification rate.
    Mcr,
    FMeasure,
    /// Positive-class Jaccard index `TP / (TP + FP + FN)`.
    Jaccard,
    /// Area under the precision-recall curve, as rank-based average precision.
    Aucpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    LowerBetter,
    HigherBetter,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Mcr,
        MetricKind::FMeasure,
        MetricKind::Jaccard,
        MetricKind::Aucpr,
    ];

    pub fn orientation(self) -> Orientation {
        match self {
            MetricKind::Mcr => Orientation::LowerBetter,
            _ => Orientation::HigherBetter,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mcr => "mcr",
            MetricKind::FMeasure => "f_measure",
            MetricKind::Jaccard => "jaccard",
            MetricKind::Aucpr => "aucpr",
        }
    }

    /// Maps a natural-orientation value to lower-is-better.
    pub fn orient(self, raw: f64) -> f64 {
        match self.orientation() {
            Orientation::LowerBetter => raw,
            Orientation::HigherBetter => 1.0 - raw,
        }
    }

    fn needs_both_classes(self) -> bool {
        !matches!(self, MetricKind::Mcr)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mcr" => Ok(MetricKind::Mcr),
            "f_measure" | "f1" | "fmeasure" => Ok(MetricKind::FMeasure),
            "jaccard" | "jac" => Ok(MetricKind::Jaccard),
            "aucpr" | "ap" => Ok(MetricKind::Aucpr),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub raw: f64,
    /// Lower is better.
    pub oriented: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Scores at or above `threshold` are predicted positive.
    pub fn from_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn misclassification_rate(&self) -> f64 {
        (self.fp + self.fn_) as f64 / self.total() as f64
    }

    /// `2TP / (2TP + FP + FN)`, the harmonic mean of precision and recall.
    pub fn f_measure(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn jaccard(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

/// Average precision: sweep thresholds from the highest score down, adding
/// `precision × Δrecall` at each distinct score. Tied scores enter together.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::DegenerateLabels("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let (mut seen, mut hits) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut new_hits = 0;
        while i < order.len() && scores[order[i]] == s {
            seen += 1;
            if labels[order[i]] {
                new_hits += 1;
            }
            i += 1;
        }
        hits += new_hits;
        ap += (hits as f64 / seen as f64) * (new_hits as f64 / positives as f64);
    }
    Ok(ap)
}

/// Evaluates a metric on probability scores.
pub fn evaluate_metric(kind: MetricKind, scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricValue> {
    if scores.len() != labels.len() {
        return Err(Error::shape("evaluate_metric", labels.len(), scores.len()));
    }
    if scores.is_empty() {
        return Err(Error::DegenerateLabels("no examples".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("metric scores"));
    }
    if kind.needs_both_classes() {
        let pos = labels.iter().filter(|&&y| y).count();
        if pos == 0 || pos == labels.len() {
            return Err(Error::DegenerateLabels(format!(
                "{kind} needs both classes ({pos} positives of {})",
                labels.len()
            )));
        }
    }
    let raw = match kind {
        MetricKind::Aucpr => average_precision(scores, labels)?,
        _ => {
            let c = Confusion::from_scores(scores, labels, threshold);
            match kind {
                MetricKind::Mcr => c.misclassification_rate(),
                MetricKind::FMeasure => c.f_measure(),
                MetricKind::Jaccard => c.jaccard(),
                MetricKind::Aucpr => unreachable!(),
            }
        }
    };
    Ok(MetricValue {
        raw,
        oriented: kind.orient(raw),
    })
}

fn example_loss<S: Scalar>(logit: S, label: bool) -> S {
    let lo = -(S::one() - S::lit(PROB_CLAMP)).ln();
    let hi = -S::lit(PROB_CLAMP).ln();
    let l = if label { softplus(-logit) } else { softplus(logit) };
    l.max(lo).min(hi)
}

/// Mean binary cross-entropy on logits with probabilities clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn cross_entropy<S: Scalar>(logits: &[S], labels: &[bool]) -> S {
    let n = S::from_usize(logits.len().max(1)).unwrap();
    logits.iter().zip(labels).map(|(&z, &y)| example_loss(z, y)).sum::<S>() / n
}

/// Cross-entropy and its gradient `(σ(z) − y) / n` with respect to the logits.
pub fn cross_entropy_with_grad<S: Scalar>(logits: &[S], labels: &[bool]) -> (S, Vec<S>) {
    let n = S::from_usize(logits.len().max(1)).unwrap();
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - if y { S::one() } else { S::zero() }) / n)
        .collect();
    (cross_entropy(logits, labels), grad)
}

/// Maps a non-negative loss into `[0, 1)` via `ℓ / (ℓ + 1)`.
pub fn squash_loss<S: Scalar>(loss: S) -> S {
    loss / (loss + S::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::average_precision_brute_force;
    use proptest::prelude::*;

    #[test]
    fn mcr_counts_mistakes() {
        let labels = [true, false, true, false];
        let v = evaluate_metric(MetricKind::Mcr, &[1.0, 0.0, 0.0, 0.0], &labels, 0.5).unwrap();
        assert_eq!(v.raw, 0.25);
        assert_eq!(v.oriented, 0.25);
        let perfect = evaluate_metric(MetricKind::Mcr, &[0.9, 0.1, 0.8, 0.2], &labels, 0.5).unwrap();
        assert_eq!(perfect.raw, 0.0);
    }

    #[test]
    fn aucpr_hand_example() {
        let v = evaluate_metric(
            MetricKind::Aucpr,
            &[0.9, 0.8, 0.4, 0.2],
            &[true, false, true, false],
            0.5,
        )
        .unwrap();
        assert!((v.raw - 5.0 / 6.0).abs() < 1e-15);
        assert!((v.oriented - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn f_measure_from_counts() {
        // TP = 2, FP = 1, FN = 1
        let scores = [0.9, 0.8, 0.7, 0.1, 0.2];
        let labels = [true, true, false, true, false];
        let v = evaluate_metric(MetricKind::FMeasure, &scores, &labels, 0.5).unwrap();
        assert!((v.raw - 2.0 / 3.0).abs() < 1e-15);
        let j = evaluate_metric(MetricKind::Jaccard, &scores, &labels, 0.5).unwrap();
        assert!((j.raw - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        for kind in [MetricKind::Aucpr, MetricKind::FMeasure, MetricKind::Jaccard] {
            assert!(matches!(
                evaluate_metric(kind, &[0.2, 0.7], &[true, true], 0.5),
                Err(Error::DegenerateLabels(_))
            ));
        }
        assert!(evaluate_metric(MetricKind::Mcr, &[0.2, 0.7], &[true, true], 0.5).is_ok());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cross_entropy(&[0.0], &[true]) - ln2).abs() < 1e-15);
        assert!((cross_entropy(&[0.0, 0.0], &[false, true]) - ln2).abs() < 1e-15);
        assert!(cross_entropy(&[1e4], &[true]) < 1e-11);
        assert!(cross_entropy(&[-1e4_f64], &[true]).is_finite());
        // softplus(-1) = ln(1 + e^-1), softplus(1) = ln(1 + e)
        let z = 1.0_f64;
        let expected = ((1.0 + (-z).exp()).ln() + (1.0 + z.exp()).ln()) / 2.0;
        assert!((cross_entropy(&[z, -z], &[true, true]) - expected).abs() < 1e-15);
    }

    #[test]
    fn loss_squash_is_bounded() {
        assert_eq!(squash_loss(0.0), 0.0);
        assert!((squash_loss(1.0) - 0.5_f64).abs() < 1e-15);
        assert!(squash_loss(1e9_f64) < 1.0);
    }

    proptest! {
        #[test]
        fn aucpr_matches_brute_force(
            pairs in prop::collection::vec((0u8..8, any::<bool>()), 2..50)
        ) {
            // coarse scores force ties
            let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s) / 8.0).collect();
            let mut labels: Vec<bool> = pairs.iter().map(|(_, y)| *y).collect();
            labels[0] = true;
            labels[1] = false;
            let fast = average_precision(&scores, &labels).unwrap();
            let slow = average_precision_brute_force(&scores, &labels);
            prop_assert!((fast - slow).abs() < 1e-12);
        }

        #[test]
        fn metrics_live_in_unit_interval(
            scores in prop::collection::vec(0.0f64..1.0, 4..40),
            seed in any::<u64>()
        ) {
            let mut labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            labels[0] = true;
            labels[1] = false;
            for kind in MetricKind::ALL {
                let v = evaluate_metric(kind, &scores, &labels, DEFAULT_THRESHOLD).unwrap();
                prop_assert!((0.0..=1.0).contains(&v.raw));
                prop_assert!((0.0..=1.0).contains(&v.oriented));
            }
        }

        #[test]
        fn cross_entropy_gradient_matches_finite_differences(
            z in prop::collection::vec(-6.0f64..6.0, 1..6),
            bits in any::<u8>()
        ) {
            let labels: Vec<bool> = (0..z.len()).map(|i| (bits >> i) & 1 == 1).collect();
            let (_, g) = cross_entropy_with_grad(&z, &labels);
            let fd = crate::oracle::central_difference(|v| cross_entropy(v, &labels), &z, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }
    }
}
