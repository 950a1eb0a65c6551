//! Exact, centralized ground truth for error measurement.

use crate::calibration::{ece, EceReport};
use crate::error::{domain, DegenerateEstimate, Result};
use crate::types::LabeledScore;

/// Exact AUC under both tie conventions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactAuc {
    /// Ties between a positive and a negative count 0.
    pub strict: f64,
    /// Ties count 1/2.
    pub half_ties: f64,
}

/// Exact AUC by sorting and sweeping tie groups, `O(M log M)`.
///
/// Pair counts are accumulated as integers, so the result is independent of
/// summation order.
pub fn exact_auc(examples: &[LabeledScore]) -> Result<ExactAuc> {
    let (p, n) = class_counts(examples);
    if p == 0 || n == 0 {
        return Err(domain(format!("AUC needs both classes (P = {p}, N = {n})")));
    }
    let mut sorted: Vec<_> = examples
        .iter()
        .map(|e| (e.score(), e.label().is_positive()))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut above, mut tied) = (0u128, 0u128);
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        let (mut gp, mut gn) = (0u128, 0u128);
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        above += gp * neg_below;
        tied += gp * gn;
        neg_below += gn;
    }
    let pairs = p as f64 * n as f64;
    Ok(ExactAuc {
        strict: above as f64 / pairs,
        half_ties: (2 * above + tied) as f64 / (2.0 * pairs),
    })
}

pub(crate) fn class_counts(examples: &[LabeledScore]) -> (u64, u64) {
    let p = examples.iter().filter(|e| e.label().is_positive()).count() as u64;
    (p, examples.len() as u64 - p)
}

/// Exact precision, recall and accuracy of `pred(x) = [s(x) > T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPra {
    pub precision: std::result::Result<f64, DegenerateEstimate>,
    pub recall: std::result::Result<f64, DegenerateEstimate>,
    pub accuracy: f64,
}

/// Confusion-matrix counts of the thresholded classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub r#fn: u64,
}

impl Confusion {
    pub fn at_threshold(examples: &[LabeledScore], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for e in examples {
            match (e.label().is_positive(), e.score() > threshold) {
                (true, true) => c.tp += 1,
                (true, false) => c.r#fn += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.r#fn
    }
}

pub fn exact_pra(examples: &[LabeledScore], threshold: f64) -> Result<ExactPra> {
    if examples.is_empty() {
        return Err(domain(
            "precision/recall/accuracy need at least one example",
        ));
    }
    let c = Confusion::at_threshold(examples, threshold);
    let ratio = |what, num: u64, den: u64| {
        if den == 0 {
            Err(DegenerateEstimate {
                what,
                numerator: num as f64,
                denominator: den as f64,
            })
        } else {
            Ok(num as f64 / den as f64)
        }
    };
    Ok(ExactPra {
        precision: ratio("precision", c.tp, c.tp + c.fp),
        recall: ratio("recall", c.tp, c.tp + c.r#fn),
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
    })
}

/// Everything the oracle knows about a dataset at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactMetrics {
    pub auc: ExactAuc,
    pub pra: ExactPra,
    /// Calibration error of the raw scores.
    pub ece: EceReport,
}

pub fn exact_metrics(
    examples: &[LabeledScore],
    threshold: f64,
    ece_bins: usize,
) -> Result<ExactMetrics> {
    let preds: Vec<(f64, bool)> = examples
        .iter()
        .map(|e| (e.score(), e.label().is_positive()))
        .collect();
    Ok(ExactMetrics {
        auc: exact_auc(examples)?,
        pra: exact_pra(examples, threshold)?,
        ece: ece(&preds, ece_bins)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Label;

    fn ex(pairs: &[(f64, bool)]) -> Vec<LabeledScore> {
        pairs
            .iter()
            .map(|&(s, y)| LabeledScore::new(s, Label::from_bool(y)).unwrap())
            .collect()
    }

    #[test]
    fn perfect_separation() {
        let e = ex(&[(0.9, true), (0.8, true), (0.2, false), (0.1, false)]);
        let auc = exact_auc(&e).unwrap();
        assert_eq!(auc.strict, 1.0);
        assert_eq!(auc.half_ties, 1.0);
    }

    #[test]
    fn all_tied() {
        let e = ex(&[(0.4, true), (0.4, true), (0.4, false)]);
        let auc = exact_auc(&e).unwrap();
        assert_eq!(auc.strict, 0.0);
        assert_eq!(auc.half_ties, 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(exact_auc(&ex(&[(0.4, true)])).is_err());
        assert!(exact_auc(&[]).is_err());
    }

    #[test]
    fn pra_hand_confusion_matrix() {
        let e = ex(&[(0.9, true), (0.4, true), (0.6, false), (0.1, false)]);
        let r = exact_pra(&e, 0.5).unwrap();
        assert_eq!(r.precision, Ok(0.5));
        assert_eq!(r.recall, Ok(0.5));
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn pra_separable_and_empty_prediction() {
        let e = ex(&[(0.9, true), (0.8, true), (0.2, false), (0.1, false)]);
        let r = exact_pra(&e, 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.accuracy), (Ok(1.0), Ok(1.0), 1.0));
        let r = exact_pra(&e, 1.0).unwrap();
        assert!(r.precision.is_err());
        assert_eq!(r.recall, Ok(0.0));
        assert_eq!(r.accuracy, 0.5);
        assert!(exact_pra(&[], 0.5).is_err());
    }

    #[test]
    fn recall_degenerate_without_positives() {
        let r = exact_pra(&ex(&[(0.3, false)]), 0.5).unwrap();
        assert!(r.recall.is_err());
    }
}
