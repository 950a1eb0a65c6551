//! Histogram-binning calibration, BBQ mixing and expected calibration error.
//!
//! Calibration maps are piecewise constant and are not forced to be
//! monotone: a noisy or sparse bucket may map above its right neighbour.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, Result};
use crate::hierarchy::{build_score_histogram, HierarchicalCounts, ScoreHistogram};

/// One piecewise-constant binning of the score axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub boundaries: Vec<f64>,
    pub values: Vec<f64>,
}

impl Binning {
    /// Bucket of `score` under `(r_{j-1}, r_j]`, with 0 in the first bucket.
    pub fn bucket_of(&self, score: f64) -> usize {
        let j = self.boundaries[1..].partition_point(|&r| r < score);
        j.min(self.values.len() - 1)
    }
}

/// Score → probability map, a convex mixture of binnings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    binnings: Vec<Binning>,
    weights: Vec<f64>,
}

impl CalibrationMap {
    pub fn new(binnings: Vec<Binning>, weights: Vec<f64>) -> Result<Self> {
        if binnings.is_empty() || binnings.len() != weights.len() {
            return Err(domain(format!(
                "{} binnings with {} weights",
                binnings.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(domain("weights must be nonnegative and sum to 1"));
        }
        for b in &binnings {
            if b.values.is_empty() || b.boundaries.len() != b.values.len() + 1 {
                return Err(domain("each binning needs one more boundary than values"));
            }
            if b.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(domain("calibrated values must lie in [0, 1]"));
            }
        }
        Ok(CalibrationMap { binnings, weights })
    }

    pub fn binnings(&self) -> &[Binning] {
        &self.binnings
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Per-bucket `p̂ / (p̂ + n̂)` with negative counts clamped to 0.
///
/// Buckets whose clamped total is at most `1e-9 · M̂` take `prior`, which
/// defaults to the overall positive rate `P̂ / (P̂ + N̂)`.
pub fn calibrate_histogram(hist: &ScoreHistogram, prior: Option<f64>) -> Result<CalibrationMap> {
    let binning = histogram_binning(hist, prior)?;
    CalibrationMap::new(vec![binning], vec![1.0])
}

fn histogram_binning(hist: &ScoreHistogram, prior: Option<f64>) -> Result<Binning> {
    let p_total = hist.pos_total().value.max(0.0);
    let n_total = hist.neg_total().value.max(0.0);
    let prior = match prior {
        Some(p) if (0.0..=1.0).contains(&p) => p,
        Some(p) => return Err(domain(format!("prior {p} outside [0, 1]"))),
        None if p_total + n_total > 0.0 => p_total / (p_total + n_total),
        None => 0.5,
    };
    let tau = 1e-9 * (p_total + n_total);
    let values = hist
        .pos()
        .iter()
        .zip(hist.neg())
        .map(|(p, n)| {
            let (p, n) = (p.value.max(0.0), n.value.max(0.0));
            if p + n <= tau {
                prior
            } else {
                p / (p + n)
            }
        })
        .collect();
    Ok(Binning {
        boundaries: hist.boundaries().to_vec(),
        values,
    })
}

/// `Σ_b w_b · value_b(bucket_b(score))`.
pub fn apply_calibration(map: &CalibrationMap, score: f64) -> f64 {
    map.binnings
        .iter()
        .zip(&map.weights)
        .map(|(b, w)| w * b.values[b.bucket_of(score)])
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// BBQ scoring constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbqConfig {
    /// Strength `N′` of the per-bucket Beta prior, spread evenly over buckets.
    pub equivalent_sample_size: f64,
    /// Largest number of candidate bucket counts.
    pub max_candidates: usize,
}

impl Default for BbqConfig {
    fn default() -> Self {
        BbqConfig {
            equivalent_sample_size: 2.0,
            max_candidates: 15,
        }
    }
}

/// Candidate bucket counts from `M^{1/3}/10` up to `10 M^{1/3}` on a
/// geometric grid.
pub fn bbq_candidates(population: f64, max_candidates: usize) -> Result<Vec<usize>> {
    if !(population > 0.0) || !population.is_finite() {
        return Err(domain(format!(
            "population estimate must be positive, got {population}"
        )));
    }
    if max_candidates == 0 {
        return Err(domain("need at least one BBQ candidate"));
    }
    let c = population.cbrt();
    // absorb rounding in cbrt so that exact cubes give exact endpoints
    let lo = ((c / 10.0 - 1e-9).ceil() as usize).max(1);
    let hi = ((10.0 * c + 1e-9).floor() as usize).max(lo);
    if max_candidates == 1 || lo == hi {
        return Ok(vec![lo]);
    }
    let ratio = hi as f64 / lo as f64;
    let steps = (max_candidates - 1) as f64;
    let mut out: Vec<usize> = (0..max_candidates)
        .map(|t| ((lo as f64 * ratio.powf(t as f64 / steps)).round() as usize).clamp(lo, hi))
        .collect();
    out.dedup();
    Ok(out)
}

/// Log marginal likelihood of a histogram's bucket counts under
/// independent Beta priors centred on each bucket's score midpoint.
pub fn bbq_log_score(hist: &ScoreHistogram, equivalent_sample_size: f64) -> f64 {
    let b = hist.buckets() as f64;
    let strength = equivalent_sample_size / b;
    let mut score = 0.0;
    for (i, (p, n)) in hist.pos().iter().zip(hist.neg()).enumerate() {
        let mid = 0.5 * (hist.boundaries()[i] + hist.boundaries()[i + 1]);
        let alpha = (mid * strength).max(f64::MIN_POSITIVE);
        let beta = ((1.0 - mid) * strength).max(f64::MIN_POSITIVE);
        let (p, n) = (p.value.max(0.0), n.value.max(0.0));
        score += ln_gamma(strength) - ln_gamma(p + n + strength) + ln_gamma(p + alpha)
            - ln_gamma(alpha)
            + ln_gamma(n + beta)
            - ln_gamma(beta);
    }
    score
}

/// Normalizes log scores into weights without overflow.
fn softmax(log_scores: &[f64]) -> Vec<f64> {
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

fn bbq_histograms(
    pos: &HierarchicalCounts,
    neg: &HierarchicalCounts,
    population: f64,
    config: &BbqConfig,
) -> Result<Vec<(usize, ScoreHistogram, f64)>> {
    bbq_candidates(population, config.max_candidates)?
        .into_iter()
        .map(|b| {
            let hist = build_score_histogram(pos, neg, b)?;
            let score = bbq_log_score(&hist, config.equivalent_sample_size);
            Ok((b, hist, score))
        })
        .collect()
}

/// BBQ weight of each candidate bucket count.
pub fn bbq_weights(
    pos: &HierarchicalCounts,
    neg: &HierarchicalCounts,
    population: f64,
) -> Result<Vec<(usize, f64)>> {
    bbq_weights_with(pos, neg, population, &BbqConfig::default())
}

pub fn bbq_weights_with(
    pos: &HierarchicalCounts,
    neg: &HierarchicalCounts,
    population: f64,
    config: &BbqConfig,
) -> Result<Vec<(usize, f64)>> {
    let cands = bbq_histograms(pos, neg, population, config)?;
    let scores: Vec<f64> = cands.iter().map(|c| c.2).collect();
    Ok(cands.iter().map(|c| c.0).zip(softmax(&scores)).collect())
}

/// BBQ calibration: the score-weighted mixture of histogram binnings.
pub fn calibrate_bbq(
    pos: &HierarchicalCounts,
    neg: &HierarchicalCounts,
    population: f64,
    config: &BbqConfig,
) -> Result<CalibrationMap> {
    let cands = bbq_histograms(pos, neg, population, config)?;
    let scores: Vec<f64> = cands.iter().map(|c| c.2).collect();
    let binnings = cands
        .iter()
        .map(|(_, h, _)| histogram_binning(h, None))
        .collect::<Result<Vec<_>>>()?;
    let mut weights = softmax(&scores);
    // renormalize once more so the sum is 1 to the last ulp or two
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    CalibrationMap::new(binnings, weights)
}

/// One evaluation bin of an ECE computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    /// Fraction of predictions in the bin, `P(j)`.
    pub mass: f64,
    /// Observed positive fraction, `o(j)`; 0 for an empty bin.
    pub observed: f64,
    /// Mean predicted probability, `e(j)`; 0 for an empty bin.
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub k: usize,
    pub bins: Vec<EceBin>,
    pub ece: f64,
}

impl EceReport {
    /// `Σ_j P(j) |o(j) − e(j)|` from the per-bin fields.
    pub fn recompute(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| b.mass * (b.observed - b.expected).abs())
            .sum()
    }
}

/// How predictions are grouped into evaluation bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EceBinning {
    /// `K` equal-width bins, right-closed, the first also closed at 0.
    #[default]
    EqualWidth,
    /// `K` bins holding (nearly) equal numbers of predictions.
    EqualFrequency,
}

/// Expected calibration error over `k` equal-width bins.
pub fn ece(predictions: &[(f64, bool)], k: usize) -> Result<EceReport> {
    ece_with(predictions, k, EceBinning::EqualWidth)
}

pub fn ece_with(predictions: &[(f64, bool)], k: usize, binning: EceBinning) -> Result<EceReport> {
    if predictions.is_empty() {
        return Err(domain("ECE needs at least one prediction"));
    }
    if k == 0 {
        return Err(domain("ECE needs at least one bin"));
    }
    if let Some(&(p, _)) = predictions.iter().find(|(p, _)| !(0.0..=1.0).contains(p)) {
        return Err(domain(format!("prediction {p} outside [0, 1]")));
    }
    let bin_of: Vec<usize> = match binning {
        EceBinning::EqualWidth => {
            let upper: Vec<f64> = (1..=k).map(|j| j as f64 / k as f64).collect();
            predictions
                .iter()
                .map(|&(p, _)| upper.partition_point(|&u| u < p).min(k - 1))
                .collect()
        }
        EceBinning::EqualFrequency => {
            let mut order: Vec<usize> = (0..predictions.len()).collect();
            order.sort_by(|&a, &b| predictions[a].0.total_cmp(&predictions[b].0));
            let mut bins = vec![0; predictions.len()];
            for (rank, &i) in order.iter().enumerate() {
                bins[i] = rank * k / predictions.len();
            }
            bins
        }
    };
    let mut count = vec![0u64; k];
    let mut positives = vec![0u64; k];
    let mut pred_sum = vec![0.0; k];
    for (&(p, y), &j) in predictions.iter().zip(&bin_of) {
        count[j] += 1;
        positives[j] += y as u64;
        pred_sum[j] += p;
    }
    let total = predictions.len() as f64;
    let bins: Vec<EceBin> = (0..k)
        .map(|j| {
            if count[j] == 0 {
                EceBin {
                    mass: 0.0,
                    observed: 0.0,
                    expected: 0.0,
                }
            } else {
                let c = count[j] as f64;
                EceBin {
                    mass: c / total,
                    observed: positives[j] as f64 / c,
                    expected: pred_sum[j] / c,
                }
            }
        })
        .collect();
    let mut report = EceReport { k, bins, ece: 0.0 };
    report.ece = report.recompute();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{NoisyCount, PrivacySpec};

    fn single(p: f64, n: f64) -> ScoreHistogram {
        ScoreHistogram::from_counts(
            vec![0.0, 1.0],
            vec![NoisyCount::new(p, 1.0)],
            vec![NoisyCount::new(n, 1.0)],
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn histogram_values() {
        let h = ScoreHistogram::from_exact(vec![0.0, 0.5, 1.0], &[5.0, 0.0], &[5.0, 10.0]).unwrap();
        let m = calibrate_histogram(&h, None).unwrap();
        assert_eq!(m.binnings()[0].values, vec![0.5, 0.0]);
        assert_eq!(m.weights(), &[1.0]);
    }

    #[test]
    fn noisy_bucket_clamps_and_falls_back() {
        let h = ScoreHistogram::from_counts(
            vec![0.0, 0.5, 1.0],
            vec![NoisyCount::new(-1.0, 1.0), NoisyCount::new(3.0, 1.0)],
            vec![NoisyCount::new(0.5, 1.0), NoisyCount::new(1.0, 1.0)],
            0.0,
        )
        .unwrap();
        assert_eq!(
            calibrate_histogram(&h, None).unwrap().binnings()[0].values[0],
            0.0
        );
        // both clamped to zero: prior
        let m = calibrate_histogram(&single(-1.0, -0.5), Some(0.3)).unwrap();
        assert_eq!(m.binnings()[0].values, vec![0.3]);
        assert_eq!(
            calibrate_histogram(&single(-1.0, -0.5), None)
                .unwrap()
                .binnings()[0]
                .values,
            vec![0.5]
        );
        assert!(calibrate_histogram(&single(1.0, 1.0), Some(1.5)).is_err());
    }

    #[test]
    fn apply_lookup_and_right_closed_boundary() {
        let b = Binning {
            boundaries: vec![0.0, 0.25, 0.5, 1.0],
            values: vec![0.1, 0.2, 0.3],
        };
        let m = CalibrationMap::new(vec![b], vec![1.0]).unwrap();
        assert_eq!(apply_calibration(&m, 0.0), 0.1);
        assert_eq!(apply_calibration(&m, 0.3), 0.2);
        assert_eq!(apply_calibration(&m, 0.25), 0.1);
        assert_eq!(apply_calibration(&m, 0.5), 0.2);
        assert_eq!(apply_calibration(&m, 1.0), 0.3);
    }

    #[test]
    fn apply_mixture() {
        let b1 = Binning {
            boundaries: vec![0.0, 1.0],
            values: vec![0.2],
        };
        let b2 = Binning {
            boundaries: vec![0.0, 1.0],
            values: vec![0.6],
        };
        let m = CalibrationMap::new(vec![b1, b2], vec![0.3, 0.7]).unwrap();
        assert!((apply_calibration(&m, 0.4) - 0.48).abs() < 1e-15);
    }

    #[test]
    fn map_validation() {
        let b = Binning {
            boundaries: vec![0.0, 1.0],
            values: vec![0.2],
        };
        assert!(CalibrationMap::new(vec![b.clone()], vec![0.9]).is_err());
        assert!(CalibrationMap::new(vec![b.clone(), b.clone()], vec![1.2, -0.2]).is_err());
        let bad = Binning {
            boundaries: vec![0.0, 1.0],
            values: vec![1.2],
        };
        assert!(CalibrationMap::new(vec![bad], vec![1.0]).is_err());
    }

    #[test]
    fn candidate_grid() {
        let c = bbq_candidates(1e6, 15).unwrap();
        assert_eq!((c[0], *c.last().unwrap()), (10, 1000));
        assert!(c.len() <= 15 && c.windows(2).all(|w| w[0] < w[1]));
        let small = bbq_candidates(1.0, 15).unwrap();
        assert_eq!((small[0], *small.last().unwrap()), (1, 10));
        assert!(small.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(bbq_candidates(1e6, 1).unwrap(), vec![10]);
        assert!(bbq_candidates(0.0, 15).is_err());
        assert!(bbq_candidates(-3.0, 15).is_err());
    }

    #[test]
    fn log_score_single_bucket_by_hand() {
        // one bucket, prior Beta(1, 1): ML = p! n! / (p + n + 1)!
        let h = ScoreHistogram::from_exact(vec![0.0, 1.0], &[2.0], &[1.0]).unwrap();
        let expected = (2.0f64 * 1.0 / 24.0).ln();
        assert!((bbq_log_score(&h, 2.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn bbq_single_candidate_has_weight_one() {
        let leaves = [3u64, 1, 0, 2];
        let pos =
            HierarchicalCounts::from_leaf_counts(PrivacySpec::secure_agg(2), &leaves).unwrap();
        let neg = HierarchicalCounts::from_leaf_counts(PrivacySpec::secure_agg(2), &[1, 2, 3, 0])
            .unwrap();
        // population 1 gives B in 1..=10; cap to one candidate
        let cfg = BbqConfig {
            max_candidates: 1,
            ..BbqConfig::default()
        };
        assert_eq!(
            bbq_weights_with(&pos, &neg, 1.0, &cfg).unwrap(),
            vec![(1, 1.0)]
        );
        let m = calibrate_bbq(&pos, &neg, 1.0, &cfg).unwrap();
        assert_eq!(m.weights(), &[1.0]);
        assert!(bbq_weights(&pos, &neg, 0.0).is_err());
    }

    #[test]
    fn ece_hand_cases() {
        let half: Vec<_> = (0..10).map(|i| (0.5, i % 2 == 0)).collect();
        assert_eq!(ece(&half, 10).unwrap().ece, 0.0);
        let r = ece(&half.iter().map(|&(_, y)| (0.9, y)).collect::<Vec<_>>(), 10).unwrap();
        assert!((r.ece - 0.4).abs() < 1e-12);
        assert_eq!(r.recompute(), r.ece);
        assert!(ece(&[], 10).is_err());
        assert!(ece(&half, 0).is_err());
        assert!(ece(&[(1.2, true)], 3).is_err());
    }

    #[test]
    fn ece_bin_edges() {
        let r = ece(&[(0.0, true), (0.5, false), (1.0, true)], 2).unwrap();
        // 0 and 0.5 share the first bin, 1.0 sits in the second
        assert_eq!(r.bins[0].mass, 2.0 / 3.0);
        assert_eq!(r.bins[1].expected, 1.0);
    }

    #[test]
    fn equal_frequency_bins_balance_counts() {
        let preds: Vec<_> = (0..12)
            .map(|i| ((i as f64 / 11.0).powi(3), i % 3 == 0))
            .collect();
        let r = ece_with(&preds, 4, EceBinning::EqualFrequency).unwrap();
        assert!(r.bins.iter().all(|b| b.mass == 0.25));
        assert_eq!(r.recompute(), r.ece);
    }
}
