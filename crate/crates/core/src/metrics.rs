//! Federated estimators for precision, recall, accuracy and ROC AUC.

use rayon::prelude::*;

use crate::error::{domain, DegenerateEstimate, Error, Result};
use crate::hierarchy::ScoreHistogram;
use crate::privacy::{
    aggregated_noise, discrete_laplace_variance, oue_decode, oue_encode, oue_sample_bit_sums,
    OueParams,
};
use crate::rng::{derive_seed, substream, tag};
use crate::types::{Label, LabeledScore, NoisyCount, PrivacySpec, Regime, Simulation};

type Ratio = std::result::Result<f64, DegenerateEstimate>;

/// Precision, recall and accuracy estimates.
///
/// Each metric is either a value clamped to `[0, 1]` or the degenerate
/// ratio that prevented it.
#[derive(Debug, Clone, PartialEq)]
pub struct PraEstimate {
    pub precision: Ratio,
    pub recall: Ratio,
    pub accuracy: Ratio,
    /// Threshold the estimate actually refers to, `T′`.
    pub effective_threshold: Option<f64>,
    /// Bound on `|T′ − T|` plus the grid resolution.
    pub threshold_slack: f64,
}

/// `max(num, 0) / den`, clamped to `[0, 1]`; degenerate when `den <= 0`.
fn ratio(what: &'static str, numerator: f64, denominator: f64) -> Ratio {
    if denominator > 0.0 {
        Ok((numerator.max(0.0) / denominator).clamp(0.0, 1.0))
    } else {
        Err(DegenerateEstimate {
            what,
            numerator,
            denominator,
        })
    }
}

/// An example scored by a fixed binary classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedExample {
    pub example: LabeledScore,
    pub prediction: Label,
}

impl PredictedExample {
    /// Confusion-matrix cell: 0 = TP, 1 = FP, 2 = FN, 3 = TN.
    fn cell(&self) -> usize {
        match (self.example.label(), self.prediction) {
            (Label::Positive, Label::Positive) => 0,
            (Label::Negative, Label::Positive) => 1,
            (Label::Positive, Label::Negative) => 2,
            (Label::Negative, Label::Negative) => 3,
        }
    }
}

/// Noisy confusion-matrix counts `[TP, FP, FN, TN]`.
fn confusion_counts(
    shards: &[Vec<PredictedExample>],
    spec: &PrivacySpec,
    seed: u64,
) -> Result<[NoisyCount; 4]> {
    let mut exact = [0u64; 4];
    for e in shards.iter().flatten() {
        exact[e.cell()] += 1;
    }
    match spec.regime() {
        Regime::SecureAgg => Ok(exact.map(|c| NoisyCount::exact(c as f64))),
        Regime::DistDp => {
            // adding or removing one example moves one cell by one
            let alpha = (-spec.epsilon().expect("DP regime has epsilon")).exp();
            let var = if shards.is_empty() {
                0.0
            } else {
                discrete_laplace_variance(alpha)
            };
            let mut rng = substream(seed, &[tag("pra_fixed")]);
            let mut out = [NoisyCount::ZERO; 4];
            for (o, c) in out.iter_mut().zip(exact) {
                let noise = aggregated_noise(alpha, shards.len(), spec.simulation(), &mut rng)?;
                *o = NoisyCount::new(c as f64 + noise as f64, var);
            }
            Ok(out)
        }
        Regime::LocalDp => {
            let params = OueParams::new(spec.epsilon().expect("DP regime has epsilon"), 4)?;
            let units: Vec<Option<usize>> = shards
                .iter()
                .flat_map(|s| {
                    if s.is_empty() {
                        vec![None]
                    } else {
                        s.iter().map(|e| Some(e.cell())).collect()
                    }
                })
                .collect();
            let sums = match spec.simulation() {
                Simulation::Aggregate => {
                    let mut rng = substream(seed, &[tag("pra_fixed")]);
                    oue_sample_bit_sums(&exact, units.len(), &params, &mut rng)?
                }
                Simulation::PerClient => {
                    let unit_seed = derive_seed(seed, &[tag("pra_fixed_unit")]);
                    units
                        .par_iter()
                        .enumerate()
                        .map(|(i, &cell)| {
                            oue_encode(cell, &params, &mut substream(unit_seed, &[i as u64]))
                        })
                        .try_fold(
                            || vec![0u64; 4],
                            |mut acc, bits| {
                                for (a, b) in acc.iter_mut().zip(bits?) {
                                    *a += b as u64;
                                }
                                Ok::<_, Error>(acc)
                            },
                        )
                        .try_reduce(
                            || vec![0u64; 4],
                            |mut a, b| {
                                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                                Ok(a)
                            },
                        )?
                }
            };
            let d = oue_decode(&sums, units.len(), &params);
            Ok([d[0], d[1], d[2], d[3]])
        }
    }
}

/// P/R/A of a fixed classifier from federated confusion counts.
pub fn pra_fixed(
    shards: &[Vec<PredictedExample>],
    spec: &PrivacySpec,
    seed: u64,
) -> Result<PraEstimate> {
    let [tp, fp, fneg, tn] = confusion_counts(shards, spec, seed)?.map(|c| c.value);
    Ok(PraEstimate {
        precision: ratio("precision", tp, tp + fp),
        recall: ratio("recall", tp, tp + fneg),
        accuracy: ratio("accuracy", tp + tn, tp + fp + fneg + tn),
        effective_threshold: None,
        threshold_slack: 0.0,
    })
}

/// Index of the boundary nearest to `threshold`, ties to the lower one.
fn snap(boundaries: &[f64], threshold: f64) -> usize {
    let mut best = 0;
    for (j, &b) in boundaries.iter().enumerate() {
        if (b - threshold).abs() < (boundaries[best] - threshold).abs() {
            best = j;
        }
    }
    best
}

/// P/R/A of `pred(x) = [s(x) > T′]` where `T′` is the bucket boundary
/// nearest to `T`.
pub fn pra_threshold(hist: &ScoreHistogram, threshold: f64) -> Result<PraEstimate> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(domain(format!("threshold {threshold} outside [0, 1]")));
    }
    let k = snap(hist.boundaries(), threshold);
    let t_eff = hist.boundaries()[k];
    let tp: f64 = hist.pos()[k..].iter().map(|c| c.value).sum();
    let fp: f64 = hist.neg()[k..].iter().map(|c| c.value).sum();
    let tn: f64 = hist.neg()[..k].iter().map(|c| c.value).sum();
    let p = hist.pos_total().value;
    let n = hist.neg_total().value;
    Ok(PraEstimate {
        precision: ratio("precision", tp, tp + fp),
        recall: ratio("recall", tp, p),
        accuracy: ratio("accuracy", tp + tn, p + n),
        effective_threshold: Some(t_eff),
        threshold_slack: (threshold - t_eff).abs() + hist.resolution(),
    })
}

/// Histogram AUC estimate with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucEstimate {
    pub value: f64,
    /// `Σ p_i n_i / (2 P N)`: the most within-bucket ordering can move the AUC.
    pub bucketization_halfwidth: f64,
    /// Variance from mechanism noise on the bucket counts; 0 when exact.
    pub noise_variance: f64,
}

/// `H_B = (1/PN) Σ_i (Σ_{j<i} p_i n_j + ½ p_i n_i)` in one pass.
///
/// The noise variance treats bucket counts as independent and the
/// normalizer `P̂N̂` as fixed, and combines products with
/// `Var[XY] = Var X·Var Y + Var X·(E Y)² + Var Y·(E X)²`.
pub fn auc_histogram(hist: &ScoreHistogram) -> Result<AucEstimate> {
    let p = hist.pos_total().value;
    let n = hist.neg_total().value;
    if !(p > 0.0) {
        return Err(DegenerateEstimate {
            what: "auc (positives)",
            numerator: p,
            denominator: p * n,
        }
        .into());
    }
    if !(n > 0.0) {
        return Err(DegenerateEstimate {
            what: "auc (negatives)",
            numerator: n,
            denominator: p * n,
        }
        .into());
    }
    let (mut sum, mut ties, mut var) = (0.0, 0.0, 0.0);
    let (mut neg_below, mut neg_below_var) = (0.0, 0.0);
    for (pi, ni) in hist.pos().iter().zip(hist.neg()) {
        let w = neg_below + 0.5 * ni.value;
        let w_var = neg_below_var + 0.25 * ni.variance;
        sum += pi.value * w;
        ties += pi.value.max(0.0) * ni.value.max(0.0);
        var += pi.variance * w_var + pi.variance * w * w + w_var * pi.value * pi.value;
        neg_below += ni.value;
        neg_below_var += ni.variance;
    }
    let norm = p * n;
    Ok(AucEstimate {
        value: sum / norm,
        bucketization_halfwidth: ties / (2.0 * norm),
        noise_variance: var / (norm * norm),
    })
}
