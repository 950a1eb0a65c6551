use serde::{Deserialize, Serialize};

use super::{build_hierarchy, HierarchicalCounts};
use crate::error::{domain, Result};
use crate::rng::{derive_seed, tag};
use crate::types::{ClientShard, Label, NoisyCount, PrivacySpec, Regime};

/// Quantile-bucketed positive and negative counts over the score axis.
///
/// Bucket `i` spans `boundaries[i]..boundaries[i + 1]`. When the histogram
/// comes from a hierarchy, boundaries sit on the leaf grid and bucket `i`
/// holds the leaf cells `leaf_bounds[i]..leaf_bounds[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistogram {
    boundaries: Vec<f64>,
    leaf_bounds: Option<Vec<usize>>,
    pos: Vec<NoisyCount>,
    neg: Vec<NoisyCount>,
    pos_total: NoisyCount,
    neg_total: NoisyCount,
    resolution: f64,
}

impl ScoreHistogram {
    /// Histogram from explicit boundaries and bucket counts.
    ///
    /// `boundaries` must run strictly upward from 0 to 1 with one more entry
    /// than there are buckets. `resolution` is the width of the grid the
    /// boundaries were snapped to (0 if they are exact).
    pub fn from_counts(
        boundaries: Vec<f64>,
        pos: Vec<NoisyCount>,
        neg: Vec<NoisyCount>,
        resolution: f64,
    ) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(domain("a histogram needs at least one bucket"));
        }
        if boundaries[0] != 0.0 || *boundaries.last().unwrap() != 1.0 {
            return Err(domain("boundaries must start at 0 and end at 1"));
        }
        if boundaries.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(domain("boundaries must be strictly increasing"));
        }
        let buckets = boundaries.len() - 1;
        if pos.len() != buckets || neg.len() != buckets {
            return Err(domain(format!(
                "{buckets} buckets but {} positive and {} negative counts",
                pos.len(),
                neg.len()
            )));
        }
        if !(resolution >= 0.0) {
            return Err(domain("resolution must be nonnegative"));
        }
        let pos_total = pos.iter().copied().sum();
        let neg_total = neg.iter().copied().sum();
        Ok(ScoreHistogram {
            boundaries,
            leaf_bounds: None,
            pos,
            neg,
            pos_total,
            neg_total,
            resolution,
        })
    }

    /// Convenience constructor for exact counts.
    pub fn from_exact(boundaries: Vec<f64>, pos: &[f64], neg: &[f64]) -> Result<Self> {
        let wrap = |v: &[f64]| v.iter().map(|&x| NoisyCount::exact(x)).collect();
        Self::from_counts(boundaries, wrap(pos), wrap(neg), 0.0)
    }

    pub fn buckets(&self) -> usize {
        self.pos.len()
    }

    /// `r_0 = 0 < r_1 < ... < r_B = 1`.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Leaf-grid boundaries, when built from a hierarchy.
    pub fn leaf_bounds(&self) -> Option<&[usize]> {
        self.leaf_bounds.as_deref()
    }

    pub fn pos(&self) -> &[NoisyCount] {
        &self.pos
    }

    pub fn neg(&self) -> &[NoisyCount] {
        &self.neg
    }

    /// Estimated number of positives, `P̂ = Σ p̂_i`.
    pub fn pos_total(&self) -> NoisyCount {
        self.pos_total
    }

    /// Estimated number of negatives, `N̂ = Σ n̂_i`.
    pub fn neg_total(&self) -> NoisyCount {
        self.neg_total
    }

    /// Width of the grid boundaries were snapped to.
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Bucket holding `score` under the right-closed convention
    /// `(r_{j-1}, r_j]`, with 0 in the first bucket.
    pub fn bucket_of(&self, score: f64) -> usize {
        let b = &self.boundaries;
        // first j >= 1 with score <= r_j
        let j = b[1..].partition_point(|&r| r < score);
        j.min(self.buckets() - 1)
    }

    /// Bucket widths on the score axis.
    pub fn widths(&self) -> Vec<f64> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Tuning knobs for quantile bucketing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramOptions {
    /// Buckets wider than `fanout^-(ceil(log_f B) - width_slack)` are split on
    /// the aligned grid of that width, so no bucket is wider than `O(1/B)`.
    pub width_slack: u32,
    /// With exact counts, place each boundary in the middle of the run of
    /// leaf boundaries that all hit the target rank, instead of at its start.
    pub center_exact_boundaries: bool,
}

impl Default for HistogramOptions {
    fn default() -> Self {
        HistogramOptions {
            width_slack: 1,
            center_exact_boundaries: true,
        }
    }
}

/// Equi-depth histogram from the two class hierarchies.
pub fn build_score_histogram(
    pos: &HierarchicalCounts,
    neg: &HierarchicalCounts,
    buckets: usize,
) -> Result<ScoreHistogram> {
    build_score_histogram_with(pos, neg, pos, neg, buckets, &HistogramOptions::default())
}

/// Histogram whose boundaries come from one pair of hierarchies and whose
/// bucket counts come from another (they may be the same pair).
pub fn build_score_histogram_with(
    boundary_pos: &HierarchicalCounts,
    boundary_neg: &HierarchicalCounts,
    pos: &HierarchicalCounts,
    neg: &HierarchicalCounts,
    buckets: usize,
    options: &HistogramOptions,
) -> Result<ScoreHistogram> {
    if buckets == 0 {
        return Err(domain("number of buckets must be at least 1"));
    }
    if !pos.spec().compatible(neg.spec())
        || !pos.spec().compatible(boundary_pos.spec())
        || !pos.spec().compatible(boundary_neg.spec())
    {
        return Err(domain("hierarchies differ in regime, height or fanout"));
    }
    let spec = *pos.spec();
    let all = boundary_pos.combined(boundary_neg)?;
    let total = all.population_total().value;
    let exact = spec.regime() == Regime::SecureAgg;

    let mut bounds = Vec::with_capacity(buckets + 1);
    bounds.push(0);
    for j in 1..buckets {
        let target = j as f64 * total / buckets as f64;
        let lo = all.quantile_leaf(target);
        let r = if exact && options.center_exact_boundaries {
            // last leaf boundary whose prefix is still at most the target
            let clamped = target.clamp(0.0, total.max(0.0));
            let hi = all.first_leaf_where(lo, |v| v > clamped).saturating_sub(1);
            if hi > lo {
                lo + (hi - lo) / 2
            } else {
                lo
            }
        } else {
            lo
        };
        bounds.push(r);
    }
    bounds.push(spec.leaves());
    // noisy prefixes can put crossings out of order
    bounds.sort_unstable();
    bounds.dedup();
    let bounds = split_wide(&bounds, &spec, buckets, options.width_slack);

    let mut pc = Vec::with_capacity(bounds.len() - 1);
    let mut nc = Vec::with_capacity(bounds.len() - 1);
    for w in bounds.windows(2) {
        pc.push(pos.range_count(w[0], w[1])?);
        nc.push(neg.range_count(w[0], w[1])?);
    }
    let leaves = spec.leaves() as f64;
    let boundaries = bounds.iter().map(|&r| r as f64 / leaves).collect();
    Ok(ScoreHistogram {
        boundaries,
        leaf_bounds: Some(bounds),
        pos_total: pc.iter().copied().sum(),
        neg_total: nc.iter().copied().sum(),
        pos: pc,
        neg: nc,
        resolution: spec.leaf_width(),
    })
}

fn split_wide(bounds: &[usize], spec: &PrivacySpec, buckets: usize, slack: u32) -> Vec<usize> {
    let f = spec.fanout() as usize;
    let mut level = 0u32;
    while f.pow(level) < buckets {
        level += 1;
    }
    let level = level.saturating_sub(slack).min(spec.height());
    let max_width = spec.leaves() / f.pow(level);
    let mut out = Vec::with_capacity(bounds.len());
    out.push(bounds[0]);
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a > max_width {
            let mut g = (a / max_width + 1) * max_width;
            while g < b {
                out.push(g);
                g += max_width;
            }
        }
        out.push(b);
    }
    out
}

/// How the privacy budget is shared between bucket boundaries and counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryBudget {
    /// One noisy hierarchy per class serves both boundaries and counts.
    #[default]
    Shared,
    /// Boundaries come from separate hierarchies built with
    /// `boundary_fraction · epsilon`; counts use the remainder.
    Split { boundary_fraction: f64 },
}

/// Class hierarchies from which histograms of any bucket count can be cut.
#[derive(Debug, Clone)]
pub struct HistogramSources {
    /// Separate boundary hierarchies when the budget is split.
    boundaries: Option<(HierarchicalCounts, HierarchicalCounts)>,
    counts: (HierarchicalCounts, HierarchicalCounts),
}

impl HistogramSources {
    /// Builds the class hierarchies once under `spec` and `budget`.
    pub fn build(
        shards: &[ClientShard],
        spec: &PrivacySpec,
        budget: BoundaryBudget,
        seed: u64,
    ) -> Result<Self> {
        let count_pair = |spec: &PrivacySpec, seed: u64| -> Result<_> {
            Ok((
                build_hierarchy(shards, Label::Positive, spec, seed)?,
                build_hierarchy(shards, Label::Negative, spec, seed)?,
            ))
        };
        match (budget, spec.epsilon()) {
            (BoundaryBudget::Split { boundary_fraction }, Some(eps)) => {
                if !(boundary_fraction > 0.0 && boundary_fraction < 1.0) {
                    return Err(domain(format!(
                        "boundary fraction must lie in (0, 1), got {boundary_fraction}"
                    )));
                }
                let bspec = spec.with_epsilon(eps * boundary_fraction)?;
                let cspec = spec.with_epsilon(eps * (1.0 - boundary_fraction))?;
                Ok(HistogramSources {
                    boundaries: Some(count_pair(&bspec, derive_seed(seed, &[tag("boundaries")]))?),
                    counts: count_pair(&cspec, seed)?,
                })
            }
            _ => Ok(HistogramSources {
                boundaries: None,
                counts: count_pair(spec, seed)?,
            }),
        }
    }

    /// The hierarchies the bucket counts are read from.
    pub fn counts(&self) -> (&HierarchicalCounts, &HierarchicalCounts) {
        (&self.counts.0, &self.counts.1)
    }

    pub fn histogram(&self, buckets: usize, options: &HistogramOptions) -> Result<ScoreHistogram> {
        let (bp, bn) = self.boundaries.as_ref().unwrap_or(&self.counts);
        build_score_histogram_with(bp, bn, &self.counts.0, &self.counts.1, buckets, options)
    }
}

/// Builds the class hierarchies from client shards and bucketizes them.
pub fn build_private_histogram(
    shards: &[ClientShard],
    spec: &PrivacySpec,
    buckets: usize,
    budget: BoundaryBudget,
    options: &HistogramOptions,
    seed: u64,
) -> Result<ScoreHistogram> {
    HistogramSources::build(shards, spec, budget, seed)?.histogram(buckets, options)
}
