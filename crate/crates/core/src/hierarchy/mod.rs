//! Hierarchical count structures over the score axis.
//!
//! Level `k` (1-based) splits `[0, 1]` into `fanout^k` equal segments and
//! holds one (possibly noisy) count per segment. Any prefix `[0, r)` of the
//! leaf grid is covered greedily by at most `(fanout - 1)` aligned nodes per
//! level, so prefix counts, range counts and quantiles only read `O(h)`
//! nodes.

mod histogram;

pub use histogram::{
    build_private_histogram, build_score_histogram, build_score_histogram_with, BoundaryBudget,
    HistogramOptions, HistogramSources, ScoreHistogram,
};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::privacy::{
    aggregated_noise, discrete_laplace_variance, oue_decode, oue_encode, oue_sample_bit_sums,
    OueParams,
};
use crate::rng::{derive_seed, substream, tag};
use crate::types::{ClientShard, Label, NoisyCount, PrivacySpec, Regime, Simulation};

/// Per-level segment counts for one class population.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalCounts {
    spec: PrivacySpec,
    /// `levels[k - 1]` holds the `fanout^k` counts of level `k`.
    levels: Vec<Vec<NoisyCount>>,
    population_total: NoisyCount,
}

/// One node of the hierarchy: `level` in `1..=h`, `index` within the level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    pub level: u32,
    pub index: usize,
}

impl HierarchicalCounts {
    fn from_levels(spec: PrivacySpec, levels: Vec<Vec<NoisyCount>>) -> Self {
        let population_total = levels[0].iter().copied().sum();
        HierarchicalCounts {
            spec,
            levels,
            population_total,
        }
    }

    fn zeros(spec: PrivacySpec) -> Self {
        let f = spec.fanout() as usize;
        let levels = (1..=spec.height())
            .map(|k| vec![NoisyCount::ZERO; f.pow(k)])
            .collect();
        Self::from_levels(spec, levels)
    }

    /// Exact counts from per-leaf tallies.
    pub fn from_leaf_counts(spec: PrivacySpec, leaves: &[u64]) -> Result<Self> {
        if leaves.len() != spec.leaves() {
            return Err(domain(format!(
                "expected {} leaf counts, got {}",
                spec.leaves(),
                leaves.len()
            )));
        }
        let exact = exact_levels(&spec, leaves);
        let levels = exact
            .into_iter()
            .map(|lvl| {
                lvl.into_iter()
                    .map(|c| NoisyCount::exact(c as f64))
                    .collect()
            })
            .collect();
        Ok(Self::from_levels(spec, levels))
    }

    pub fn spec(&self) -> &PrivacySpec {
        &self.spec
    }

    pub fn height(&self) -> u32 {
        self.spec.height()
    }

    pub fn leaves(&self) -> usize {
        self.spec.leaves()
    }

    /// Counts of level `k`, `1 <= k <= h`.
    pub fn level(&self, k: u32) -> &[NoisyCount] {
        &self.levels[k as usize - 1]
    }

    pub fn population_total(&self) -> NoisyCount {
        self.population_total
    }

    pub fn node(&self, node: Node) -> NoisyCount {
        self.levels[node.level as usize - 1][node.index]
    }

    /// Greedy cover of the leaf prefix `[0, r)` by aligned nodes, coarsest first.
    pub fn decompose(&self, r: usize) -> Result<Vec<Node>> {
        decompose(&self.spec, r)
    }

    /// Estimated number of examples whose leaf index is below `r`.
    pub fn prefix_count(&self, r: usize) -> Result<NoisyCount> {
        Ok(self.decompose(r)?.into_iter().map(|n| self.node(n)).sum())
    }

    /// Estimated number of examples with leaf index in `[a, b)`.
    ///
    /// Nodes shared by the covers of `[0, a)` and `[0, b)` cancel, so the
    /// variance only counts the nodes that actually contribute.
    pub fn range_count(&self, a: usize, b: usize) -> Result<NoisyCount> {
        if a > b {
            return Err(domain(format!("empty range [{a}, {b})")));
        }
        let lo = self.decompose(a)?;
        let hi = self.decompose(b)?;
        let shared = lo.iter().zip(&hi).take_while(|(x, y)| x == y).count();
        let plus: NoisyCount = hi[shared..].iter().map(|&n| self.node(n)).sum();
        let minus: NoisyCount = lo[shared..].iter().map(|&n| self.node(n)).sum();
        Ok(NoisyCount::new(
            plus.value - minus.value,
            plus.variance + minus.variance,
        ))
    }

    /// Smallest leaf index `r` whose prefix estimate reaches `target_rank`.
    ///
    /// Noisy prefixes need not be monotone; the binary search returns the
    /// first crossing it finds.
    pub fn quantile_leaf(&self, target_rank: f64) -> usize {
        let target = target_rank.clamp(0.0, self.population_total.value.max(0.0));
        self.first_leaf_where(0, |v| v >= target)
    }

    /// Quantile boundary on the score axis, a multiple of the leaf width.
    pub fn find_quantile(&self, target_rank: f64) -> f64 {
        self.quantile_leaf(target_rank) as f64 / self.leaves() as f64
    }

    /// Binary search over `[from, F]` for the first `r` with `pred(prefix(r))`.
    fn first_leaf_where(&self, from: usize, pred: impl Fn(f64) -> bool) -> usize {
        let (mut lo, mut hi) = (from, self.leaves());
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let v = self.prefix_count(mid).expect("mid within range").value;
            if pred(v) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }

    /// Nodewise sum of two hierarchies with the same shape.
    pub fn combined(&self, other: &HierarchicalCounts) -> Result<HierarchicalCounts> {
        if !self.spec.compatible(&other.spec) {
            return Err(domain("hierarchies differ in regime, height or fanout"));
        }
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x + y).collect())
            .collect();
        Ok(Self::from_levels(self.spec, levels))
    }
}

fn decompose(spec: &PrivacySpec, r: usize) -> Result<Vec<Node>> {
    let leaves = spec.leaves();
    if r > leaves {
        return Err(domain(format!("prefix end {r} beyond {leaves} leaves")));
    }
    let f = spec.fanout() as usize;
    let mut nodes = Vec::new();
    let mut pos = 0;
    let mut width = leaves;
    for level in 1..=spec.height() {
        width /= f;
        while pos + width <= r {
            nodes.push(Node {
                level,
                index: pos / width,
            });
            pos += width;
        }
    }
    debug_assert_eq!(pos, r);
    Ok(nodes)
}

/// Level vectors of exact counts, built bottom-up from leaf tallies.
fn exact_levels(spec: &PrivacySpec, leaves: &[u64]) -> Vec<Vec<u64>> {
    let f = spec.fanout() as usize;
    let h = spec.height() as usize;
    let mut levels = vec![Vec::new(); h];
    levels[h - 1] = leaves.to_vec();
    for k in (0..h - 1).rev() {
        levels[k] = levels[k + 1].chunks(f).map(|c| c.iter().sum()).collect();
    }
    levels
}

fn class_tag(label: Label) -> u64 {
    match label {
        Label::Positive => tag("positive"),
        Label::Negative => tag("negative"),
    }
}

/// Builds the hierarchy for one class under the spec's privacy regime.
///
/// * `SecureAgg`: exact per-segment counts.
/// * `DistDp`: exact counts plus, on every node, the sum of one Pólya share
///   per client, which is discrete Laplace with `alpha = exp(-epsilon/h)`.
/// * `LocalDp`: every example is a reporting unit (an empty client submits a
///   single all-zeros report). Units are shuffled and dealt round-robin into
///   `h` groups; group `k` reports its level-`k` segment via OUE, or nothing
///   if its example belongs to the other class. Decoded level-`k` counts are
///   rescaled by `units / |group k|`.
pub fn build_hierarchy(
    shards: &[ClientShard],
    class_filter: Label,
    spec: &PrivacySpec,
    seed: u64,
) -> Result<HierarchicalCounts> {
    if shards.is_empty() {
        return Ok(HierarchicalCounts::zeros(*spec));
    }
    match spec.regime() {
        Regime::SecureAgg => {
            HierarchicalCounts::from_leaf_counts(*spec, &leaf_tally(shards, class_filter, spec))
        }
        Regime::DistDp => build_dist_dp(shards, class_filter, spec, seed),
        Regime::LocalDp => build_local_dp(shards, class_filter, spec, seed),
    }
}

/// Builds both class hierarchies with the same seed.
pub fn build_class_hierarchies(
    shards: &[ClientShard],
    spec: &PrivacySpec,
    seed: u64,
) -> Result<(HierarchicalCounts, HierarchicalCounts)> {
    Ok((
        build_hierarchy(shards, Label::Positive, spec, seed)?,
        build_hierarchy(shards, Label::Negative, spec, seed)?,
    ))
}

fn leaf_tally(shards: &[ClientShard], class_filter: Label, spec: &PrivacySpec) -> Vec<u64> {
    let mut leaves = vec![0u64; spec.leaves()];
    for e in shards.iter().flat_map(|s| &s.examples) {
        if e.label() == class_filter {
            leaves[spec.leaf_index(e.score())] += 1;
        }
    }
    leaves
}

fn build_dist_dp(
    shards: &[ClientShard],
    class_filter: Label,
    spec: &PrivacySpec,
    seed: u64,
) -> Result<HierarchicalCounts> {
    let epsilon = spec.epsilon().expect("DP regime has epsilon");
    let alpha = (-epsilon / spec.height() as f64).exp();
    let variance = discrete_laplace_variance(alpha);
    let clients = shards.len();
    let exact = exact_levels(spec, &leaf_tally(shards, class_filter, spec));
    let mut rng = substream(seed, &[tag("dist_dp"), class_tag(class_filter)]);
    let mut levels = Vec::with_capacity(exact.len());
    for lvl in exact {
        let mut noisy = Vec::with_capacity(lvl.len());
        for c in lvl {
            let noise = aggregated_noise(alpha, clients, spec.simulation(), &mut rng)?;
            noisy.push(NoisyCount::new(c as f64 + noise as f64, variance));
        }
        levels.push(noisy);
    }
    Ok(HierarchicalCounts::from_levels(*spec, levels))
}

/// One local-DP reporting unit: the leaf of its example (if any) and label.
#[derive(Clone, Copy)]
struct Unit {
    leaf: Option<(usize, Label)>,
}

fn reporting_units(shards: &[ClientShard], spec: &PrivacySpec) -> Vec<Unit> {
    let mut units = Vec::new();
    for shard in shards {
        if shard.is_empty() {
            units.push(Unit { leaf: None });
        }
        for e in &shard.examples {
            units.push(Unit {
                leaf: Some((spec.leaf_index(e.score()), e.label())),
            });
        }
    }
    units
}

/// Seeded balanced partition of `n` units into `groups` groups.
fn assign_groups(n: usize, groups: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &[tag("ldp_groups")]));
    let mut group = vec![0; n];
    for (pos, &unit) in order.iter().enumerate() {
        group[unit] = pos % groups;
    }
    group
}

fn build_local_dp(
    shards: &[ClientShard],
    class_filter: Label,
    spec: &PrivacySpec,
    seed: u64,
) -> Result<HierarchicalCounts> {
    let epsilon = spec.epsilon().expect("DP regime has epsilon");
    let h = spec.height() as usize;
    let f = spec.fanout() as usize;
    let units = reporting_units(shards, spec);
    if units.len() < h {
        return Err(Error::InsufficientPopulation {
            units: units.len(),
            height: spec.height(),
        });
    }
    let group = assign_groups(units.len(), h, seed);
    let class = class_tag(class_filter);

    let mut levels = Vec::with_capacity(h);
    for k in 1..=h {
        let cells = f.pow(k as u32);
        let cell_width = spec.leaves() / cells;
        let params = OueParams::new(epsilon, cells)?;
        let members: Vec<(usize, Option<usize>)> = units
            .iter()
            .enumerate()
            .filter(|(i, _)| group[*i] == k - 1)
            .map(|(i, u)| {
                let cell = u
                    .leaf
                    .filter(|&(_, label)| label == class_filter)
                    .map(|(leaf, _)| leaf / cell_width);
                (i, cell)
            })
            .collect();
        let population = members.len();

        let bit_sums = match spec.simulation() {
            Simulation::Aggregate => {
                let mut counts = vec![0u64; cells];
                for &(_, cell) in &members {
                    if let Some(c) = cell {
                        counts[c] += 1;
                    }
                }
                let mut rng = substream(seed, &[tag("local_dp"), class, k as u64]);
                oue_sample_bit_sums(&counts, population, &params, &mut rng)?
            }
            Simulation::PerClient => {
                let unit_seed = derive_seed(seed, &[tag("local_dp_unit"), class]);
                members
                    .par_iter()
                    .map(|&(i, cell)| {
                        let mut rng = substream(unit_seed, &[i as u64]);
                        oue_encode(cell, &params, &mut rng)
                    })
                    .try_fold(
                        || vec![0u64; cells],
                        |mut acc, bits| {
                            for (a, b) in acc.iter_mut().zip(bits?) {
                                *a += b as u64;
                            }
                            Ok::<_, Error>(acc)
                        },
                    )
                    .try_reduce(
                        || vec![0u64; cells],
                        |mut a, b| {
                            for (x, y) in a.iter_mut().zip(b) {
                                *x += y;
                            }
                            Ok(a)
                        },
                    )?
            }
        };

        let scale = units.len() as f64 / population as f64;
        let decoded = oue_decode(&bit_sums, population, &params)
            .into_iter()
            .map(|c| NoisyCount::new(c.value * scale, c.variance * scale * scale))
            .collect();
        levels.push(decoded);
    }
    Ok(HierarchicalCounts::from_levels(*spec, levels))
}
