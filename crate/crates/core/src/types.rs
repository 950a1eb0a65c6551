//! Shared domain types.
//!
//! Every type here is an immutable value type. Constructors check the
//! invariants once so downstream code can rely on them.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Ground-truth class of an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

/// One classifier score in `[0, 1]` with its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    score: f64,
    label: Label,
}

impl LabeledScore {
    pub fn new(score: f64, label: Label) -> Result<Self> {
        validate(LabeledScore { score, label })
    }

    pub fn positive(score: f64) -> Result<Self> {
        Self::new(score, Label::Positive)
    }

    pub fn negative(score: f64) -> Result<Self> {
        Self::new(score, Label::Negative)
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn label(&self) -> Label {
        self.label
    }
}

/// Checks that the score lies in `[0, 1]` (NaN is rejected).
pub fn validate(example: LabeledScore) -> Result<LabeledScore> {
    if (0.0..=1.0).contains(&example.score) {
        Ok(example)
    } else {
        Err(domain(format!("score {} outside [0, 1]", example.score)))
    }
}

/// The examples held by one client. May be empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub examples: Vec<LabeledScore>,
}

impl ClientShard {
    pub fn new(examples: Vec<LabeledScore>) -> Self {
        ClientShard { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Which aggregation mechanism protects the client reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "secure_agg")]
    SecureAgg,
    #[serde(rename = "dist_dp")]
    DistDp,
    #[serde(rename = "local_dp")]
    LocalDp,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::SecureAgg => "secure_agg",
            Regime::DistDp => "dist_dp",
            Regime::LocalDp => "local_dp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "secure_agg" | "secureagg" | "federated" => Ok(Regime::SecureAgg),
            "dist_dp" | "distdp" => Ok(Regime::DistDp),
            "local_dp" | "localdp" => Ok(Regime::LocalDp),
            other => Err(domain(format!("unknown regime `{other}`"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the randomized mechanisms are simulated.
///
/// `PerClient` draws every client's noise share or randomized report
/// individually. `Aggregate` draws the aggregate directly from its exact
/// distribution: a sum of `M` Pólya(1/M, α) shares is Pólya(1, α), and a
/// sum of OUE bits over a population is a sum of two binomials. Both give
/// the same output distribution; `Aggregate` is O(nodes) instead of
/// O(clients × nodes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Simulation {
    PerClient,
    #[default]
    Aggregate,
}

/// Privacy regime plus hierarchy shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    regime: Regime,
    epsilon: Option<f64>,
    height: u32,
    fanout: u32,
    simulation: Simulation,
}

/// Upper bound on `fanout^height`, the number of leaf cells.
pub const MAX_LEAVES: u64 = 1 << 26;

impl PrivacySpec {
    pub fn new(regime: Regime, epsilon: Option<f64>, height: u32, fanout: u32) -> Result<Self> {
        if height < 1 {
            return Err(domain("hierarchy height must be at least 1"));
        }
        if fanout < 2 {
            return Err(domain("fanout must be at least 2"));
        }
        let leaves = (fanout as u64).checked_pow(height);
        if leaves.is_none_or(|l| l > MAX_LEAVES) {
            return Err(domain(format!(
                "fanout^height = {fanout}^{height} exceeds the leaf budget of {MAX_LEAVES}"
            )));
        }
        let epsilon = match regime {
            Regime::SecureAgg => None,
            _ => match epsilon {
                Some(e) if e > 0.0 && e.is_finite() => Some(e),
                Some(e) => return Err(domain(format!("epsilon must be positive, got {e}"))),
                None => return Err(domain(format!("regime {regime} requires epsilon"))),
            },
        };
        Ok(PrivacySpec {
            regime,
            epsilon,
            height,
            fanout,
            simulation: Simulation::default(),
        })
    }

    pub fn secure_agg(height: u32) -> Self {
        Self::new(Regime::SecureAgg, None, height, 2).expect("valid secure aggregation spec")
    }

    pub fn dist_dp(epsilon: f64, height: u32) -> Result<Self> {
        Self::new(Regime::DistDp, Some(epsilon), height, 2)
    }

    pub fn local_dp(epsilon: f64, height: u32) -> Result<Self> {
        Self::new(Regime::LocalDp, Some(epsilon), height, 2)
    }

    pub fn with_simulation(mut self, simulation: Simulation) -> Self {
        self.simulation = simulation;
        self
    }

    /// Same regime and hierarchy shape with a different budget.
    pub fn with_epsilon(self, epsilon: f64) -> Result<Self> {
        Self::new(self.regime, Some(epsilon), self.height, self.fanout)
            .map(|s| s.with_simulation(self.simulation))
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn fanout(&self) -> u32 {
        self.fanout
    }

    pub fn simulation(&self) -> Simulation {
        self.simulation
    }

    /// Number of leaf cells, `fanout^height`.
    pub fn leaves(&self) -> usize {
        (self.fanout as usize).pow(self.height)
    }

    /// Leaf cell holding `score`: `floor(score * leaves)`, with 1.0 in the last cell.
    pub fn leaf_index(&self, score: f64) -> usize {
        leaf_index(score, self.leaves())
    }

    /// Width of one leaf cell on the score axis.
    pub fn leaf_width(&self) -> f64 {
        1.0 / self.leaves() as f64
    }

    /// Whether two specs describe the same hierarchy and mechanism.
    pub fn compatible(&self, other: &PrivacySpec) -> bool {
        self.regime == other.regime && self.height == other.height && self.fanout == other.fanout
    }
}

pub(crate) fn leaf_index(score: f64, leaves: usize) -> usize {
    let idx = (score * leaves as f64).floor();
    if idx <= 0.0 {
        0
    } else {
        (idx as usize).min(leaves - 1)
    }
}

/// A point mass in a synthetic score distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub location: f64,
    pub positive_mass: f64,
    pub negative_mass: f64,
}

/// A score distribution that is Lipschitz between point spikes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellBehavedSpec {
    spikes: Vec<Spike>,
    lipschitz: f64,
    spike_threshold: f64,
}

impl WellBehavedSpec {
    pub fn new(spikes: Vec<Spike>, lipschitz: f64, spike_threshold: f64) -> Result<Self> {
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(domain(format!(
                "lipschitz constant must be >= 0, got {lipschitz}"
            )));
        }
        if !(spike_threshold > 0.0 && spike_threshold <= 1.0) {
            return Err(domain(format!(
                "spike threshold must lie in (0, 1], got {spike_threshold}"
            )));
        }
        let (mut pos, mut neg) = (0.0, 0.0);
        for s in &spikes {
            if !(0.0..=1.0).contains(&s.location) {
                return Err(domain(format!(
                    "spike location {} outside [0, 1]",
                    s.location
                )));
            }
            if !(s.positive_mass >= 0.0 && s.negative_mass >= 0.0) {
                return Err(domain("spike masses must be nonnegative"));
            }
            if s.positive_mass.max(s.negative_mass) <= spike_threshold {
                return Err(domain(format!(
                    "spike at {} has mass at most the threshold {spike_threshold}",
                    s.location
                )));
            }
            pos += s.positive_mass;
            neg += s.negative_mass;
        }
        if pos > 1.0 || neg > 1.0 {
            return Err(domain(format!(
                "spike mass per class exceeds 1 (positive {pos}, negative {neg})"
            )));
        }
        Ok(WellBehavedSpec {
            spikes,
            lipschitz,
            spike_threshold,
        })
    }

    /// No spikes; densities with slope magnitude `lipschitz`.
    pub fn smooth(lipschitz: f64) -> Result<Self> {
        Self::new(Vec::new(), lipschitz, 0.01)
    }

    pub fn spikes(&self) -> &[Spike] {
        &self.spikes
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn spike_threshold(&self) -> f64 {
        self.spike_threshold
    }

    pub fn spike_mass(&self, label: Label) -> f64 {
        self.spikes
            .iter()
            .map(|s| match label {
                Label::Positive => s.positive_mass,
                Label::Negative => s.negative_mass,
            })
            .sum()
    }
}

/// An estimated count and the variance the mechanism advertises for it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoisyCount {
    pub value: f64,
    pub variance: f64,
}

impl NoisyCount {
    pub const ZERO: NoisyCount = NoisyCount {
        value: 0.0,
        variance: 0.0,
    };

    pub fn exact(value: f64) -> Self {
        NoisyCount {
            value,
            variance: 0.0,
        }
    }

    pub fn new(value: f64, variance: f64) -> Self {
        NoisyCount { value, variance }
    }
}

impl std::ops::Add for NoisyCount {
    type Output = NoisyCount;

    fn add(self, rhs: NoisyCount) -> NoisyCount {
        NoisyCount {
            value: self.value + rhs.value,
            variance: self.variance + rhs.variance,
        }
    }
}

impl std::iter::Sum for NoisyCount {
    fn sum<I: Iterator<Item = NoisyCount>>(iter: I) -> NoisyCount {
        iter.fold(NoisyCount::ZERO, |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validate_accepts_in_range_and_boundary() {
        assert!(LabeledScore::new(0.5, Label::Positive).is_ok());
        assert!(LabeledScore::new(1.0, Label::Negative).is_ok());
        assert!(LabeledScore::new(0.0, Label::Negative).is_ok());
    }

    #[test]
    fn validate_rejects_out_of_range_and_nan() {
        assert!(matches!(
            LabeledScore::new(1.2, Label::Positive),
            Err(crate::Error::Domain(_))
        ));
        assert!(LabeledScore::new(-0.1, Label::Positive).is_err());
        assert!(LabeledScore::new(f64::NAN, Label::Positive).is_err());
    }

    #[test]
    fn privacy_spec_rejects_bad_epsilon() {
        assert!(PrivacySpec::dist_dp(0.0, 4).is_err());
        assert!(PrivacySpec::local_dp(-1.0, 4).is_err());
        assert!(PrivacySpec::new(Regime::DistDp, None, 4, 2).is_err());
        assert!(PrivacySpec::dist_dp(1.0, 4).is_ok());
        // epsilon is ignored for secure aggregation
        let s = PrivacySpec::new(Regime::SecureAgg, Some(-3.0), 4, 2).unwrap();
        assert_eq!(s.epsilon(), None);
    }

    #[test]
    fn privacy_spec_rejects_bad_shape() {
        assert!(PrivacySpec::new(Regime::SecureAgg, None, 0, 2).is_err());
        assert!(PrivacySpec::new(Regime::SecureAgg, None, 3, 1).is_err());
        assert!(PrivacySpec::new(Regime::SecureAgg, None, 40, 2).is_err());
    }

    #[test]
    fn leaf_index_clamps_top() {
        let s = PrivacySpec::secure_agg(2);
        assert_eq!(s.leaf_index(0.0), 0);
        assert_eq!(s.leaf_index(0.1), 0);
        assert_eq!(s.leaf_index(0.25), 1);
        assert_eq!(s.leaf_index(0.9), 3);
        assert_eq!(s.leaf_index(1.0), 3);
    }

    #[test]
    fn well_behaved_rejects_excess_mass() {
        let spikes = vec![
            Spike {
                location: 0.2,
                positive_mass: 0.6,
                negative_mass: 0.0,
            },
            Spike {
                location: 0.7,
                positive_mass: 0.6,
                negative_mass: 0.1,
            },
        ];
        assert!(WellBehavedSpec::new(spikes, 1.0, 0.01).is_err());
        assert!(WellBehavedSpec::smooth(-1.0).is_err());
    }

    proptest! {
        #[test]
        fn accepted_scores_are_in_unit_interval(x in proptest::num::f64::ANY) {
            if let Ok(e) = LabeledScore::new(x, Label::Positive) {
                prop_assert!((0.0..=1.0).contains(&e.score()));
            } else {
                prop_assert!(!(0.0..=1.0).contains(&x));
            }
        }
    }
}
