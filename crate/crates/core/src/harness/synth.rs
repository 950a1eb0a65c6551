use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rng::{substream, tag};
use crate::types::{Label, LabeledScore, WellBehavedSpec};

/// Slope of the continuous class densities for a Lipschitz constant.
///
/// Positives get density `1 + a(s − ½)` and negatives `1 − a(s − ½)`, with
/// `a = min(ℓ, 2)` so both stay nonnegative on `[0, 1]`.
pub fn density_slope(lipschitz: f64) -> f64 {
    lipschitz.min(2.0)
}

/// Density of the continuous (non-spike) part of `label`'s scores.
pub fn continuous_density(spec: &WellBehavedSpec, label: Label, score: f64) -> f64 {
    let a = signed_slope(spec, label);
    1.0 + a * (score - 0.5)
}

fn signed_slope(spec: &WellBehavedSpec, label: Label) -> f64 {
    let a = density_slope(spec.lipschitz());
    if label.is_positive() {
        a
    } else {
        -a
    }
}

/// Inverse CDF of `1 + a(s − ½)` on `[0, 1]`, stable for every `|a| ≤ 2`.
fn linear_quantile(a: f64, u: f64) -> f64 {
    let b = 1.0 - a / 2.0;
    let den = b + (b * b + 2.0 * a * u).sqrt();
    if den <= 0.0 {
        return 0.0;
    }
    (2.0 * u / den).clamp(0.0, 1.0)
}

/// Draws `m` examples from a well-behaved distribution.
///
/// Each example is positive with probability `balance`. Within its class it
/// lands exactly on a spike with that spike's mass, otherwise it follows
/// the linear density of [`continuous_density`].
pub fn gen_well_behaved(
    m: usize,
    spec: &WellBehavedSpec,
    balance: f64,
    seed: u64,
) -> Result<Vec<LabeledScore>> {
    if !(balance > 0.0 && balance < 1.0) {
        return Err(domain(format!(
            "class balance must lie in (0, 1), got {balance}"
        )));
    }
    for label in [Label::Positive, Label::Negative] {
        if spec.spike_mass(label) > 1.0 {
            return Err(domain("spike mass per class exceeds 1"));
        }
    }
    let mut rng = substream(seed, &[tag("gen_well_behaved")]);
    (0..m)
        .map(|_| {
            let label = Label::from_bool(rng.random_bool(balance));
            let mut u: f64 = rng.random();
            for s in spec.spikes() {
                let mass = match label {
                    Label::Positive => s.positive_mass,
                    Label::Negative => s.negative_mass,
                };
                if u < mass {
                    return LabeledScore::new(s.location, label);
                }
                u -= mass;
            }
            let score = linear_quantile(signed_slope(spec, label), rng.random());
            LabeledScore::new(score, label)
        })
        .collect()
}

/// How examples are distributed to clients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitPolicy {
    /// Every client holds exactly one example.
    #[default]
    OnePerClient,
    /// A `rho` fraction of the positives is dealt onto the first
    /// `⌈rho·M⌉` clients; everything else goes one per client.
    SkewedByClass { rho: f64 },
    /// Client sizes drawn uniformly from `0..=max_size`, so some clients
    /// are empty.
    VariableSize { max_size: usize },
}

/// Distributes examples to clients. The union of the shards is exactly the
/// input multiset.
pub fn split_to_clients(
    examples: &[LabeledScore],
    policy: SplitPolicy,
    seed: u64,
) -> Result<Vec<crate::ClientShard>> {
    use crate::ClientShard;
    match policy {
        SplitPolicy::OnePerClient => Ok(examples
            .iter()
            .map(|&e| ClientShard::new(vec![e]))
            .collect()),
        SplitPolicy::SkewedByClass { rho } => {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(domain(format!("skew rho must lie in (0, 1], got {rho}")));
            }
            let heavy = (rho * examples.len() as f64).ceil() as usize;
            let positives = examples.iter().filter(|e| e.label().is_positive()).count();
            let mut quota = (rho * positives as f64).round() as usize;
            let mut shards = vec![Vec::new(); heavy];
            let mut rest = Vec::new();
            let mut next = 0;
            for &e in examples {
                if e.label().is_positive() && quota > 0 && heavy > 0 {
                    shards[next % heavy].push(e);
                    next += 1;
                    quota -= 1;
                } else {
                    rest.push(ClientShard::new(vec![e]));
                }
            }
            let mut out: Vec<ClientShard> = shards.into_iter().map(ClientShard::new).collect();
            out.extend(rest);
            Ok(out)
        }
        SplitPolicy::VariableSize { max_size } => {
            if max_size == 0 {
                return Err(domain("variable-size split needs max_size >= 1"));
            }
            let mut rng = substream(seed, &[tag("split_variable")]);
            let mut out = Vec::new();
            let mut rest = examples;
            while !rest.is_empty() {
                let size = rng.random_range(0..=max_size).min(rest.len());
                let (head, tail) = rest.split_at(size);
                out.push(ClientShard::new(head.to_vec()));
                rest = tail;
            }
            Ok(out)
        }
    }
}
