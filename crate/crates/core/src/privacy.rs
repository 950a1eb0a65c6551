//! Aggregation mechanisms: exact secure aggregation, distributed discrete
//! Laplace noise assembled from per-client Pólya shares, and local DP via
//! Optimized Unary Encoding (OUE).

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};

use crate::error::{domain, Result};
use crate::types::{NoisyCount, Simulation};

/// Elementwise sum of equal-length client reports.
pub fn secure_aggregate(reports: &[Vec<i64>]) -> Result<Vec<i64>> {
    let Some(first) = reports.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    let mut sum = vec![0i64; len];
    for (i, r) in reports.iter().enumerate() {
        if r.len() != len {
            return Err(domain(format!(
                "report {i} has length {}, expected {len}",
                r.len()
            )));
        }
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
    }
    Ok(sum)
}

/// Parameters of one client's Pólya noise share.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyaShareParams {
    r: f64,
    alpha: f64,
    sensitivity: u32,
}

impl PolyaShareParams {
    pub fn new(r: f64, alpha: f64, sensitivity: u32) -> Result<Self> {
        check_polya(r, alpha)?;
        if sensitivity == 0 {
            return Err(domain("sensitivity must be a positive integer"));
        }
        Ok(PolyaShareParams {
            r,
            alpha,
            sensitivity,
        })
    }

    /// Shares for `clients` participants whose sum is discrete Laplace with
    /// `alpha = exp(-epsilon / sensitivity)`.
    pub fn for_population(epsilon: f64, sensitivity: u32, clients: usize) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(domain(format!("epsilon must be positive, got {epsilon}")));
        }
        if clients == 0 {
            return Err(domain("noise shares need at least one client"));
        }
        let alpha = (-epsilon / sensitivity.max(1) as f64).exp();
        Self::new(1.0 / clients as f64, alpha, sensitivity)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sensitivity(&self) -> u32 {
        self.sensitivity
    }
}

fn check_polya(r: f64, alpha: f64) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(domain(format!("Pólya shape must be positive, got {r}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain(format!(
            "Pólya alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// One draw from Pólya(r, alpha): a Poisson draw whose rate is
/// Gamma(shape r, scale alpha / (1 - alpha)).
///
/// Mean `r·α/(1−α)`, variance `r·α/(1−α)²`.
pub fn sample_polya<R: Rng + ?Sized>(r: f64, alpha: f64, rng: &mut R) -> Result<u64> {
    check_polya(r, alpha)?;
    let scale = alpha / (1.0 - alpha);
    let gamma = Gamma::new(r, scale).map_err(|e| domain(format!("gamma: {e}")))?;
    let rate: f64 = gamma.sample(rng);
    if !(rate > 0.0) {
        return Ok(0);
    }
    let poisson = Poisson::new(rate).map_err(|e| domain(format!("poisson: {e}")))?;
    Ok(poisson.sample(rng) as u64)
}

/// One client's noise share: the difference of two independent Pólya draws.
pub fn distdp_noise_share<R: Rng + ?Sized>(params: &PolyaShareParams, rng: &mut R) -> i64 {
    let a = sample_polya(params.r, params.alpha, rng).expect("validated parameters");
    let b = sample_polya(params.r, params.alpha, rng).expect("validated parameters");
    a as i64 - b as i64
}

/// Variance of the discrete Laplace distribution with parameter `alpha`.
pub fn discrete_laplace_variance(alpha: f64) -> f64 {
    2.0 * alpha / ((1.0 - alpha) * (1.0 - alpha))
}

/// Probability mass of `k` under discrete Laplace(`alpha`).
pub fn discrete_laplace_pmf(alpha: f64, k: i64) -> f64 {
    (1.0 - alpha) / (1.0 + alpha) * alpha.powi(k.unsigned_abs().min(i32::MAX as u64) as i32)
}

/// Total noise on one aggregated count when `clients` participants each add a
/// Pólya share. With no clients there is nothing to perturb.
pub fn aggregated_noise<R: Rng + ?Sized>(
    alpha: f64,
    clients: usize,
    simulation: Simulation,
    rng: &mut R,
) -> Result<i64> {
    if clients == 0 {
        return Ok(0);
    }
    match simulation {
        Simulation::PerClient => {
            let params = PolyaShareParams::new(1.0 / clients as f64, alpha, 1)?;
            Ok((0..clients).map(|_| distdp_noise_share(&params, rng)).sum())
        }
        Simulation::Aggregate => {
            let a = sample_polya(1.0, alpha, rng)?;
            let b = sample_polya(1.0, alpha, rng)?;
            Ok(a as i64 - b as i64)
        }
    }
}

/// Optimized Unary Encoding parameters for a domain of `domain_size` cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OueParams {
    epsilon: f64,
    domain_size: usize,
    p_keep: f64,
    q_flip: f64,
}

impl OueParams {
    pub fn new(epsilon: f64, domain_size: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(domain(format!("epsilon must be positive, got {epsilon}")));
        }
        if domain_size == 0 {
            return Err(domain("OUE domain must have at least one cell"));
        }
        Ok(OueParams {
            epsilon,
            domain_size,
            p_keep: 0.5,
            q_flip: 1.0 / (epsilon.exp() + 1.0),
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn domain_size(&self) -> usize {
        self.domain_size
    }

    pub fn p_keep(&self) -> f64 {
        self.p_keep
    }

    pub fn q_flip(&self) -> f64 {
        self.q_flip
    }

    /// Advertised variance of one decoded cell over `population` reports.
    pub fn cell_variance(&self, population: usize) -> f64 {
        let gap = self.p_keep - self.q_flip;
        population as f64 * self.q_flip * (1.0 - self.q_flip) / (gap * gap)
    }

    fn decode(&self, bit_sum: f64, population: usize) -> NoisyCount {
        let value = (bit_sum - population as f64 * self.q_flip) / (self.p_keep - self.q_flip);
        NoisyCount::new(value, self.cell_variance(population))
    }
}

/// Perturbs the one-hot encoding of `value` (all zeros for `None`).
pub fn oue_encode<R: Rng + ?Sized>(
    value: Option<usize>,
    params: &OueParams,
    rng: &mut R,
) -> Result<Vec<bool>> {
    if let Some(v) = value {
        if v >= params.domain_size {
            return Err(domain(format!(
                "index {v} outside OUE domain of size {}",
                params.domain_size
            )));
        }
    }
    Ok((0..params.domain_size)
        .map(|i| {
            let p = if Some(i) == value {
                params.p_keep
            } else {
                params.q_flip
            };
            rng.random_bool(p)
        })
        .collect())
}

/// Unbiased per-cell frequency estimates from OUE reports.
pub fn oue_aggregate(reports: &[Vec<bool>], params: &OueParams) -> Result<Vec<NoisyCount>> {
    let mut sums = vec![0u64; params.domain_size];
    for (i, r) in reports.iter().enumerate() {
        if r.len() != params.domain_size {
            return Err(domain(format!(
                "report {i} has length {}, expected {}",
                r.len(),
                params.domain_size
            )));
        }
        for (s, &bit) in sums.iter_mut().zip(r) {
            *s += bit as u64;
        }
    }
    Ok(oue_decode(&sums, reports.len(), params))
}

/// Decodes per-cell bit sums from `population` reports.
pub fn oue_decode(bit_sums: &[u64], population: usize, params: &OueParams) -> Vec<NoisyCount> {
    bit_sums
        .iter()
        .map(|&s| params.decode(s as f64, population))
        .collect()
}

/// Draws the per-cell bit sums of `population` OUE reports directly.
///
/// `true_counts[v]` reporters hold cell `v`; the remainder report `None`.
/// Cell `v`'s sum is Binomial(true_counts[v], p) + Binomial(population −
/// true_counts[v], q), which is exactly the distribution of summing the
/// individual encodings.
pub fn oue_sample_bit_sums<R: Rng + ?Sized>(
    true_counts: &[u64],
    population: usize,
    params: &OueParams,
    rng: &mut R,
) -> Result<Vec<u64>> {
    if true_counts.len() != params.domain_size {
        return Err(domain(format!(
            "count vector has length {}, expected {}",
            true_counts.len(),
            params.domain_size
        )));
    }
    let total: u64 = true_counts.iter().sum();
    if total > population as u64 {
        return Err(domain(format!(
            "counts sum to {total} but only {population} reports exist"
        )));
    }
    true_counts
        .iter()
        .map(|&c| {
            let others = population as u64 - c;
            Ok(binomial(c, params.p_keep, rng)? + binomial(others, params.q_flip, rng)?)
        })
        .collect()
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> Result<u64> {
    if n == 0 {
        return Ok(0);
    }
    let d = Binomial::new(n, p).map_err(|e| domain(format!("binomial: {e}")))?;
    Ok(d.sample(rng))
}
