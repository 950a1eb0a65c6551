//! Synthetic data, client splits and experiment sweeps against the oracle.

mod synth;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use synth::{
    continuous_density, density_slope, gen_well_behaved, split_to_clients, SplitPolicy,
};

use crate::calibration::{
    apply_calibration, calibrate_bbq, calibrate_histogram, ece_with, BbqConfig, CalibrationMap,
    EceBinning,
};
use crate::error::{domain, Result};
use crate::hierarchy::{BoundaryBudget, HistogramOptions, HistogramSources};
use crate::metrics::{auc_histogram, pra_threshold};
use crate::oracle::{exact_auc, exact_pra, ExactAuc, ExactPra};
use crate::rng::{derive_seed, substream, tag};
use crate::types::{
    ClientShard, LabeledScore, PrivacySpec, Regime, Simulation, Spike, WellBehavedSpec,
};

/// Parameters of generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    #[serde(default)]
    pub lipschitz: f64,
    #[serde(default = "default_balance")]
    pub balance: f64,
    #[serde(default)]
    pub spikes: Vec<Spike>,
    #[serde(default = "default_spike_threshold")]
    pub spike_threshold: f64,
}

fn default_balance() -> f64 {
    0.5
}

fn default_spike_threshold() -> f64 {
    0.01
}

impl SyntheticData {
    pub fn spec(&self) -> Result<WellBehavedSpec> {
        WellBehavedSpec::new(self.spikes.clone(), self.lipschitz, self.spike_threshold)
    }
}

/// Where sweep data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A data file; sweeps subsample `M` examples from it.
    Path(PathBuf),
    Synthetic(SyntheticData),
    /// Examples already in memory.
    #[serde(skip)]
    Examples(Arc<Vec<LabeledScore>>),
}

/// Quantities a sweep reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Precision,
    Recall,
    Accuracy,
    /// ECE of histogram-binning calibration with `B` buckets.
    Ece,
    /// ECE of BBQ calibration (independent of `B`).
    EceBbq,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::Accuracy => "accuracy",
            Metric::Ece => "ece",
            Metric::EceBbq => "ece_bbq",
        }
    }

    fn needs_calibration(self) -> bool {
        matches!(self, Metric::Ece | Metric::EceBbq)
    }
}

fn default_metrics() -> Vec<Metric> {
    vec![
        Metric::Auc,
        Metric::Precision,
        Metric::Recall,
        Metric::Accuracy,
        Metric::Ece,
    ]
}

/// Experiment axes and fixed settings of a sweep.
///
/// SecureAgg cells ignore the epsilon grid and run once per `(M, h, B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub data: DataSource,
    pub seed: u64,
    #[serde(default = "default_populations")]
    pub populations: Vec<usize>,
    #[serde(default = "default_buckets")]
    pub buckets: Vec<usize>,
    #[serde(default = "default_heights")]
    pub heights: Vec<u32>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub split: SplitPolicy,
    #[serde(default = "default_fanout")]
    pub fanout: u32,
    #[serde(default)]
    pub simulation: Simulation,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Evaluation bins for ECE; defaults to `B` (and 20 for BBQ).
    #[serde(default)]
    pub ece_bins: Option<usize>,
    #[serde(default)]
    pub ece_binning: EceBinning,
    #[serde(default)]
    pub histogram: HistogramOptions,
    #[serde(default)]
    pub boundary_budget: BoundaryBudget,
    #[serde(default)]
    pub bbq: BbqConfig,
    /// Record wall-clock time per row. Off by default so output is
    /// reproducible byte for byte.
    #[serde(default)]
    pub timing: bool,
}

fn default_populations() -> Vec<usize> {
    vec![10_000]
}
fn default_buckets() -> Vec<usize> {
    vec![100]
}
fn default_heights() -> Vec<u32> {
    vec![10]
}
fn default_epsilons() -> Vec<f64> {
    vec![1.0]
}
fn default_regimes() -> Vec<Regime> {
    vec![Regime::SecureAgg]
}
fn default_thresholds() -> Vec<f64> {
    vec![0.5]
}
fn default_repetitions() -> usize {
    1
}
fn default_fanout() -> u32 {
    2
}

impl SweepConfig {
    /// A config with default axes over `data`.
    pub fn new(data: DataSource, seed: u64) -> Self {
        SweepConfig {
            data,
            seed,
            populations: default_populations(),
            buckets: default_buckets(),
            heights: default_heights(),
            epsilons: default_epsilons(),
            regimes: default_regimes(),
            thresholds: default_thresholds(),
            repetitions: default_repetitions(),
            split: SplitPolicy::default(),
            fanout: default_fanout(),
            simulation: Simulation::default(),
            metrics: default_metrics(),
            ece_bins: None,
            ece_binning: EceBinning::default(),
            histogram: HistogramOptions::default(),
            boundary_budget: BoundaryBudget::default(),
            bbq: BbqConfig::default(),
            timing: false,
        }
    }

    /// Checks everything that can be checked without running a cell.
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(domain("repetitions: must be at least 1"));
        }
        if let Some(&t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(domain(format!("thresholds: {t} outside [0, 1]")));
        }
        if self.buckets.contains(&0) {
            return Err(domain("buckets: bucket counts must be at least 1"));
        }
        if self.ece_bins == Some(0) {
            return Err(domain("ece_bins: must be at least 1"));
        }
        let calibrating = self.metrics.iter().any(|m| m.needs_calibration());
        let min_m = if calibrating { 2 } else { 1 };
        if let Some(&m) = self.populations.iter().find(|&&m| m < min_m) {
            return Err(domain(format!(
                "populations: {m} too small (need at least {min_m})"
            )));
        }
        if let Some(&e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(domain(format!("epsilons: must be positive, got {e}")));
        }
        if let Some(&h) = self.heights.iter().find(|&&h| h == 0) {
            return Err(domain(format!("heights: must be at least 1, got {h}")));
        }
        if self.fanout < 2 {
            return Err(domain(format!(
                "fanout: must be at least 2, got {}",
                self.fanout
            )));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.spec()
                .map_err(|e| domain(format!("data.synthetic: {e}")))?;
            if !(s.balance > 0.0 && s.balance < 1.0) {
                return Err(domain(format!(
                    "data.synthetic.balance: must lie in (0, 1), got {}",
                    s.balance
                )));
            }
        }
        Ok(())
    }
}

/// One measured quantity at one sweep coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResultRow {
    pub metric: Metric,
    pub regime: Regime,
    #[serde(rename = "M")]
    pub m: usize,
    /// `None` for quantities that do not depend on a bucket count.
    #[serde(rename = "B")]
    pub b: Option<usize>,
    pub h: u32,
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub estimate: Option<f64>,
    pub exact: Option<f64>,
    pub abs_error: Option<f64>,
    /// AUC: bucketization halfwidth plus one noise standard deviation.
    /// P/R/A: threshold slack. ECE: none.
    pub advertised_uncertainty: Option<f64>,
    pub seed: u64,
    pub wall_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<String>,
}

/// Runs the whole sweep and collects its rows.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<SweepResultRow>> {
    let mut rows = Vec::new();
    run_sweep_with(config, |r| rows.push(r))?;
    Ok(rows)
}

/// Runs the sweep, handing rows to `sink` in deterministic order. Rows for
/// one population size are released together once all of its cells finish.
pub fn run_sweep_with(config: &SweepConfig, mut sink: impl FnMut(SweepResultRow)) -> Result<()> {
    config.validate()?;
    let source = load_source(&config.data)?;
    if let Some(all) = &source {
        if let Some(&m) = config.populations.iter().find(|&&m| m > all.len()) {
            return Err(domain(format!(
                "population {m} exceeds the {} examples in the data",
                all.len()
            )));
        }
    }
    let combos = combos(config);
    if combos.is_empty() || config.buckets.is_empty() {
        return Ok(());
    }
    for &m in &config.populations {
        let blocks: Vec<Block> = (0..config.repetitions)
            .into_par_iter()
            .map(|rep| Block::new(config, source.as_deref(), m, rep as u64))
            .collect::<Result<_>>()?;
        let jobs: Vec<(usize, usize)> = (0..combos.len())
            .flat_map(|c| (0..blocks.len()).map(move |r| (c, r)))
            .collect();
        let results: Vec<CellRows> = jobs
            .par_iter()
            .map(|&(c, r)| run_cell(config, &blocks[r], &combos[c]))
            .collect();
        // jobs are combo-major, so each combo owns a contiguous run of reps
        for per_combo in results.chunks(blocks.len()) {
            for bi in 0..config.buckets.len() {
                for cell in per_combo {
                    cell.by_bucket[bi].iter().cloned().for_each(&mut sink);
                }
            }
            for cell in per_combo {
                cell.unbucketed.iter().cloned().for_each(&mut sink);
            }
        }
    }
    Ok(())
}

fn load_source(data: &DataSource) -> Result<Option<Arc<Vec<LabeledScore>>>> {
    match data {
        DataSource::Synthetic(_) => Ok(None),
        DataSource::Examples(e) => Ok(Some(e.clone())),
        DataSource::Path(p) => {
            let examples = crate::formats::read_data_file(p).map_err(|e| domain(e.to_string()))?;
            Ok(Some(Arc::new(examples)))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Combo {
    regime: Regime,
    epsilon: Option<f64>,
    height: u32,
}

fn combos(config: &SweepConfig) -> Vec<Combo> {
    let mut out = Vec::new();
    for &regime in &config.regimes {
        let eps: Vec<Option<f64>> = match regime {
            Regime::SecureAgg => vec![None],
            _ => config.epsilons.iter().map(|&e| Some(e)).collect(),
        };
        for epsilon in eps {
            for &height in &config.heights {
                out.push(Combo {
                    regime,
                    epsilon,
                    height,
                });
            }
        }
    }
    out
}

/// Data and ground truth for one `(M, rep)`.
struct Block {
    m: usize,
    rep: u64,
    shards: Vec<ClientShard>,
    exact_auc: std::result::Result<ExactAuc, String>,
    exact_pra: Vec<std::result::Result<ExactPra, String>>,
    calibration: Option<CalibrationData>,
}

struct CalibrationData {
    shards: Vec<ClientShard>,
    held_out: Vec<LabeledScore>,
}

impl Block {
    fn new(
        config: &SweepConfig,
        source: Option<&Vec<LabeledScore>>,
        m: usize,
        rep: u64,
    ) -> Result<Self> {
        let data_seed = derive_seed(config.seed, &[tag("data"), m as u64, rep]);
        let examples = match (&config.data, source) {
            (DataSource::Synthetic(s), _) => gen_well_behaved(m, &s.spec()?, s.balance, data_seed)?,
            (_, Some(all)) if m == all.len() => all.clone(),
            (_, Some(all)) => {
                let mut rng = substream(data_seed, &[tag("subsample")]);
                rand::seq::index::sample(&mut rng, all.len(), m)
                    .iter()
                    .map(|i| all[i])
                    .collect()
            }
            (_, None) => unreachable!("file data is loaded before blocks are built"),
        };
        let split_seed = derive_seed(config.seed, &[tag("split"), m as u64, rep]);
        let shards = split_to_clients(&examples, config.split, split_seed)?;
        let calibration = if config.metrics.iter().any(|m| m.needs_calibration()) {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut substream(data_seed, &[tag("halves")]));
            let half = examples.len() / 2;
            let fit: Vec<_> = order[..half].iter().map(|&i| examples[i]).collect();
            let held_out = order[half..].iter().map(|&i| examples[i]).collect();
            let shards = split_to_clients(
                &fit,
                config.split,
                derive_seed(split_seed, &[tag("calibration")]),
            )?;
            Some(CalibrationData { shards, held_out })
        } else {
            None
        };
        Ok(Block {
            m,
            rep,
            exact_auc: exact_auc(&examples).map_err(|e| e.to_string()),
            exact_pra: config
                .thresholds
                .iter()
                .map(|&t| exact_pra(&examples, t).map_err(|e| e.to_string()))
                .collect(),
            shards,
            calibration,
        })
    }
}

struct CellRows {
    by_bucket: Vec<Vec<SweepResultRow>>,
    unbucketed: Vec<SweepResultRow>,
}

/// Accumulates rows sharing one coordinate.
struct RowSink<'a> {
    base: SweepResultRow,
    rows: &'a mut Vec<SweepResultRow>,
}

impl RowSink<'_> {
    fn push(
        &mut self,
        metric: Metric,
        threshold: Option<f64>,
        estimate: std::result::Result<f64, String>,
        exact: std::result::Result<f64, String>,
        advertised: Option<f64>,
    ) {
        let degenerate = match (&estimate, &exact) {
            (Err(e), _) => Some(e.clone()),
            (Ok(_), Err(e)) => Some(format!("oracle: {e}")),
            _ => None,
        };
        let estimate = estimate.ok();
        let exact = exact.ok();
        let abs_error = estimate.zip(exact).map(|(a, b)| (a - b).abs());
        self.rows.push(SweepResultRow {
            metric,
            threshold,
            estimate,
            exact,
            abs_error,
            advertised_uncertainty: if estimate.is_some() { advertised } else { None },
            degenerate,
            ..self.base.clone()
        });
    }

    /// Rows for every metric at this coordinate, all carrying `error`.
    fn fail_all(&mut self, metrics: &[Metric], thresholds: &[f64], bucketed: bool, error: &str) {
        for &metric in metrics {
            if (metric == Metric::EceBbq) == bucketed {
                continue;
            }
            match metric {
                Metric::Precision | Metric::Recall | Metric::Accuracy => {
                    for &t in thresholds {
                        self.push(
                            metric,
                            Some(t),
                            Err(error.to_string()),
                            Err(String::new()),
                            None,
                        );
                    }
                }
                _ => self.push(
                    metric,
                    None,
                    Err(error.to_string()),
                    Err(String::new()),
                    None,
                ),
            }
        }
    }
}

fn run_cell(config: &SweepConfig, block: &Block, combo: &Combo) -> CellRows {
    let mech_seed = derive_seed(
        config.seed,
        &[
            tag("mechanism"),
            block.m as u64,
            block.rep,
            tag(combo.regime.name()),
            combo.epsilon.map_or(0, f64::to_bits),
            combo.height as u64,
        ],
    );
    let base = SweepResultRow {
        metric: Metric::Auc,
        regime: combo.regime,
        m: block.m,
        b: None,
        h: combo.height,
        epsilon: combo.epsilon,
        threshold: None,
        estimate: None,
        exact: None,
        abs_error: None,
        advertised_uncertainty: None,
        seed: mech_seed,
        wall_ms: None,
        degenerate: None,
    };
    let spec = PrivacySpec::new(combo.regime, combo.epsilon, combo.height, config.fanout)
        .map(|s| s.with_simulation(config.simulation));
    let sources = spec.clone().and_then(|s| {
        HistogramSources::build(&block.shards, &s, config.boundary_budget, mech_seed)
    });
    let cal_sources = block.calibration.as_ref().map(|cal| {
        spec.clone().and_then(|s| {
            HistogramSources::build(
                &cal.shards,
                &s,
                config.boundary_budget,
                derive_seed(mech_seed, &[tag("calibration")]),
            )
        })
    });

    let mut by_bucket = Vec::with_capacity(config.buckets.len());
    for &b in &config.buckets {
        let started = Instant::now();
        let mut rows = Vec::new();
        let mut sink = RowSink {
            base: SweepResultRow {
                b: Some(b),
                ..base.clone()
            },
            rows: &mut rows,
        };
        match &sources {
            Ok(src) => bucket_rows(config, block, src, cal_sources.as_ref(), b, &mut sink),
            Err(e) => sink.fail_all(&config.metrics, &config.thresholds, true, &e.to_string()),
        }
        if config.timing {
            let ms = started.elapsed().as_secs_f64() * 1e3;
            rows.iter_mut().for_each(|r| r.wall_ms = Some(ms));
        }
        by_bucket.push(rows);
    }

    let mut unbucketed = Vec::new();
    if config.metrics.contains(&Metric::EceBbq) {
        let started = Instant::now();
        let mut sink = RowSink {
            base: base.clone(),
            rows: &mut unbucketed,
        };
        let cal = block
            .calibration
            .as_ref()
            .expect("calibration data exists when calibrating");
        let k = config.ece_bins.unwrap_or(20);
        let est = match cal_sources.as_ref().expect("calibration sources exist") {
            Ok(src) => {
                let (pos, neg) = src.counts();
                let total = pos.population_total().value + neg.population_total().value;
                calibrate_bbq(pos, neg, total, &config.bbq)
                    .and_then(|map| held_out_ece(&map, &cal.held_out, k, config.ece_binning))
                    .map_err(|e| e.to_string())
            }
            Err(e) => Err(e.to_string()),
        };
        sink.push(Metric::EceBbq, None, est, Ok(0.0), None);
        if config.timing {
            let ms = started.elapsed().as_secs_f64() * 1e3;
            unbucketed.iter_mut().for_each(|r| r.wall_ms = Some(ms));
        }
    }
    CellRows {
        by_bucket,
        unbucketed,
    }
}

fn bucket_rows(
    config: &SweepConfig,
    block: &Block,
    sources: &HistogramSources,
    cal_sources: Option<&Result<HistogramSources>>,
    b: usize,
    sink: &mut RowSink,
) {
    let hist = match sources.histogram(b, &config.histogram) {
        Ok(h) => h,
        Err(e) => {
            let msg = e.to_string();
            let metrics: Vec<Metric> = config
                .metrics
                .iter()
                .copied()
                .filter(|m| !m.needs_calibration())
                .collect();
            sink.fail_all(&metrics, &config.thresholds, true, &msg);
            return calibration_rows(config, block, cal_sources, b, sink);
        }
    };
    if config.metrics.contains(&Metric::Auc) {
        let exact = block
            .exact_auc
            .as_ref()
            .map(|a| a.half_ties)
            .map_err(Clone::clone);
        match auc_histogram(&hist) {
            Ok(a) => sink.push(
                Metric::Auc,
                None,
                Ok(a.value),
                exact,
                Some(a.bucketization_halfwidth + a.noise_variance.sqrt()),
            ),
            Err(e) => sink.push(Metric::Auc, None, Err(e.to_string()), exact, None),
        }
    }
    for (ti, &t) in config.thresholds.iter().enumerate() {
        let est = pra_threshold(&hist, t);
        for metric in [Metric::Precision, Metric::Recall, Metric::Accuracy] {
            if !config.metrics.contains(&metric) {
                continue;
            }
            let exact = match &block.exact_pra[ti] {
                Ok(p) => match metric {
                    Metric::Precision => p.precision.clone().map_err(|d| d.to_string()),
                    Metric::Recall => p.recall.clone().map_err(|d| d.to_string()),
                    _ => Ok(p.accuracy),
                },
                Err(e) => Err(e.clone()),
            };
            match &est {
                Ok(p) => {
                    let value = match metric {
                        Metric::Precision => &p.precision,
                        Metric::Recall => &p.recall,
                        _ => &p.accuracy,
                    };
                    let value = value.clone().map_err(|d| d.to_string());
                    sink.push(metric, Some(t), value, exact, Some(p.threshold_slack));
                }
                Err(e) => sink.push(metric, Some(t), Err(e.to_string()), exact, None),
            }
        }
    }
    calibration_rows(config, block, cal_sources, b, sink);
}

fn calibration_rows(
    config: &SweepConfig,
    block: &Block,
    cal_sources: Option<&Result<HistogramSources>>,
    b: usize,
    sink: &mut RowSink,
) {
    if !config.metrics.contains(&Metric::Ece) {
        return;
    }
    let cal = block
        .calibration
        .as_ref()
        .expect("calibration data exists when calibrating");
    let k = config.ece_bins.unwrap_or(b);
    let est = match cal_sources.expect("calibration sources exist") {
        Ok(src) => src
            .histogram(b, &config.histogram)
            .and_then(|h| calibrate_histogram(&h, None))
            .and_then(|map| held_out_ece(&map, &cal.held_out, k, config.ece_binning))
            .map_err(|e| e.to_string()),
        Err(e) => Err(e.to_string()),
    };
    sink.push(Metric::Ece, None, est, Ok(0.0), None);
}

/// ECE of a calibration map on held-out examples.
pub fn held_out_ece(
    map: &CalibrationMap,
    held_out: &[LabeledScore],
    bins: usize,
    binning: EceBinning,
) -> Result<f64> {
    let preds: Vec<(f64, bool)> = held_out
        .iter()
        .map(|e| (apply_calibration(map, e.score()), e.label().is_positive()))
        .collect();
    Ok(ece_with(&preds, bins, binning)?.ece)
}
