use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use fedeval::calibration::{
    apply_calibration, calibrate_bbq, calibrate_histogram, ece_with, BbqConfig, EceBinning,
};
use fedeval::formats::{self, FormatError};
use fedeval::harness::{
    gen_well_behaved, run_sweep_with, split_to_clients, DataSource, Metric, SplitPolicy,
    SweepConfig,
};
use fedeval::hierarchy::{BoundaryBudget, HistogramOptions, HistogramSources};
use fedeval::rng::{derive_seed, substream, tag};
use fedeval::{LabeledScore, PrivacySpec, Regime, Simulation, Spike, WellBehavedSpec};

/// Federated classifier evaluation and calibration under secure
/// aggregation, distributed DP and local DP.
#[derive(Parser)]
#[command(name = "fedeval", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate AUC and precision/recall/accuracy for one data file.
    Evaluate(EvaluateArgs),
    /// Run a sweep described by a TOML config.
    Sweep(SweepArgs),
    /// Write synthetic well-behaved data.
    GenData(GenDataArgs),
    /// Fit a calibration map on half the data and report ECE on the rest.
    Calibrate(CalibrateArgs),
}

#[derive(clap::Args)]
struct MechanismArgs {
    /// secure_agg, dist_dp or local_dp.
    #[arg(long, value_parser = parse_regime)]
    regime: Regime,
    /// Privacy parameter; required for the DP regimes.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Hierarchy height.
    #[arg(long, default_value_t = 10)]
    height: u32,
    #[arg(long, default_value_t = 2)]
    fanout: u32,
    /// Draw every client's noise individually instead of the aggregate.
    #[arg(long)]
    per_client: bool,
    /// Seed for every random choice.
    #[arg(long)]
    seed: u64,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    mech: MechanismArgs,
    /// Bucket counts (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "100")]
    buckets: Vec<usize>,
    /// Decision thresholds (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    thresholds: Vec<f64>,
    /// Client split: one-per-client, skewed:RHO or variable:MAX.
    #[arg(long, default_value = "one-per-client", value_parser = parse_split)]
    split: SplitPolicy,
}

#[derive(clap::Args)]
struct SweepArgs {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Number of examples.
    #[arg(long)]
    m: usize,
    /// Slope bound of the densities between spikes.
    #[arg(long, default_value_t = 1.0)]
    lipschitz: f64,
    /// Probability that an example is positive.
    #[arg(long, default_value_t = 0.5)]
    balance: f64,
    /// Point mass LOCATION:POSITIVE_MASS:NEGATIVE_MASS (repeatable).
    #[arg(long = "spike", value_parser = parse_spike)]
    spikes: Vec<Spike>,
    #[arg(long, default_value_t = 0.01)]
    spike_threshold: f64,
    #[arg(long)]
    seed: u64,
    /// Output file; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CalibrateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    mech: MechanismArgs,
    /// Histogram buckets; ignored with --bbq.
    #[arg(long, default_value_t = 20)]
    buckets: usize,
    /// Mix several bucket counts by their BBQ score.
    #[arg(long)]
    bbq: bool,
    /// Evaluation bins for the ECE report.
    #[arg(long, default_value_t = 20)]
    ece_bins: usize,
    /// Use equal-frequency evaluation bins.
    #[arg(long)]
    equal_frequency: bool,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    Regime::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitPolicy, String> {
    let num = |v: &str| {
        v.parse::<f64>()
            .map_err(|_| format!("bad number `{v}` in split `{s}`"))
    };
    match s.split_once(':') {
        None if s == "one-per-client" => Ok(SplitPolicy::OnePerClient),
        Some(("skewed", rho)) => Ok(SplitPolicy::SkewedByClass { rho: num(rho)? }),
        Some(("variable", max)) => max
            .parse()
            .map(|max_size| SplitPolicy::VariableSize { max_size })
            .map_err(|_| format!("bad size `{max}` in split `{s}`")),
        _ => Err(format!(
            "unknown split `{s}` (one-per-client, skewed:RHO, variable:MAX)"
        )),
    }
}

fn parse_spike(s: &str) -> Result<Spike, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [l, p, n] = parts[..] else {
        return Err(format!(
            "spike `{s}` is not LOCATION:POSITIVE_MASS:NEGATIVE_MASS"
        ));
    };
    let num = |v: &str| {
        v.parse::<f64>()
            .map_err(|_| format!("bad number `{v}` in spike `{s}`"))
    };
    Ok(Spike {
        location: num(l)?,
        positive_mass: num(p)?,
        negative_mass: num(n)?,
    })
}

/// A failure and the exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

/// Usage or configuration error (exit 1).
fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

/// I/O or parse error (exit 2).
fn io(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn format_failure(e: FormatError) -> Failure {
    if e.is_config() {
        usage(e)
    } else {
        io(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::GenData(a) => gen_data(a),
        Command::Calibrate(a) => calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn privacy_spec(m: &MechanismArgs) -> Result<PrivacySpec, Failure> {
    let eps = match (m.regime, m.epsilon) {
        (Regime::SecureAgg, _) => None,
        (_, Some(e)) => Some(e),
        (r, None) => return Err(usage(anyhow!("--epsilon is required for regime {r}"))),
    };
    let spec = PrivacySpec::new(m.regime, eps, m.height, m.fanout).map_err(usage)?;
    Ok(spec.with_simulation(simulation(m)))
}

fn simulation(m: &MechanismArgs) -> Simulation {
    if m.per_client {
        Simulation::PerClient
    } else {
        Simulation::Aggregate
    }
}

fn load(path: &Path) -> Result<Vec<LabeledScore>, Failure> {
    let data = formats::read_data_file(path).map_err(format_failure)?;
    if data.is_empty() {
        return Err(io(anyhow!("{}: no examples", path.display())));
    }
    Ok(data)
}

/// Writes through `f`, treating a closed pipe as success.
fn with_stdout(f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), Failure> {
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match f(&mut out).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other.context("writing output").map_err(io),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let spec = privacy_spec(&a.mech)?;
    let data = load(&a.data)?;
    let mut cfg = SweepConfig::new(DataSource::Examples(Arc::new(data.clone())), a.mech.seed);
    cfg.populations = vec![data.len()];
    cfg.buckets = a.buckets;
    cfg.heights = vec![spec.height()];
    cfg.epsilons = spec.epsilon().into_iter().collect();
    cfg.regimes = vec![spec.regime()];
    cfg.thresholds = a.thresholds;
    cfg.split = a.split;
    cfg.fanout = spec.fanout();
    cfg.simulation = spec.simulation();
    cfg.metrics = vec![
        Metric::Auc,
        Metric::Precision,
        Metric::Recall,
        Metric::Accuracy,
    ];
    cfg.validate().map_err(usage)?;
    run(&cfg)
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let mut cfg = formats::read_sweep_config(&a.config).map_err(format_failure)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let DataSource::Path(p) = &cfg.data {
        let data = load(p)?;
        if let Some(m) = cfg.populations.iter().find(|&&m| m > data.len()) {
            return Err(usage(anyhow!(
                "populations: {m} exceeds the {} examples in {}",
                data.len(),
                p.display()
            )));
        }
        cfg.data = DataSource::Examples(Arc::new(data));
    }
    run(&cfg)
}

fn run(cfg: &SweepConfig) -> Result<(), Failure> {
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut write_err = None;
    let written = formats::write_header(&mut out).and_then(|_| out.flush());
    if let Err(e) = written {
        return broken_pipe_ok(e);
    }
    let result = run_sweep_with(cfg, |row| {
        if write_err.is_none() {
            // flush per row so partial sweeps are inspectable
            if let Err(e) = formats::write_row(&mut out, &row).and_then(|_| out.flush()) {
                write_err = Some(e);
            }
        }
    });
    result.map_err(usage)?;
    match write_err {
        Some(e) => broken_pipe_ok(e),
        None => Ok(()),
    }
}

fn broken_pipe_ok(e: std::io::Error) -> Result<(), Failure> {
    if e.kind() == std::io::ErrorKind::BrokenPipe {
        Ok(())
    } else {
        Err(io(anyhow::Error::new(e).context("writing output")))
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let spec = WellBehavedSpec::new(a.spikes, a.lipschitz, a.spike_threshold).map_err(usage)?;
    let data = gen_well_behaved(a.m, &spec, a.balance, a.seed).map_err(usage)?;
    match a.out {
        Some(path) => {
            let file = std::fs::File::create(&path)
                .with_context(|| format!("creating {}", path.display()))
                .map_err(io)?;
            formats::write_data(BufWriter::new(file), &data)
                .with_context(|| format!("writing {}", path.display()))
                .map_err(io)
        }
        None => with_stdout(|out| formats::write_data(out, &data)),
    }
}

fn calibrate(a: CalibrateArgs) -> Result<(), Failure> {
    let spec = privacy_spec(&a.mech)?;
    let data = load(&a.data)?;
    if data.len() < 2 {
        return Err(usage(anyhow!("calibration needs at least 2 examples")));
    }
    if a.ece_bins == 0 || a.buckets == 0 {
        return Err(usage(anyhow!(
            "--buckets and --ece-bins must be at least 1"
        )));
    }
    let seed = a.mech.seed;
    let mut order: Vec<usize> = (0..data.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut substream(seed, &[tag("halves")]));
    let half = data.len() / 2;
    let fit: Vec<_> = order[..half].iter().map(|&i| data[i]).collect();
    let held_out: Vec<_> = order[half..].iter().map(|&i| data[i]).collect();
    let shards = split_to_clients(&fit, SplitPolicy::OnePerClient, seed).map_err(usage)?;
    let sources = HistogramSources::build(
        &shards,
        &spec,
        BoundaryBudget::Shared,
        derive_seed(seed, &[tag("calibration")]),
    )
    .map_err(usage)?;
    let map = if a.bbq {
        let (pos, neg) = sources.counts();
        let total = pos.population_total().value + neg.population_total().value;
        calibrate_bbq(pos, neg, total, &BbqConfig::default())
    } else {
        sources
            .histogram(a.buckets, &HistogramOptions::default())
            .and_then(|h| calibrate_histogram(&h, None))
    }
    .map_err(usage)?;
    let binning = if a.equal_frequency {
        EceBinning::EqualFrequency
    } else {
        EceBinning::EqualWidth
    };
    let preds: Vec<(f64, bool)> = held_out
        .iter()
        .map(|e| (apply_calibration(&map, e.score()), e.label().is_positive()))
        .collect();
    let report = ece_with(&preds, a.ece_bins, binning).map_err(usage)?;
    let doc = serde_json::json!({ "calibration_map": map, "ece_report": report });
    with_stdout(|out| writeln!(out, "{doc}"))
}
