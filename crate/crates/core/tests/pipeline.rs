//! End-to-end pipeline properties checked against the exact oracles.

use fedeval::calibration::{apply_calibration, bbq_candidates, bbq_weights, calibrate_histogram};
use fedeval::harness::{
    gen_well_behaved, run_sweep, split_to_clients, DataSource, Metric, SplitPolicy, SweepConfig,
    SyntheticData,
};
use fedeval::hierarchy::{
    build_class_hierarchies, BoundaryBudget, HistogramOptions, HistogramSources,
};
use fedeval::metrics::{auc_histogram, pra_threshold};
use fedeval::oracle::exact_pra;
use fedeval::{ClientShard, Label, LabeledScore, PrivacySpec, Regime, WellBehavedSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(m: usize, lipschitz: f64, seed: u64) -> Vec<LabeledScore> {
    gen_well_behaved(m, &WellBehavedSpec::smooth(lipschitz).unwrap(), 0.5, seed).unwrap()
}

fn secure_sources(ex: &[LabeledScore], h: u32) -> HistogramSources {
    let shards = split_to_clients(ex, SplitPolicy::OnePerClient, 0).unwrap();
    HistogramSources::build(
        &shards,
        &PrivacySpec::secure_agg(h),
        BoundaryBudget::Shared,
        0,
    )
    .unwrap()
}

fn sorted(mut v: Vec<LabeledScore>) -> Vec<LabeledScore> {
    v.sort_by(|a, b| {
        a.score()
            .total_cmp(&b.score())
            .then(a.label().cmp(&b.label()))
    });
    v
}

#[test]
fn every_split_preserves_the_multiset() {
    let ex = data(2000, 1.0, 3);
    for policy in [
        SplitPolicy::OnePerClient,
        SplitPolicy::SkewedByClass { rho: 0.2 },
        SplitPolicy::SkewedByClass { rho: 1.0 },
        SplitPolicy::VariableSize { max_size: 7 },
    ] {
        let shards = split_to_clients(&ex, policy, 11).unwrap();
        let union: Vec<LabeledScore> = shards
            .into_iter()
            .flat_map(|s: ClientShard| s.examples)
            .collect();
        assert_eq!(sorted(union), sorted(ex.clone()), "{policy:?}");
    }
}

#[test]
fn thresholded_pra_equals_oracle_at_effective_threshold() {
    let ex = data(10_000, 2.0, 5);
    let src = secure_sources(&ex, 10);
    let hist = src.histogram(50, &HistogramOptions::default()).unwrap();
    for t in [0.05, 0.3, 0.5, 0.77, 0.95] {
        let est = pra_threshold(&hist, t).unwrap();
        let t_eff = est.effective_threshold.unwrap();
        let oracle = exact_pra(&ex, t_eff).unwrap();
        assert!(
            (est.precision.unwrap() - oracle.precision.unwrap()).abs() < 1e-12,
            "t={t}"
        );
        assert!(
            (est.recall.unwrap() - oracle.recall.unwrap()).abs() < 1e-12,
            "t={t}"
        );
        assert!(
            (est.accuracy.unwrap() - oracle.accuracy).abs() < 1e-12,
            "t={t}"
        );
        assert!((t - t_eff).abs() <= est.threshold_slack);
    }
}

#[test]
fn bbq_weights_form_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100 {
        let m = rng.random_range(20..5000);
        let ex = data(m, rng.random_range(0.0..4.0), i);
        let shards = split_to_clients(&ex, SplitPolicy::OnePerClient, 0).unwrap();
        let spec = match i % 3 {
            0 => PrivacySpec::secure_agg(8),
            1 => PrivacySpec::dist_dp(1.0, 8).unwrap(),
            _ => PrivacySpec::local_dp(4.0, 8).unwrap(),
        };
        let (pos, neg) = build_class_hierarchies(&shards, &spec, i).unwrap();
        let w = bbq_weights(&pos, &neg, m as f64).unwrap();
        let cands = bbq_candidates(m as f64, 15).unwrap();
        assert_eq!(w.iter().map(|c| c.0).collect::<Vec<_>>(), cands);
        assert!(w.iter().all(|c| c.1 >= 0.0 && c.1.is_finite()));
        assert!((w.iter().map(|c| c.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn better_separated_scores_have_higher_estimated_auc() {
    let est = |l: f64| {
        let hist = secure_sources(&data(20_000, l, 1), 10)
            .histogram(40, &HistogramOptions::default())
            .unwrap();
        auc_histogram(&hist).unwrap().value
    };
    let (a, b, c) = (est(0.0), est(1.0), est(2.0));
    assert!((a - 0.5).abs() < 0.02, "{a}");
    assert!(a < b && b < c, "{a} {b} {c}");
    // AUC of the linear pair of densities is 1/2 + a/6
    assert!((c - (0.5 + 2.0 / 6.0)).abs() < 0.01, "{c}");
}

#[test]
fn secure_calibration_reproduces_bucket_frequencies() {
    let ex = data(5000, 1.5, 2);
    let hist = secure_sources(&ex, 10)
        .histogram(10, &HistogramOptions::default())
        .unwrap();
    let map = calibrate_histogram(&hist, None).unwrap();
    for i in 0..hist.buckets() {
        let (p, n) = (hist.pos()[i].value, hist.neg()[i].value);
        if p + n == 0.0 {
            continue;
        }
        let inside: Vec<_> = ex
            .iter()
            .filter(|e| hist.bucket_of(e.score()) == i)
            .collect();
        let s = inside[0].score();
        assert_eq!(apply_calibration(&map, s), p / (p + n));
        assert_eq!(
            inside
                .iter()
                .filter(|e| e.label() == Label::Positive)
                .count() as f64,
            p
        );
    }
}

fn small_config() -> SweepConfig {
    let mut cfg = SweepConfig::new(
        DataSource::Synthetic(SyntheticData {
            lipschitz: 1.0,
            balance: 0.5,
            spikes: vec![],
            spike_threshold: 0.01,
        }),
        77,
    );
    cfg.populations = vec![300, 900];
    cfg.buckets = vec![5, 20];
    cfg.heights = vec![6, 8];
    cfg.epsilons = vec![0.5, 2.0];
    cfg.regimes = vec![Regime::SecureAgg, Regime::DistDp, Regime::LocalDp];
    cfg.thresholds = vec![0.25, 0.5];
    cfg.repetitions = 5;
    cfg.metrics = vec![
        Metric::Auc,
        Metric::Precision,
        Metric::Recall,
        Metric::Accuracy,
        Metric::Ece,
        Metric::EceBbq,
    ];
    cfg
}

#[test]
fn sweep_emits_the_full_grid() {
    let cfg = small_config();
    let rows = run_sweep(&cfg).unwrap();
    // combos: secure_agg x 2 heights + 2 DP regimes x 2 epsilons x 2 heights
    let combos = 2 + 2 * 2 * 2;
    let per_bucket = 1 + 3 * 2 + 1;
    let want = 2 * combos * 5 * (2 * per_bucket + 1);
    assert_eq!(rows.len(), want);
    for r in &rows {
        assert!(r.estimate.is_some() || r.degenerate.is_some());
        assert_eq!(r.b.is_none(), r.metric == Metric::EceBbq);
    }
}

#[test]
fn sweep_is_deterministic_and_seed_sensitive() {
    let cfg = small_config();
    let a = serde_json::to_string(&run_sweep(&cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&run_sweep(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed = 78;
    assert_ne!(
        a,
        serde_json::to_string(&run_sweep(&other).unwrap()).unwrap()
    );
}

#[test]
fn secure_sweep_errors_respect_advertised_bounds() {
    let mut cfg = small_config();
    cfg.regimes = vec![Regime::SecureAgg];
    cfg.metrics = vec![Metric::Auc];
    for r in run_sweep(&cfg).unwrap() {
        assert!(
            r.abs_error.unwrap() <= r.advertised_uncertainty.unwrap() + 1e-12,
            "{r:?}"
        );
    }
}
