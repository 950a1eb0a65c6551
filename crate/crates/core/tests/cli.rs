//! Command-line behaviour: output formats, exit codes, round trips.

use std::path::Path;
use std::process::{Command, Output};

use fedeval::calibration::{CalibrationMap, EceReport};
use fedeval::formats::{read_data_file, SCHEMA_VERSION};
use serde_json::Value;

fn fedeval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedeval"))
        .args(args)
        .output()
        .unwrap()
}

fn gen(dir: &Path, m: &str) -> String {
    let path = dir.join("data.csv");
    let out = fedeval(&[
        "gen-data",
        "--m",
        m,
        "--lipschitz",
        "1.5",
        "--seed",
        "3",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    path.to_str().unwrap().to_string()
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const REQUIRED: [&str; 12] = [
    "metric",
    "regime",
    "M",
    "B",
    "h",
    "epsilon",
    "estimate",
    "exact",
    "abs_error",
    "advertised_uncertainty",
    "seed",
    "wall_ms",
];

/// Every row carries the required keys and nothing outside the schema.
fn check_schema(rows: &[Value]) {
    assert_eq!(rows[0], serde_json::json!({ "schema": SCHEMA_VERSION }));
    for row in &rows[1..] {
        let obj = row.as_object().unwrap();
        for key in REQUIRED {
            assert!(obj.contains_key(key), "missing {key} in {row}");
        }
        for key in obj.keys() {
            assert!(
                REQUIRED.contains(&key.as_str()) || key == "threshold" || key == "degenerate",
                "unexpected {key}"
            );
        }
        let metric = obj["metric"].as_str().unwrap();
        assert_eq!(
            obj.contains_key("threshold"),
            matches!(metric, "precision" | "recall" | "accuracy")
        );
    }
}

#[test]
fn gen_data_round_trips_through_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "500");
    assert_eq!(read_data_file(Path::new(&data)).unwrap().len(), 500);
    for regime in [["secure_agg", ""], ["dist_dp", "1"], ["local_dp", "4"]] {
        let mut args = vec![
            "evaluate",
            "--data",
            &data,
            "--regime",
            regime[0],
            "--seed",
            "9",
            "--thresholds",
            "0.2,0.6",
        ];
        if !regime[1].is_empty() {
            args.extend(["--epsilon", regime[1]]);
        }
        let out = fedeval(&args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let rows = json_lines(&out);
        assert_eq!(rows.len(), 1 + 1 + 3 * 2);
        check_schema(&rows);
    }
}

#[test]
fn secure_evaluate_matches_exact_values_within_advertised_slack() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "2000");
    let out = fedeval(&[
        "evaluate",
        "--data",
        &data,
        "--regime",
        "secure_agg",
        "--seed",
        "1",
        "--buckets",
        "25",
    ]);
    for row in &json_lines(&out)[1..] {
        if row["metric"] == "auc" {
            assert!(
                row["abs_error"].as_f64().unwrap()
                    <= row["advertised_uncertainty"].as_f64().unwrap()
            );
        }
    }
}

#[test]
fn sweep_output_follows_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sweep.toml");
    std::fs::write(
        &config,
        "seed = 4\npopulations = [400]\nbuckets = [4, 10]\nregimes = [\"secure_agg\", \"local_dp\"]\n\
         repetitions = 2\nthresholds = [0.5]\n\
         metrics = [\"auc\", \"precision\", \"recall\", \"accuracy\", \"ece\", \"ece_bbq\"]\n\
         [data.synthetic]\nlipschitz = 1.0\n",
    )
    .unwrap();
    let out = fedeval(&["sweep", "--config", config.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = json_lines(&out);
    // 2 combos x 2 reps x (2 bucket counts x 5 rows + 1 bbq row)
    assert_eq!(rows.len(), 1 + 2 * 2 * (2 * 5 + 1));
    check_schema(&rows);

    let over = fedeval(&["sweep", "--config", config.to_str().unwrap(), "--seed", "5"]);
    assert!(over.status.success());
    assert_ne!(over.stdout, out.stdout);
}

#[test]
fn calibrate_emits_a_valid_map_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "3000");
    for extra in [
        vec![],
        vec!["--bbq"],
        vec!["--equal-frequency", "--ece-bins", "7"],
    ] {
        let mut args = vec![
            "calibrate",
            "--data",
            &data,
            "--regime",
            "dist_dp",
            "--epsilon",
            "2",
            "--seed",
            "6",
        ];
        args.extend(extra.iter().copied());
        let out = fedeval(&args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        let map: CalibrationMap = serde_json::from_value(v["calibration_map"].clone()).unwrap();
        assert!((map.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let report: EceReport = serde_json::from_value(v["ece_report"].clone()).unwrap();
        assert_eq!(report.ece, report.recompute());
        assert_eq!(report.bins.len(), report.k);
    }
}

#[test]
fn failures_use_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "50");
    let code = |args: &[&str]| fedeval(args).status.code().unwrap();

    assert_eq!(
        code(&[
            "evaluate",
            "--data",
            "/nonexistent.csv",
            "--regime",
            "secure_agg",
            "--seed",
            "1"
        ]),
        2
    );
    assert_eq!(
        code(&["evaluate", "--data", &data, "--regime", "dist_dp", "--seed", "1"]),
        1
    );
    assert_eq!(
        code(&["evaluate", "--data", &data, "--regime", "secure_agg"]),
        1
    );
    assert_eq!(
        code(&["evaluate", "--data", &data, "--regime", "bogus", "--seed", "1"]),
        1
    );

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "score,label\n0.5,1\n1.2,0\n").unwrap();
    let out = fedeval(&[
        "evaluate",
        "--data",
        bad.to_str().unwrap(),
        "--regime",
        "secure_agg",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "seed = 1\nbukets = [4]\n[data.synthetic]\nlipschitz = 1.0\n",
    )
    .unwrap();
    let out = fedeval(&["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bukets"));

    std::fs::write(
        &cfg,
        "seed = 1\npopulations = [51]\n[data]\npath = \"data.csv\"\n",
    )
    .unwrap();
    assert_eq!(code(&["sweep", "--config", cfg.to_str().unwrap()]), 1);
}
