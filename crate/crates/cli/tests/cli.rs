use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use codamed::io::{parse_counts_csv, parse_metadata_csv, join_cohort, parse_sbp_csv};
use codamed::simgen::TruePathCoefficients;

const TAXONOMY: &str = "part,M1,M2,M3,M4
A,1,1,0,0
B,1,-1,0,0
C,-1,0,1,0
D,-1,0,-1,1
E,-1,0,-1,-1
";

fn codamed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codamed")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn sbp_validate_reports_shape() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("sbp.csv");
    fs::write(&m, TAXONOMY).unwrap();
    let o = codamed(&["sbp", "validate", path(&m)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "valid: 5 parts, 4 balances");
}

#[test]
fn sbp_validate_rejects_broken_tree() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("sbp.csv");
    fs::write(&m, TAXONOMY.replace("D,-1,0,-1,1", "D,-1,0,0,1")).unwrap();
    let o = codamed(&["sbp", "validate", path(&m)]);
    assert_eq!(o.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "sbp");
    assert!(err["message"].as_str().unwrap().len() > 0);
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(codamed(&["transform", "--counts"]).status.code(), Some(2));
    assert_eq!(codamed(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn transform_uniform_rows_gives_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("sbp.csv");
    let c = dir.path().join("counts.csv");
    fs::write(&m, TAXONOMY).unwrap();
    fs::write(&c, "sample,A,B,C,D,E\ns1,7,7,7,7,7\ns2,1,1,1,1,1\ns3,120,120,120,120,120\n").unwrap();
    let o = codamed(&["transform", "--counts", path(&c), "--sbp", path(&m)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sample,M1,M2,M3,M4"));
    let mut rows = 0;
    for line in lines {
        rows += 1;
        for v in line.split(',').skip(1) {
            assert_eq!(v.parse::<f64>().unwrap().abs(), 0.0, "{line}");
        }
    }
    assert_eq!(rows, 3);
}

#[test]
fn transform_reorders_columns_by_part_label() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("sbp.csv");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&m, TAXONOMY).unwrap();
    fs::write(&a, "sample,A,B,C,D,E\ns1,1,2,3,4,5\n").unwrap();
    fs::write(&b, "sample,E,D,C,B,A\ns1,5,4,3,2,1\n").unwrap();
    let x = codamed(&["transform", "--counts", path(&a), "--sbp", path(&m)]);
    let y = codamed(&["transform", "--counts", path(&b), "--sbp", path(&m)]);
    assert!(x.status.success() && y.status.success());
    assert_eq!(x.stdout, y.stdout);
}

#[test]
fn experiment_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("scenario1.json");
    fs::write(
        &plan,
        r#"{"cells": [{"scenario": "scenario1", "alpha_s": 1, "theta": 0}], "mc_reps": 20000}"#,
    )
    .unwrap();
    let run = |out: &str, threads: &str| {
        let out = dir.path().join(out);
        let o = codamed(&[
            "experiment", "--plan", path(&plan), "--out", path(&out),
            "--replicates", "200", "--seed", "42", "--threads", threads, "--write-replicates",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", "1");
    let b = run("b", "3");
    for f in ["summary.csv", "diagnostics.csv", "truth.json", "replicates.csv"] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn simulate_then_mediate_recovers_truth() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.csv");
    let meta = dir.path().join("meta.csv");
    let sbp = dir.path().join("sbp.csv");
    let truth = dir.path().join("truth.json");
    let sim = |seed: &str| {
        codamed(&[
            "simulate", "--preset", "scenario1", "--out", path(&counts), "--meta-out", path(&meta),
            "--sbp-out", path(&sbp), "--truth-out", path(&truth), "--seed", seed, "--mc-reps", "20000",
        ])
    };
    let o = sim("5");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(&counts).unwrap();
    assert!(sim("5").status.success());
    assert_eq!(first, fs::read(&counts).unwrap());

    let t: TruePathCoefficients = serde_json::from_str(&fs::read_to_string(&truth).unwrap()).unwrap();
    let o = codamed(&[
        "mediate", "--counts", path(&counts), "--meta", path(&meta), "--sbp", path(&sbp),
        "--shared-gamma", "--format", "json",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let cie = est["cie"].as_array().unwrap();
    assert_eq!(cie.len(), 4);
    for (k, c) in cie.iter().enumerate() {
        let point = c["cie"]["point"].as_f64().unwrap();
        let se = c["cie"]["se"].as_f64().unwrap();
        assert!((point - t.cie[k]).abs() <= 3.0 * se, "CIE_{k}: {point} vs {} (SE {se})", t.cie[k]);
    }
    let oie = &est["oie"];
    assert!((oie["point"].as_f64().unwrap() - t.oie()).abs() <= 3.0 * oie["se"].as_f64().unwrap());

    // the written files parse back into a cohort
    let c = parse_counts_csv(&fs::read_to_string(&counts).unwrap()).unwrap();
    let m = parse_metadata_csv(&fs::read_to_string(&meta).unwrap()).unwrap();
    assert_eq!(join_cohort(&c, &m).unwrap().len(), 1000);
    assert_eq!(parse_sbp_csv(&fs::read_to_string(&sbp).unwrap()).unwrap().num_balances(), 4);
}

#[test]
fn mediate_csv_table_layout() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.csv");
    let sbp = dir.path().join("sbp.csv");
    let o = codamed(&[
        "simulate", "--preset", "scenario2", "--out", path(&counts), "--sbp-out", path(&sbp),
        "--seed", "9", "--mc-reps", "5000", "--n", "400",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let meta = dir.path().join("counts.meta.csv");
    assert!(meta.exists());
    let o = codamed(&["mediate", "--counts", path(&counts), "--meta", path(&meta), "--sbp", path(&sbp), "--ci", "0.95"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let effects: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(effects, ["TE", "NDE", "OIE", "CIE", "CIE", "CIE", "CIE"]);

    let bad = codamed(&["mediate", "--counts", path(&counts), "--meta", path(&meta), "--sbp", path(&sbp), "--ci", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn thread_env_must_be_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("p.json");
    fs::write(&plan, r#"{"cells": [{"scenario": "scenario1"}], "replicates": 2, "mc_reps": 100}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_codamed"))
        .args(["experiment", "--plan", path(&plan), "--out", path(&dir.path().join("o"))])
        .env("CODAMED_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
