use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_balancekit"))
        .args(args)
        .env_remove("BK_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// splitmix64 stream mapped to (0, 1).
struct Stream(u64);

impl Stream {
    fn uniform(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        ((z >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    fn normal(&mut self) -> f64 {
        let (a, b) = (self.uniform(), self.uniform());
        (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos()
    }
}

/// Observational data with logistic selection on x1, x2; `pre` is an
/// untreated metric and `y` has a +1 effect. With `infeasible`, column `gap`
/// puts every treated unit above every control.
fn write_data(path: &Path, n: usize, infeasible: bool) {
    let mut rng = Stream(17);
    let mut s = String::from("unit_id,treatment,x1,x2");
    if infeasible {
        s.push_str(",gap");
    }
    s.push_str(",pre,y\n");
    for i in 0..n {
        let (x1, x2) = (rng.normal(), rng.normal());
        let p = 1.0 / (1.0 + (0.6 - 0.5 * x1 + 0.3 * x2).exp());
        let t = (rng.uniform() < p) as u8;
        let pre = 2.0 + x1 + 0.5 * x2 + 0.1 * rng.normal();
        let y = pre + t as f64;
        write!(s, "u{i},{t},{x1},{x2}").unwrap();
        if infeasible {
            let g = rng.uniform() + if t == 1 { 2.0 } else { 0.0 };
            write!(s, ",{g}").unwrap();
        }
        writeln!(s, ",{pre},{y}").unwrap();
    }
    fs::write(path, s).unwrap();
}

// Histogram overlap of two same-distribution samples of this size is
// itself around 0.1, so the overlap threshold is relaxed here.
const BASE_CONFIG: &str = "data = data.csv
outcomes = y
validation_outcomes = pre
bootstrap_replicates = 100
shard_rows = 64
";

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let p = dir.join("analysis.conf");
    let overlap = if extra.contains("overlap_threshold") { "" } else { "overlap_threshold = 0.3\n" };
    fs::write(&p, format!("{BASE_CONFIG}{overlap}{extra}"))
    .unwrap();
    p
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report/summary.json")).unwrap()).unwrap()
}

#[test]
fn analyze_succeeds_on_balanced_data() {
    let dir = tempfile::tempdir().unwrap();
    write_data(&dir.path().join("data.csv"), 600, false);
    let conf = write_config(dir.path(), "");
    let o = bk(&["analyze", "--config", conf.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = summary(dir.path());
    assert_eq!(r["schema_version"], "balancekit.report/1");
    assert_eq!(r["status"], "ok");
    assert_eq!(r["solver"]["converged"], true);
    assert_eq!(r["balance_check"]["passed"], true);
    let post = &r["post_treatment"][0];
    assert!((post["difference"].as_f64().unwrap() - 1.0).abs() < 0.05, "{post}");
    for f in ["summary.json", "timeseries.csv", "weights.csv", "effective.conf"] {
        assert!(dir.path().join("report").join(f).exists(), "{f} missing");
    }
}

#[test]
fn infeasible_covariate_exits_with_balance_failure() {
    let dir = tempfile::tempdir().unwrap();
    write_data(&dir.path().join("data.csv"), 600, true);
    let conf = write_config(dir.path(), "max_iterations = 500\n");
    let o = bk(&["analyze", "--config", conf.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let r = summary(dir.path());
    assert_eq!(r["status"], "balance_check_failed");
    assert!(r["intervals_skipped"].is_string());
    let named = r["balance_check"]["violations"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v["covariate"] == "gap");
    assert!(named, "{}", r["balance_check"]);
    let worst = r["solver"]["worst_moments"].as_array().unwrap();
    assert!(worst.iter().any(|m| m["moment"].as_str().unwrap().contains("gap")), "{worst:?}");
}

#[test]
fn unconverged_but_balanced_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_data(&dir.path().join("data.csv"), 600, false);
    let conf = write_config(dir.path(), "max_iterations = 3\nsmd_threshold = 10\nvariance_ratio_threshold = 10\nks_threshold = 1\noverlap_threshold = 1\nmahalanobis_threshold = 1e6\n");
    let o = bk(&["analyze", "--config", conf.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let r = summary(dir.path());
    assert_eq!(r["status"], "not_converged");
    assert_eq!(r["solver"]["converged"], false);
}

#[test]
fn missing_files_exit_nonzero_with_the_path() {
    let o = bk(&["analyze", "--config", "/no/such/analysis.conf"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/no/such/analysis.conf"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "");
    let o = bk(&["analyze", "--config", conf.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("data.csv"), "{}", stderr(&o));
    assert_eq!(summary(dir.path())["status"], "error");

    let o = bk(&["diagnose", "--data", "/no/such/data.csv", "--weights", "/no/w.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/no/such/data.csv"), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.conf");
    fs::write(&p, "data = data.csv\noutcomes = y\nalpha = 0.1\nalpha = 0.2\n").unwrap();
    let o = bk(&["analyze", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn reports_are_byte_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_data(&dir.path().join("data.csv"), 900, false);
    let conf = write_config(dir.path(), "method = ms\n");
    let mut outputs = Vec::new();
    for w in ["1", "2", "8"] {
        let out = dir.path().join(format!("out{w}"));
        let o = bk(&[
            "--workers",
            w,
            "--ordered-reduce",
            "analyze",
            "--config",
            conf.to_str().unwrap(),
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let files: Vec<Vec<u8>> = ["summary.json", "timeseries.csv", "weights.csv"]
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap())
            .collect();
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn solve_diagnose_estimate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data.csv");
    write_data(&data, 600, false);
    let data = data.to_str().unwrap();
    let shards = d.join("shards");
    let o = bk(&["ingest", "--data", data, "--outcomes", "pre,y", "--shard-rows", "100", "--out", shards.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let shards = shards.to_str().unwrap();

    let w = d.join("w.csv");
    let meta = d.join("meta.json");
    let o = bk(&[
        "solve", "--data", shards, "--outcomes", "pre,y", "--method", "ms", "--out",
        w.to_str().unwrap(), "--metadata", meta.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: Value = serde_json::from_str(&fs::read_to_string(&meta).unwrap()).unwrap();
    assert_eq!(m["converged"], true);
    assert!(m["final_residual"].as_f64().unwrap() <= 1e-4);
    assert_eq!(m["residual_trace"].as_array().unwrap().len() as u64, m["iterations"].as_u64().unwrap());

    let o = bk(&[
        "diagnose", "--data", shards, "--outcomes", "pre,y", "--weights", w.to_str().unwrap(),
        "--thresholds", "overlap=0.3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let diag: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(diag["balance"]["summary"]["max_smd"].as_f64().unwrap() < 1e-3);
    assert!(diag["stability"]["ess_ratio"].as_f64().unwrap() > 0.0);

    let o = bk(&[
        "--seed", "4", "estimate", "--data", shards, "--outcomes", "pre,y", "--weights",
        w.to_str().unwrap(), "--bootstrap", "100", "--method", "ms",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let est: Value = serde_json::from_slice(&o.stdout).unwrap();
    let est = est.as_array().unwrap();
    assert_eq!(est.len(), 2);
    assert!((est[1]["patt"].as_f64().unwrap() - 1.0).abs() < 0.05);
    let iv = &est[0]["interval"];
    assert!(iv["lower"].as_f64().unwrap() <= 0.0 && iv["upper"].as_f64().unwrap() >= 0.0, "{iv}");
}

#[test]
fn ipw_tuning_report_lists_every_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    write_data(&data, 400, false);
    let tr = dir.path().join("tuning.json");
    let o = bk(&[
        "solve", "--data", data.to_str().unwrap(), "--outcomes", "pre,y", "--method", "ipw", "--tune",
        "--out", dir.path().join("w.csv").to_str().unwrap(), "--tuning-report", tr.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t: Value = serde_json::from_str(&fs::read_to_string(&tr).unwrap()).unwrap();
    let grid = balancekit::baselines::TuningGrid::default();
    let expect = grid.c.len() * grid.l1_ratio.len() * grid.folds.len();
    assert_eq!(t["points"].as_array().unwrap().len(), expect);
}

#[test]
fn simulate_writes_replications_and_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = bk(&[
        "--seed", "1", "simulate", "--n", "1000", "--reps", "2", "--methods", "eb,ipw",
        "--out-dir", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("replications.csv")).unwrap();
    // 2 replications x 2 methods x 3 outcomes plus the header
    assert_eq!(csv.lines().count(), 13);
    let s: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["methods"].as_array().unwrap().len(), 2);

    let ds = dir.path().join("one.csv");
    let o = bk(&["simulate", "--n", "500", "--dataset-out", ds.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&ds).unwrap();
    assert_eq!(text.lines().count(), 501);
    assert!(text.starts_with("unit_id,treatment,"));
}
