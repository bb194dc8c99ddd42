use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dpfed_core::accountant::epsilon_curve;

const CONFIG: &str = r#"
seeds = [1, 2, 3]
methods = ["C", "CDP", "F", "FPDP", "DOPAMINE"]
out_dir = "out"

[dataset]
source = "synthetic"
samples_per_hospital = 40
test_samples = 200
features = 4
classes = 3
separation = 2.5

[training]
q = 0.2
sigma = 1.5
learning_rate = 0.1
max_rounds = 8
epsilon = 3.0
hospitals = 4
local_epochs = 2

[method.FPDP]
sigma = 3.0
"#;

fn dpfed(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpfed"))
        .args(args)
        .current_dir(dir)
        .env("DPFED_LOG", "warn")
        .output()
        .expect("spawn dpfed")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), config).unwrap();
    dir
}

fn read_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.deserialize().map(|row| row.unwrap()).collect()
}

#[test]
fn rerun_is_byte_identical() {
    let dir = setup(CONFIG);
    let first = dpfed(&["run", "--config", "exp.toml"], dir.path());
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let names = ["metrics_C.csv", "metrics_CDP.csv", "metrics_F.csv", "metrics_FPDP.csv", "metrics_DOPAMINE.csv", "summary.csv", "final.csv"];
    let before: Vec<Vec<u8>> = names.iter().map(|n| fs::read(dir.path().join("out").join(n)).unwrap()).collect();
    assert!(dpfed(&["run", "--config", "exp.toml"], dir.path()).status.success());
    for (n, b) in names.iter().zip(&before) {
        assert_eq!(&fs::read(dir.path().join("out").join(n)).unwrap(), b, "{n} changed");
    }
}

#[test]
fn summary_matches_recomputation_from_raw_rows() {
    let dir = setup(CONFIG);
    assert!(dpfed(&["run", "--config", "exp.toml"], dir.path()).status.success());
    let out = dir.path().join("out");
    let mut groups: BTreeMap<(String, usize), Vec<(f64, f64, Option<f64>)>> = BTreeMap::new();
    for label in ["C", "CDP", "F", "FPDP", "DOPAMINE"] {
        for row in read_rows(&out.join(format!("metrics_{label}.csv"))) {
            let eps = row["epsilon_hat"].parse::<f64>().ok();
            assert_eq!(eps.is_some(), ["CDP", "FPDP", "DOPAMINE"].contains(&label));
            groups
                .entry((row["method"].clone(), row["round"].parse().unwrap()))
                .or_default()
                .push((row["test_accuracy"].parse().unwrap(), row["train_loss"].parse().unwrap(), eps));
        }
    }
    let summary = read_rows(&out.join("summary.csv"));
    assert_eq!(summary.len(), groups.len());
    for row in summary {
        let key = (row["method"].clone(), row["round"].parse::<usize>().unwrap());
        let vals = &groups[&key];
        let n = vals.len() as f64;
        let stats = |xs: Vec<f64>| {
            let m = xs.iter().sum::<f64>() / n;
            let s = if xs.len() > 1 {
                (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (m, s)
        };
        let get = |k: &str| row[k].parse::<f64>().unwrap();
        assert_eq!(row["seeds"].parse::<usize>().unwrap(), vals.len());
        let (am, as_) = stats(vals.iter().map(|v| v.0).collect());
        let (lm, ls) = stats(vals.iter().map(|v| v.1).collect());
        for (got, want) in [(get("accuracy_mean"), am), (get("accuracy_std"), as_), (get("train_loss_mean"), lm), (get("train_loss_std"), ls)] {
            assert!((got - want).abs() <= 1e-12, "{key:?}: {got} vs {want}");
        }
        if vals[0].2.is_some() {
            let (em, _) = stats(vals.iter().map(|v| v.2.unwrap()).collect());
            assert!((get("epsilon_mean") - em).abs() <= 1e-12);
        } else {
            assert!(row["epsilon_mean"].is_empty());
        }
    }
}

#[test]
fn cdp_epsilon_column_equals_accountant_table() {
    let dir = setup(CONFIG);
    assert!(dpfed(&["run", "--config", "exp.toml", "--method", "CDP", "--seed", "4"], dir.path()).status.success());
    let rows = read_rows(&dir.path().join("out/metrics_CDP.csv"));
    assert!(!rows.is_empty());
    let table = dpfed(&["accountant", "--q", "0.2", "--sigma", "1.5", "--delta", "1e-4", "-T", "50"], dir.path());
    assert!(table.status.success());
    let text = String::from_utf8(table.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("round,epsilon_hat"));
    let cli: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let lib = epsilon_curve(0.2, 1.5, 1e-4, 50).unwrap();
    for (i, row) in rows.iter().enumerate() {
        let e: f64 = row["epsilon_hat"].parse().unwrap();
        assert_eq!(e, cli[i]);
        assert_eq!(e, lib[i].epsilon_hat);
    }
}

#[test]
fn charts_list_methods_present() {
    let dir = setup(CONFIG);
    assert!(dpfed(&["run", "--config", "exp.toml", "--method", "C", "--method", "DOPAMINE", "--method", "CDP"], dir.path())
        .status
        .success());
    let out = dpfed(&["chart", "--metrics", "out", "--out", "charts"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let acc = fs::read_to_string(dir.path().join("charts/accuracy.svg")).unwrap();
    let eps = fs::read_to_string(dir.path().join("charts/epsilon.svg")).unwrap();
    let labels = |svg: &str| -> Vec<String> {
        svg.split("<text")
            .skip(1)
            .filter_map(|t| t.split('>').nth(1))
            .map(|t| t.split('<').next().unwrap().trim().to_string())
            .filter(|t| ["C", "F", "CDP", "FPDP", "DOPAMINE"].contains(&t.as_str()))
            .collect()
    };
    let mut a = labels(&acc);
    a.sort();
    assert_eq!(a, ["C", "CDP", "DOPAMINE"]);
    let mut e = labels(&eps);
    e.sort();
    assert_eq!(e, ["CDP", "DOPAMINE"]);
    assert!(eps.contains("δ = 1e-4"));
    for label in ["CDP", "DOPAMINE"] {
        let rows = read_rows(&dir.path().join(format!("out/metrics_{label}.csv")));
        let mut by_seed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in rows {
            by_seed.entry(r["seed"].clone()).or_default().push(r["epsilon_hat"].parse().unwrap());
        }
        for curve in by_seed.values() {
            assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}

#[test]
fn chart_without_metrics_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpfed(&["chart", "--metrics", "."], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no metrics"));
}

#[test]
fn missing_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpfed(&["run", "--config", "absent.toml", "--out", "res"], dir.path());
    assert!(!out.status.success());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn invalid_config_names_line_and_field() {
    let dir = setup(&CONFIG.replace("max_rounds = 8", "max_round = 8"));
    let out = dpfed(&["run", "--config", "exp.toml"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("max_round") && err.contains("line 18"), "{err}");
    assert!(!dir.path().join("out").exists());
    let dir = setup(&CONFIG.replace("epsilon = 3.0", "epsilon = -3.0"));
    let out = dpfed(&["run", "--config", "exp.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ε"));
}

#[test]
fn failing_run_flushes_partial_metrics() {
    // weights outgrow the fixed-point range a few rounds in
    let cfg = CONFIG.replace("learning_rate = 0.1", "learning_rate = 3.0").replace("max_rounds = 8", "max_rounds = 30");
    let dir = setup(&format!("{cfg}\n[secure]\nmode = \"on\"\n"));
    let out = dpfed(&["run", "--config", "exp.toml", "--method", "DOPAMINE", "--seed", "1"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("runs failed"));
    let rows = read_rows(&dir.path().join("out/metrics_DOPAMINE.csv"));
    assert!(!rows.is_empty() && rows.len() < 30, "{} rows", rows.len());
}

#[test]
fn secure_flag_runs_audited_aggregation() {
    let dir = setup(CONFIG);
    let out = dpfed(
        &["run", "--config", "exp.toml", "--method", "DOPAMINE", "--seed", "2", "--secure", "plaintext-audit", "--transport", "tcp", "--out", "audit"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_rows(&dir.path().join("audit/metrics_DOPAMINE.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        let gap: f64 = r["audit_deviation"].parse().unwrap();
        assert!(gap <= 5e-4);
    }
}

#[test]
fn demos_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpfed(&["keygen-demo", "--toy-degree", "16"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("round trip exact    true"));
    let out = dpfed(&["secure-agg-demo", "--hospitals", "3", "--len", "5000"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("secret key on server false"));
}
