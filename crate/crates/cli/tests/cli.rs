use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn netprice(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netprice")).args(args).output().expect("binary runs")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut all = args.to_vec();
    all.extend(["--out", dir.to_str().unwrap()]);
    netprice(&all)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn example1_reaches_the_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["run", "--mode", "example", "--economy", "example1", "--tau", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&dir.path().join("summary.json"));
    assert!(summary["welfare_ratio"].as_f64().unwrap() >= 0.99, "{summary}");
    let steps = summary["steps"].as_u64().unwrap();
    let trajectory = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(trajectory.lines().count() as u64, steps + 1);
    assert!(dir.path().join(format!("outcomes/step-{}.json", steps - 1)).is_file());
    let doc = json(&dir.path().join("economy.json"));
    assert_eq!(doc["n"], 2);
    assert!(doc["phantom"].is_array());
}

#[test]
fn reruns_are_byte_identical() {
    let args = ["run", "--mode", "nonstationary", "--economy", "random:6", "--seed", "11", "--variant", "inp,gradient-descent", "--jobs", "3"];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run_in(a.path(), &args).status.success());
    assert!(run_in(b.path(), &args).status.success());
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.iter().any(|(name, _)| name.ends_with("weeks.csv")));
    assert_eq!(fa, fb);
}

#[test]
fn missing_output_directory_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = netprice(&["run", "--economy", "example1", "--out", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!missing.exists());
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn bad_configuration_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out_dir = dir.path().join("out");
    fs::create_dir(&out_dir).unwrap();
    for text in [r#"{"params": {"beta": 1.5}}"#, r#"{"mode": "example", "economy": {"source": "file", "path": "x.json"}}"#, r#"{"unknown": 1}"#] {
        fs::write(&cfg, text).unwrap();
        let out = run_in(&out_dir, &["run", "--config", cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{text}");
        assert!(fs::read_dir(&out_dir).unwrap().next().is_none(), "{text}");
    }
    let out = run_in(&out_dir, &["run", "--variant", "newton"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_covers_the_requested_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"mode": "sweep-phi", "economy": {"source": "example1"}, "sweep": {"from": 0, "to": 40, "points": 9}}"#).unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir(&out_dir).unwrap();
    assert!(run_in(&out_dir, &["run", "--config", cfg.to_str().unwrap()]).status.success());
    let mut rdr = csv::Reader::from_path(out_dir.join("sweep.csv")).unwrap();
    let phis: Vec<f64> = rdr.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
    assert_eq!(phis, (0..9).map(|k| 5.0 * k as f64).collect::<Vec<_>>());
}

#[test]
fn saved_economies_can_be_rerun() {
    let first = tempfile::tempdir().unwrap();
    assert!(run_in(first.path(), &["run", "--mode", "stationary", "--economy", "example2", "--steps", "3"]).status.success());
    let doc = first.path().join("economy.json");
    let second = tempfile::tempdir().unwrap();
    let arg = format!("file:{}", doc.display());
    let out = run_in(second.path(), &["run", "--mode", "stationary", "--economy", &arg, "--steps", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(first.path().join("trajectory.csv")).unwrap(), fs::read(second.path().join("trajectory.csv")).unwrap());
}

const HEADER: &str =
    "Trip Start Timestamp,Trip Seconds,Trip Miles,Pickup Community Area,Dropoff Community Area,Fare,Additional Charges\n";

/// Twenty Wednesday-morning trips on a three-area ring.
fn mini_csv() -> String {
    let mut s = String::from(HEADER);
    let pairs = [(1, 2), (2, 3), (3, 1), (2, 1), (1, 3)];
    for k in 0..20 {
        let (i, j) = pairs[k % pairs.len()];
        s += &format!("01/02/2019 07:{:02}:00 AM,{},{}.0,{i},{j},{}.25,0\n", k * 2, 600 + 30 * k, 1 + k % 3, 8 + k % 4);
    }
    s
}

#[test]
fn fit_builds_one_economy_per_week() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("trips.csv");
    fs::write(&csv, mini_csv()).unwrap();
    let out_dir = dir.path().join("out");
    fs::create_dir(&out_dir).unwrap();
    let out = netprice(&["fit", "--dataset", csv.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--n", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&out_dir.join("fit-summary.json"));
    assert_eq!(summary["rows"], 20);
    assert_eq!(summary["economies"], 1);
    let doc = json(&out_dir.join("economy-week-0.json"));
    assert_eq!(doc["n"], 3);
    assert!(doc["m"].as_f64().unwrap() > 0.0);

    // the fitted week runs like any other economy
    let run_dir = dir.path().join("run");
    fs::create_dir(&run_dir).unwrap();
    let arg = format!("file:{}", out_dir.join("economy-week-0.json").display());
    let out = run_in(&run_dir, &["run", "--mode", "stationary", "--economy", &arg, "--steps", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn fit_without_areas_yields_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("trips.csv");
    let mut text = String::from(HEADER);
    for _ in 0..12 {
        text += "01/02/2019 07:15:00 AM,600,2.0,,,10,0\n";
    }
    fs::write(&csv, text).unwrap();
    let out = netprice(&["fit", "--dataset", csv.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--n", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&dir.path().join("fit-summary.json"));
    assert_eq!(summary["skipped_missing_area"], 12);
    assert_eq!(summary["rows"], 12);
    assert_eq!(summary["economies"], 0);
}

#[test]
fn fit_names_a_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("trips.csv");
    fs::write(&csv, "Trip Start Timestamp,Fare\n01/02/2019 07:15:00 AM,10\n").unwrap();
    let out = netprice(&["fit", "--dataset", csv.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Trip Seconds"));
    assert!(!dir.path().join("fit-summary.json").exists());
}
