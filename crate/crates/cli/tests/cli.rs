use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_evflex");

fn evflex(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .env_remove("EVFLEX_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

/// A small, fast run: 20 EVs and no offline reference.
const SMALL: [&str; 2] = ["fleet_size=20", "performance_ratio=false"];

#[test]
fn run_writes_bundle_and_passes_invariants() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["run", "--method", "proposed", "--seed", "4", "--out", "o"];
    args.extend(SMALL);
    let out = evflex(tmp.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = tmp.path().join("o/proposed-seed4");
    for f in evflex::harness::BUNDLE_FILES {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    assert!(!dir.join("timing.csv").exists());
}

#[test]
fn every_method_runs() {
    let tmp = TempDir::new().unwrap();
    for m in ["proposed", "b1", "b2", "b3", "opi"] {
        let mut args = vec!["run", "--method", m, "--out", "o"];
        args.extend(SMALL);
        let out = evflex(tmp.path(), &args);
        assert_eq!(code(&out), 0, "{m}: {}", stderr(&out));
        assert!(tmp.path().join(format!("o/{m}-seed0/metrics.csv")).is_file());
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    for out_dir in ["a", "b"] {
        let mut args = vec!["run", "--seed", "11", "--out", out_dir];
        args.extend(SMALL);
        assert_eq!(code(&evflex(tmp.path(), &args)), 0);
    }
    for f in evflex::harness::BUNDLE_FILES {
        let a = fs::read(tmp.path().join("a/proposed-seed11").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b/proposed-seed11").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn env_var_sets_default_output_root() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["run"];
    args.extend(SMALL);
    let out = Command::new(BIN)
        .current_dir(tmp.path())
        .env("EVFLEX_OUT", "from-env")
        .args(&args)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tmp.path().join("from-env/proposed-seed0/metrics.csv").is_file());

    let out = evflex(tmp.path(), &args);
    assert_eq!(code(&out), 0);
    assert!(tmp.path().join("evflex-out/proposed-seed0/metrics.csv").is_file());
}

#[test]
fn override_leaves_config_file_untouched() {
    let tmp = TempDir::new().unwrap();
    let text = "{\n  \"schema_version\": 1,\n  \"control\": { \"flexibility_weight\": 6000 },\n  \"performance_ratio\": false\n}\n";
    let cfg = write_config(tmp.path(), "c.json", text);
    let out = evflex(
        tmp.path(),
        &["run", "--config", &cfg, "--out", "o", "V=12000", "fleet_size=20"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(tmp.path().join("c.json")).unwrap(), text);
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("o/proposed-seed0/config.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["control"]["flexibility_weight"], 12000.0);
}

#[test]
fn unknown_keys_exit_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "{\"schema_version\": 1, \"contrl\": {}}");
    let out = evflex(tmp.path(), &["run", "--config", &cfg]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("contrl"), "{}", stderr(&out));

    let out = evflex(tmp.path(), &["run", "nope=1"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("nope"));
}

#[test]
fn invalid_ranges_exit_4_with_field_and_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        "{\n  \"schema_version\": 1,\n  \"control\": {\n    \"rate_cap_kg_per_h\": -5\n  }\n}\n",
    );
    let out = evflex(tmp.path(), &["run", "--config", &cfg]);
    assert_eq!(code(&out), 4);
    let err = stderr(&out);
    assert!(err.contains("c.json:4:"), "{err}");
    assert!(err.contains("rate_cap_kg_per_h"), "{err}");

    let out = evflex(tmp.path(), &["run", "r=-5"]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("rate_cap_kg_per_h"));

    let out = evflex(tmp.path(), &["run", "--method", "nope"]);
    assert_eq!(code(&out), 4);
    let out = evflex(tmp.path(), &["sweep", "--param", "nope", "--values", "1"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn missing_files_exit_5() {
    let tmp = TempDir::new().unwrap();
    let out = evflex(tmp.path(), &["run", "--config", "absent.json"]);
    assert_eq!(code(&out), 5);

    let cfg = write_config(
        tmp.path(),
        "c.json",
        "{\n  \"schema_version\": 1,\n  \"scenario\": {\n    \"fleet_csv\": \"fleet.csv\"\n  }\n}\n",
    );
    let out = evflex(tmp.path(), &["run", "--config", &cfg]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("c.json:4:"), "{}", stderr(&out));

    let out = evflex(tmp.path(), &["report", "nowhere"]);
    assert_eq!(code(&out), 5);
}

#[test]
fn malformed_json_exits_6() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "{\"schema_version\": 1,");
    assert_eq!(code(&evflex(tmp.path(), &["run", "--config", &cfg])), 6);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&evflex(tmp.path(), &["frobnicate"])), 2);
    assert_eq!(code(&evflex(tmp.path(), &["sweep", "--param", "gamma"])), 2);
    assert_eq!(code(&evflex(tmp.path(), &["run", "--seed", "x"])), 2);
}

#[test]
fn gen_scenario_round_trips_through_run() {
    let tmp = TempDir::new().unwrap();
    let out = evflex(tmp.path(), &["gen-scenario", "--out", "s", "--seed", "2", "fleet_size=15"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let dir = tmp.path().join("s/scenario-seed2");
    for f in ["fleet.csv", "carbon.csv", "arrivals.csv", "config.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let fleet = fs::read_to_string(dir.join("fleet.csv")).unwrap();
    assert_eq!(fleet.lines().count(), 16);
    let carbon = fs::read_to_string(dir.join("carbon.csv")).unwrap();
    assert_eq!(carbon.lines().count(), 289);

    let cfg = "{\n  \"schema_version\": 1,\n  \"scenario\": {\n    \"fleet_csv\": \"scenario-seed2/fleet.csv\",\n    \"carbon\": { \"kind\": \"csv\", \"path\": \"scenario-seed2/carbon.csv\" }\n  },\n  \"performance_ratio\": false\n}\n";
    fs::write(tmp.path().join("s/replay.json"), cfg).unwrap();
    let out = evflex(tmp.path(), &["run", "--config", "s/replay.json", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ev_final = fs::read_to_string(tmp.path().join("o/proposed-seed0/ev_final.csv")).unwrap();
    assert_eq!(ev_final.lines().count(), 16);
}

#[test]
fn sweep_writes_cells_and_summary() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["sweep", "--param", "gamma", "--values", "0.35,0.65", "--reps", "2", "--out", "o"];
    args.extend(SMALL);
    let out = evflex(tmp.path(), &args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cells = fs::read_to_string(tmp.path().join("o/sweep-gamma/cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 5);
    let summary = fs::read_to_string(tmp.path().join("o/sweep-gamma/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn timing_writes_table() {
    let tmp = TempDir::new().unwrap();
    let out = evflex(tmp.path(), &["-q", "timing", "--sizes", "20,40", "--out", "t"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out.stdout.is_empty());
    let table = fs::read_to_string(tmp.path().join("t/timing.csv")).unwrap();
    assert!(table.starts_with("fleet_size,mean_decision_s"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn report_compares_methods_side_by_side() {
    let tmp = TempDir::new().unwrap();
    for m in ["proposed", "b3"] {
        let mut args = vec!["run", "--method", m, "--out", "o"];
        args.extend(SMALL);
        assert_eq!(code(&evflex(tmp.path(), &args)), 0);
    }
    let out = evflex(tmp.path(), &["report", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = fs::read_to_string(tmp.path().join("o/report/summary.txt")).unwrap();
    let header = summary.lines().next().unwrap();
    assert!(header.contains("proposed-seed0") && header.contains("b3-seed0"), "{summary}");

    let mut rdr = csv::Reader::from_path(tmp.path().join("o/report/emission_rate.csv")).unwrap();
    let last = rdr
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[0] == "proposed-seed0")
        .last()
        .unwrap();
    let rate: f64 = last[2].parse().unwrap();
    let cap: f64 = last[3].parse().unwrap();
    assert!(rate <= cap, "{rate} > {cap}");
}

#[test]
fn incomplete_run_directory_is_an_error() {
    let tmp = TempDir::new().unwrap();
    let mut args = vec!["run", "--out", "o"];
    args.extend(SMALL);
    assert_eq!(code(&evflex(tmp.path(), &args)), 0);
    fs::remove_file(tmp.path().join("o/proposed-seed0/queues.csv")).unwrap();
    let out = evflex(tmp.path(), &["report", "o/proposed-seed0"]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("incomplete run directory"), "{}", stderr(&out));
}
