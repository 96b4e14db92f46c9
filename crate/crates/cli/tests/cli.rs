use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use zonebal_core::Scenario;

fn zonebal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zonebal"))
        .args(args)
        .current_dir(dir)
        .env_remove("ZONEBAL_OUT")
        .output()
        .expect("spawn zonebal")
}

fn short_scenario(dir: &TempDir) -> PathBuf {
    let mut s = Scenario::default();
    s.duration_us = 500_000;
    let p = dir.path().join("scen.json");
    fs::write(&p, s.to_json()).unwrap();
    p
}

fn light_scenario(dir: &TempDir) -> PathBuf {
    let mut s = Scenario::light();
    s.duration_us = 1_000_000;
    let p = dir.path().join("light.json");
    fs::write(&p, s.to_json()).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_all_outputs_with_policy_override() {
    let dir = TempDir::new().unwrap();
    let scen = short_scenario(&dir);
    let out = dir.path().join("out");
    let o = zonebal(
        &[
            "run",
            scen.to_str().unwrap(),
            "--policy",
            "zone:warm_high",
            "-o",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["policy"], "warm_high");
    let keys: Vec<&str> = summary
        .as_object()
        .unwrap()
        .keys()
        .map(String::as_str)
        .collect();
    for k in [
        "scenario_hash",
        "seed",
        "policy",
        "samples",
        "mean_us",
        "min_us",
        "max_us",
        "p99_us",
        "histogram",
        "migrations",
        "direct_checks",
        "lock_hold_total_us",
        "cache_penalty_total_us",
    ] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(keys.len(), 13);
    let csv = fs::read_to_string(out.join("samples.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("wake_us,dispatch_us,latency_us,cpu"));
    assert_eq!(lines.count() as u64, summary["samples"].as_u64().unwrap());
    assert!(!csv.contains('\r'));
    let dat = fs::read_to_string(out.join("latency.dat")).unwrap();
    assert!(dat.starts_with("# time_us latency_us\n"));
}

#[test]
fn seed_and_duration_overrides_apply() {
    let dir = TempDir::new().unwrap();
    let scen = short_scenario(&dir);
    let out = dir.path().join("o");
    let o = zonebal(
        &[
            "run",
            scen.to_str().unwrap(),
            "--seed",
            "9",
            "--duration-us",
            "200000",
            "-o",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["samples"], 200);
    assert_eq!(summary["policy"], "baseline");
}

#[test]
fn out_dir_comes_from_environment() {
    let dir = TempDir::new().unwrap();
    let scen = short_scenario(&dir);
    let env_out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_zonebal"))
        .args(["run", scen.to_str().unwrap()])
        .env("ZONEBAL_OUT", &env_out)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("summary.json").exists());
}

#[test]
fn invalid_scenarios_exit_2_naming_the_key() {
    let dir = TempDir::new().unwrap();
    for (body, key) in [
        (r#"{"n_cpus": 0}"#, "n_cpus"),
        (
            r#"{"zone": {"balance_cpu_avg_enable": 1}}"#,
            "balance_cpu_avg_enable",
        ),
        (
            r#"{"workload": {"stress": {"n_cpu_hogs": -1}}}"#,
            "workload.stress.n_cpu_hogs",
        ),
        ("{\n  \"duration_us\": 5,\n}", "line 3"),
    ] {
        let p = dir.path().join("bad.json");
        fs::write(&p, body).unwrap();
        let o = zonebal(&["run", p.to_str().unwrap(), "-o", "x"], dir.path());
        assert_eq!(o.status.code(), Some(2), "{body}");
        assert!(stderr(&o).contains(key), "{body}: {}", stderr(&o));
    }
    let o = zonebal(&["run", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let scen = short_scenario(&dir);
    let o = zonebal(
        &["run", scen.to_str().unwrap(), "--policy", "zone:tepid"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("zone:tepid"));
}

#[test]
fn compare_same_policy_gives_unit_ratios() {
    let dir = TempDir::new().unwrap();
    let scen = short_scenario(&dir);
    let out = dir.path().join("cmp");
    let o = zonebal(
        &[
            "compare",
            scen.to_str().unwrap(),
            "baseline",
            "baseline",
            "-o",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = json(&out.join("comparison.json"));
    let r = &cmp["ratios"][0];
    assert_eq!(r["migration_ratio"], 1.0);
    assert_eq!(r["lock_hold_ratio"], 1.0);
    assert!(out.join("baseline/summary.json").exists());
    assert!(out.join("baseline-2/summary.json").exists());
}

#[test]
fn compare_three_policies_against_the_first() {
    let dir = TempDir::new().unwrap();
    let scen = short_scenario(&dir);
    let out = dir.path().join("cmp");
    let o = zonebal(
        &[
            "compare",
            scen.to_str().unwrap(),
            "baseline",
            "zone:warm_high",
            "zone:hot",
            "-o",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = json(&out.join("comparison.json"));
    assert_eq!(cmp["runs"].as_array().unwrap().len(), 3);
    let ratios = cmp["ratios"].as_array().unwrap();
    assert_eq!(ratios.len(), 2);
    assert_eq!(ratios[0]["a"], "baseline");
    assert_eq!(ratios[0]["b"], "warm_high");
    assert_eq!(ratios[1]["b"], "hot");
    assert!(ratios[1].get("mean_latency_ratio").is_some());
    for d in ["baseline", "zone_warm_high", "zone_hot"] {
        assert!(out.join(d).join("samples.csv").exists(), "{d}");
    }
}

#[test]
fn compare_needs_two_policies() {
    let dir = TempDir::new().unwrap();
    let scen = short_scenario(&dir);
    let o = zonebal(
        &["compare", scen.to_str().unwrap(), "baseline", "-o", "c"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_spot_gives_one_row_per_value() {
    let dir = TempDir::new().unwrap();
    let scen = short_scenario(&dir);
    let out = dir.path().join("sw");
    let o = zonebal(
        &[
            "sweep",
            scen.to_str().unwrap(),
            "spot",
            "30",
            "50",
            "80",
            "-o",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let policies: Vec<&str> = rows.iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert_eq!(policies, ["warm_low", "warm_mid", "warm_high"]);
}

#[test]
fn sweep_rejects_empty_values_and_unknown_axes() {
    let dir = TempDir::new().unwrap();
    let scen = short_scenario(&dir);
    let o = zonebal(
        &["sweep", scen.to_str().unwrap(), "spot", "-o", "s"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = zonebal(
        &["sweep", scen.to_str().unwrap(), "tick_us", "1", "-o", "s"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = zonebal(
        &["sweep", scen.to_str().unwrap(), "spot", "40", "-o", "s"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn cache_penalty_sweep_leaves_cold_light_load_untouched() {
    let dir = TempDir::new().unwrap();
    let scen = light_scenario(&dir);
    let out = dir.path().join("sw");
    let o = zonebal(
        &[
            "sweep",
            scen.to_str().unwrap(),
            "cache_penalty_us",
            "0",
            "200",
            "1000",
            "--policy",
            "zone:cold",
            "-o",
            out.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let migrations: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|r| r.split(',').nth(6).unwrap())
        .collect();
    assert_eq!(migrations, ["0", "0", "0"]);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let scen = short_scenario(&dir);
    for out in ["a", "b"] {
        let o = zonebal(
            &[
                "run",
                scen.to_str().unwrap(),
                "--policy",
                "zone:hot",
                "-o",
                out,
            ],
            dir.path(),
        );
        assert!(o.status.success());
    }
    for f in ["samples.csv", "summary.json", "latency.dat"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn printed_scenarios_parse_back() {
    let dir = TempDir::new().unwrap();
    for args in [&["scenario"][..], &["scenario", "--light"][..]] {
        let o = zonebal(args, dir.path());
        assert!(o.status.success());
        let s = Scenario::from_json_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
        assert_eq!(s.n_cpus, 4);
    }
}
