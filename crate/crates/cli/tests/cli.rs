use std::fs;
use std::path::Path;
use std::process::Command;

use tempfile::TempDir;

fn tpest(dir: &Path, args: &[&str]) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_tpest"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "off")
        .status()
        .expect("tpest runs");
    status.code().expect("exit code")
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

/// Every output except the manifest, by name.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_writes_one_row_per_time_step() {
    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["simulate"]), 0);
    assert_eq!(rows(&d.path().join("data.csv")).len(), 71);
    assert_eq!(rows(&d.path().join("truth.csv")).len(), 71);
    assert!(d.path().join("manifest.json").exists());

    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["simulate", "--scenario", "batch_reactor"]), 0);
    assert_eq!(rows(&d.path().join("data.csv")).len(), 401);

    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["simulate", "-T", "0"]), 0);
    assert_eq!(rows(&d.path().join("data.csv")).len(), 1);
}

#[test]
fn default_scan_covers_the_four_by_five_grid() {
    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["turnpike-scan"]), 0);
    let cells = rows(&d.path().join("scan.csv"));
    assert_eq!(cells.len(), 20);
    assert!(cells.iter().all(|c| c[3] == "ok"));
    let mut keys: Vec<(usize, usize)> = cells.iter().map(|c| (c[0].parse().unwrap(), c[1].parse().unwrap())).collect();
    keys.dedup();
    assert_eq!(keys.len(), 20);
    for n in [5usize, 10, 15, 20] {
        assert!(keys.contains(&(70 - n, n)), "right-boundary window for N = {n}");
        let profile_rows = rows(&d.path().join("profiles.csv")).iter().filter(|r| r[1] == n.to_string()).count();
        assert_eq!(profile_rows, 5 * (n + 1));
    }
    let right = cells.iter().find(|c| c[0] == "65" && c[1] == "5").unwrap();
    assert_eq!(right[2], "left");
}

#[test]
fn single_cell_scan_emits_one_profile() {
    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["turnpike-scan", "--lens", "10", "--taus", "20"]), 0);
    assert_eq!(rows(&d.path().join("scan.csv")).len(), 1);
    assert_eq!(rows(&d.path().join("profiles.csv")).len(), 11);
}

#[test]
fn runs_are_byte_identical_across_repeats_threads_and_cache() {
    let args = ["compare", "--scenario", "batch_reactor", "-T", "40", "--lens", "10,20", "--seed", "3"];
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let c = TempDir::new().unwrap();
    assert_eq!(tpest(a.path(), &[&args[..], &["--parallel", "1"]].concat()), 0);
    assert_eq!(tpest(b.path(), &[&args[..], &["--parallel", "4"]].concat()), 0);
    assert_eq!(tpest(c.path(), &[&args[..], &["--parallel", "2", "--no-cache"]].concat()), 0);
    let reference = outputs(a.path());
    assert!(reference.iter().any(|(n, _)| n == "summary.csv"));
    assert_eq!(reference, outputs(b.path()));
    assert_eq!(reference, outputs(c.path()));
}

#[test]
fn compare_writes_a_row_and_trajectories_per_length() {
    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["compare", "--scenario", "batch_reactor", "--scale", "0.25"]), 0);
    let summary = rows(&d.path().join("summary.csv"));
    assert_eq!(summary.len(), 5);
    for row in &summary {
        let n = &row[0];
        assert!(row.iter().all(|v| !v.is_empty()), "N = {n} has empty cells");
        assert_eq!(rows(&d.path().join(format!("ae_N{n}.csv"))).len(), 101);
        assert_eq!(rows(&d.path().join(format!("mhe_N{n}.csv"))).len(), 101);
    }
    assert_eq!(rows(&d.path().join("fie.csv")).len(), 101);
}

#[test]
fn full_length_window_reproduces_the_optimum() {
    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["compare", "-T", "20", "--lens", "20"]), 0);
    let row = &rows(&d.path().join("summary.csv"))[0];
    let v_t: f64 = row[3].parse().unwrap();
    let gap: f64 = row[4].parse().unwrap();
    assert!(gap.abs() <= 1e-8 * (1.0 + v_t), "gap {gap}");
}

#[test]
fn noise_free_data_give_zero_costs_and_errors() {
    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["simulate"]), 0);
    let doc = fs::read_to_string(d.path().join("scenario.json")).unwrap();
    let zero = doc.replace("\"value\": [\n      1.0\n    ]", "\"value\": [\n      0.0\n    ]");
    assert_eq!(zero.matches("0.0\n    ]").count(), 2, "both laws rewritten");
    let scenario = d.path().join("zero.json");
    fs::write(&scenario, zero).unwrap();
    let out = TempDir::new().unwrap();
    assert_eq!(
        tpest(out.path(), &["compare", "--scenario", scenario.to_str().unwrap(), "-T", "30", "--lens", "10,20"]),
        0
    );
    for row in rows(&out.path().join("summary.csv")) {
        // J_ae, J_mhe, V_T and the three SNE columns
        for k in [1, 2, 3, 6, 7, 8] {
            let v: f64 = row[k].parse().unwrap();
            assert!(v.abs() <= 1e-8, "column {k} of N = {} is {v}", row[0]);
        }
    }
}

#[test]
fn perf_report_scores_an_estimate_file() {
    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["approx", "--N", "10"]), 0);
    let candidate = d.path().join("ae_N10.csv");
    assert_eq!(tpest(d.path(), &["perf-report", "--candidate", candidate.to_str().unwrap(), "--N", "10"]), 0);
    let report = fs::read_to_string(d.path().join("perf.json")).unwrap();
    assert!(report.contains("\"bound_valid\": true"));
}

#[test]
fn pinned_window_and_probe_run() {
    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["solve-window", "--tau", "10", "--N", "10", "--pin-init", "0.5", "--pin-term", "-1"]), 0);
    let window = rows(&d.path().join("window.csv"));
    assert_eq!(window.len(), 11);
    assert_eq!(window[0][1].parse::<f64>().unwrap(), 0.5);
    assert_eq!(window[10][1].parse::<f64>().unwrap(), -1.0);
    assert_eq!(tpest(d.path(), &["sensitivity-probe", "--tau", "20", "--N", "20"]), 0);
    assert_eq!(rows(&d.path().join("probe.csv")).len(), 21);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let d = TempDir::new().unwrap();
    assert_eq!(tpest(d.path(), &["approx", "--N", "7"]), 2);
    assert_eq!(tpest(d.path(), &["simulate", "--scale", "0"]), 2);
    assert_eq!(tpest(d.path(), &["simulate", "--scenario", "missing.json"]), 2);
    let cfg = d.path().join("bad.json");
    fs::write(&cfg, "{\"horizonz\": 3}").unwrap();
    assert_eq!(tpest(d.path(), &["simulate", "--config", cfg.to_str().unwrap()]), 2);
    assert_eq!(
        tpest(d.path(), &["solve-fie", "--scenario", "batch_reactor", "--scale", "0.25", "--max-iter", "2"]),
        3
    );
    assert_eq!(tpest(d.path(), &["perf-report", "--candidate", "no-such-file.csv"]), 4);
}

#[test]
fn config_file_fields_are_used_and_flags_override_them() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, "{\"scenario\": \"batch_reactor\", \"horizon\": 30, \"seed\": 5}").unwrap();
    assert_eq!(tpest(d.path(), &["simulate", "--config", cfg.to_str().unwrap()]), 0);
    assert_eq!(rows(&d.path().join("data.csv")).len(), 31);
    assert_eq!(tpest(d.path(), &["simulate", "--config", cfg.to_str().unwrap(), "-T", "12"]), 0);
    assert_eq!(rows(&d.path().join("data.csv")).len(), 13);
}
