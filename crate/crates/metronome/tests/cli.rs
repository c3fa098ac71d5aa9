use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use metronome::formats::{from_json, read_trace_csv, write_lifetime_table, write_trace_csv};
use metronome_core::observables::TraceMetadata;
use metronome_core::{FitResult, SpectrumReport, TimeGrid, TimeTrace};
use serde_json::Value;

fn metronome(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metronome"))
        .args(args)
        .current_dir(cwd)
        .env_remove("METRONOME_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_alternates_without_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let out = metronome(
        &["simulate", "--L", "4", "--eps", "0", "--eps-prime", "0", "--initial", "polarized", "--periods", "8", "--grid", "linear:1", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = read_trace_csv(fs::File::open(dir.path().join("run/trace.csv")).unwrap()).unwrap();
    assert_eq!(trace.periods(), &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
    for (n, m) in trace.get("magnetization").unwrap().iter().enumerate() {
        let expected = if n % 2 == 0 { 1.0 } else { -1.0 };
        assert!((m - expected).abs() < 1e-10);
    }
    let stored: TimeTrace = from_json(&fs::read_to_string(dir.path().join("run/trace.json")).unwrap()).unwrap();
    assert_eq!(stored.series, trace.series);
    assert_eq!(stored.metadata.initial_state, "polarized");

    let manifest = json(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config"]["grid"]["spacing"], "linear:1");
    assert_eq!(manifest["config"]["lattice"]["deviations"][0], 0.0);
    assert_eq!(manifest["schema_version"], 1);
}

#[test]
fn simulate_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["simulate", "--L", "5", "--initial", "bitstrings:6", "--periods", "1e3", "--grid", "log:10", "--even-only", "--seed", "4"];
    let first: Vec<&str> = args.iter().copied().chain(["--out", "a"]).collect();
    let second: Vec<&str> = args.iter().copied().chain(["--out", "b", "--jobs", "1"]).collect();
    assert_eq!(code(&metronome(&first, dir.path())), 0);
    assert_eq!(code(&metronome(&second, dir.path())), 0);
    let a = fs::read(dir.path().join("a/trace.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/trace.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains(",Z_1,") && text.contains(",Z_5,"));
    let manifest = json(&dir.path().join("a/manifest.json"));
    assert_eq!(manifest["config"]["initial"], "bitstrings:6");
    assert_eq!(manifest["config"]["seed"], 4);
}

#[test]
fn config_file_values_lose_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "geometry = \"chain-center\"\nL = 5\neps = 0.2\neps-prime = 0.01\nperiods = 100\ngrid = \"linear:2\"\n",
    )
    .unwrap();
    let out = metronome(&["simulate", "--config", "run.toml", "--L", "6", "--out", "run"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&dir.path().join("run/manifest.json"));
    let lattice = &manifest["config"]["lattice"];
    assert_eq!(lattice["spins"], 6);
    assert_eq!(lattice["geometry"], "chain-center");
    assert_eq!(lattice["metronome_site"], 3);
    assert_eq!(lattice["deviations"][2], 0.01);
    assert_eq!(manifest["config"]["grid"]["periods"], 100);
}

#[test]
fn env_var_sets_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_metronome"))
        .args(["-q", "spectrum", "--L", "4", "--eps", "0", "--eps-prime", "0"])
        .current_dir(dir.path())
        .env("METRONOME_OUT_DIR", dir.path().join("env-out"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let report: SpectrumReport = from_json(&fs::read_to_string(dir.path().join("env-out/spectrum.json")).unwrap()).unwrap();
    assert!(report.delta.abs() < 1e-12);
    assert!(report.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn spectrum_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = metronome(&["spectrum", "--effective", "two-period", "--L", "6", "--eps", "0.1", "--eps-prime", "0.01", "--out", "s"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("delta = "));
    let report: SpectrumReport = from_json(&fs::read_to_string(dir.path().join("s/spectrum.json")).unwrap()).unwrap();
    let parity = report.parity.unwrap();
    assert_eq!(parity.len(), 64);
    assert_ne!(parity[0], parity[1]);
    assert!(report.delta > 0.0);

    let out = metronome(&["spectrum", "--effective", "bulk", "--L", "6", "--out", "b"], dir.path());
    assert_eq!(code(&out), 0);
    let bulk: SpectrumReport = from_json(&fs::read_to_string(dir.path().join("b/spectrum.json")).unwrap()).unwrap();
    assert_eq!(bulk.spins, 5);
    assert!(bulk.parity.is_none());
    assert!(bulk.eigenvalues[1] - bulk.eigenvalues[0] > 1e-3);
}

#[test]
fn fit_recovers_stored_cosine() {
    let dir = tempfile::tempdir().unwrap();
    let grid = TimeGrid::default_to(1_000_000).unwrap();
    let values = grid.periods().iter().map(|n| 0.8 * (std::f64::consts::TAU * *n as f64 / 1e4).cos()).collect();
    let mut trace = TimeTrace::new(grid, TraceMetadata::default());
    trace.insert("magnetization", values).unwrap();
    let mut csv = Vec::new();
    write_trace_csv(&trace, &mut csv).unwrap();
    fs::write(dir.path().join("synthetic.csv"), csv).unwrap();

    let out = metronome(&["fit", "synthetic.csv"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("lifetime = "));
    let fit: FitResult = from_json(&fs::read_to_string(dir.path().join("synthetic.fit.json")).unwrap()).unwrap();
    assert!((fit.lifetime.unwrap() / 1e4 - 1.0).abs() < 1e-3);
}

#[test]
fn fit_power_law_table() {
    let dir = tempfile::tempdir().unwrap();
    let points: Vec<(f64, f64)> = [1e-2, 1e-3, 1e-4, 1e-5].iter().map(|x| (*x, 7.3e1 / x)).collect();
    let mut csv = Vec::new();
    write_lifetime_table(&points, &mut csv).unwrap();
    fs::write(dir.path().join("sweep.csv"), csv).unwrap();
    let out = metronome(&["fit", "sweep.csv", "--model", "power-law", "--out", "pl.json"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let fit: FitResult = from_json(&fs::read_to_string(dir.path().join("pl.json")).unwrap()).unwrap();
    assert!((fit.params["beta"] + 1.0).abs() < 1e-6);
}

#[test]
fn usage_errors_exit_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    let cases: &[&[&str]] = &[
        &["fit", "empty.csv", "--out", "o/x.json"],
        &["fit", "missing.csv", "--out", "o/x.json"],
        &["simulate", "--L", "four", "--out", "o"],
        &["simulate", "--geometry", "ring", "--out", "o"],
        &["simulate", "--eps", "1.5", "--out", "o"],
        &["simulate", "--periods", "1.5", "--out", "o"],
        &["simulate", "--grid", "cubic:3", "--out", "o"],
        &["simulate", "--observables", "Z_9", "--L", "4", "--out", "o"],
        &["simulate", "--realizations", "3", "--out", "o"],
        &["spectrum", "--effective", "bulk", "--geometry", "chain-center", "--L", "5", "--out", "o"],
        &["scan", "nope.toml", "--out", "o"],
        &["bogus"],
    ];
    for args in cases {
        let out = metronome(args, dir.path());
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
        assert!(!dir.path().join("o").exists(), "{args:?} left output behind");
    }
}

#[test]
fn scan_writes_layout_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("toy.toml"),
        r#"
geometry = "chain-boundary"
L = 4
epsilon = [0.1, 0.2]
epsilon_prime = [1e-2, 1e-1]
protocol = "polarized"
seed = 1

[grid]
periods = 1e5
spacing = "log:10"
"#,
    )
    .unwrap();
    let out = metronome(&["scan", "toy.toml", "--out", "scan"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let points: Vec<_> = fs::read_dir(dir.path().join("scan/points")).unwrap().collect();
    assert_eq!(points.len(), 4);
    let manifest = json(&dir.path().join("scan/manifest.json"));
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["spec"]["grid"]["spacing"], "log:10");
    for i in 0..2 {
        for j in 0..2 {
            let record = json(&dir.path().join(format!("scan/points/{i}_{j}.json")));
            assert!(record["status"].is_string());
            assert!(dir.path().join(format!("scan/traces/{i}_{j}.csv")).exists());
        }
    }

    let table = fs::read_to_string(dir.path().join("scan/lifetimes/eps_0.csv")).unwrap();
    assert!(table.starts_with("x,lifetime"));
    assert!(dir.path().join("scan/lifetimes/eps_prime_1.csv").exists());

    // a second run without --resume is refused, with --resume it is a no-op
    assert_eq!(code(&metronome(&["scan", "toy.toml", "--out", "scan"], dir.path())), 2);
    let before = fs::read(dir.path().join("scan/points/1_1.json")).unwrap();
    fs::remove_file(dir.path().join("scan/points/0_1.json")).unwrap();
    assert_eq!(code(&metronome(&["scan", "toy.toml", "--out", "scan", "--resume"], dir.path())), 0);
    assert_eq!(fs::read(dir.path().join("scan/points/1_1.json")).unwrap(), before);
    assert!(dir.path().join("scan/points/0_1.json").exists());
}
