use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const DISPERSIVE: &str = "[model]\ndetuning_hz = 14300.0\n[detection]\neta = 0.7\ng = 0.02\n";

fn kerr(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kerr"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("kerr runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_slice(&fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .unwrap()
}

fn table_value(csv: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(csv).unwrap();
    text.lines()
        .find_map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            (cols[0] == key).then(|| cols[1].parse().unwrap())
        })
        .unwrap_or_else(|| panic!("{key} missing from {}", csv.display()))
}

#[test]
fn modes_on_default_trap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("modes");
    let o = kerr(&["modes"], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let f = table_value(&out.join("modes.csv"), "exchange_2sqrt2_xi_resonant");
    assert!((f - 3110.0).abs() / 3110.0 < 0.01, "{f}");

    let manifest = read_json(out.join("manifest.json"));
    assert_eq!(manifest["command"], "modes");
    assert_eq!(manifest["outputs"], serde_json::json!(["modes.csv"]));
    assert!(manifest["seed"].is_null());
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn resonance_config_and_exchange() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "res.toml", "[model]\ndetuning_hz = 0.0\n");
    let out = dir.path().join("modes");
    assert_eq!(code(&kerr(&["modes", "--config", &cfg], &out)), 0);
    assert!(table_value(&out.join("modes.csv"), "delta").abs() < 1e-6);

    let out = dir.path().join("exchange");
    assert_eq!(code(&kerr(&["exchange"], &out)), 0);
    let fit = read_json(out.join("exchange_fit.json"));
    let f = fit["fitted_frequency_hz"].as_f64().unwrap();
    assert!((f - 3110.0).abs() / 3110.0 < 0.01, "{f}");
    assert!(out.join("exchange.csv").exists());
}

#[test]
fn scan_then_fit_recovers_thermal_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", DISPERSIVE);
    let scan = dir.path().join("scan");
    let o = kerr(&["scan", "--config", &cfg, "--state", "thermal:1.5"], &scan);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(scan.join("truth.json"))["state"], "thermal:1.5");

    let fit = dir.path().join("fit");
    let input = scan.join("scan.csv");
    let o = kerr(
        &[
            "fit",
            "--config",
            &cfg,
            "--input",
            input.to_str().unwrap(),
            "--family",
            "thermal",
        ],
        &fit,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let result = read_json(fit.join("fit.json"));
    let nbar = result["params"]["nbar"].as_f64().unwrap();
    assert!((nbar - 1.5).abs() < 1e-4, "{nbar}");
    assert!((result["eta_hat"].as_f64().unwrap() - 0.7).abs() < 1e-4);

    let manifest = read_json(fit.join("manifest.json"));
    assert_eq!(
        manifest["outputs"],
        serde_json::json!(["fit_curve.csv", "fit.json"])
    );
}

#[test]
fn json_tables_feed_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", DISPERSIVE);
    let scan = dir.path().join("scan");
    let o = kerr(
        &[
            "scan", "--config", &cfg, "--format", "json", "--shots", "200", "--seed", "3",
        ],
        &scan,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let input = scan.join("scan.json");
    let o = kerr(
        &["fit", "--config", &cfg, "--input", input.to_str().unwrap()],
        &dir.path().join("fit"),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn shots_with_perfect_detection_on_fock_state() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shots");
    let o = kerr(
        &[
            "shots",
            "--state",
            "fock:3",
            "--schedule",
            "3",
            "--eta",
            "1",
            "--g",
            "0",
            "--trajectories",
            "500",
            "--seed",
            "1",
        ],
        &out,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(out.join("shots_summary.json"));
    assert_eq!(
        summary["summary"]["step_bright_frequency"][0]
            .as_f64()
            .unwrap(),
        1.0
    );
    assert_eq!(read_json(out.join("manifest.json"))["seed"], 1);
}

#[test]
fn stochastic_commands_need_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for args in [vec!["shots"], vec!["walk"], vec!["scan", "--shots", "100"]] {
        let o = kerr(&args, &dir.path().join("x"));
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(
            String::from_utf8_lossy(&o.stderr).contains("--seed"),
            "{args:?}"
        );
    }
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&kerr(&["modes", "--bogus"], &out)), 2);
    assert_eq!(code(&kerr(&["nonsense"], &out)), 2);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "detuning_hz,p_up,shots\n1.0,abc,\n").unwrap();
    let o = kerr(&["fit", "--input", bad.to_str().unwrap()], &out);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.csv"));

    let cfg = write_config(dir.path(), "typo.toml", "[model]\ndetuning = 1.0\n");
    assert_eq!(code(&kerr(&["modes", "--config", &cfg], &out)), 2);

    let cfg = write_config(
        dir.path(),
        "unstable.toml",
        "[trap]\nomega_x_hz = 800e3\nomega_y_hz = 979e3\nomega_z_hz = 587e3\n",
    );
    assert_eq!(code(&kerr(&["modes", "--config", &cfg], &out)), 2);

    assert_eq!(code(&kerr(&["scan", "--state", "thermal:-1"], &out)), 2);
}

#[test]
fn flat_scan_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("detuning_hz,p_up,shots\n");
    for i in 0..61 {
        text.push_str(&format!("{:?},0.02,\n", -15_000.0 + 250.0 * i as f64));
    }
    let flat = dir.path().join("flat.csv");
    fs::write(&flat, text).unwrap();
    for family in ["free", "thermal"] {
        let out = dir.path().join(family);
        let o = kerr(
            &["fit", "--input", flat.to_str().unwrap(), "--family", family],
            &out,
        );
        assert_eq!(
            code(&o),
            1,
            "{family}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        // artifacts are still written
        assert!(out.join("fit.json").exists());
        assert!(out.join("manifest.json").exists());
    }
}

#[test]
fn several_inputs_with_shared_eta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", DISPERSIVE);
    let mut inputs = Vec::new();
    for (k, state) in ["thermal:1.5", "thermal:0.5", "coherent:1.5"]
        .iter()
        .enumerate()
    {
        let scan = dir.path().join(format!("scan{k}"));
        let seed = (k + 20).to_string();
        let o = kerr(
            &[
                "scan", "--config", &cfg, "--state", state, "--shots", "200", "--seed", &seed,
            ],
            &scan,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        inputs.push(scan.join("scan.csv").to_str().unwrap().to_string());
    }
    let mut args = vec!["fit", "--config", cfg.as_str(), "--shared-eta"];
    for i in &inputs {
        args.extend(["--input", i.as_str()]);
    }
    args.extend([
        "--family", "thermal", "--family", "thermal", "--family", "coherent",
    ]);
    let out = dir.path().join("fit");
    let o = kerr(&args, &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let shared = read_json(out.join("shared_eta.json"));
    let eta = shared["eta"].as_f64().unwrap();
    let sigma = shared["eta_sigma"].as_f64().unwrap();
    assert!((eta - 0.7).abs() < 3.0 * sigma, "{eta} +- {sigma}");
    for k in 0..3 {
        let fit = read_json(out.join(format!("fit_{k}.json")));
        assert_eq!(fit["eta_hat"].as_f64().unwrap(), eta);
        assert!(out.join(format!("fit_curve_{k}.csv")).exists());
    }

    // two families for three inputs is ambiguous
    let mut bad = vec!["fit", "--config", cfg.as_str()];
    for i in &inputs {
        bad.extend(["--input", i.as_str()]);
    }
    bad.extend(["--family", "thermal", "--family", "coherent"]);
    let o = kerr(&bad, &dir.path().join("bad"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("one per input"));
}

#[test]
fn crossing_map_around_resonance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("crossing");
    let o = kerr(
        &[
            "crossing",
            "--from-khz",
            "-8",
            "--to-khz",
            "8",
            "--points",
            "17",
            "--map",
            "--laser-khz",
            "-4,4,161",
        ],
        &out,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("crossing_map.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 17 * 161);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[2])));
    // at resonance the sideband splits in two: no peak at the bare position,
    // two peaks about 2 sqrt2 xi / 2pi = 3.1 kHz apart
    let resonant: Vec<&Vec<f64>> = rows.iter().filter(|r| r[0].abs() < 1e-6).collect();
    let peak = |lo: f64, hi: f64| {
        resonant
            .iter()
            .filter(|r| (lo..hi).contains(&r[1]))
            .max_by(|a, b| a[2].total_cmp(&b[2]))
            .map(|r| r[1])
            .unwrap()
    };
    let split = peak(0.0, 4000.0) - peak(-4000.0, 0.0);
    assert!((split - 3124.5).abs() < 100.0, "{split}");
    let manifest = read_json(out.join("manifest.json"));
    assert_eq!(
        manifest["outputs"],
        serde_json::json!(["crossing.csv", "crossing_map.csv"])
    );
}
