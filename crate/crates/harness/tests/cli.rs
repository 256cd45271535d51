use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hallkit_harness::{exit, loglog_fit, WindowPolicy};
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn hallkit(args: &[&str], cache: Option<&Path>) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hallkit"));
    cmd.args(args);
    match cache {
        Some(dir) => cmd.env(hallkit_harness::CACHE_ENV, dir),
        None => cmd.env_remove(hallkit_harness::CACHE_ENV),
    };
    let out = cmd.output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn summary(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"
[model]
backend = "hofstadter"
width = 12
q = 3
boundary = "torus"
lambda = 0.1

[potential]
kind = "gaussian_bumps"
random = { count = 3, width = 1.2, amplitude = 1.0, radius = 3.0 }

[drive]
taus = [8.0, 16.0, 32.0, 64.0]
min_steps = 1
per_unit = 1.0

[lambda_sweep]
lambdas = [0.0, 0.1]
"#;

#[test]
fn minimal_example_gives_unit_conductance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("minimal.toml");
    let (code, err) = hallkit(&["kubo", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(code, exit::OK, "{err}");
    let s = summary(tmp.path());
    assert_eq!(s["schema_version"], 1);
    let k = s["results"]["kubo"]["normalized"].as_f64().unwrap();
    // 12×12 torus: the window sees the neighbouring switch crossings at distance 6
    assert!((k - 1.0).abs() < 0.15, "K = {k}");
    assert_eq!(s["results"]["kubo"]["oracle"], 1);
    let manifest: Value = serde_json::from_slice(&fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["model"]["width"], 12);
    assert!(manifest["model_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn fermi_energy_in_a_band_is_no_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[fermi]\nenergy = -2.70\ndelta_min = 0.1\n"));
    let (code, err) = hallkit(&["sweep-tau", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code, exit::NO_GAP, "{err}");
    assert!(err.contains("no spectral gap"), "{err}");
    assert!(!out.exists());
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[output]\nsvgs = true\n"));
    let (code, err) = hallkit(&["build", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(code, exit::CONFIG);
    assert!(err.contains("svgs") && err.contains("line"), "{err}");
    let (code, _) = hallkit(&["build", "--out", tmp.path().to_str().unwrap()], None);
    assert_eq!(code, exit::CONFIG);
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn reruns_and_cache_hits_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let cache = tmp.path().join("cache");
    let dirs: Vec<PathBuf> = (0..3).map(|i| tmp.path().join(format!("run{i}"))).collect();
    let caches = [None, Some(cache.as_path()), Some(cache.as_path())];
    for (d, c) in dirs.iter().zip(caches) {
        let (code, err) = hallkit(
            &["report", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap(), "--seed", "11", "--threads", "2"],
            c,
        );
        assert!(code == exit::OK || code == exit::CHECK_FAILED, "{err}");
    }
    assert!(fs::read_dir(&cache).unwrap().count() >= 1);
    let first = csvs(&dirs[0]);
    assert!(first.iter().any(|(n, _)| n == "tau_sweep.csv"));
    assert!(first.iter().any(|(n, _)| n == "lambda_sweep.csv"));
    for d in &dirs[1..] {
        assert_eq!(first, csvs(d));
        assert_eq!(fs::read(dirs[0].join("summary.json")).unwrap(), fs::read(d.join("summary.json")).unwrap());
    }
    let other = tmp.path().join("seed12");
    hallkit(&["build", "--config", cfg.to_str().unwrap(), "--out", other.to_str().unwrap(), "--seed", "12"], None);
    assert_ne!(fs::read(dirs[0].join("spectrum.csv")).unwrap(), fs::read(other.join("spectrum.csv")).unwrap());
}

#[test]
fn loglog_fit_examples() {
    let xs = [32.0, 64.0, 128.0, 256.0, 512.0];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| x.powi(-2)).collect();
    let f = loglog_fit(&xs, &ys, WindowPolicy::default()).unwrap();
    assert!((f.slope + 2.0).abs() < 1e-12);
    assert!((f.r_squared - 1.0).abs() < 1e-12);
    assert_eq!(f.window, (1, 5));
    let c = loglog_fit(&xs, &[3.0; 5], WindowPolicy::All).unwrap();
    assert!(c.slope.abs() < 1e-12);
    let wiggle: Vec<f64> = xs.iter().map(|x: &f64| x.powi(-2) * (1.0 + 0.1 * x.ln().sin())).collect();
    let w = loglog_fit(&xs, &wiggle, WindowPolicy::default()).unwrap();
    assert!((w.slope + 2.0).abs() < 0.15, "{}", w.slope);
    assert!(loglog_fit(&xs, &[1.0, 0.0, 1.0, 1.0, 1.0], WindowPolicy::All).is_err());
    assert!(loglog_fit(&xs[..3], &ys[..3], WindowPolicy::default()).is_err());
}
