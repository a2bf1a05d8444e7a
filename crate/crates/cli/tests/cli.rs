use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mldfm::linalg::max_abs;
use mldfm::pc::procrustes_rotation;
use nalgebra::DMatrix;
use tempfile::TempDir;

fn mldfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mldfm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path
}

fn ml_config(extra: &str) -> String {
    format!(
        r#"{{"schema_version": 1, "T": 50, "group_sizes": [25, 25], "r_g": 1, "r_s": [1, 1], "seed": 7{extra}}}"#
    )
}

fn dfm_config(n: usize, t: usize, extra: &str) -> String {
    format!(
        r#"{{"schema_version": 1, "T": {t}, "group_sizes": [{n}], "r_g": 3, "r_s": [0], "seed": 3{extra}}}"#
    )
}

fn read_csv(path: &Path) -> (Vec<String>, DMatrix<f64>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect();
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    let m = DMatrix::from_fn(rows.len(), header.len() - 1, |i, j| rows[i][j]);
    (header, m)
}

fn simulate(dir: &Path, config: &Path, out: &str) -> PathBuf {
    let out = dir.join(out);
    ok(mldfm(&[
        "simulate",
        "--config",
        s(config),
        "--out",
        s(&out),
    ]));
    out
}

#[test]
fn simulate_writes_deterministic_panels() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "design.json", &ml_config(""));
    let a = simulate(dir.path(), &config, "a");
    let b = simulate(dir.path(), &config, "b");
    for name in [
        "panel.csv",
        "true_factors.csv",
        "true_loadings.csv",
        "sigma_eps.csv",
    ] {
        let (x, y) = (
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
        );
        assert!(x == y, "{name} differs between runs");
    }
    let (header, panel) = read_csv(&a.join("panel.csv"));
    assert_eq!(panel.shape(), (50, 50));
    assert_eq!(header.len(), 51);
    assert_eq!((header[0].as_str(), header[1].as_str()), ("t", "series_1"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["artifacts"].as_object().unwrap().len(), 4);

    let other = dir.path().join("c");
    ok(mldfm(&[
        "simulate",
        "--config",
        s(&config),
        "--out",
        s(&other),
        "--seed",
        "8",
    ]));
    assert_ne!(
        std::fs::read(a.join("panel.csv")).unwrap(),
        std::fs::read(other.join("panel.csv")).unwrap()
    );
}

#[test]
fn invalid_config_exits_with_input_error() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "bad.json", &ml_config(r#", "tau": 1.2"#));
    let out = mldfm(&[
        "simulate",
        "--config",
        s(&config),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("tau"), "{}", stderr(&out));

    let typo = write_config(dir.path(), "typo.json", &ml_config(r#", "hetero": true"#));
    let out = mldfm(&[
        "simulate",
        "--config",
        s(&typo),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hetero"), "{}", stderr(&out));
}

#[test]
fn noiseless_round_trip_recovers_the_factors() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "design.json", &ml_config(r#", "c": 0"#));
    let sim = simulate(dir.path(), &config, "sim");
    let est = dir.path().join("est");
    ok(mldfm(&[
        "estimate",
        "--panel",
        s(&sim.join("panel.csv")),
        "--config",
        s(&config),
        "--out",
        s(&est),
    ]));

    let (_, truth) = read_csv(&sim.join("true_factors.csv"));
    let (header, f_hat) = read_csv(&est.join("factors.csv"));
    assert_eq!(header, ["t", "G", "L1", "L2"]);
    let aligned = &f_hat * procrustes_rotation(&f_hat, &truth).unwrap();
    assert!(max_abs(&(aligned - truth)) < 1e-6);

    let diagnostics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(est.join("diagnostics.json")).unwrap())
            .unwrap();
    let checks = diagnostics["identification"]["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 5);
    assert!(checks.iter().all(|c| c["passed"] == true), "{diagnostics}");

    let pc = dir.path().join("pc");
    ok(mldfm(&[
        "estimate",
        "--panel",
        s(&sim.join("panel.csv")),
        "--config",
        s(&config),
        "--out",
        s(&pc),
        "--method",
        "pc",
    ]));
    assert_eq!(read_csv(&pc.join("factors.csv")).0, ["t", "F1", "F2", "F3"]);
}

#[test]
fn malformed_panel_reports_line_number() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        "design.json",
        r#"{"schema_version": 1, "group_sizes": [5], "r_g": 1, "r_s": [0]}"#,
    );
    let panel = dir.path().join("panel.csv");
    std::fs::write(
        &panel,
        "t,series_1,series_2,series_3,series_4,series_5\n1,1,2,3,4,5\n2,1,2,three,4,5\n",
    )
    .unwrap();
    let out = mldfm(&[
        "estimate",
        "--panel",
        s(&panel),
        "--config",
        s(&config),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    std::fs::write(&panel, "t,series_1,series_2\n1,1,2\n").unwrap();
    let out = mldfm(&[
        "estimate",
        "--panel",
        s(&panel),
        "--config",
        s(&config),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

struct Estimated {
    _dir: TempDir,
    config: PathBuf,
    sim: PathBuf,
    est: PathBuf,
}

fn estimated_dfm(extra: &str) -> Estimated {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "design.json", &dfm_config(100, 100, extra));
    let sim = simulate(dir.path(), &config, "sim");
    let est = dir.path().join("est");
    ok(mldfm(&[
        "estimate",
        "--panel",
        s(&sim.join("panel.csv")),
        "--config",
        s(&config),
        "--out",
        s(&est),
    ]));
    Estimated {
        _dir: dir,
        config,
        sim,
        est,
    }
}

fn run_mse(e: &Estimated, variant: &str, out: &str) -> PathBuf {
    let out = e.est.parent().unwrap().join(out);
    ok(mldfm(&[
        "mse",
        "--panel",
        s(&e.sim.join("panel.csv")),
        "--factors",
        s(&e.est.join("factors.csv")),
        "--loadings",
        s(&e.est.join("loadings.csv")),
        "--variant",
        variant,
        "--config",
        s(&e.config),
        "--out",
        s(&out),
    ]));
    out
}

/// `(variant, t, i, j, value)` rows of an `avar.csv`.
fn avar_rows(dir: &Path) -> Vec<(String, usize, usize, usize, f64)> {
    let text = std::fs::read_to_string(dir.join("avar.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,t,i,j,value"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].to_string(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
                f[4].parse().unwrap(),
            )
        })
        .collect()
}

fn mean_diagonal(rows: &[(String, usize, usize, usize, f64)], k: usize) -> f64 {
    let diag: Vec<f64> = rows
        .iter()
        .filter(|r| r.2 == k && r.3 == k)
        .map(|r| r.4)
        .collect();
    diag.iter().sum::<f64>() / diag.len() as f64
}

#[test]
fn hr_and_fpr_agree_without_cross_correlation() {
    let e = estimated_dfm("");
    let hr = avar_rows(&run_mse(&e, "hr", "hr"));
    let fpr = avar_rows(&run_mse(&e, "fpr", "fpr"));
    assert_eq!(hr.len(), 100 * 9);
    for k in 1..=3 {
        let (a, b) = (mean_diagonal(&hr, k), mean_diagonal(&fpr, k));
        assert!((a - b).abs() / b < 0.10, "factor {k}: HR {a}, FPR {b}");
    }
    let (header, regions) = read_csv(&e.est.parent().unwrap().join("hr").join("regions.csv"));
    assert_eq!(header, ["t", "F1", "F2", "F3"]);
    let z = 1.959963984540054;
    let first = hr
        .iter()
        .find(|r| r.1 == 1 && r.2 == 1 && r.3 == 1)
        .unwrap()
        .4;
    assert!((regions[(0, 0)] - z * first.sqrt()).abs() < 1e-9 * regions[(0, 0)]);
}

#[test]
fn single_full_subsample_leaves_hr_unchanged() {
    let e = estimated_dfm(r#", "subsample": {"b": 1, "block_fraction": 1.0}"#);
    let hr = avar_rows(&run_mse(&e, "hr", "hr"));
    let hrs = avar_rows(&run_mse(&e, "hrs", "hrs"));
    assert_eq!(hr.len(), hrs.len());
    for (a, b) in hr.iter().zip(&hrs) {
        assert_eq!((a.0.as_str(), b.0.as_str()), ("HR", "HRS"));
        assert_eq!((a.1, a.2, a.3, a.4), (b.1, b.2, b.3, b.4));
    }
}

#[test]
fn missing_input_file_exits_with_input_error() {
    let e = estimated_dfm("");
    let out = mldfm(&[
        "mse",
        "--panel",
        s(&e.sim.join("panel.csv")),
        "--factors",
        s(&e.est.join("factors.csv")),
        "--loadings",
        s(&e.est.join("no_such_loadings.csv")),
        "--variant",
        "fpr",
        "--config",
        s(&e.config),
        "--out",
        s(&e.est.join("mse")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no_such_loadings.csv"));
}

#[test]
fn montecarlo_tables_do_not_depend_on_worker_count() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        "mc.json",
        &dfm_config(50, 50, r#", "M": 24, "subsample": {"b": 10}"#),
    );
    let mut tables = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("w{workers}"));
        ok(mldfm(&[
            "montecarlo",
            "--config",
            s(&config),
            "--out",
            s(&out),
            "--workers",
            workers,
        ]));
        tables.push(std::fs::read_to_string(out.join("table.csv")).unwrap());
        for f in ["histograms.json", "result.json", "manifest.json"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
    }
    assert_eq!(tables[0], tables[1]);

    let lines: Vec<&str> = tables[0].lines().collect();
    assert_eq!(lines[0], "factor,MSE,Cov,Bias2,Asym-MSE,HR,HRS,FPR,FPRS");
    assert_eq!(lines.len(), 7);
    for line in &lines[1..4] {
        let f: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(f.len(), 8);
        assert!(f[0] >= f[1], "{line}");
    }

    let report = ok(mldfm(&[
        "report",
        "--table",
        s(&dir.path().join("w1").join("table.csv")),
    ]));
    let text = String::from_utf8(report.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 7);
    assert!(
        rows[1].starts_with("(F1)") && rows[4].starts_with("(F1,F2)"),
        "{text}"
    );
}
