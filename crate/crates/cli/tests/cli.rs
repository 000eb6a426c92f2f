use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fxlv_core::io;
use fxlv_core::{calibrate_dupire, CalibrationGrid, CallPriceSurface, TimeInterp};
use tempfile::TempDir;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

/// Copies the fixtures into a fresh directory and writes `run.toml` from
/// `config` with the given text replacements applied.
fn setup(config: &str, edits: &[(&str, &str)]) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    for entry in fs::read_dir(FIXTURES).unwrap() {
        let path = entry.unwrap().path();
        fs::copy(&path, dir.path().join(path.file_name().unwrap())).unwrap();
    }
    let mut text = fs::read_to_string(dir.path().join(config)).unwrap();
    for (from, to) in edits {
        assert!(text.contains(from), "fixture {config} has no `{from}`");
        text = text.replace(from, to);
    }
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn fxlv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fxlv")).args(args).output().unwrap()
}

fn run(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    fxlv(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", stderr(o));
}

fn grid_rows(path: &Path) -> Vec<(f64, f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

/// Flat-smile local vol under Hull-White rates with equal mean reversion
/// and volatility in both currencies and no spot-rate correlation.
fn flat_smile_local_vol(vol: f64, alpha: f64, sigma_r: f64, rho_df: f64, t: f64) -> f64 {
    let i = 2.0 / alpha * ((1.0 - (-alpha * t).exp()) / alpha - (1.0 - (-2.0 * alpha * t).exp()) / (2.0 * alpha));
    (vol * vol - 2.0 * sigma_r * sigma_r * (1.0 - rho_df) * i).sqrt()
}

#[test]
fn flat_smile_dupire_gives_a_flat_grid() {
    let (dir, cfg) = setup("flat.toml", &[]);
    let out = dir.path().join("out");
    assert_ok(&run("dupire", &cfg, &out, &[]));
    let rows = grid_rows(&out.join("loc_grid.csv"));
    assert_eq!(rows.len(), 32);
    for (t, k, s) in rows {
        assert!((s - 0.2).abs() < 1e-6, "sigma({t}, {k}) = {s}");
    }
    assert!(out.join("loc_grid.json").exists());
    assert!(out.join("diagnostics.csv").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn dupire_output_matches_the_library_call_byte_for_byte() {
    let (dir, cfg) = setup("skew.toml", &[]);
    let out = dir.path().join("out");
    assert_ok(&run("dupire", &cfg, &out, &[]));

    let p = dir.path();
    let iv = io::read_surface_csv(&p.join("surface_skew.csv"), 1.0).unwrap();
    let d = io::read_curve_csv(&p.join("domestic_upward.csv")).unwrap();
    let f = io::read_curve_csv(&p.join("foreign.csv")).unwrap();
    let market = CallPriceSurface::from_implied(iv, d, f);
    let grid = CalibrationGrid::new(
        vec![0.5, 1.0, 1.5, 2.0],
        vec![0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4],
    )
    .unwrap();
    let cal = calibrate_dupire(&market, &grid, 1e-4).unwrap();
    let mut csv = Vec::new();
    io::write_grid_csv(&mut csv, &cal.grid).unwrap();
    assert_eq!(fs::read(out.join("loc_grid.csv")).unwrap(), csv);
    let mut diag = Vec::new();
    io::write_diagnostics_csv(&mut diag, &cal.diagnostics).unwrap();
    assert_eq!(fs::read(out.join("diagnostics.csv")).unwrap(), diag);

    let back = io::read_grid_csv(&out.join("loc_grid.csv"), TimeInterp::Linear).unwrap();
    assert_eq!(back, cal.grid);
}

#[test]
fn malformed_csv_exits_2_with_the_line_number() {
    let (dir, cfg) = setup("flat.toml", &[("surface_flat.csv", "surface_malformed.csv")]);
    let o = run("dupire", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2, "stderr: {}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("surface_malformed.csv") && err.contains("line 3"), "{err}");
}

#[test]
fn configuration_errors_exit_2() {
    let out_of = |d: &TempDir| d.path().join("out");
    let (d, cfg) = setup("flat.toml", &[("schema_version = 1", "schema_version = 9")]);
    assert_eq!(code(&run("dupire", &cfg, &out_of(&d), &[])), 2);

    let (d, cfg) = setup("flat.toml", &[("[pde]\nn_x = 60\nn_y = 16\nn_z = 16\ndt = 0.02\n", "")]);
    let o = run("calibrate", &cfg, &out_of(&d), &["--engine", "pde"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("[pde]"), "{}", stderr(&o));

    let (d, cfg) = setup("flat.toml", &[("engine = \"mc\"", "")]);
    assert_eq!(code(&run("calibrate", &cfg, &out_of(&d), &[])), 2);

    let (d, cfg) = setup("flat.toml", &[("r0 = 0.03", "r0 = 0.05")]);
    assert_eq!(code(&run("calibrate", &cfg, &out_of(&d), &[])), 2);

    let (d, cfg) = setup("flat.toml", &[("domestic.csv", "missing.csv")]);
    assert_eq!(code(&run("dupire", &cfg, &out_of(&d), &[])), 2);

    let (d, cfg) = setup("flat.toml", &[("n_paths = 20000", "n_paths = 1")]);
    assert_eq!(code(&run("calibrate", &cfg, &out_of(&d), &[])), 2);

    assert_eq!(code(&fxlv(&["calibrate", "--engine", "fd"])), 2);
}

#[test]
fn numerical_failure_exits_1() {
    let (dir, cfg) = setup(
        "flat.toml",
        &[("n_x = 60", "n_x = 15"), ("n_y = 16", "n_y = 4"), ("n_z = 16", "n_z = 4"), ("dt = 0.02", "dt = 0.08")],
    );
    let o = run("calibrate", &cfg, &dir.path().join("out"), &["--engine", "pde"]);
    assert_eq!(code(&o), 1, "stderr: {}", stderr(&o));
    assert!(stderr(&o).contains("mass"), "{}", stderr(&o));
}

#[test]
fn mc_and_pde_grids_agree_with_the_flat_smile_closed_form() {
    let (dir, cfg) = setup("flat.toml", &[]);
    let (mc, pde) = (dir.path().join("mc"), dir.path().join("pde"));
    assert_ok(&run("calibrate", &cfg, &mc, &["--engine", "mc"]));
    assert_ok(&run("calibrate", &cfg, &pde, &["--engine", "pde"]));
    let a = grid_rows(&mc.join("loc_grid.csv"));
    let b = grid_rows(&pde.join("loc_grid.csv"));
    assert_eq!(a.len(), b.len());
    for ((t, k, s_mc), (_, _, s_pde)) in a.into_iter().zip(b) {
        let exact = flat_smile_local_vol(0.2, 0.05, 0.007, 0.0, t);
        assert!((s_mc - exact).abs() < 3e-3, "mc sigma({t}, {k}) = {s_mc}, exact {exact}");
        assert!((s_pde - exact).abs() < 3e-3, "pde sigma({t}, {k}) = {s_pde}, exact {exact}");
        assert!((s_mc - s_pde).abs() < 3e-3);
    }
}

#[test]
fn fixed_seed_reruns_and_manifest_replays_are_byte_identical() {
    let (dir, cfg) = setup("skew.toml", &[]);
    let p = dir.path();
    assert_ok(&run("calibrate", &cfg, &p.join("a"), &[]));
    assert_ok(&run("calibrate", &cfg, &p.join("b"), &[]));
    let first = files(&p.join("a"));
    assert_eq!(first.len(), 5);
    assert_eq!(first, files(&p.join("b")));

    // The manifest alone reproduces the run, even without the input files.
    let replay_dir = TempDir::new().unwrap();
    let manifest = replay_dir.path().join("manifest.json");
    fs::copy(p.join("a/manifest.json"), &manifest).unwrap();
    assert_ok(&run("calibrate", &manifest, &replay_dir.path().join("c"), &[]));
    assert_eq!(first, files(&replay_dir.path().join("c")));

    assert_ok(&run("calibrate", &cfg, &p.join("d"), &["--seed", "8"]));
    assert_ne!(fs::read(p.join("a/loc_grid.csv")).unwrap(), fs::read(p.join("d/loc_grid.csv")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(p.join("d/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 8);
}

#[test]
fn missing_sz_block_fails_only_the_hybrid_command() {
    let (dir, cfg) = setup("flat.toml", &[]);
    assert_ok(&run("calibrate", &cfg, &dir.path().join("a"), &[]));
    let o = run("hybrid", &cfg, &dir.path().join("b"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("[hybrid]"), "{}", stderr(&o));
}

#[test]
fn unit_multiplier_hybrid_returns_the_supplied_grid() {
    let (dir, cfg) = setup("flat.toml", &[]);
    let loc1 = dir.path().join("loc1");
    assert_ok(&run("dupire", &cfg, &loc1, &[]));
    let hybrid = fs::read_to_string(dir.path().join("hybrid.toml")).unwrap().replace(
        "[hybrid]\n",
        &format!("[hybrid]\nloc1 = \"{}\"\n", loc1.join("loc_grid").display()),
    );
    let cfg = dir.path().join("hybrid_run.toml");
    fs::write(&cfg, hybrid).unwrap();
    let out = dir.path().join("h");
    assert_ok(&run("hybrid", &cfg, &out, &[]));

    let input = grid_rows(&loc1.join("loc_grid.csv"));
    let output = grid_rows(&out.join("loc2_grid.csv"));
    for (t, k, s) in &input {
        let (_, _, s2) = output.iter().find(|(t2, k2, _)| t2 == t && k2 == k).unwrap();
        assert_eq!(s, s2, "sigma({t}, {k})");
    }
    assert!(!out.join("loc1_grid.csv").exists());
    let diag = fs::read_to_string(out.join("hybrid_diagnostics.csv")).unwrap();
    assert!(diag.lines().skip(1).all(|l| l.split(',').nth(2) == Some("1")), "{diag}");
    let rep = fs::read_to_string(out.join("repricing.csv")).unwrap();
    assert!(rep.starts_with("T,K,vol_local,vol_hybrid,diff_bp\n") && rep.lines().count() > 1);

    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert!(m["inputs"]["loc1_csv"]["sha256"].is_string());
}

#[test]
fn report_on_a_directory_without_a_manifest_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = fxlv(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&fxlv(&["report"])), 2);
}

#[test]
fn report_lists_every_check_with_a_stable_schema() {
    let (dir, cfg) = setup("hybrid.toml", &[]);
    let p = dir.path();
    assert_ok(&run("dupire", &cfg, &p.join("dupire"), &[]));
    assert_ok(&run("calibrate", &cfg, &p.join("mc"), &["--engine", "mc"]));
    assert_ok(&run("calibrate", &cfg, &p.join("pde"), &["--engine", "pde"]));
    assert_ok(&run("hybrid", &cfg, &p.join("hybrid"), &[]));
    let mut headers = Vec::new();
    for run_dir in ["dupire", "mc", "pde", "hybrid"] {
        let o = fxlv(&["report", "--out", p.join(run_dir).to_str().unwrap()]);
        assert_ok(&o);
        let report = p.join(run_dir).join("report");
        let text = fs::read_to_string(report.join("report.txt")).unwrap();
        assert!(text.contains("PASS output digests"), "{text}");
        assert!(!text.contains("FAIL"), "{text}");
        assert!(text.contains("summary: "), "{text}");
        if run_dir == "pde" {
            assert!(text.contains("PASS PDE mass conservation"), "{text}");
        }
        if run_dir == "hybrid" {
            assert!(text.contains("PASS hybrid repricing"), "{text}");
        }
        let head = |name: &str| {
            let s = fs::read_to_string(report.join(name)).unwrap();
            s.lines().next().unwrap().to_string()
        };
        headers.push([head("surface.csv"), head("smiles.csv"), head("convergence.csv")]);
    }
    assert!(headers.windows(2).all(|w| w[0] == w[1]), "{headers:?}");

    let conv = fs::read_to_string(p.join("pde/report/convergence.csv")).unwrap();
    assert_eq!(conv.lines().count(), 4, "{conv}");

    // Tampering with an output is detected.
    fs::write(p.join("mc/loc_grid.csv"), "time,spot,sigma\n0.5,1,0.2\n").unwrap();
    let o = fxlv(&["report", "--out", p.join("mc").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let text = fs::read_to_string(p.join("mc/report/report.txt")).unwrap();
    assert!(text.contains("FAIL output digests"), "{text}");
}
