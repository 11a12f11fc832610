//! End-to-end tests of the `torus-response` binary: artifact determinism,
//! metadata-driven reproduction, flag overrides, and the error surface.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

use torus_response::basis::PerturbationSpace;
use torus_response::io::read_riesz_csv;
use torus_response::systems::KuramotoSpec;

const BIN: &str = env!("CARGO_BIN_EXE_torus-response");

/// A two-dimensional Kuramoto run small enough for test turnaround: eight
/// basis elements and a 120-time-unit horizon.
const TINY_KURAMOTO: &str = "\
system = \"kuramoto2\"

[space]
n_max = 2

[estimator]
total_time = 120.0
decorrelation_time = 1.0
dt = 0.02
burn_in_time = 10.0
seed = 9
";

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("experiment.toml");
    fs::write(&path, text).expect("write config");
    path
}

fn run_cli(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("spawn torus-response")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run_cli(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn respond_is_byte_identical_across_runs_and_directories() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), TINY_KURAMOTO);
    let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));

    for dir in [&dir_a, &dir_b] {
        run_ok(&[
            "respond",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
    }

    let coeffs_a = read(&dir_a.join("coefficients.csv"));
    let coeffs_b = read(&dir_b.join("coefficients.csv"));
    assert_eq!(coeffs_a, coeffs_b, "coefficient bytes differ between runs");
    assert!(coeffs_a.starts_with("j,n_1,n_2,estimate,std_error\n"));

    let meta_a = read(&dir_a.join("metadata.toml"));
    let meta_b = read(&dir_b.join("metadata.toml"));
    assert_eq!(meta_a, meta_b, "metadata bytes differ between directories");
}

#[test]
fn seed_flag_overrides_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), TINY_KURAMOTO);
    let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));

    run_ok(&[
        "respond",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir_a.to_str().unwrap(),
    ]);
    run_ok(&[
        "respond",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "10",
        "--out",
        dir_b.to_str().unwrap(),
    ]);

    let coeffs_a = read(&dir_a.join("coefficients.csv"));
    let coeffs_b = read(&dir_b.join("coefficients.csv"));
    assert_ne!(coeffs_a, coeffs_b, "different seeds must change estimates");
    assert!(read(&dir_b.join("metadata.toml")).contains("seed = 10"));
}

#[test]
fn optimize_writes_a_unit_norm_direction() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), TINY_KURAMOTO);
    let out = tmp.path().join("run");

    run_ok(&[
        "optimize",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);

    let spec = KuramotoSpec::two_dim();
    let space = PerturbationSpace::full_product(spec.domain(), 5, 2).unwrap();
    let eta = read_riesz_csv(&out.join("eta_opt.csv"), &space).unwrap();
    let sq = space.inner_product(eta.coefficients(), eta.coefficients());
    assert!(
        (sq - 1.0).abs() <= 1.0e-12,
        "eta_opt squared norm {sq} should be 1 within 1e-12"
    );
}

#[test]
fn metadata_reproduces_the_run_bit_exactly() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), TINY_KURAMOTO);
    let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));

    run_ok(&[
        "optimize",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir_a.to_str().unwrap(),
    ]);
    run_ok(&[
        "optimize",
        "--config",
        dir_a.join("metadata.toml").to_str().unwrap(),
        "--out",
        dir_b.to_str().unwrap(),
    ]);

    for name in ["coefficients.csv", "eta_opt.csv", "metadata.toml"] {
        assert_eq!(
            read(&dir_a.join(name)),
            read(&dir_b.join(name)),
            "{name} differs when re-run from metadata"
        );
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "system = \"kuramoto2\"\n\n[estimator]\nbogus_key = 1\n",
    );

    let out = run_cli(&["respond", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success(), "bad config must fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("unknown field"),
        "stderr should name the unknown field, got: {stderr}"
    );
}

#[test]
fn missing_system_id_lists_the_registry() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), "[estimator]\nseed = 1\n");

    let out = run_cli(&["respond", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success(), "missing system id must fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    for id in ["kuramoto2", "kuramoto20-reduced", "lorenz-cutoff"] {
        assert!(stderr.contains(id), "stderr should list {id}, got: {stderr}");
    }
}

#[test]
fn oracle_rejects_three_dimensional_systems() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), "system = \"lorenz-cutoff\"\n");

    let out = run_cli(&[
        "oracle",
        "--config",
        config.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "oracle must refuse d = 3");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("dimensions 1 and 2") && stderr.contains("3"),
        "stderr should explain the dimension limit, got: {stderr}"
    );
}

#[test]
fn sweep_tabulates_each_strength() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        &format!("{TINY_KURAMOTO}\n[sweep]\ngammas = [-0.1, 0.1]\ntarget = \"1:1,0\"\n"),
    );
    let out = tmp.path().join("run");

    run_ok(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);

    let sweep = read(&out.join("sweep.csv"));
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "gamma,mean,std_error");
    assert_eq!(lines.len(), 3, "expected a header plus one row per strength");
    assert!(read(&out.join("metadata.toml")).contains("target = \"1:1,0\""));
}

#[test]
fn oracle_reports_the_diagnostic_suite() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        &format!("{TINY_KURAMOTO}\n[oracle]\nm_per_dim = 32\ndt = 0.25\n"),
    );
    let out = tmp.path().join("run");

    run_ok(&[
        "oracle",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);

    let report = read(&out.join("oracle_report.csv"));
    assert!(report.starts_with("metric,value\n"));
    for metric in [
        "invariant_density_mass",
        "lambda2_modulus",
        "spectral_gap",
        "min_kernel_density",
        "contraction_rho",
        "resolvent_response",
        "expansion_slope",
        "l2_smoothing_exponent",
    ] {
        assert!(report.contains(metric), "report is missing {metric}");
    }
}

#[test]
fn simulate_writes_a_strided_orbit() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        &format!("{TINY_KURAMOTO}\n[simulate]\ntime = 2.0\nstride = 5\n"),
    );
    let out = tmp.path().join("run");

    run_ok(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);

    let orbit = read(&out.join("orbit.csv"));
    let lines: Vec<&str> = orbit.lines().collect();
    assert_eq!(lines[0], "t,x_1,x_2");
    // 2.0 / 0.02 = 100 steps -> 101 states; stride 5 keeps n = 0, 5, ..., 100.
    assert_eq!(lines.len(), 22, "expected a header plus 21 samples");
    assert!(lines[1].starts_with("0.0000000000000000e0,"));
}

#[test]
fn desk_scale_divides_the_horizon_by_five() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        "\
system = \"kuramoto2\"

[space]
n_max = 2

[estimator]
total_time = 600.0
decorrelation_time = 1.0
dt = 0.02
burn_in_time = 10.0
seed = 9
",
    );
    let out = tmp.path().join("run");

    run_ok(&[
        "respond",
        "--config",
        config.to_str().unwrap(),
        "--scale",
        "desk",
        "--out",
        out.to_str().unwrap(),
    ]);

    let meta = read(&out.join("metadata.toml"));
    assert!(
        meta.contains("total_time = 120.0"),
        "desk scale should shrink the horizon, metadata was:\n{meta}"
    );
    assert!(meta.contains("scale = \"desk\""));
}
