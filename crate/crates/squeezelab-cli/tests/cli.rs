//! End-to-end tests of the `squeezelab` binary: exit codes, configuration
//! layering, and byte-for-byte reproducibility of the CSV outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_squeezelab")
}

const BASE_CONFIG: &str = "\
master_seed = 42
n_trials = 60
hold_points = 12
r = 0.85
";

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_in(
    dir: &Path,
    sub: &str,
    config_body: &str,
    sets: &[&str],
    env_seed: Option<&str>,
) -> Run {
    let conf = dir.join("run.conf");
    fs::write(&conf, config_body).unwrap();
    let mut cmd = Command::new(bin());
    cmd.arg(sub).arg(&conf);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.env_remove("SQUEEZELAB_SEED");
    if let Some(seed) = env_seed {
        cmd.env("SQUEEZELAB_SEED", seed);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn out_arg(dir: &Path, name: &str) -> (PathBuf, String) {
    let out = dir.join(name);
    let arg = format!("output_dir={}", out.display());
    (out, arg)
}

#[test]
fn identical_configs_give_byte_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let (out_a, set_a) = out_arg(tmp.path(), "a");
    let (out_b, set_b) = out_arg(tmp.path(), "b");
    let (out_c, set_c) = out_arg(tmp.path(), "c");

    let a = run_in(tmp.path(), "time-sweep", BASE_CONFIG, &[&set_a], None);
    assert_eq!(a.code, 0, "stderr: {}", a.stderr);
    let b = run_in(tmp.path(), "time-sweep", BASE_CONFIG, &[&set_b], None);
    assert_eq!(b.code, 0);
    // Same seed and inputs on four workers instead of the default one.
    let c = run_in(
        tmp.path(),
        "time-sweep",
        BASE_CONFIG,
        &[&set_c, "workers=4"],
        None,
    );
    assert_eq!(c.code, 0);

    let fig_a = fs::read(out_a.join("fig2.csv")).unwrap();
    let fig_b = fs::read(out_b.join("fig2.csv")).unwrap();
    let fig_c = fs::read(out_c.join("fig2.csv")).unwrap();
    assert_eq!(fig_a, fig_b, "repeat run must be byte-identical");
    assert_eq!(fig_a, fig_c, "worker count must not change bytes");
}

#[test]
fn env_seed_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let (out_a, set_a) = out_arg(tmp.path(), "a");
    let (out_b, set_b) = out_arg(tmp.path(), "b");
    let (out_c, set_c) = out_arg(tmp.path(), "c");

    assert_eq!(run_in(tmp.path(), "time-sweep", BASE_CONFIG, &[&set_a], None).code, 0);
    // A different seed through the environment changes the data...
    assert_eq!(
        run_in(tmp.path(), "time-sweep", BASE_CONFIG, &[&set_b], Some("777")).code,
        0
    );
    // ...and the same seed through the environment reproduces it.
    assert_eq!(
        run_in(tmp.path(), "time-sweep", BASE_CONFIG, &[&set_c], Some("42")).code,
        0
    );
    let fig_a = fs::read(out_a.join("fig2.csv")).unwrap();
    let fig_b = fs::read(out_b.join("fig2.csv")).unwrap();
    let fig_c = fs::read(out_c.join("fig2.csv")).unwrap();
    assert_ne!(fig_a, fig_b);
    assert_eq!(fig_a, fig_c);
}

#[test]
fn config_problems_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, set_out) = out_arg(tmp.path(), "out");

    // Unknown key.
    let r = run_in(
        tmp.path(),
        "time-sweep",
        BASE_CONFIG,
        &[&set_out, "not_a_key=1"],
        None,
    );
    assert_eq!(r.code, 4, "stderr: {}", r.stderr);
    assert!(r.stderr.contains("not_a_key"));

    // Missing master_seed.
    let r = run_in(tmp.path(), "time-sweep", "n_trials = 60\n", &[&set_out], None);
    assert_eq!(r.code, 4);
    assert!(r.stderr.contains("master_seed"));

    // Unparsable value.
    let r = run_in(
        tmp.path(),
        "time-sweep",
        BASE_CONFIG,
        &[&set_out, "n_trials=sixty"],
        None,
    );
    assert_eq!(r.code, 4);

    // Duplicate key in the file.
    let r = run_in(
        tmp.path(),
        "time-sweep",
        "master_seed = 1\nmaster_seed = 2\n",
        &[&set_out],
        None,
    );
    assert_eq!(r.code, 4);

    // Missing config file entirely.
    let out = Command::new(bin())
        .arg("time-sweep")
        .arg(tmp.path().join("missing.conf"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));

    // Too few squeezing strengths for an r sweep.
    let r = run_in(
        tmp.path(),
        "r-sweep",
        BASE_CONFIG,
        &[&set_out, "r_values=0.85"],
        None,
    );
    assert_eq!(r.code, 4);
}

#[test]
fn estimator_preconditions_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, set_out) = out_arg(tmp.path(), "out");
    // A zero-length hold sweep cannot constrain the variance oscillation.
    let r = run_in(
        tmp.path(),
        "time-sweep",
        BASE_CONFIG,
        &[&set_out, "hold_start_s=0", "hold_stop_s=0"],
        None,
    );
    assert_eq!(r.code, 2, "stderr: {}", r.stderr);
}

#[test]
fn oracle_breach_exits_3_but_still_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, set_out) = out_arg(tmp.path(), "out");
    let r = run_in(
        tmp.path(),
        "oracle-check",
        BASE_CONFIG,
        &[
            &set_out,
            "oracle_trials=2000",
            "oracle_holds=6",
            "oracle_rs=0,0.85",
            // Impossible budget: any Monte Carlo scatter trips it.
            "oracle_threshold=1e-12",
        ],
        None,
    );
    assert_eq!(r.code, 3, "stderr: {}", r.stderr);
    // The evidence is on disk even though the run failed.
    let csv = fs::read_to_string(out.join("oracle.csv")).unwrap();
    assert!(csv.starts_with("r,hold_s,mc_v_tilde,predicted_v_tilde,analytic_v_tilde,rel_dev"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["results"]["passed"], false);
}

#[test]
fn oracle_check_passes_with_sane_threshold() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, set_out) = out_arg(tmp.path(), "out");
    let r = run_in(
        tmp.path(),
        "oracle-check",
        BASE_CONFIG,
        &[&set_out, "oracle_trials=4000", "oracle_holds=8", "oracle_rs=0,0.85"],
        None,
    );
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["results"]["passed"], true);
    // The threshold self-scales for small smoke runs.
    let eff = report["results"]["effective_threshold"].as_f64().unwrap();
    let base = report["results"]["threshold"].as_f64().unwrap();
    assert!(eff > base);
}

#[test]
fn report_records_seed_fingerprint_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, set_out) = out_arg(tmp.path(), "out");
    let r = run_in(tmp.path(), "noise-budget", BASE_CONFIG, &[&set_out], None);
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    assert!(r.stdout.contains("noise-budget"));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "noise-budget");
    assert_eq!(report["master_seed"], 42);
    assert_eq!(report["outputs"][0], "noise_budget.csv");
    assert!(report["config_fingerprint"].as_str().unwrap().len() == 16);
    // The merged config is echoed, including the override.
    assert!(report["config"]["output_dir"]
        .as_str()
        .unwrap()
        .ends_with("out"));

    let csv = fs::read_to_string(out.join("noise_budget.csv")).unwrap();
    assert!(csv.lines().count() >= 9, "8 entries plus header and total");
    assert!(csv.lines().last().unwrap().starts_with("total,"));
}

#[test]
fn calibration_commands_agree_on_the_hidden_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, set_out) = out_arg(tmp.path(), "out");
    // Ideal-readout mode keeps this test fast; the full trace pipeline is
    // covered by the acceptance suite.
    let r = run_in(
        tmp.path(),
        "calib-lattice",
        BASE_CONFIG,
        &[
            &set_out,
            "synthesize_traces=false",
            "traces_per_point=40",
            "calib_trials=2000",
        ],
        None,
    );
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let rel = report["results"]["relative_difference"].as_f64().unwrap();
    assert!(rel < 0.05, "lattice vs TOF differ by {rel}");
    for file in ["fig4c.csv", "fig4d.csv"] {
        assert!(out.join(file).exists(), "{file} missing");
    }

    let (out2, set_out2) = out_arg(tmp.path(), "out2");
    let r = run_in(
        tmp.path(),
        "calib-tof",
        BASE_CONFIG,
        &[&set_out2, "calib_trials=2000"],
        None,
    );
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out2.join("report.json")).unwrap()).unwrap();
    let rel = report["results"]["relative_error_vs_truth"].as_f64().unwrap();
    assert!(rel < 0.05, "TOF calibration off truth by {rel}");
    assert!(out2.join("figS-tof.csv").exists());
}

#[test]
fn calib_tof_reads_external_points() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, set_out) = out_arg(tmp.path(), "out");
    // Widths consistent with an exact 2e9 V/m detector at 51 us flight.
    let k = 2e9_f64;
    let t_tof = 51e-6_f64;
    let params = squeezelab::phasespace::PhysicalParams::default();
    let mut csv = String::from("occupation,width_volts\n");
    for n in [2.0, 4.0, 8.0, 16.0] {
        let dv = squeezelab::calibration::thermal_velocity_width(n, &params).unwrap();
        csv.push_str(&format!("{n},{}\n", k * t_tof * dv));
    }
    let path = tmp.path().join("points.csv");
    fs::write(&path, csv).unwrap();

    let set_input = format!("input_csv={}", path.display());
    let r = run_in(
        tmp.path(),
        "calib-tof",
        BASE_CONFIG,
        &[&set_out, &set_input],
        None,
    );
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let fitted = report["results"]["calibration"]["volts_per_meter"]
        .as_f64()
        .unwrap();
    assert!((fitted - k).abs() / k < 1e-9, "fitted {fitted}");
}
