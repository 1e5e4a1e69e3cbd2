use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agd::harness::{self, ExperimentConfig, SeedSpec, SweepAxis, SweepSpec};
use agd::optimizers::RunTrace;

const MINIMAL: &str = r#"{
    "problem": {"kind": "welsch", "dim": 4},
    "noise": {"kind": "exact"},
    "preset": {"kind": "adagrad", "averaging": "none", "g0": 0.0},
    "horizons": [100],
    "seeds": [0]
}"#;

fn agd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agd"))
        .args(args)
        .env_remove(harness::WORKERS_ENV)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn minimal(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn trace_file(out: &Path) -> PathBuf {
    out.join("adagrad/welsch/0/T100_seed0.csv")
}

#[test]
fn run_minimal_config_writes_one_trace_of_t_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg_path = write_config(dir.path(), &minimal(&out));
    let o = agd(&["run", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = RunTrace::read(&trace_file(&out)).unwrap();
    assert_eq!(trace.records.len(), 100);
    assert!(out.join("adagrad/welsch/0/T100_seed0.meta.json").is_file());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 1);
    assert_eq!(summary["provenance"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg_path = write_config(dir.path(), &minimal(&out));
    agd(&["run", "--config", cfg_path.to_str().unwrap()]);
    let first = std::fs::read(trace_file(&out)).unwrap();
    agd(&["run", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(trace_file(&out)).unwrap());
}

#[test]
fn traces_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = minimal(&dir.path().join("unused"));
    cfg.preset = agd::schedules::Preset::adagrad(0.01);
    cfg.noise = harness::NoiseSpec {
        kind: agd::oracle::NoiseKind::SubgaussianGaussian,
        sigma: 0.5,
        clip: None,
        batch_size: None,
    };
    cfg.seeds = SeedSpec::Derived { count: 8, master: 11 };
    let cfg_path = write_config(dir.path(), &cfg);
    let mut files = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("w{workers}"));
        let o = agd(&["run", "--config", cfg_path.to_str().unwrap(), "--workers", workers, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        let mut names: Vec<_> = walk_csv(&out);
        names.sort();
        files.push(names.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(files[0].len(), 8);
    assert_eq!(files[0], files[1]);
}

fn walk_csv(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk_csv(&p));
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    out
}

#[test]
fn seed_override_replaces_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg_path = write_config(dir.path(), &minimal(&out));
    let o = agd(&["run", "--config", cfg_path.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("adagrad/welsch/0/T100_seed5.csv").is_file());
}

#[test]
fn high_probability_checks_reject_large_delta() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = minimal(&dir.path().join("out"));
    cfg.delta = 0.5;
    cfg.high_prob_checks = true;
    let cfg_path = write_config(dir.path(), &cfg);
    let o = agd(&["run", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta"));
}

#[test]
fn usage_and_config_errors_exit_two() {
    assert_eq!(agd(&["bogus"]).status.code(), Some(2));
    assert_eq!(agd(&["run", "--config", "/nonexistent/config.json"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let o = agd(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json"));
}

#[test]
fn unwritable_output_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let cfg_path = write_config(dir.path(), &minimal(&blocker.join("out")));
    assert_eq!(agd(&["run", "--config", cfg_path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn divergent_runs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = minimal(&dir.path().join("out"));
    cfg.preset = agd::schedules::Preset::sgd_fixed(1e6);
    cfg.problem = harness::ProblemSpec::Quadratic { eigenvalues: vec![1.0, 2.0] };
    let cfg_path = write_config(dir.path(), &cfg);
    let o = agd(&["run", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap();
    assert!(summary.contains("diverged"));
}

#[test]
fn report_on_empty_directory_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = agd(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no traces found"));
}

#[test]
fn report_after_run_has_one_row_per_metric() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg_path = write_config(dir.path(), &minimal(&out));
    agd(&["run", "--config", cfg_path.to_str().unwrap()]);
    let o = agd(&["report", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.starts_with("adagrad/welsch/0,")));
    assert!(rows[0].starts_with("adagrad/welsch/0,avg_grad_sq,100,1,"));
    assert!(rows[0].ends_with(",true"), "deterministic bound row: {}", rows[0]);
}

#[test]
fn report_groups_mixed_presets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut cfg = minimal(&out);
    cfg.preset = agd::schedules::Preset::adagrad(0.01);
    harness::cmd_run(&cfg).unwrap();
    cfg.preset = agd::schedules::Preset::rsag(0.01, agd::schedules::Averaging::Weighted);
    harness::cmd_run(&cfg).unwrap();
    let r = harness::cmd_report(&out, &harness::ReportOptions::default()).unwrap();
    assert_eq!(r.n_traces, 2);
    assert!(r.table.contains("== adagrad/welsch/0"));
    assert!(r.table.contains("== rsag/welsch/0"));
}

#[test]
fn malformed_trace_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let group = dir.path().join("adagrad/welsch/0");
    std::fs::create_dir_all(&group).unwrap();
    std::fs::write(group.join("T10_seed0.csv"), "not,a,trace\n1,2,3\n").unwrap();
    let o = agd(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("T10_seed0.csv"));
}

#[test]
fn horizon_sweep_fits_three_points_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = minimal(&dir.path().join("out"));
    cfg.horizons = vec![100, 1000, 10000];
    cfg.sweep = Some(SweepSpec {
        axis: SweepAxis::Horizon,
        values: None,
    });
    let report = harness::cmd_sweep(&cfg).unwrap();
    let fit = report.groups[0].rate_fit.as_ref().unwrap();
    assert_eq!(fit.points.len(), 3);
    let written = std::fs::read_to_string(cfg.output_dir.join("report.json")).unwrap();
    let again = harness::report_json(&harness::regenerate_report(&cfg).unwrap());
    assert_eq!(written, again);
}

#[test]
fn sigma_sweep_reports_one_slope_per_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = minimal(&dir.path().join("out"));
    cfg.preset = agd::schedules::Preset::adagrad(0.01);
    cfg.noise = harness::NoiseSpec {
        kind: agd::oracle::NoiseKind::SubgaussianGaussian,
        sigma: 0.0,
        clip: None,
        batch_size: None,
    };
    cfg.horizons = vec![100, 1000, 10000];
    cfg.seeds = SeedSpec::Derived { count: 20, master: 1 };
    cfg.sweep = Some(SweepSpec {
        axis: SweepAxis::Sigma,
        values: Some(vec![0.0, 0.1, 1.0]),
    });
    let report = harness::cmd_sweep(&cfg).unwrap();
    assert_eq!(report.sigma_slopes.len(), 3);
    assert!(report.slopes_monotone.is_some());
}

#[test]
fn sweep_with_two_values_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = minimal(&dir.path().join("out"));
    cfg.horizons = vec![100, 1000];
    cfg.sweep = Some(SweepSpec {
        axis: SweepAxis::Horizon,
        values: None,
    });
    let cfg_path = write_config(dir.path(), &cfg);
    assert_eq!(agd(&["sweep", "--config", cfg_path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn verify_lemmas_emits_json_lines() {
    let o = agd(&["verify", "--suite", "lemmas"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let records: Vec<agd::analysis::CheckRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r.check == "sqrt_sum_lemma" && r.passed()));
    assert!(records.iter().any(|r| r.check == "log_sum_lemma_scale_free" && r.passed()));
    // The unscaled log lemma has counterexamples in the corpus, so the suite
    // reports a verification failure.
    assert!(records.iter().any(|r| r.check == "log_sum_lemma" && !r.passed()));
    assert_eq!(o.status.code(), Some(1));
    let again = agd(&["verify", "--suite", "lemmas"]);
    assert_eq!(text.as_bytes(), again.stdout.as_slice());
}

#[test]
fn verify_pathwise_passes_and_halved_l_fails() {
    let o = agd(&["verify", "--suite", "pathwise"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let o = agd(&["verify", "--suite", "pathwise", "--l-scale", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains(r#""check":"descent_lemma""#));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    assert_eq!(agd(&["verify", "--suite", "everything"]).status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        match cfg.sweep {
            Some(_) => cfg.validate_sweep(),
            None => cfg.validate(),
        }
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}
