use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use eruption_cli::compare::{run_comparison, COMPARISON_FILE, CURVES_FILE};
use eruption_cli::config::ExperimentConfig;
use eruption_cli::export::export_trajectories;
use eruption_cli::lemmas::{run_lemma_suite, Fault, CHECKS};
use eruption_cli::record::{MetricRecord, TrajectoryRecord};
use eruption_cli::run::{run_training, snapshot_path, METRICS_FILE, STEPS_FILE, SUMMARY_FILE};
use eruption_core::env::{reward, score_format, score_semantic, ToolQASpec};

fn quick(dir: &Path, steps: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.train.steps = steps;
    c.diagnostics.every = 2;
    c.diagnostics.exact = false;
    c.output.dir = dir.to_path_buf();
    c
}

fn metrics(dir: &Path) -> Vec<MetricRecord> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn zero_steps_logs_only_the_initial_state() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick(tmp.path(), 0);
    c.diagnostics.exact = true;
    let out = run_training(&c).unwrap();
    let m = metrics(tmp.path());
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].step, 0);
    assert!(m[0].trajectory_entropy.is_some() && m[0].rl_loss.is_none());
    assert_eq!(fs::read_to_string(tmp.path().join(STEPS_FILE)).unwrap(), "");
    assert!(snapshot_path(tmp.path(), 0).exists());
    assert_eq!(out.summary.steps_completed, 0);
}

#[test]
fn metric_ticks_follow_the_cadence() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick(tmp.path(), 7);
    c.diagnostics.every = 3;
    c.output.checkpoint_every = 3;
    let out = run_training(&c).unwrap();
    let steps: Vec<u64> = metrics(tmp.path()).iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 3, 6, 7]);
    assert_eq!(
        out.summary.checkpoints,
        vec!["step_000003.snap", "step_000006.snap", "step_000007.snap"]
    );
    // Absent diagnostics are omitted, never written as zero.
    let text = fs::read_to_string(tmp.path().join(METRICS_FILE)).unwrap();
    assert!(!text.contains("trajectory_entropy") && !text.contains("wall_clock_ms"));
    assert!(text.lines().next().unwrap().contains("predicted_drift"));
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_training(&quick(a.path(), 6)).unwrap();
    run_training(&quick(b.path(), 6)).unwrap();
    for file in [METRICS_FILE, STEPS_FILE] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap()
        );
    }
    assert_eq!(
        fs::read(snapshot_path(a.path(), 6)).unwrap(),
        fs::read(snapshot_path(b.path(), 6)).unwrap()
    );
    let c = tempfile::tempdir().unwrap();
    let mut other = quick(c.path(), 6);
    other.seed = 1;
    run_training(&other).unwrap();
    assert_ne!(
        fs::read(a.path().join(METRICS_FILE)).unwrap(),
        fs::read(c.path().join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn export_rescores_to_the_stored_bits() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick(tmp.path(), 5);
    c.train.group_size = 6;
    run_training(&c).unwrap();
    let (path, n) = export_trajectories(tmp.path(), None).unwrap();
    assert_eq!(n, 5 * 6);
    let spec = ToolQASpec::micro();
    let lines = fs::read_to_string(path).unwrap();
    assert_eq!(lines.lines().count(), n);
    for line in lines.lines() {
        let t: TrajectoryRecord = serde_json::from_str(line).unwrap();
        assert_eq!(score_format(&spec, &t.response), t.r_fmt);
        assert_eq!(
            score_semantic(&spec, &t.prompt, &t.response).unwrap(),
            t.r_sem
        );
        assert_eq!(t.token_log_probs.len(), t.response.len());
        assert_eq!(reward(t.r_fmt, t.r_sem).to_bits(), t.reward.to_bits());
        let sum: f64 = t.token_log_probs.iter().sum();
        assert!((sum - t.log_likelihood).abs() <= 1e-12 * sum.abs().max(1.0));
    }
}

#[test]
fn export_of_empty_and_missing_runs() {
    let tmp = tempfile::tempdir().unwrap();
    run_training(&quick(tmp.path(), 0)).unwrap();
    let (path, n) = export_trajectories(tmp.path(), Some(&tmp.path().join("t.jsonl"))).unwrap();
    assert_eq!(n, 0);
    assert_eq!(fs::read_to_string(path).unwrap(), "");
    assert!(export_trajectories(&tmp.path().join("nope"), None).is_err());
    let bare = tempfile::tempdir().unwrap();
    assert!(export_trajectories(bare.path(), None).is_err());
}

#[test]
fn non_finite_step_halts_and_keeps_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick(tmp.path(), 50);
    c.train.learning_rate = 1e300;
    c.diagnostics.every = 1;
    c.diagnostics.drift = false;
    let Err(err) = run_training(&c) else {
        panic!("run should halt")
    };
    assert!(format!("{err:#}").contains("non-finite"), "{err:#}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert!(summary["halted"].as_str().is_some());
    let done = summary["steps_completed"].as_u64().unwrap();
    assert!(done < 50);
    assert!(!metrics(tmp.path()).is_empty());
}

#[test]
fn comparison_cardinality_and_null_control() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick(tmp.path(), 4);
    c.compare.seeds = 3;
    c.diagnostics.heldout = 8;
    let r = run_comparison(&c, &[0.0, 0.5], tmp.path()).unwrap();
    assert_eq!(r.runs.len(), 6);
    assert_eq!(r.deltas.len(), 3);
    assert_eq!(r.summaries.len(), 1);
    assert!(tmp.path().join(COMPARISON_FILE).exists());
    let curves = fs::read_to_string(tmp.path().join(CURVES_FILE)).unwrap();
    assert_eq!(curves.lines().count(), 6 * 3);

    let null = tempfile::tempdir().unwrap();
    let r = run_comparison(&c, &[0.0, 0.0], null.path()).unwrap();
    for d in &r.deltas {
        for v in [
            d.final_heldout_seal_loss,
            d.peak_token_entropy,
            d.reward_mean,
            d.duplication_ratio,
        ] {
            assert_eq!(v, Some(0.0));
        }
        // Separation needs both labels among the held-out trajectories.
        for v in [d.cosine_gap, d.probe_accuracy] {
            assert!(v.is_none_or(|x| x == 0.0));
        }
    }
}

#[test]
fn fault_injection_names_the_output_block_check() {
    let tmp = tempfile::tempdir().unwrap();
    let c = quick(tmp.path(), 0);
    let report = run_lemma_suite(&c, Some(Fault::OutputBlock)).unwrap();
    assert_eq!(report.entries.len(), 5 * CHECKS.len());
    for check in CHECKS {
        assert_eq!(
            report.entries.iter().filter(|e| e.check == *check).count(),
            5,
            "{check}"
        );
    }
    assert!(!report.all_passed());
    assert_eq!(report.failed_checks(), vec!["w_block_identity"]);
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eruption"))
}

#[test]
fn binary_reports_field_level_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.conf");
    fs::write(&bad, "diagnostics.every = 0\n").unwrap();
    let out = binary()
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diagnostics.every"));

    let out = binary()
        .args(["train", "--out"])
        .arg(tmp.path().join("run"))
        .env("ERUPTION_TRAIN_STEPS", "often")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.steps"));

    let out = binary()
        .args(["export-trajectories", "--run"])
        .arg(tmp.path().join("missing"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn binary_trains_with_env_and_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let out = binary()
        .args(["train", "--seed", "3", "--config"])
        .arg(preset("micro-exact.conf"))
        .arg("--out")
        .arg(tmp.path())
        .env("ERUPTION_TRAIN_STEPS", "2")
        .env("ERUPTION_DIAGNOSTICS_EXACT", "false")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let config = ExperimentConfig::from_file(&tmp.path().join("config.conf")).unwrap();
    assert_eq!(
        (config.seed, config.train.steps, config.diagnostics.exact),
        (3, 2, false)
    );
    assert_eq!(metrics(tmp.path()).len(), 2);
}

#[test]
fn shipped_presets_parse_and_validate() {
    let micro = ExperimentConfig::from_file(&preset("micro-exact.conf")).unwrap();
    micro.validate().unwrap();
    assert_eq!(micro.spec().unwrap(), ToolQASpec::micro());
    let small = ExperimentConfig::from_file(&preset("small-dynamics.conf")).unwrap();
    small.validate().unwrap();
    assert_eq!(small.spec().unwrap(), ToolQASpec::small());
    assert!(small.mid_train.enabled && small.diagnostics.heldout > 0);
}
