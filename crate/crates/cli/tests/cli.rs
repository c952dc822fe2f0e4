use std::fs;
use std::path::Path;
use std::process::Command;

use morphsim::commands::{cmd_compare, cmd_profile, cmd_run, sweep};
use morphsim::{Arm, CliError, ExperimentConfig};
use morphsim_core::engine::MetricsReport;
use morphsim_core::profiler::{Provenance, SwapSequence};

fn small_profile(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..Default::default()
    };
    cfg.profile.layers = 8;
    cfg.profile.dim = 16;
    cfg
}

fn light_load(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..Default::default()
    };
    if let morphsim::config::WorkloadConfig::Synth(s) = &mut cfg.workload {
        s.base_rps = 1.0;
        s.burst_rps = 1.0;
        s.burst_start_ms = 5_000;
        s.burst_len_ms = 5_000;
        s.total_ms = 20_000;
    }
    cfg
}

fn read_report(path: &Path) -> MetricsReport {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn profile_writes_four_sequences_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_profile(dir.path());
    let out = cmd_profile(&cfg).unwrap();
    assert_eq!(out.sequences.len(), 4);
    let lis = SwapSequence::load(&out.sequences[0]).unwrap();
    assert_eq!(lis.provenance, Provenance::LisGreedy);
    assert_eq!(lis.order.len(), 8);
    let csv = fs::read_to_string(&out.curves).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "depth,lis,front_to_back,back_to_front,random");
    assert_eq!(lines.len(), 1 + 9);
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 5));
    assert_eq!(lines[1], "0,0,0,0,0");

    let first: Vec<Vec<u8>> = out.sequences.iter().map(|p| fs::read(p).unwrap()).collect();
    let again = cmd_profile(&cfg).unwrap();
    let second: Vec<Vec<u8>> = again
        .sequences
        .iter()
        .map(|p| fs::read(p).unwrap())
        .collect();
    assert_eq!(first, second);
    assert_eq!(csv, fs::read_to_string(&again.curves).unwrap());
}

#[test]
fn static_quant_timeline_constant_at_layer_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = light_load(dir.path());
    cmd_run(&cfg, Arm::StaticQuant).unwrap();
    let arm = dir.path().join("static-quant");
    let report = read_report(&arm.join("report.json"));
    assert!(!report.timeline.is_empty());
    assert!(report.timeline.iter().all(|s| s.quantized_layers == 32));
    let csv = fs::read_to_string(arm.join("timeline.csv")).unwrap();
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(3) == Some("32")));
    assert!(arm.join("events.jsonl").exists());
}

#[test]
fn morph_below_threshold_matches_static_full_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = light_load(dir.path());
    cmd_run(&cfg, Arm::StaticFull).unwrap();
    cmd_run(&cfg, Arm::MorphAccuracy).unwrap();
    let full = read_report(&dir.path().join("static-full/report.json"));
    let mut morph = read_report(&dir.path().join("morph-accuracy/report.json"));
    assert_eq!(morph.arm, "morph-accuracy");
    morph.arm = full.arm.clone();
    assert_eq!(morph, full);
    assert_eq!(full.config_fingerprint, Some(cfg.fingerprint()));
}

#[test]
fn missing_sequence_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = light_load(dir.path());
    let missing = dir.path().join("no_such_sequence.json");
    cfg.controller.sequence_file = Some(missing.clone());
    let err = cmd_run(&cfg, Arm::MorphPerformance).unwrap_err();
    assert!(matches!(err, CliError::Validation(_)));
    assert!(
        err.to_string().contains(&missing.display().to_string()),
        "{err}"
    );
}

#[test]
fn profiled_sequence_drives_morph_arm() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_profile(dir.path());
    cfg.profile.layers = 32;
    let out = cmd_profile(&cfg).unwrap();
    cfg.controller.sequence_file = Some(out.sequences[0].clone());
    let lis = SwapSequence::load(&out.sequences[0]).unwrap();
    let run = cmd_run(&cfg, Arm::MorphPerformance).unwrap();
    let first_swapped: Vec<usize> = run
        .report
        .precision_changes
        .iter()
        .filter(|c| c.precision != morphsim_core::Precision::Full)
        .map(|c| c.layer)
        .take(2)
        .collect();
    assert_eq!(first_swapped, lis.order[..2]);
}

#[test]
fn sequence_for_wrong_layer_count_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_profile(dir.path());
    let out = cmd_profile(&cfg).unwrap();
    cfg.controller.sequence_file = Some(out.sequences[0].clone());
    assert!(matches!(
        cmd_run(&cfg, Arm::MorphPerformance),
        Err(CliError::Validation(_))
    ));
}

#[test]
fn sweep_p95_non_decreasing_in_rate() {
    let mut cfg = ExperimentConfig::default();
    cfg.sweep.arms = vec![Arm::StaticFull, Arm::StaticQuant];
    cfg.sweep.total_ms = 30_000;
    let rates = [12.0, 3.0, 6.0, 9.0];
    let result = sweep(&cfg, &rates).unwrap();
    for arm in [Arm::StaticFull, Arm::StaticQuant] {
        let p95: Vec<f64> = result
            .rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.p95_ttft_ms.unwrap())
            .collect();
        assert_eq!(p95.len(), 4);
        assert!(
            p95.windows(2).all(|w| w[1] >= w[0] * 0.95),
            "{arm}: {p95:?}"
        );
    }
    assert!(result.table_csv().starts_with("rps,arm,"));
}

#[test]
fn sweep_rejects_empty_rate_list() {
    assert!(matches!(
        sweep(&ExperimentConfig::default(), &[]),
        Err(CliError::Validation(_))
    ));
}

#[test]
fn compare_identical_and_mismatched_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = light_load(dir.path());
    cmd_run(&cfg, Arm::StaticFull).unwrap();
    let a = dir.path().join("static-full/report.json");
    let c = cmd_compare(&a, &a, false).unwrap();
    assert!(c.fingerprints_match);
    for row in &c.rows {
        assert_eq!(row.ratio, Some(1.0), "{}", row.metric);
    }

    let mut other = read_report(&a);
    other.config_fingerprint = Some("0".repeat(64));
    let b = dir.path().join("other.json");
    fs::write(&b, other.to_json()).unwrap();
    assert!(matches!(
        cmd_compare(&a, &b, false),
        Err(CliError::Validation(_))
    ));
    assert!(!cmd_compare(&a, &b, true).unwrap().fingerprints_match);

    let mut value: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    value["ttft_ms"].as_object_mut().unwrap().remove("p95");
    let broken = dir.path().join("broken.json");
    fs::write(&broken, value.to_string()).unwrap();
    let err = cmd_compare(&a, &broken, false).unwrap_err();
    assert!(err.to_string().contains("ttft_ms.p95"), "{err}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_morphsim"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    let default = bin().arg("default-config").output().unwrap();
    assert!(default.status.success());
    fs::write(&cfg_path, &default.stdout).unwrap();
    assert_eq!(
        ExperimentConfig::load(&cfg_path).unwrap(),
        ExperimentConfig::default()
    );

    let out = dir.path().join("out");
    let ok = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--downscale",
            "4",
        ])
        .args(["run", "--arm", "static-quant"])
        .output()
        .unwrap();
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    assert!(out.join("static-quant/report.json").exists());

    let bad_downscale = bin()
        .args(["--downscale", "0", "run", "--arm", "static-full"])
        .output()
        .unwrap();
    assert_eq!(bad_downscale.status.code(), Some(2));

    let bad_cfg = dir.path().join("bad.toml");
    fs::write(&bad_cfg, "seed = \"x\"\n").unwrap();
    let bad = bin()
        .args(["--config", bad_cfg.to_str().unwrap(), "profile"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));

    let missing = bin()
        .args(["compare", "/nonexistent/a.json", "/nonexistent/b.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));

    let no_rates = bin().args(["sweep"]).output().unwrap();
    assert_eq!(no_rates.status.code(), Some(2));
}
