//! The `profile`, `run`, `sweep` and `compare` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use morphsim_core::controller::Controller;
use morphsim_core::engine::{self, log_jsonl, Policy, RunOptions, RunOutput};
use morphsim_core::profiler::{
    baseline_sequence, evaluate_sequence, greedy_sequence, BaselineKind, SwapSequence,
};
use morphsim_core::toymodel::calibration_batch;
use morphsim_core::workload::{downscale, parse_trace, synth_burst, BurstSpec, Trace};
use morphsim_core::ToyModelF64;

use crate::config::{Arm, ExperimentConfig, WorkloadConfig};
use crate::error::CliError;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path.display(), e))
}

/// File names of the profiler outputs, relative to the output directory.
pub const SEQUENCE_FILES: [(&str, Option<BaselineKind>); 4] = [
    ("lis", None),
    ("front_to_back", Some(BaselineKind::FrontToBack)),
    ("back_to_front", Some(BaselineKind::BackToFront)),
    ("random", Some(BaselineKind::Random)),
];

#[derive(Debug, Clone)]
pub struct ProfileOutput {
    pub sequences: Vec<PathBuf>,
    pub curves: PathBuf,
}

pub fn cmd_profile(cfg: &ExperimentConfig) -> Result<ProfileOutput, CliError> {
    let p = &cfg.profile;
    let model = ToyModelF64::build(cfg.seed, p.layers, p.dim)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let batch = calibration_batch(cfg.seed, p.calibration_samples, p.dim);
    let mut sequences = Vec::new();
    let mut curves = Vec::new();
    for (name, kind) in SEQUENCE_FILES {
        let seq = match kind {
            None => greedy_sequence(&model, &batch, p.weights, p.bits)?,
            Some(kind) => baseline_sequence(kind, p.layers, cfg.seed, p.bits),
        };
        curves.push(evaluate_sequence(&model, &seq, &batch, p.bits)?);
        let path = cfg.out_dir.join("sequences").join(format!("{name}.json"));
        write(&path, seq.to_json() + "\n")?;
        sequences.push(path);
    }
    let mut csv = String::from("depth");
    for (name, _) in SEQUENCE_FILES {
        csv.push(',');
        csv.push_str(name);
    }
    csv.push('\n');
    for depth in 0..=p.layers {
        let _ = write!(csv, "{depth}");
        for c in &curves {
            let _ = write!(csv, ",{}", c[depth]);
        }
        csv.push('\n');
    }
    let curves = cfg.out_dir.join("degradation_curves.csv");
    write(&curves, csv)?;
    Ok(ProfileOutput { sequences, curves })
}

fn apply_downscale(cfg: &ExperimentConfig, trace: Trace) -> Result<Trace, CliError> {
    match cfg.downscale {
        Some(f) => Ok(downscale(&trace, f)?),
        None => Ok(trace),
    }
}

pub fn load_trace(cfg: &ExperimentConfig) -> Result<Trace, CliError> {
    let trace = match &cfg.workload {
        WorkloadConfig::File { path } => parse_trace(path)?,
        WorkloadConfig::Synth(s) => synth_burst(&s.burst_spec(cfg.seed))?,
    };
    apply_downscale(cfg, trace)
}

/// The swap order used by the morph arms.
pub fn load_sequence(cfg: &ExperimentConfig) -> Result<SwapSequence, CliError> {
    let layers = cfg.engine.model.num_layers;
    let seq = match &cfg.controller.sequence_file {
        Some(path) => SwapSequence::load(path).map_err(|e| {
            CliError::Validation(format!("cannot use sequence file {}: {e}", path.display()))
        })?,
        None => baseline_sequence(
            BaselineKind::FrontToBack,
            layers,
            cfg.seed,
            cfg.controller.performance.target_bits,
        ),
    };
    seq.bind(layers)?;
    Ok(seq)
}

pub fn policy(cfg: &ExperimentConfig, arm: Arm) -> Result<Policy, CliError> {
    let layers = cfg.engine.model.num_layers;
    Ok(match arm {
        Arm::StaticFull => Policy::StaticFull,
        Arm::StaticQuant => Policy::StaticQuant(cfg.static_quant_precision()?),
        Arm::MorphAccuracy | Arm::MorphPerformance => {
            let c = if arm == Arm::MorphAccuracy {
                cfg.controller.accuracy
            } else {
                cfg.controller.performance
            };
            Policy::Morph(Box::new(Controller::new(c, load_sequence(cfg)?, layers)?))
        }
    })
}

/// Simulates one arm on a trace; the report carries the config fingerprint.
pub fn run_arm(
    cfg: &ExperimentConfig,
    arm: Arm,
    trace: &Trace,
    options: RunOptions,
) -> Result<RunOutput, CliError> {
    let mut out = engine::run(trace, &cfg.engine, policy(cfg, arm)?, cfg.seed, options)?;
    out.report.config_fingerprint = Some(cfg.fingerprint());
    Ok(out)
}

pub fn arm_dir(cfg: &ExperimentConfig, arm: Arm) -> PathBuf {
    cfg.out_dir.join(arm.name())
}

/// Runs one arm and writes `report.json`, `timeline.csv`, `precision.csv`
/// and `events.jsonl` under `<out_dir>/<arm>/`.
pub fn cmd_run(cfg: &ExperimentConfig, arm: Arm) -> Result<RunOutput, CliError> {
    let trace = load_trace(cfg)?;
    let out = run_arm(cfg, arm, &trace, RunOptions::default())?;
    let dir = arm_dir(cfg, arm);
    out.report
        .write(&dir)
        .map_err(|e| CliError::io(dir.display(), e))?;
    write(&dir.join("events.jsonl"), log_jsonl(&out.log))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rps: f64,
    pub arm: Arm,
    pub requests: usize,
    pub p95_ttft_ms: Option<f64>,
    pub slo_violations: usize,
    pub throughput_rps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// First rate whose P95 TTFT exceeds the SLO, per arm.
    pub saturation: Vec<(Arm, Option<f64>)>,
}

impl SweepResult {
    pub fn saturation_of(&self, arm: Arm) -> Option<f64> {
        self.saturation
            .iter()
            .find(|(a, _)| *a == arm)
            .and_then(|(_, s)| *s)
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("rps,arm,requests,p95_ttft_ms,slo_violations,throughput_rps\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.rps,
                r.arm,
                r.requests,
                opt(r.p95_ttft_ms),
                r.slo_violations,
                opt(r.throughput_rps)
            );
        }
        out
    }

    pub fn saturation_csv(&self) -> String {
        let mut out = String::from("arm,saturation_rps\n");
        for (arm, s) in &self.saturation {
            let _ = writeln!(
                out,
                "{arm},{}",
                s.map_or_else(String::new, |x| x.to_string())
            );
        }
        out
    }
}

/// Homogeneous Poisson trace at `rps`. The same seed is used at every rate,
/// so traces at higher rates are time-compressed copies of each other.
pub fn sweep_trace(cfg: &ExperimentConfig, rps: f64) -> Result<Trace, CliError> {
    let s = &cfg.sweep;
    let spec = BurstSpec::homogeneous(cfg.seed, rps, s.total_ms, s.prompt_tokens, s.output_tokens);
    apply_downscale(cfg, synth_burst(&spec)?)
}

/// Sweeps the configured arms over `rps` (evaluated in ascending order),
/// running every (rate, arm) pair on its own thread. Does not write files.
pub fn sweep(cfg: &ExperimentConfig, rps: &[f64]) -> Result<SweepResult, CliError> {
    if rps.is_empty() {
        return Err(CliError::Validation("sweep needs at least one rate".into()));
    }
    if let Some(bad) = rps.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(CliError::Validation(format!(
            "sweep rates must be positive, got {bad}"
        )));
    }
    let mut rates = rps.to_vec();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let traces = rates
        .iter()
        .map(|&r| sweep_trace(cfg, r))
        .collect::<Result<Vec<_>, _>>()?;
    let arms = cfg.sweep.arms.clone();
    let jobs: Vec<(usize, Arm)> = (0..rates.len())
        .flat_map(|i| arms.iter().map(move |&a| (i, a)))
        .collect();
    let results: Vec<Result<SweepRow, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(i, arm)| {
                let trace = &traces[i];
                let rate = rates[i];
                scope.spawn(move || {
                    let out = run_arm(cfg, arm, trace, RunOptions::default())?;
                    Ok(SweepRow {
                        rps: rate,
                        arm,
                        requests: out.report.requests,
                        p95_ttft_ms: out.report.ttft_ms.p95,
                        slo_violations: out.report.slo_violations,
                        throughput_rps: out.report.throughput_rps,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let slo = cfg.engine.slo_ms;
    let saturation = arms
        .iter()
        .map(|&arm| {
            let first = rows
                .iter()
                .filter(|r| r.arm == arm)
                .find(|r| r.p95_ttft_ms.is_some_and(|p| p > slo))
                .map(|r| r.rps);
            (arm, first)
        })
        .collect();
    Ok(SweepResult { rows, saturation })
}

/// Runs the sweep and writes `sweep.csv` and `saturation.csv`.
pub fn cmd_sweep(cfg: &ExperimentConfig, rps: &[f64]) -> Result<SweepResult, CliError> {
    let result = sweep(cfg, rps)?;
    write(&cfg.out_dir.join("sweep.csv"), result.table_csv())?;
    write(&cfg.out_dir.join("saturation.csv"), result.saturation_csv())?;
    Ok(result)
}

/// Metrics compared between two reports: display name and JSON path.
pub const COMPARED_FIELDS: [(&str, &str); 5] = [
    ("p95_ttft_ms", "ttft_ms.p95"),
    ("slo_violation_rate", "slo_violation_rate"),
    ("throughput_rps", "throughput_rps"),
    ("kv_peak_capacity_blocks", "kv.peak_capacity_blocks"),
    ("exposure_fraction", "exposure.fraction"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub metric: &'static str,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b / a`; equal values give 1.0 even when both are zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub fingerprints_match: bool,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut out = format!("{:<26}{:>16}{:>16}{:>12}\n", "metric", "a", "b", "b/a");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<26}{:>16}{:>16}{:>12}",
                r.metric,
                fmt(r.a),
                fmt(r.b),
                fmt(r.ratio)
            );
        }
        out
    }
}

fn field<'a>(
    report: &'a serde_json::Value,
    path: &str,
    file: &Path,
) -> Result<&'a serde_json::Value, CliError> {
    path.split('.')
        .try_fold(report, |v, key| v.get(key))
        .ok_or_else(|| CliError::Validation(format!("{}: missing field `{path}`", file.display())))
}

fn numeric(v: &serde_json::Value, path: &str, file: &Path) -> Result<Option<f64>, CliError> {
    if v.is_null() {
        return Ok(None);
    }
    v.as_f64().map(Some).ok_or_else(|| {
        CliError::Validation(format!(
            "{}: field `{path}` is not a number",
            file.display()
        ))
    })
}

fn read_report(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Ratio table of report `b` against report `a`. Reports from different
/// configs are refused unless `force` is set.
pub fn cmd_compare(a: &Path, b: &Path, force: bool) -> Result<Comparison, CliError> {
    let (ra, rb) = (read_report(a)?, read_report(b)?);
    let fa = field(&ra, "config_fingerprint", a)?;
    let fb = field(&rb, "config_fingerprint", b)?;
    let fingerprints_match = fa == fb;
    if !fingerprints_match && !force {
        return Err(CliError::Validation(format!(
            "config fingerprints differ ({fa} vs {fb}); pass --force to compare anyway"
        )));
    }
    let mut rows = Vec::new();
    for (metric, path) in COMPARED_FIELDS {
        let va = numeric(field(&ra, path, a)?, path, a)?;
        let vb = numeric(field(&rb, path, b)?, path, b)?;
        let ratio = match (va, vb) {
            (Some(x), Some(y)) if x == y => Some(1.0),
            (Some(x), Some(y)) if x != 0.0 => Some(y / x),
            _ => None,
        };
        rows.push(ComparisonRow {
            metric,
            a: va,
            b: vb,
            ratio,
        });
    }
    Ok(Comparison {
        fingerprints_match,
        rows,
    })
}
