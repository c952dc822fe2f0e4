//! Experiment configuration file (TOML) and its fingerprint.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use morphsim_core::controller::{ControllerConfig, Mode};
use morphsim_core::engine::EngineConfig;
use morphsim_core::profiler::LisWeights;
use morphsim_core::workload::BurstSpec;
use morphsim_core::Precision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, ValueEnum,
)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    StaticFull,
    StaticQuant,
    MorphAccuracy,
    MorphPerformance,
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm::StaticFull,
        Arm::StaticQuant,
        Arm::MorphAccuracy,
        Arm::MorphPerformance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::StaticFull => "static-full",
            Arm::StaticQuant => "static-quant",
            Arm::MorphAccuracy => "morph-accuracy",
            Arm::MorphPerformance => "morph-performance",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Toy model used by the offline profiler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub layers: usize,
    pub dim: usize,
    pub calibration_samples: usize,
    pub bits: u32,
    pub weights: LisWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub accuracy: ControllerConfig,
    pub performance: ControllerConfig,
    /// Swap order for the morph arms; front-to-back when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_file: Option<PathBuf>,
    pub static_quant_bits: u32,
}

/// Synthetic arrivals; the seed comes from the top-level `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthWorkload {
    pub base_rps: f64,
    pub burst_rps: f64,
    pub burst_start_ms: u64,
    pub burst_len_ms: u64,
    pub total_ms: u64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WorkloadConfig {
    File { path: PathBuf },
    Synth(SynthWorkload),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub total_ms: u64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub arms: Vec<Arm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downscale: Option<f64>,
    pub profile: ProfileConfig,
    pub engine: EngineConfig,
    pub controller: ControllerSection,
    pub workload: WorkloadConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let engine = EngineConfig::default();
        let layers = engine.model.num_layers;
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            downscale: None,
            profile: ProfileConfig {
                layers,
                dim: 16,
                calibration_samples: 32,
                bits: 4,
                weights: LisWeights::default(),
            },
            engine,
            controller: ControllerSection {
                accuracy: ControllerConfig::for_mode(Mode::Accuracy, layers),
                performance: ControllerConfig::for_mode(Mode::Performance, layers),
                sequence_file: None,
                static_quant_bits: 4,
            },
            workload: WorkloadConfig::Synth(SynthWorkload {
                base_rps: 4.0,
                burst_rps: 12.0,
                burst_start_ms: 10_000,
                burst_len_ms: 15_000,
                total_ms: 45_000,
                prompt_tokens: 512,
                output_tokens: 256,
            }),
            sweep: SweepConfig {
                total_ms: 60_000,
                prompt_tokens: 512,
                output_tokens: 256,
                arms: Arm::ALL.to_vec(),
            },
        }
    }
}

impl SynthWorkload {
    pub fn burst_spec(&self, seed: u64) -> BurstSpec {
        BurstSpec {
            seed,
            base_rps: self.base_rps,
            burst_rps: self.burst_rps,
            burst_start_ms: self.burst_start_ms,
            burst_len_ms: self.burst_len_ms,
            total_ms: self.total_ms,
            prompt_tokens: self.prompt_tokens,
            output_tokens: self.output_tokens,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn static_quant_precision(&self) -> Result<Precision, CliError> {
        match Precision::from_bits(self.controller.static_quant_bits) {
            Some(p) if p.is_quantized() => Ok(p),
            _ => Err(CliError::Validation(format!(
                "static_quant_bits must be 8, 4 or 3, got {}",
                self.controller.static_quant_bits
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |m: String| Err(CliError::Validation(m));
        self.engine
            .kv_config()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let layers = self.engine.model.num_layers;
        let (acc, perf) = (&self.controller.accuracy, &self.controller.performance);
        for (name, c, mode) in [
            ("accuracy", acc, Mode::Accuracy),
            ("performance", perf, Mode::Performance),
        ] {
            c.validate(layers)
                .map_err(|e| CliError::Validation(format!("controller.{name}: {e}")))?;
            if c.mode != mode {
                return v(format!("controller.{name} has mode {:?}", c.mode));
            }
        }
        if acc.max_swapped_layers > perf.max_swapped_layers || acc.kv_trigger < perf.kv_trigger {
            return v("accuracy mode must swap no more layers and trigger no earlier than performance mode".into());
        }
        self.static_quant_precision()?;
        self.profile
            .weights
            .validate()
            .map_err(|e| CliError::Validation(format!("profile.weights: {e}")))?;
        if self.profile.layers == 0
            || self.profile.dim == 0
            || self.profile.calibration_samples == 0
        {
            return v("profile layers, dim and calibration_samples must be positive".into());
        }
        if !matches!(self.profile.bits, 3 | 4 | 8) {
            return v(format!(
                "profile.bits must be 8, 4 or 3, got {}",
                self.profile.bits
            ));
        }
        if let Some(f) = self.downscale {
            if !(f.is_finite() && f > 0.0) {
                return v(format!("downscale must be positive, got {f}"));
            }
        }
        if let WorkloadConfig::Synth(s) = &self.workload {
            s.burst_spec(self.seed)
                .validate()
                .map_err(|e| CliError::Validation(format!("workload: {e}")))?;
        }
        if self.sweep.prompt_tokens == 0
            || self.sweep.output_tokens == 0
            || self.sweep.total_ms == 0
        {
            return v("sweep token counts and duration must be positive".into());
        }
        if self.sweep.arms.is_empty() {
            return v("sweep.arms must not be empty".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the config, with sorted keys
    /// and the output directory left out.
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
