use serde::{Deserialize, Serialize};

use crate::kvpool::KvConfig;
use crate::precision::{PerPrecision, Precision};

use super::EngineError;

pub const GIB: f64 = (1u64 << 30) as f64;

/// Bytes in `x` GiB, rounded to the nearest byte.
pub fn gib(x: f64) -> u64 {
    (x * GIB).round() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub kv_heads: u32,
    pub head_dim: u32,
    /// Resident bytes of one decoder layer per precision variant.
    pub layer_bytes: PerPrecision<u64>,
}

impl ModelSpec {
    /// Llama-2-7B-like geometry with 0.4 GiB FP16 and 0.1 GiB INT4 layers.
    pub fn llama2_7b() -> Self {
        Self {
            num_layers: 32,
            kv_heads: 32,
            head_dim: 128,
            layer_bytes: PerPrecision {
                full: gib(0.4),
                q8: gib(0.2),
                q4: gib(0.1),
                q3: gib(0.075),
            },
        }
    }

    pub fn model_bytes(&self, precision: Precision) -> u64 {
        self.layer_bytes.get(precision) * self.num_layers as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySpec {
    pub device_budget_bytes: u64,
    pub reserve_bytes: u64,
}

impl Default for MemorySpec {
    fn default() -> Self {
        Self {
            device_budget_bytes: gib(24.0),
            reserve_bytes: gib(2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub prefill_ms_per_token: f64,
    pub decode_ms_per_layer: PerPrecision<f64>,
    pub attn_ms_per_kv_block: f64,
    /// Host-to-device bandwidth in GiB/s.
    pub pcie_gbps: f64,
    pub swap_fixed_overhead_ms: f64,
    /// Token budget of one prefill batch and sequence cap of one decode batch.
    pub max_batch_tokens: u32,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            prefill_ms_per_token: 0.02,
            decode_ms_per_layer: PerPrecision {
                full: 0.3,
                q8: 0.24,
                q4: 0.18,
                q3: 0.16,
            },
            attn_ms_per_kv_block: 0.001,
            pcie_gbps: 26.0,
            swap_fixed_overhead_ms: 2.0,
            max_batch_tokens: 4096,
        }
    }
}

impl CostModel {
    /// Time for one swap that moves `bytes` over the host link.
    pub fn swap_ms(&self, bytes: u64) -> f64 {
        self.swap_fixed_overhead_ms + bytes as f64 / (self.pcie_gbps * GIB) * 1000.0
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = [
            ("prefill_ms_per_token", self.prefill_ms_per_token),
            ("pcie_gbps", self.pcie_gbps),
            ("swap_fixed_overhead_ms", self.swap_fixed_overhead_ms),
            ("decode_ms_per_layer.full", self.decode_ms_per_layer.full),
            ("decode_ms_per_layer.q8", self.decode_ms_per_layer.q8),
            ("decode_ms_per_layer.q4", self.decode_ms_per_layer.q4),
            ("decode_ms_per_layer.q3", self.decode_ms_per_layer.q3),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EngineError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.attn_ms_per_kv_block.is_finite() && self.attn_ms_per_kv_block >= 0.0) {
            return Err(EngineError::Config(
                "attn_ms_per_kv_block must be non-negative".into(),
            ));
        }
        if self.max_batch_tokens == 0 {
            return Err(EngineError::Config(
                "max_batch_tokens must be positive".into(),
            ));
        }
        if self
            .decode_ms_per_layer
            .descending()
            .windows(2)
            .any(|w| w[1] > w[0])
        {
            return Err(EngineError::Config(
                "decode_ms_per_layer must not increase as precision decreases".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub model: ModelSpec,
    pub memory: MemorySpec,
    pub cost: CostModel,
    pub block_tokens: u32,
    /// Derived from the model geometry when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_bytes: Option<u64>,
    /// Derived from the budget left after the full-precision model and
    /// reserve when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_capacity_blocks: Option<usize>,
    pub slo_ms: f64,
    pub timeline_interval_ms: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::llama2_7b(),
            memory: MemorySpec::default(),
            cost: CostModel::default(),
            block_tokens: 16,
            block_bytes: None,
            static_capacity_blocks: None,
            slo_ms: 2_000.0,
            timeline_interval_ms: 1_000.0,
        }
    }
}

impl EngineConfig {
    pub fn block_bytes(&self) -> u64 {
        self.block_bytes.unwrap_or_else(|| {
            KvConfig::block_bytes_for(
                self.model.num_layers as u32,
                self.model.kv_heads,
                self.model.head_dim,
                self.block_tokens,
            )
        })
    }

    /// Validates the configuration and resolves the KV pool geometry.
    pub fn kv_config(&self) -> Result<KvConfig, EngineError> {
        self.cost.validate()?;
        let m = &self.model;
        if m.num_layers == 0 || self.block_tokens == 0 {
            return Err(EngineError::Config(
                "num_layers and block_tokens must be positive".into(),
            ));
        }
        let lb = m.layer_bytes.descending();
        if lb.contains(&0) || lb.windows(2).any(|w| w[1] > w[0]) {
            return Err(EngineError::Config(
                "layer_bytes must be positive and non-increasing as precision decreases".into(),
            ));
        }
        if !(self.slo_ms > 0.0 && self.timeline_interval_ms > 0.0) {
            return Err(EngineError::Config(
                "slo_ms and timeline_interval_ms must be positive".into(),
            ));
        }
        let block_bytes = self.block_bytes();
        if block_bytes == 0 {
            return Err(EngineError::Config("block_bytes must be positive".into()));
        }
        let fixed = m.model_bytes(Precision::Full) + self.memory.reserve_bytes;
        let room = self
            .memory
            .device_budget_bytes
            .checked_sub(fixed)
            .ok_or_else(|| {
                EngineError::Config(format!(
                    "model ({} B) plus reserve ({} B) exceed the device budget ({} B)",
                    m.model_bytes(Precision::Full),
                    self.memory.reserve_bytes,
                    self.memory.device_budget_bytes
                ))
            })?;
        let max_static = (room / block_bytes) as usize;
        let static_capacity_blocks = self.static_capacity_blocks.unwrap_or(max_static);
        if static_capacity_blocks > max_static {
            return Err(EngineError::Config(format!(
                "static capacity of {static_capacity_blocks} blocks exceeds the {max_static} that fit the budget"
            )));
        }
        Ok(KvConfig {
            block_tokens: self.block_tokens,
            block_bytes,
            static_capacity_blocks,
        })
    }
}
