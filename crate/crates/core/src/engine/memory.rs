//! Device memory: the byte ledger, per-layer precision state, and the KV
//! pool, mutated together so the ledger balances after every operation.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::kvpool::{
    AllocOutcome, DetachOutcome, KvBlockPool, KvConfig, PoolError, PreemptPolicy, RequestId,
};
use crate::precision::{PerPrecision, Precision};

use super::config::CostModel;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("layer {0} out of range")]
    LayerOutOfRange(usize),
    #[error("layer {0} already has a swap in flight")]
    SwapInFlight(usize),
    #[error("layer {layer} is already at {precision}")]
    NoOpSwap { layer: usize, precision: Precision },
    #[error("layer {0} has no swap in flight")]
    NoSwapInFlight(usize),
    #[error("ledger cannot host {needed} more bytes, {available} available")]
    InsufficientBudget { needed: u64, available: u64 },
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InFlightSwap {
    pub layer: usize,
    pub from: Precision,
    pub to: Precision,
    pub completes_at_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SwapCompletion {
    pub layer: usize,
    pub from: Precision,
    pub to: Precision,
    /// Positive when the new variant is smaller.
    pub freed_bytes: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphState {
    pub tags: Vec<Precision>,
    pub resident_bytes: Vec<u64>,
    pub in_flight: BTreeMap<usize, InFlightSwap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryLedger {
    pub device_budget_bytes: u64,
    pub model_bytes: u64,
    pub kv_bytes: u64,
    pub reserve_bytes: u64,
    /// Signed so that an accounting error shows up in the audit instead of
    /// wrapping.
    pub free_bytes: i64,
    /// Part of `free_bytes` promised to in-flight swaps to larger variants.
    pub committed_bytes: u64,
}

impl MemoryLedger {
    pub fn available(&self) -> u64 {
        (self.free_bytes - self.committed_bytes as i64).max(0) as u64
    }
}

#[derive(Debug, Clone)]
pub struct DeviceMemory {
    layer_bytes: PerPrecision<u64>,
    cost: CostModel,
    ledger: MemoryLedger,
    morph: MorphState,
    pool: KvBlockPool,
    link_busy_until: f64,
}

impl DeviceMemory {
    /// All layers start at `initial`. The static KV capacity must fit the
    /// budget left by the full-precision model and the reserve.
    pub fn new(
        budget: u64,
        reserve: u64,
        layer_bytes: PerPrecision<u64>,
        num_layers: usize,
        initial: Precision,
        kv: KvConfig,
        cost: CostModel,
    ) -> Result<Self, MemoryError> {
        let resident = layer_bytes.get(initial);
        let model_bytes = resident * num_layers as u64;
        let kv_bytes = kv.static_capacity_blocks as u64 * kv.block_bytes;
        let used = model_bytes as i128 + kv_bytes as i128 + reserve as i128;
        if used > budget as i128 {
            return Err(MemoryError::InsufficientBudget {
                needed: used as u64,
                available: budget,
            });
        }
        Ok(Self {
            layer_bytes,
            cost,
            ledger: MemoryLedger {
                device_budget_bytes: budget,
                model_bytes,
                kv_bytes,
                reserve_bytes: reserve,
                free_bytes: (budget as i128 - used) as i64,
                committed_bytes: 0,
            },
            morph: MorphState {
                tags: vec![initial; num_layers],
                resident_bytes: vec![resident; num_layers],
                in_flight: BTreeMap::new(),
            },
            pool: KvBlockPool::new(kv),
            link_busy_until: 0.0,
        })
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn morph(&self) -> &MorphState {
        &self.morph
    }

    pub fn pool(&self) -> &KvBlockPool {
        &self.pool
    }

    pub fn block_bytes(&self) -> u64 {
        self.pool.config().block_bytes
    }

    pub fn layer_bytes(&self) -> &PerPrecision<u64> {
        &self.layer_bytes
    }

    pub fn precision(&self, layer: usize) -> Precision {
        self.morph.tags[layer]
    }

    pub fn quantized_layers(&self) -> usize {
        self.morph.tags.iter().filter(|p| p.is_quantized()).count()
    }

    pub fn has_in_flight(&self) -> bool {
        !self.morph.in_flight.is_empty()
    }

    /// Starts a swap. Transfers share one host link, so a swap queued
    /// behind another starts when the link frees up.
    pub fn begin_swap(
        &mut self,
        layer: usize,
        to: Precision,
        now: f64,
    ) -> Result<InFlightSwap, MemoryError> {
        let from = *self
            .morph
            .tags
            .get(layer)
            .ok_or(MemoryError::LayerOutOfRange(layer))?;
        if self.morph.in_flight.contains_key(&layer) {
            return Err(MemoryError::SwapInFlight(layer));
        }
        if from == to {
            return Err(MemoryError::NoOpSwap {
                layer,
                precision: to,
            });
        }
        let new_bytes = self.layer_bytes.get(to);
        let growth = new_bytes.saturating_sub(self.morph.resident_bytes[layer]);
        if growth > self.ledger.available() {
            return Err(MemoryError::InsufficientBudget {
                needed: growth,
                available: self.ledger.available(),
            });
        }
        self.ledger.committed_bytes += growth;
        let start = now.max(self.link_busy_until);
        let swap = InFlightSwap {
            layer,
            from,
            to,
            completes_at_ms: start + self.cost.swap_ms(new_bytes),
        };
        self.link_busy_until = swap.completes_at_ms;
        self.morph.in_flight.insert(layer, swap);
        Ok(swap)
    }

    pub fn complete_swap(&mut self, layer: usize) -> Result<SwapCompletion, MemoryError> {
        let swap = self
            .morph
            .in_flight
            .remove(&layer)
            .ok_or(MemoryError::NoSwapInFlight(layer))?;
        let old = self.morph.resident_bytes[layer];
        let new = self.layer_bytes.get(swap.to);
        let growth = new.saturating_sub(old);
        self.ledger.committed_bytes -= growth;
        self.ledger.model_bytes = self.ledger.model_bytes - old + new;
        self.ledger.free_bytes += old as i64 - new as i64;
        self.morph.resident_bytes[layer] = new;
        self.morph.tags[layer] = swap.to;
        Ok(SwapCompletion {
            layer,
            from: swap.from,
            to: swap.to,
            freed_bytes: old as i64 - new as i64,
        })
    }

    fn sync_kv(&mut self) {
        let kv = self.pool.capacity() as u64 * self.block_bytes();
        self.ledger.free_bytes += self.ledger.kv_bytes as i64 - kv as i64;
        self.ledger.kv_bytes = kv;
    }

    /// Attaches `n` blocks if the ledger has room for them.
    pub fn attach(&mut self, n: usize) -> Result<usize, MemoryError> {
        let needed = n as u64 * self.block_bytes();
        if needed > self.ledger.available() {
            return Err(MemoryError::InsufficientBudget {
                needed,
                available: self.ledger.available(),
            });
        }
        let cap = self.pool.attach_blocks(n)?;
        self.sync_kv();
        Ok(cap)
    }

    pub fn detach(&mut self, n: usize) -> Result<DetachOutcome, MemoryError> {
        let out = self.pool.detach_blocks(n)?;
        self.sync_kv();
        Ok(out)
    }

    pub fn admit(&mut self, req: RequestId) -> Result<(), MemoryError> {
        Ok(self.pool.admit(req)?)
    }

    pub fn set_decoding(&mut self, req: RequestId) -> Result<(), MemoryError> {
        Ok(self.pool.set_decoding(req, true)?)
    }

    pub fn alloc(&mut self, req: RequestId, tokens: u64) -> Result<AllocOutcome, MemoryError> {
        Ok(self.pool.alloc_for_tokens(req, tokens)?)
    }

    pub fn release(&mut self, req: RequestId) -> Result<usize, MemoryError> {
        let n = self.pool.release(req)?;
        self.sync_kv();
        Ok(n)
    }

    pub fn preempt(&mut self) -> Option<(RequestId, usize)> {
        let out = self.pool.preempt_victim(PreemptPolicy::Lifo);
        self.sync_kv();
        out
    }

    /// Checks the ledger balance, its agreement with the morph state and
    /// pool, and the pool's own invariants.
    pub fn audit(&self) -> Result<(), String> {
        let l = &self.ledger;
        if l.free_bytes < 0 {
            return Err(format!("free bytes negative: {}", l.free_bytes));
        }
        let total = l.model_bytes as i128
            + l.kv_bytes as i128
            + l.reserve_bytes as i128
            + l.free_bytes as i128;
        if total != l.device_budget_bytes as i128 {
            return Err(format!(
                "ledger sums to {total}, budget is {}",
                l.device_budget_bytes
            ));
        }
        let resident: u64 = self.morph.resident_bytes.iter().sum();
        if resident != l.model_bytes {
            return Err(format!(
                "model bytes {} != resident sum {resident}",
                l.model_bytes
            ));
        }
        if l.kv_bytes != self.pool.capacity() as u64 * self.block_bytes() {
            return Err(format!(
                "kv bytes {} != capacity {} * block bytes",
                l.kv_bytes,
                self.pool.capacity()
            ));
        }
        if l.committed_bytes as i64 > l.free_bytes {
            return Err("committed bytes exceed free bytes".into());
        }
        for (layer, tag) in self.morph.tags.iter().enumerate() {
            if self.morph.resident_bytes[layer] != self.layer_bytes.get(*tag) {
                return Err(format!("layer {layer} resident size does not match {tag}"));
            }
        }
        self.pool.audit()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::config::{gib, EngineConfig};

    fn memory(initial: Precision) -> DeviceMemory {
        let cfg = EngineConfig::default();
        DeviceMemory::new(
            cfg.memory.device_budget_bytes,
            cfg.memory.reserve_bytes,
            cfg.model.layer_bytes,
            cfg.model.num_layers,
            initial,
            cfg.kv_config().unwrap(),
            cfg.cost,
        )
        .unwrap()
    }

    #[test]
    fn default_swap_durations() {
        let cost = CostModel::default();
        let int4 = cost.swap_ms(gib(0.1));
        let fp16 = cost.swap_ms(gib(0.4));
        assert!((int4 - (2.0 + 100.0 / 26.0)).abs() < 1e-6, "{int4}");
        assert!((fp16 - (2.0 + 400.0 / 26.0)).abs() < 1e-6, "{fp16}");
    }

    #[test]
    fn default_block_geometry() {
        let cfg = EngineConfig::default();
        assert_eq!(cfg.block_bytes(), 8 << 20);
        let kv = cfg.kv_config().unwrap();
        // (24 - 12.8 - 2) GiB of 8 MiB blocks
        assert_eq!(kv.static_capacity_blocks, 1177);
        let freed = gib(0.4) - gib(0.1);
        assert_eq!(freed / (2 << 20), 153);
        assert_eq!(freed / kv.block_bytes, 38);
    }

    #[test]
    fn swap_then_attach_balances() {
        let mut m = memory(Precision::Full);
        let s = m.begin_swap(3, Precision::Q4, 10.0).unwrap();
        assert!((s.completes_at_ms - 10.0 - CostModel::default().swap_ms(gib(0.1))).abs() < 1e-9);
        assert_eq!(
            m.begin_swap(3, Precision::Q4, 10.0),
            Err(MemoryError::SwapInFlight(3))
        );
        let before = m.ledger().model_bytes;
        let c = m.complete_swap(3).unwrap();
        assert_eq!(c.freed_bytes as u64, gib(0.4) - gib(0.1));
        assert_eq!(m.ledger().model_bytes, before - (gib(0.4) - gib(0.1)));
        m.attach(38).unwrap();
        assert_eq!(m.pool().capacity(), 1177 + 38);
        m.audit().unwrap();
    }

    #[test]
    fn no_op_swap_rejected() {
        let mut m = memory(Precision::Full);
        assert_eq!(
            m.begin_swap(0, Precision::Full, 0.0),
            Err(MemoryError::NoOpSwap {
                layer: 0,
                precision: Precision::Full
            })
        );
    }

    #[test]
    fn swaps_share_the_link() {
        let mut m = memory(Precision::Full);
        let a = m.begin_swap(0, Precision::Q4, 0.0).unwrap();
        let b = m.begin_swap(1, Precision::Q4, 1.0).unwrap();
        assert!((b.completes_at_ms - 2.0 * a.completes_at_ms).abs() < 1e-9);
    }

    #[test]
    fn restore_needs_room_for_full_variant() {
        let mut m = memory(Precision::Full);
        m.begin_swap(0, Precision::Q4, 0.0).unwrap();
        m.complete_swap(0).unwrap();
        m.attach(38).unwrap();
        // attached blocks hold the memory: restoring is refused until detached
        let avail = m.ledger().available();
        assert!(avail < gib(0.3));
        assert!(matches!(
            m.begin_swap(0, Precision::Full, 10.0),
            Err(MemoryError::InsufficientBudget { .. })
        ));
        m.detach(38).unwrap();
        m.begin_swap(0, Precision::Full, 10.0).unwrap();
        // the growth is committed, so attaching against it fails
        assert!(m.attach(38).is_err());
        m.complete_swap(0).unwrap();
        assert_eq!(m.ledger().committed_bytes, 0);
        m.audit().unwrap();
    }

    #[test]
    fn attach_beyond_budget_rejected() {
        let mut m = memory(Precision::Full);
        let avail = m.ledger().available();
        let n = (avail / m.block_bytes()) as usize + 1;
        assert!(matches!(
            m.attach(n),
            Err(MemoryError::InsufficientBudget { .. })
        ));
        m.audit().unwrap();
    }

    #[test]
    fn deferred_detach_syncs_ledger_on_release() {
        let mut m = memory(Precision::Full);
        m.begin_swap(0, Precision::Q4, 0.0).unwrap();
        m.complete_swap(0).unwrap();
        m.attach(38).unwrap();
        let r = RequestId(1);
        m.admit(r).unwrap();
        let cap = m.pool().capacity() as u64;
        assert!(matches!(
            m.alloc(r, cap * 16).unwrap(),
            AllocOutcome::Granted(_)
        ));
        assert!(matches!(
            m.detach(38).unwrap(),
            DetachOutcome::Deferred { pending: 38, .. }
        ));
        m.audit().unwrap();
        m.release(r).unwrap();
        assert_eq!(m.pool().capacity(), 1177);
        m.audit().unwrap();
    }
}
