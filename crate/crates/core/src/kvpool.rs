//! Elastic paged KV-cache block pool.
//!
//! Requests own ordered block lists sized to their token count. Capacity is
//! a static baseline plus blocks attached at runtime from memory freed by
//! layer morphing. Detaching takes free blocks first; blocks still held by
//! requests are detached lazily as they are released, ahead of any new
//! allocation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestId(pub u64);

impl std::fmt::Display for RequestId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "req#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId(pub u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("{0} has no block map")]
    UnknownRequest(RequestId),
    #[error("{0} is already admitted")]
    AlreadyAdmitted(RequestId),
    #[error("block count must be positive")]
    ZeroBlocks,
    #[error("cannot detach {requested} blocks, only {available} attached and not already pending")]
    DetachExceedsAttached { requested: usize, available: usize },
    #[error("token count must be positive")]
    ZeroTokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvConfig {
    pub block_tokens: u32,
    pub block_bytes: u64,
    pub static_capacity_blocks: usize,
}

impl KvConfig {
    /// Bytes of one block for a model storing 16-bit keys and values:
    /// `2 (K,V) * layers * kv_heads * head_dim * 2 bytes * block_tokens`.
    pub fn block_bytes_for(
        num_layers: u32,
        kv_heads: u32,
        head_dim: u32,
        block_tokens: u32,
    ) -> u64 {
        2 * u64::from(num_layers)
            * u64::from(kv_heads)
            * u64::from(head_dim)
            * 2
            * u64::from(block_tokens)
    }

    pub fn blocks_for_tokens(&self, tokens: u64) -> usize {
        tokens.div_ceil(u64::from(self.block_tokens)) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocOutcome {
    /// Newly allocated blocks (possibly none when the last block had room).
    Granted(Vec<BlockId>),
    Insufficient {
        needed: usize,
        free: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetachOutcome {
    /// All requested blocks removed; carries the new capacity.
    Done(usize),
    /// `pending` blocks will be removed as requests release them.
    Deferred { capacity: usize, pending: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreemptPolicy {
    /// Most recently admitted decoding request.
    Lifo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockMap {
    blocks: Vec<BlockId>,
    tokens: u64,
    admitted_seq: u64,
    decoding: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvBlockPool {
    config: KvConfig,
    capacity: usize,
    free: Vec<BlockId>,
    maps: BTreeMap<RequestId, BlockMap>,
    attached_extra: usize,
    pending_detach: usize,
    next_block: u64,
    next_admit_seq: u64,
}

impl KvBlockPool {
    pub fn new(config: KvConfig) -> Self {
        let n = config.static_capacity_blocks;
        // reversed so that pop() hands out low ids first
        let free = (0..n as u64).rev().map(BlockId).collect();
        Self {
            config,
            capacity: n,
            free,
            maps: BTreeMap::new(),
            attached_extra: 0,
            pending_detach: 0,
            next_block: n as u64,
            next_admit_seq: 0,
        }
    }

    pub fn config(&self) -> &KvConfig {
        &self.config
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn used_blocks(&self) -> usize {
        self.capacity - self.free.len()
    }

    pub fn attached_extra(&self) -> usize {
        self.attached_extra
    }

    pub fn pending_detach(&self) -> usize {
        self.pending_detach
    }

    /// Fraction of capacity held by requests.
    pub fn usage(&self) -> f64 {
        if self.capacity == 0 {
            0.0
        } else {
            self.used_blocks() as f64 / self.capacity as f64
        }
    }

    pub fn is_admitted(&self, req: RequestId) -> bool {
        self.maps.contains_key(&req)
    }

    pub fn blocks_of(&self, req: RequestId) -> Option<&[BlockId]> {
        self.maps.get(&req).map(|m| m.blocks.as_slice())
    }

    pub fn tokens_of(&self, req: RequestId) -> Option<u64> {
        self.maps.get(&req).map(|m| m.tokens)
    }

    pub fn admitted(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.maps.keys().copied()
    }

    /// Creates an empty block map for the request.
    pub fn admit(&mut self, req: RequestId) -> Result<(), PoolError> {
        if self.maps.contains_key(&req) {
            return Err(PoolError::AlreadyAdmitted(req));
        }
        let admitted_seq = self.next_admit_seq;
        self.next_admit_seq += 1;
        self.maps.insert(
            req,
            BlockMap {
                blocks: Vec::new(),
                tokens: 0,
                admitted_seq,
                decoding: false,
            },
        );
        Ok(())
    }

    /// Marks the request as decoding, making it eligible for preemption.
    pub fn set_decoding(&mut self, req: RequestId, decoding: bool) -> Result<(), PoolError> {
        self.maps
            .get_mut(&req)
            .ok_or(PoolError::UnknownRequest(req))?
            .decoding = decoding;
        Ok(())
    }

    /// Blocks needed to grow the request by `new_tokens`.
    pub fn blocks_needed(&self, req: RequestId, new_tokens: u64) -> Result<usize, PoolError> {
        let map = self.maps.get(&req).ok_or(PoolError::UnknownRequest(req))?;
        Ok(self.config.blocks_for_tokens(map.tokens + new_tokens) - map.blocks.len())
    }

    /// All-or-nothing growth of a request's KV footprint.
    pub fn alloc_for_tokens(
        &mut self,
        req: RequestId,
        new_tokens: u64,
    ) -> Result<AllocOutcome, PoolError> {
        if new_tokens == 0 {
            return Err(PoolError::ZeroTokens);
        }
        let needed = self.blocks_needed(req, new_tokens)?;
        if needed > self.free.len() {
            return Ok(AllocOutcome::Insufficient {
                needed,
                free: self.free.len(),
            });
        }
        let granted: Vec<BlockId> = (0..needed)
            .map(|_| self.free.pop().expect("checked"))
            .collect();
        let map = self.maps.get_mut(&req).expect("checked");
        map.blocks.extend_from_slice(&granted);
        map.tokens += new_tokens;
        Ok(AllocOutcome::Granted(granted))
    }

    fn return_blocks(&mut self, blocks: Vec<BlockId>) {
        for b in blocks {
            if self.pending_detach > 0 {
                self.pending_detach -= 1;
                self.attached_extra -= 1;
                self.capacity -= 1;
            } else {
                self.free.push(b);
            }
        }
    }

    /// Returns all of the request's blocks and drops its map.
    pub fn release(&mut self, req: RequestId) -> Result<usize, PoolError> {
        let map = self
            .maps
            .remove(&req)
            .ok_or(PoolError::UnknownRequest(req))?;
        let n = map.blocks.len();
        self.return_blocks(map.blocks);
        Ok(n)
    }

    /// Adds `n` fresh blocks. The caller has already reserved the memory.
    pub fn attach_blocks(&mut self, n: usize) -> Result<usize, PoolError> {
        if n == 0 {
            return Err(PoolError::ZeroBlocks);
        }
        for _ in 0..n {
            self.free.push(BlockId(self.next_block));
            self.next_block += 1;
        }
        self.capacity += n;
        self.attached_extra += n;
        Ok(self.capacity)
    }

    /// Removes `n` attached blocks, deferring the part that is currently
    /// held by requests.
    pub fn detach_blocks(&mut self, n: usize) -> Result<DetachOutcome, PoolError> {
        if n == 0 {
            return Err(PoolError::ZeroBlocks);
        }
        let available = self.attached_extra - self.pending_detach;
        if n > available {
            return Err(PoolError::DetachExceedsAttached {
                requested: n,
                available,
            });
        }
        let now = n.min(self.free.len());
        // highest ids first: the most recently attached blocks go back first
        self.free.sort_unstable_by(|a, b| b.cmp(a));
        self.free.drain(..now);
        self.capacity -= now;
        self.attached_extra -= now;
        let pending = n - now;
        self.pending_detach += pending;
        Ok(if pending == 0 {
            DetachOutcome::Done(self.capacity)
        } else {
            DetachOutcome::Deferred {
                capacity: self.capacity,
                pending,
            }
        })
    }

    /// Frees every block of the victim chosen by `policy` and drops its map.
    /// Returns the victim and the number of blocks freed.
    pub fn preempt_victim(&mut self, policy: PreemptPolicy) -> Option<(RequestId, usize)> {
        let victim = match policy {
            PreemptPolicy::Lifo => self
                .maps
                .iter()
                .filter(|(_, m)| m.decoding && !m.blocks.is_empty())
                .max_by_key(|(_, m)| m.admitted_seq)
                .map(|(id, _)| *id)?,
        };
        let freed = self.release(victim).expect("victim has a map");
        Some((victim, freed))
    }

    /// Checks the pool's bookkeeping invariants.
    pub fn audit(&self) -> Result<(), String> {
        let allocated: usize = self.maps.values().map(|m| m.blocks.len()).sum();
        if self.free.len() + allocated != self.capacity {
            return Err(format!(
                "free {} + allocated {allocated} != capacity {}",
                self.free.len(),
                self.capacity
            ));
        }
        if self.capacity != self.config.static_capacity_blocks + self.attached_extra {
            return Err(format!(
                "capacity {} != static {} + attached {}",
                self.capacity, self.config.static_capacity_blocks, self.attached_extra
            ));
        }
        if self.pending_detach > self.attached_extra {
            return Err("pending detach exceeds attached blocks".into());
        }
        let mut ids: Vec<BlockId> = self.free.clone();
        ids.extend(self.maps.values().flat_map(|m| m.blocks.iter().copied()));
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(format!("block {:?} appears twice", w[0]));
        }
        for (id, m) in &self.maps {
            if self.config.blocks_for_tokens(m.tokens) != m.blocks.len() {
                return Err(format!(
                    "{id} holds {} blocks for {} tokens",
                    m.blocks.len(),
                    m.tokens
                ));
            }
        }
        Ok(())
    }
}
