//! Morphing controller: windowed telemetry, trigger and restore decisions,
//! and translation of decisions into actuator calls.
//!
//! Swapped layers always form a prefix of the bound [`SwapSequence`];
//! restores peel layers off the back of that prefix one hold window at a
//! time.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kvpool::DetachOutcome;
use crate::precision::Precision;
use crate::profiler::{ProfileError, SwapSequence};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("telemetry sample at {got} ms is older than the previous one at {last} ms")]
    OutOfOrder { last: f64, got: f64 },
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sequence(#[from] ProfileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Accuracy,
    Performance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub mode: Mode,
    /// Windowed KV usage fraction above which layers are swapped.
    pub kv_trigger: f64,
    /// Windowed head-of-line queueing delay above which layers are swapped.
    pub queue_trigger_ms: f64,
    /// KV usage fraction below which restoration may begin.
    pub kv_restore: f64,
    pub hold_ms: f64,
    pub max_swapped_layers: usize,
    pub swap_step: usize,
    pub telemetry_window_ms: f64,
    pub target_bits: u32,
}

impl ControllerConfig {
    /// Preset for a mode. Accuracy mode triggers later and swaps fewer
    /// layers, one at a time.
    pub fn for_mode(mode: Mode, num_layers: usize) -> Self {
        let base = Self {
            mode,
            kv_trigger: 0.85,
            queue_trigger_ms: 100.0,
            kv_restore: 0.5,
            hold_ms: 1_000.0,
            max_swapped_layers: (num_layers / 2).max(1),
            swap_step: 2.min(num_layers),
            telemetry_window_ms: 100.0,
            target_bits: 4,
        };
        match mode {
            Mode::Accuracy => Self {
                kv_trigger: 0.92,
                max_swapped_layers: (num_layers / 4).max(1),
                swap_step: 1,
                ..base
            },
            Mode::Performance => Self {
                kv_trigger: 0.80,
                ..base
            },
        }
    }

    pub fn target_precision(&self) -> Option<Precision> {
        Precision::from_bits(self.target_bits)
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), ControllerError> {
        let bad = |m: String| Err(ControllerError::InvalidConfig(m));
        if !(self.kv_restore > 0.0 && self.kv_restore < self.kv_trigger && self.kv_trigger <= 1.0) {
            return bad(format!(
                "need 0 < kv_restore ({}) < kv_trigger ({}) <= 1",
                self.kv_restore, self.kv_trigger
            ));
        }
        if !(1 <= self.swap_step
            && self.swap_step <= self.max_swapped_layers
            && self.max_swapped_layers <= num_layers)
        {
            return bad(format!(
                "need 1 <= swap_step ({}) <= max_swapped_layers ({}) <= layers ({num_layers})",
                self.swap_step, self.max_swapped_layers
            ));
        }
        if !(self.queue_trigger_ms > 0.0 && self.hold_ms >= 0.0 && self.telemetry_window_ms > 0.0) {
            return bad(
                "queue trigger and telemetry window must be positive, hold non-negative".into(),
            );
        }
        if self.target_precision().is_none() {
            return bad(format!(
                "target_bits must be 8, 4 or 3, got {}",
                self.target_bits
            ));
        }
        Ok(())
    }
}

/// One observation of the serving state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TelemetrySample {
    pub t_ms: f64,
    pub kv_used_blocks: usize,
    pub kv_capacity_blocks: usize,
    pub queue_depth: usize,
    pub hol_wait_ms: f64,
    /// Tokens emitted since the previous sample.
    pub tokens: u64,
    pub ttft_ms: Option<f64>,
    pub tpot_ms: Option<f64>,
}

impl TelemetrySample {
    pub fn kv_usage(&self) -> f64 {
        if self.kv_capacity_blocks == 0 {
            0.0
        } else {
            self.kv_used_blocks as f64 / self.kv_capacity_blocks as f64
        }
    }
}

/// Windowed means over recent samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Telemetry {
    pub kv_usage: f64,
    pub queue_depth: f64,
    pub hol_wait_ms: f64,
    pub tokens_per_s: f64,
    pub ttft_ms: Option<f64>,
    pub tpot_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TelemetryWindow {
    window_ms: f64,
    samples: VecDeque<TelemetrySample>,
    last: Option<TelemetrySample>,
}

impl TelemetryWindow {
    pub fn new(window_ms: f64) -> Self {
        Self {
            window_ms,
            samples: VecDeque::new(),
            last: None,
        }
    }

    pub fn observe(&mut self, sample: TelemetrySample) -> Result<(), ControllerError> {
        if let Some(last) = self.last {
            if sample.t_ms < last.t_ms {
                return Err(ControllerError::OutOfOrder {
                    last: last.t_ms,
                    got: sample.t_ms,
                });
            }
        }
        self.samples.push_back(sample);
        self.last = Some(sample);
        self.evict(sample.t_ms);
        Ok(())
    }

    fn evict(&mut self, now: f64) {
        while self
            .samples
            .front()
            .is_some_and(|s| s.t_ms <= now - self.window_ms)
        {
            self.samples.pop_front();
        }
    }

    /// Means over samples in `(now - window, now]`; falls back to the last
    /// sample when the window is empty.
    pub fn snapshot(&mut self, now: f64) -> Telemetry {
        self.evict(now);
        if self.samples.is_empty() {
            return self.last.map_or_else(Telemetry::default, |s| Telemetry {
                kv_usage: s.kv_usage(),
                queue_depth: s.queue_depth as f64,
                hol_wait_ms: s.hol_wait_ms,
                tokens_per_s: 0.0,
                ttft_ms: s.ttft_ms,
                tpot_ms: s.tpot_ms,
            });
        }
        let n = self.samples.len() as f64;
        let mean_opt = |f: fn(&TelemetrySample) -> Option<f64>| {
            let vals: Vec<f64> = self.samples.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Telemetry {
            kv_usage: self
                .samples
                .iter()
                .map(TelemetrySample::kv_usage)
                .sum::<f64>()
                / n,
            queue_depth: self
                .samples
                .iter()
                .map(|s| s.queue_depth as f64)
                .sum::<f64>()
                / n,
            hol_wait_ms: self.samples.iter().map(|s| s.hol_wait_ms).sum::<f64>() / n,
            tokens_per_s: self.samples.iter().map(|s| s.tokens).sum::<u64>() as f64
                / (self.window_ms / 1000.0),
            ttft_ms: mean_opt(|s| s.ttft_ms),
            tpot_ms: mean_opt(|s| s.tpot_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", content = "n", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Command {
    SwapNext(usize),
    RestoreNext(usize),
    Attach(usize),
    Detach(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    KvUsageAbove,
    QueueDelayAbove,
    DecodeShortage,
    CapReached,
    SwapInFlight,
    HysteresisHold,
    LowUsageRestore,
    SwapCompleted,
    Steady,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub commands: Vec<Command>,
    pub reason: Reason,
}

impl Decision {
    fn none(reason: Reason) -> Self {
        Self {
            commands: Vec::new(),
            reason,
        }
    }
}

/// Worker-side executor of controller commands.
pub trait Actuator {
    /// Starts an asynchronous swap of `layer` to `to`.
    fn begin_swap(&mut self, layer: usize, to: Precision) -> Result<(), String>;
    /// Returns `layer` to full precision once the memory ledger can host it.
    fn restore(&mut self, layer: usize) -> Result<(), String>;
    fn attach(&mut self, blocks: usize) -> Result<(), String>;
    fn detach(&mut self, blocks: usize) -> Result<DetachOutcome, String>;
    fn fault(&mut self, message: String);
}

/// State of the morphing policy bound to one swap sequence.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    sequence: SwapSequence,
    telemetry: TelemetryWindow,
    /// Number of sequence positions swapped or being swapped.
    depth: usize,
    /// KV blocks attached for each swapped layer.
    attached: BTreeMap<usize, usize>,
    last_swap_ms: Option<f64>,
    last_restore_ms: Option<f64>,
    low_since_ms: Option<f64>,
}

impl Controller {
    pub fn new(
        config: ControllerConfig,
        sequence: SwapSequence,
        num_layers: usize,
    ) -> Result<Self, ControllerError> {
        config.validate(num_layers)?;
        sequence.bind(num_layers)?;
        Ok(Self {
            telemetry: TelemetryWindow::new(config.telemetry_window_ms),
            config,
            sequence,
            depth: 0,
            attached: BTreeMap::new(),
            last_swap_ms: None,
            last_restore_ms: None,
            low_since_ms: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn sequence(&self) -> &SwapSequence {
        &self.sequence
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Layers currently swapped (or in flight), in sequence order.
    pub fn swapped_layers(&self) -> &[usize] {
        &self.sequence.order[..self.depth]
    }

    pub fn attached_total(&self) -> usize {
        self.attached.values().sum()
    }

    pub fn observe(&mut self, sample: TelemetrySample) -> Result<(), ControllerError> {
        self.telemetry.observe(sample)
    }

    pub fn telemetry(&mut self, now: f64) -> Telemetry {
        self.telemetry.snapshot(now)
    }

    fn since(last: Option<f64>, now: f64) -> f64 {
        last.map_or(f64::INFINITY, |t| now - t)
    }

    /// Chooses the next commands. `busy` is true while a swap is in flight
    /// or a restore is waiting for memory; `shortage` reports a failed
    /// decode allocation.
    pub fn decide(&mut self, now: f64, busy: bool, shortage: bool) -> Decision {
        let t = self.telemetry.snapshot(now);
        let pressure = if shortage {
            Some(Reason::DecodeShortage)
        } else if t.kv_usage > self.config.kv_trigger {
            Some(Reason::KvUsageAbove)
        } else if t.hol_wait_ms > self.config.queue_trigger_ms {
            Some(Reason::QueueDelayAbove)
        } else {
            None
        };

        if let Some(reason) = pressure {
            self.low_since_ms = None;
            if self.depth >= self.config.max_swapped_layers {
                return Decision::none(Reason::CapReached);
            }
            if busy {
                return Decision::none(Reason::SwapInFlight);
            }
            if Self::since(self.last_restore_ms, now) < self.config.hold_ms {
                return Decision::none(Reason::HysteresisHold);
            }
            let k = self
                .config
                .swap_step
                .min(self.config.max_swapped_layers - self.depth);
            return Decision {
                commands: vec![Command::SwapNext(k)],
                reason,
            };
        }

        if t.kv_usage >= self.config.kv_restore || self.depth == 0 {
            self.low_since_ms = None;
            return Decision::none(Reason::Steady);
        }
        let since = *self.low_since_ms.get_or_insert(now);
        if busy
            || now - since < self.config.hold_ms
            || Self::since(self.last_swap_ms, now) < self.config.hold_ms
            || Self::since(self.last_restore_ms, now) < self.config.hold_ms
        {
            return Decision::none(Reason::HysteresisHold);
        }
        let layer = self.sequence.order[self.depth - 1];
        let mut commands = Vec::with_capacity(2);
        if let Some(&n) = self.attached.get(&layer) {
            if n > 0 {
                commands.push(Command::Detach(n));
            }
        }
        commands.push(Command::RestoreNext(1));
        Decision {
            commands,
            reason: Reason::LowUsageRestore,
        }
    }

    /// Executes commands in order. Failures are reported to the actuator as
    /// faults and stop the remaining commands of this decision.
    pub fn apply(&mut self, commands: &[Command], now: f64, act: &mut dyn Actuator) {
        let target = self.config.target_precision().expect("validated");
        for &cmd in commands {
            let result = match cmd {
                Command::SwapNext(k) => {
                    self.last_swap_ms = Some(now);
                    (0..k).try_for_each(|_| {
                        let layer = *self
                            .sequence
                            .order
                            .get(self.depth)
                            .ok_or_else(|| "swap sequence exhausted".to_string())?;
                        act.begin_swap(layer, target)?;
                        self.depth += 1;
                        Ok(())
                    })
                }
                Command::RestoreNext(k) => {
                    self.last_restore_ms = Some(now);
                    (0..k).try_for_each(|_| {
                        if self.depth == 0 {
                            return Err("no swapped layer to restore".to_string());
                        }
                        let layer = self.sequence.order[self.depth - 1];
                        act.restore(layer)?;
                        self.depth -= 1;
                        Ok(())
                    })
                }
                Command::Attach(n) => act.attach(n),
                Command::Detach(n) => {
                    let layer = self.depth.checked_sub(1).map(|d| self.sequence.order[d]);
                    act.detach(n).map(|_| {
                        if let Some(layer) = layer {
                            let entry = self.attached.entry(layer).or_default();
                            *entry = entry.saturating_sub(n);
                        }
                    })
                }
            };
            if let Err(message) = result {
                act.fault(format!("{cmd:?} dropped: {message}"));
                break;
            }
        }
    }

    /// Called when a swap to lower precision completes: converts the freed
    /// bytes into KV blocks. Returns the attach command that was applied.
    pub fn on_swap_complete(
        &mut self,
        layer: usize,
        freed_bytes: u64,
        block_bytes: u64,
        act: &mut dyn Actuator,
    ) -> Option<Command> {
        let n = (freed_bytes / block_bytes) as usize;
        if n == 0 {
            return None;
        }
        match act.attach(n) {
            Ok(()) => {
                *self.attached.entry(layer).or_default() += n;
                Some(Command::Attach(n))
            }
            Err(message) => {
                act.fault(format!("Attach({n}) dropped: {message}"));
                None
            }
        }
    }
}
