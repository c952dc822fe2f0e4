//! Discrete-event simulation of one serving device: FIFO admission,
//! batched prefill, continuous-batching decode, LIFO preemption with
//! recomputation, asynchronous layer swaps and elastic KV capacity.
//!
//! Time is in milliseconds. Events at equal timestamps are processed in
//! the order they were scheduled; the scheduler runs once the last event
//! of a timestamp has been handled and the device is idle.

mod config;
mod memory;
mod report;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{Actuator, Controller, ControllerError, Reason, TelemetrySample};
use crate::kvpool::{AllocOutcome, DetachOutcome, KvConfig, RequestId};
use crate::precision::Precision;
use crate::workload::Trace;

pub use config::{gib, CostModel, EngineConfig, MemorySpec, ModelSpec, GIB};
pub use memory::{
    DeviceMemory, InFlightSwap, MemoryError, MemoryLedger, MorphState, SwapCompletion,
};
pub use report::{
    log_jsonl, percentile, ExposureSummary, KvSummary, LatencySummary, LogEntry, LogKind,
    MetricsReport, MorphSummary, PrecisionChange, RequestMetrics, TimelineSample,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("{request} needs {blocks} KV blocks but at most {max_capacity} can ever exist")]
    Unserviceable {
        request: RequestId,
        blocks: usize,
        max_capacity: usize,
    },
    #[error("event at {got} ms processed after {now} ms")]
    OutOfOrder { now: f64, got: f64 },
    #[error("run ended with {0} unfinished requests")]
    Stalled(usize),
    #[error("memory audit failed at {t_ms} ms: {message}")]
    Audit { t_ms: f64, message: String },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// How layer precision is managed during a run.
#[derive(Debug, Clone)]
pub enum Policy {
    StaticFull,
    /// Every layer at the given precision for the whole run, with the
    /// memory saved versus full precision attached to the KV pool.
    StaticQuant(Precision),
    Morph(Box<Controller>),
}

impl Policy {
    pub fn label(&self) -> String {
        match self {
            Policy::StaticFull => "static-full".into(),
            Policy::StaticQuant(_) => "static-quant".into(),
            Policy::Morph(c) => match c.config().mode {
                crate::controller::Mode::Accuracy => "morph-accuracy".into(),
                crate::controller::Mode::Performance => "morph-performance".into(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestState {
    Queued,
    Prefilling,
    Decoding,
    SwappedOut,
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub arrival_ms: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub state: RequestState,
    pub admitted_ms: Option<f64>,
    pub first_token_ms: Option<f64>,
    pub done_ms: Option<f64>,
    pub tokens_generated: u32,
    pub exposed_tokens: u64,
    pub exposed_layer_tokens: u64,
    pub preemptions: u32,
    queued_since: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Audit the memory ledger after every event.
    pub audit: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub log: Vec<LogEntry>,
}

/// Largest KV capacity the policy can ever reach.
pub fn max_capacity_blocks(config: &EngineConfig, kv: &KvConfig, policy: &Policy) -> usize {
    let lb = config.model.layer_bytes;
    let per_layer = |p: Precision| ((lb.full - lb.get(p)) / kv.block_bytes) as usize;
    match policy {
        Policy::StaticFull => kv.static_capacity_blocks,
        Policy::StaticQuant(p) => {
            kv.static_capacity_blocks
                + ((lb.full - lb.get(*p)) * config.model.num_layers as u64 / kv.block_bytes)
                    as usize
        }
        Policy::Morph(c) => {
            let target = c.config().target_precision().unwrap_or(Precision::Full);
            kv.static_capacity_blocks + c.config().max_swapped_layers * per_layer(target)
        }
    }
}

/// Duration of one decode step for the given layer precisions and total
/// KV blocks held by the batch.
pub fn decode_step_ms(cost: &CostModel, tags: &[Precision], batch_blocks: usize) -> f64 {
    let layers: f64 = tags.iter().map(|&p| cost.decode_ms_per_layer.get(p)).sum();
    layers + cost.attn_ms_per_kv_block * batch_blocks as f64
}

/// Runs the trace to completion.
pub fn run(
    trace: &Trace,
    config: &EngineConfig,
    policy: Policy,
    seed: u64,
    options: RunOptions,
) -> Result<RunOutput, EngineError> {
    Sim::new(trace, config, policy, options)?.run(trace, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Arrival(usize),
    DeviceDone,
    SwapComplete(usize),
    ControllerTick,
}

#[derive(Debug)]
struct Scheduled {
    t: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap pops the earliest (time, seq) first
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    seq: u64,
}

impl EventQueue {
    fn push(&mut self, t: f64, event: Event) {
        self.heap.push(Scheduled {
            t,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    fn pop(&mut self) -> Option<Scheduled> {
        self.heap.pop()
    }

    fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|s| s.t)
    }
}

#[derive(Debug)]
enum Work {
    Prefill {
        members: Vec<usize>,
        quantized: usize,
    },
    Decode {
        members: Vec<usize>,
        quantized: usize,
    },
}

enum DecodeStart {
    Started,
    Idle,
    /// Every batch member was preempted.
    Emptied,
}

/// Executes controller commands against device memory.
struct Act<'a> {
    now: f64,
    mem: &'a mut DeviceMemory,
    events: &'a mut EventQueue,
    log: &'a mut Vec<LogEntry>,
    pending_restore: &'a mut Option<usize>,
    stats: &'a mut MorphSummary,
}

impl Act<'_> {
    fn log(&mut self, kind: LogKind) {
        self.log.push(LogEntry {
            t_ms: self.now,
            kind,
        });
    }

    /// Starts the pending restore once the ledger can host the full
    /// precision variant.
    fn try_start_restore(&mut self) {
        let Some(layer) = *self.pending_restore else {
            return;
        };
        let growth = self.mem.layer_bytes().full - self.mem.morph().resident_bytes[layer];
        if growth > self.mem.ledger().available() || self.mem.morph().in_flight.contains_key(&layer)
        {
            return;
        }
        *self.pending_restore = None;
        if let Err(e) = self.begin_swap(layer, Precision::Full) {
            self.fault(format!("restore of layer {layer} failed: {e}"));
        }
    }
}

impl Actuator for Act<'_> {
    fn begin_swap(&mut self, layer: usize, to: Precision) -> Result<(), String> {
        let s = self
            .mem
            .begin_swap(layer, to, self.now)
            .map_err(|e| e.to_string())?;
        self.events
            .push(s.completes_at_ms, Event::SwapComplete(layer));
        self.log(LogKind::SwapBegin {
            layer,
            from: s.from,
            to: s.to,
            completes_at_ms: s.completes_at_ms,
        });
        Ok(())
    }

    fn restore(&mut self, layer: usize) -> Result<(), String> {
        if self.pending_restore.is_some() {
            return Err("another restore is pending".into());
        }
        *self.pending_restore = Some(layer);
        self.log(LogKind::RestorePending { layer });
        self.try_start_restore();
        Ok(())
    }

    fn attach(&mut self, blocks: usize) -> Result<(), String> {
        let capacity = self.mem.attach(blocks).map_err(|e| e.to_string())?;
        self.stats.blocks_attached += blocks as u64;
        self.log(LogKind::Attach { blocks, capacity });
        Ok(())
    }

    fn detach(&mut self, blocks: usize) -> Result<DetachOutcome, String> {
        let out = self.mem.detach(blocks).map_err(|e| e.to_string())?;
        self.stats.blocks_detached += blocks as u64;
        let (capacity, pending) = match out {
            DetachOutcome::Done(c) => (c, 0),
            DetachOutcome::Deferred { capacity, pending } => (capacity, pending),
        };
        self.log(LogKind::Detach {
            blocks,
            capacity,
            pending,
        });
        Ok(out)
    }

    fn fault(&mut self, message: String) {
        self.stats.faults += 1;
        self.log(LogKind::Fault { message });
    }
}

struct Sim {
    config: EngineConfig,
    kv: KvConfig,
    arm: String,
    mem: DeviceMemory,
    controller: Option<Controller>,
    max_capacity: usize,
    requests: Vec<Request>,
    queue: VecDeque<usize>,
    /// Preempted requests awaiting re-admission, in arrival order.
    resume: Vec<usize>,
    /// Decoding requests in admission order.
    running: Vec<usize>,
    device: Option<Work>,
    events: EventQueue,
    now: f64,
    log: Vec<LogEntry>,
    timeline: Vec<TimelineSample>,
    next_tick: f64,
    precision_changes: Vec<PrecisionChange>,
    stats: MorphSummary,
    preemptions: u64,
    peak_capacity: usize,
    peak_used: usize,
    pending_restore: Option<usize>,
    controller_tick_pending: bool,
    last_logged_reason: Option<Reason>,
    sample_tokens: u64,
    sample_ttft: Vec<f64>,
    sample_tpot: Vec<f64>,
    options: RunOptions,
}

fn mean(v: &mut Vec<f64>) -> Option<f64> {
    let out = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    v.clear();
    out
}

impl Sim {
    fn new(
        trace: &Trace,
        config: &EngineConfig,
        policy: Policy,
        options: RunOptions,
    ) -> Result<Self, EngineError> {
        let kv = config.kv_config()?;
        let num_layers = config.model.num_layers;
        let arm = policy.label();
        let max_capacity = max_capacity_blocks(config, &kv, &policy);
        let initial = match &policy {
            Policy::StaticQuant(Precision::Full) => {
                return Err(EngineError::Config(
                    "static-quant needs a quantized precision".into(),
                ))
            }
            Policy::StaticQuant(p) => *p,
            _ => Precision::Full,
        };
        let mut mem = DeviceMemory::new(
            config.memory.device_budget_bytes,
            config.memory.reserve_bytes,
            config.model.layer_bytes,
            num_layers,
            initial,
            kv,
            config.cost,
        )?;
        if initial.is_quantized() {
            let saved = (config.model.layer_bytes.full - config.model.layer_bytes.get(initial))
                * num_layers as u64;
            let n = (saved / kv.block_bytes) as usize;
            if n > 0 {
                mem.attach(n)?;
            }
        }
        let controller = match policy {
            Policy::Morph(c) => {
                c.sequence()
                    .bind(num_layers)
                    .map_err(|e| EngineError::Controller(ControllerError::Sequence(e)))?;
                c.config().validate(num_layers)?;
                Some(*c)
            }
            _ => None,
        };
        let requests = trace
            .events
            .iter()
            .enumerate()
            .map(|(i, e)| Request {
                id: RequestId(i as u64),
                arrival_ms: e.arrival_ms as f64,
                prompt_tokens: e.prompt_tokens,
                output_tokens: e.output_tokens,
                state: RequestState::Queued,
                admitted_ms: None,
                first_token_ms: None,
                done_ms: None,
                tokens_generated: 0,
                exposed_tokens: 0,
                exposed_layer_tokens: 0,
                preemptions: 0,
                queued_since: e.arrival_ms as f64,
            })
            .collect();
        Ok(Self {
            config: *config,
            kv,
            arm,
            peak_capacity: mem.pool().capacity(),
            stats: MorphSummary {
                peak_quantized_layers: mem.quantized_layers(),
                ..Default::default()
            },
            mem,
            controller,
            max_capacity,
            requests,
            queue: VecDeque::new(),
            resume: Vec::new(),
            running: Vec::new(),
            device: None,
            events: EventQueue::default(),
            now: 0.0,
            log: Vec::new(),
            timeline: Vec::new(),
            next_tick: 0.0,
            precision_changes: Vec::new(),
            preemptions: 0,
            peak_used: 0,
            pending_restore: None,
            controller_tick_pending: false,
            last_logged_reason: None,
            sample_tokens: 0,
            sample_ttft: Vec::new(),
            sample_tpot: Vec::new(),
            options,
        })
    }

    fn log(&mut self, kind: LogKind) {
        self.log.push(LogEntry {
            t_ms: self.now,
            kind,
        });
    }

    fn run(mut self, trace: &Trace, seed: u64) -> Result<RunOutput, EngineError> {
        for i in 0..self.requests.len() {
            self.events
                .push(self.requests[i].arrival_ms, Event::Arrival(i));
        }
        while let Some(s) = self.events.pop() {
            if s.t < self.now {
                return Err(EngineError::OutOfOrder {
                    now: self.now,
                    got: s.t,
                });
            }
            self.sample_timeline_until(s.t);
            self.now = s.t;
            self.handle(s.event)?;
            self.with_actuator(|_, act| act.try_start_restore());
            if self.device.is_none() && self.events.peek_time() != Some(self.now) {
                self.schedule()?;
            }
            self.peak_capacity = self.peak_capacity.max(self.mem.pool().capacity());
            self.peak_used = self.peak_used.max(self.mem.pool().used_blocks());
            if self.options.audit {
                self.mem.audit().map_err(|message| EngineError::Audit {
                    t_ms: self.now,
                    message,
                })?;
            }
        }
        if !self.requests.is_empty() {
            self.sample_timeline_until(self.next_tick);
        }
        let unfinished = self
            .requests
            .iter()
            .filter(|r| r.state != RequestState::Done)
            .count();
        if unfinished > 0 {
            return Err(EngineError::Stalled(unfinished));
        }
        let report = self.build_report(trace, seed);
        Ok(RunOutput {
            report,
            log: self.log,
        })
    }

    fn sample_timeline_until(&mut self, t: f64) {
        while self.next_tick <= t {
            let pool = self.mem.pool();
            self.timeline.push(TimelineSample {
                t_ms: self.next_tick,
                kv_capacity_blocks: pool.capacity(),
                kv_used_blocks: pool.used_blocks(),
                quantized_layers: self.mem.quantized_layers(),
                queue_depth: self.queue.len() + self.resume.len(),
            });
            self.next_tick += self.config.timeline_interval_ms;
        }
    }

    /// Runs `f` with the controller (if any) and an actuator over device
    /// state.
    fn with_actuator<R>(
        &mut self,
        f: impl FnOnce(Option<&mut Controller>, &mut Act<'_>) -> R,
    ) -> R {
        let mut act = Act {
            now: self.now,
            mem: &mut self.mem,
            events: &mut self.events,
            log: &mut self.log,
            pending_restore: &mut self.pending_restore,
            stats: &mut self.stats,
        };
        f(self.controller.as_mut(), &mut act)
    }

    fn handle(&mut self, event: Event) -> Result<(), EngineError> {
        match event {
            Event::Arrival(i) => {
                self.queue.push_back(i);
                let request = self.requests[i].id;
                self.log(LogKind::Arrival { request });
            }
            Event::DeviceDone => match self.device.take() {
                Some(Work::Prefill { members, quantized }) => {
                    self.finish_prefill(members, quantized)?
                }
                Some(Work::Decode { members, quantized }) => {
                    self.finish_decode(members, quantized)?
                }
                None => {}
            },
            Event::SwapComplete(layer) => self.complete_swap(layer)?,
            Event::ControllerTick => self.controller_tick_pending = false,
        }
        Ok(())
    }

    fn complete_swap(&mut self, layer: usize) -> Result<(), EngineError> {
        let c = self.mem.complete_swap(layer)?;
        self.log(LogKind::SwapComplete {
            layer,
            from: c.from,
            to: c.to,
            freed_bytes: c.freed_bytes,
        });
        self.precision_changes.push(PrecisionChange {
            t_ms: self.now,
            layer,
            precision: c.to,
        });
        if c.to == Precision::Full {
            self.stats.swaps_to_full += 1;
        } else if c.from == Precision::Full {
            self.stats.swaps_to_quantized += 1;
        }
        self.stats.peak_quantized_layers = self
            .stats
            .peak_quantized_layers
            .max(self.mem.quantized_layers());
        if c.freed_bytes > 0 {
            let block_bytes = self.kv.block_bytes;
            self.with_actuator(|ctrl, act| {
                if let Some(ctrl) = ctrl {
                    ctrl.on_swap_complete(layer, c.freed_bytes as u64, block_bytes, act);
                }
            });
        }
        Ok(())
    }

    fn hol_wait_ms(&self) -> f64 {
        let head = self
            .resume
            .first()
            .copied()
            .or_else(|| self.queue.front().copied());
        head.map_or(0.0, |i| self.now - self.requests[i].queued_since)
    }

    fn controller_step(&mut self, shortage: bool) -> Result<(), EngineError> {
        if self.controller.is_none() {
            return Ok(());
        }
        let pool = self.mem.pool();
        let sample = TelemetrySample {
            t_ms: self.now,
            kv_used_blocks: pool.used_blocks(),
            kv_capacity_blocks: pool.capacity(),
            queue_depth: self.queue.len() + self.resume.len(),
            hol_wait_ms: self.hol_wait_ms(),
            tokens: std::mem::take(&mut self.sample_tokens),
            ttft_ms: mean(&mut self.sample_ttft),
            tpot_ms: mean(&mut self.sample_tpot),
        };
        let busy = self.mem.has_in_flight() || self.pending_restore.is_some();
        let now = self.now;
        let ctrl = self.controller.as_mut().expect("checked");
        ctrl.observe(sample)?;
        let decision = ctrl.decide(now, busy, shortage);
        let log_it = if !decision.commands.is_empty() {
            true
        } else if decision.reason == Reason::Steady {
            self.last_logged_reason = None;
            false
        } else {
            self.last_logged_reason != Some(decision.reason)
        };
        if log_it {
            self.last_logged_reason = Some(decision.reason);
            self.log(LogKind::Decision {
                commands: decision.commands.clone(),
                reason: decision.reason,
            });
        }
        if !decision.commands.is_empty() {
            self.with_actuator(|ctrl, act| {
                ctrl.expect("checked").apply(&decision.commands, now, act);
            });
        }
        Ok(())
    }

    fn schedule(&mut self) -> Result<(), EngineError> {
        self.controller_step(false)?;
        loop {
            if self.start_prefill()? {
                break;
            }
            match self.start_decode()? {
                DecodeStart::Started | DecodeStart::Idle => break,
                DecodeStart::Emptied => continue,
            }
        }
        // a blocked queue on an idle device still needs the controller to look
        let blocked = !self.queue.is_empty() || !self.resume.is_empty();
        if self.device.is_none() && blocked && !self.controller_tick_pending {
            if let Some(ctrl) = &self.controller {
                let t = self.now + ctrl.config().telemetry_window_ms;
                self.events.push(t, Event::ControllerTick);
                self.controller_tick_pending = true;
            }
        }
        Ok(())
    }

    fn start_prefill(&mut self) -> Result<bool, EngineError> {
        let mut members = Vec::new();
        let mut batch_tokens = 0u64;
        loop {
            let (idx, resumed) = match (self.resume.first(), self.queue.front()) {
                (Some(&i), _) => (i, true),
                (None, Some(&i)) => (i, false),
                (None, None) => break,
            };
            let r = &self.requests[idx];
            let lifetime = self
                .kv
                .blocks_for_tokens(u64::from(r.prompt_tokens) + u64::from(r.output_tokens));
            if lifetime > self.max_capacity {
                return Err(EngineError::Unserviceable {
                    request: r.id,
                    blocks: lifetime,
                    max_capacity: self.max_capacity,
                });
            }
            let tokens = u64::from(r.prompt_tokens)
                + if resumed {
                    u64::from(r.tokens_generated)
                } else {
                    0
                };
            if !members.is_empty()
                && batch_tokens + tokens > u64::from(self.config.cost.max_batch_tokens)
            {
                break;
            }
            let blocks = self.kv.blocks_for_tokens(tokens);
            if blocks > self.mem.pool().free_blocks() {
                break;
            }
            let id = r.id;
            self.mem.admit(id)?;
            match self.mem.alloc(id, tokens)? {
                AllocOutcome::Granted(_) => {}
                AllocOutcome::Insufficient { .. } => unreachable!("free blocks checked"),
            }
            if resumed {
                self.resume.remove(0);
            } else {
                self.queue.pop_front();
            }
            let now = self.now;
            let r = &mut self.requests[idx];
            r.state = RequestState::Prefilling;
            r.admitted_ms.get_or_insert(now);
            self.log(LogKind::Admit {
                request: id,
                blocks,
                resumed,
            });
            members.push(idx);
            batch_tokens += tokens;
        }
        if members.is_empty() {
            return Ok(false);
        }
        let duration = batch_tokens as f64 * self.config.cost.prefill_ms_per_token;
        self.device = Some(Work::Prefill {
            members,
            quantized: self.mem.quantized_layers(),
        });
        self.events.push(self.now + duration, Event::DeviceDone);
        Ok(true)
    }

    fn emit_token(&mut self, idx: usize, quantized: usize) {
        let r = &mut self.requests[idx];
        if quantized > 0 {
            r.exposed_tokens += 1;
            r.exposed_layer_tokens += quantized as u64;
        }
        self.sample_tokens += 1;
    }

    fn finish(&mut self, idx: usize) -> Result<(), EngineError> {
        let now = self.now;
        let r = &mut self.requests[idx];
        r.state = RequestState::Done;
        r.done_ms = Some(now);
        let id = r.id;
        if r.output_tokens >= 2 {
            let first = r.first_token_ms.expect("first token precedes completion");
            self.sample_tpot
                .push((now - first) / f64::from(r.output_tokens - 1));
        }
        self.mem.release(id)?;
        self.log(LogKind::Done { request: id });
        Ok(())
    }

    fn finish_prefill(&mut self, members: Vec<usize>, quantized: usize) -> Result<(), EngineError> {
        for idx in members {
            let id = self.requests[idx].id;
            self.requests[idx].state = RequestState::Decoding;
            self.mem.set_decoding(id)?;
            if self.requests[idx].first_token_ms.is_none() {
                let r = &mut self.requests[idx];
                r.first_token_ms = Some(self.now);
                r.tokens_generated = 1;
                self.sample_ttft.push(self.now - r.arrival_ms);
                self.emit_token(idx, quantized);
                self.log(LogKind::FirstToken { request: id });
            }
            let r = &self.requests[idx];
            if r.tokens_generated >= r.output_tokens {
                self.finish(idx)?;
            } else {
                self.running.push(idx);
            }
        }
        Ok(())
    }

    fn preempt(&mut self, idx: usize, freed_blocks: usize) {
        let r = &mut self.requests[idx];
        r.state = RequestState::SwappedOut;
        r.preemptions += 1;
        r.queued_since = self.now;
        let id = r.id;
        self.running.retain(|&i| i != idx);
        let pos = self.resume.partition_point(|&i| i < idx);
        self.resume.insert(pos, idx);
        self.preemptions += 1;
        self.log(LogKind::Preempt {
            request: id,
            freed_blocks,
        });
    }

    fn start_decode(&mut self) -> Result<DecodeStart, EngineError> {
        if self.running.is_empty() {
            return Ok(DecodeStart::Idle);
        }
        let batch: Vec<usize> = self
            .running
            .iter()
            .take(self.config.cost.max_batch_tokens as usize)
            .copied()
            .collect();
        let mut members: Vec<usize> = Vec::with_capacity(batch.len());
        let mut consulted = false;
        for idx in batch {
            if self.requests[idx].state != RequestState::Decoding {
                continue;
            }
            let id = self.requests[idx].id;
            loop {
                match self.mem.alloc(id, 1)? {
                    AllocOutcome::Granted(_) => {
                        members.push(idx);
                        break;
                    }
                    AllocOutcome::Insufficient { needed, .. } => {
                        if !consulted {
                            consulted = true;
                            self.controller_step(true)?;
                        }
                        let Some((victim, freed)) = self.mem.preempt() else {
                            return Err(EngineError::Unserviceable {
                                request: id,
                                blocks: self.mem.pool().blocks_of(id).map_or(0, <[_]>::len)
                                    + needed,
                                max_capacity: self.mem.pool().capacity(),
                            });
                        };
                        let v = victim.0 as usize;
                        self.preempt(v, freed);
                        members.retain(|&i| i != v);
                        if v == idx {
                            break;
                        }
                    }
                }
            }
        }
        if members.is_empty() {
            return Ok(DecodeStart::Emptied);
        }
        let blocks: usize = members
            .iter()
            .map(|&i| {
                self.mem
                    .pool()
                    .blocks_of(self.requests[i].id)
                    .map_or(0, <[_]>::len)
            })
            .sum();
        let duration = decode_step_ms(&self.config.cost, &self.mem.morph().tags, blocks);
        self.device = Some(Work::Decode {
            members,
            quantized: self.mem.quantized_layers(),
        });
        self.events.push(self.now + duration, Event::DeviceDone);
        Ok(DecodeStart::Started)
    }

    fn finish_decode(&mut self, members: Vec<usize>, quantized: usize) -> Result<(), EngineError> {
        for idx in members {
            self.requests[idx].tokens_generated += 1;
            self.emit_token(idx, quantized);
            let r = &self.requests[idx];
            if r.tokens_generated >= r.output_tokens {
                self.finish(idx)?;
            }
        }
        let requests = &self.requests;
        self.running
            .retain(|&i| requests[i].state == RequestState::Decoding);
        Ok(())
    }

    fn build_report(&self, trace: &Trace, seed: u64) -> MetricsReport {
        let per_request: Vec<RequestMetrics> = self
            .requests
            .iter()
            .map(|r| {
                let first = r.first_token_ms.expect("done");
                let done = r.done_ms.expect("done");
                let admitted = r.admitted_ms.expect("done");
                RequestMetrics {
                    id: r.id.0,
                    arrival_ms: r.arrival_ms,
                    prompt_tokens: r.prompt_tokens,
                    output_tokens: r.output_tokens,
                    admitted_ms: admitted,
                    first_token_ms: first,
                    done_ms: done,
                    ttft_ms: first - r.arrival_ms,
                    tpot_ms: (r.output_tokens >= 2)
                        .then(|| (done - first) / f64::from(r.output_tokens - 1)),
                    e2e_ms: done - r.arrival_ms,
                    queueing_ms: admitted - r.arrival_ms,
                    preemptions: r.preemptions,
                    exposed_tokens: r.exposed_tokens,
                    exposed_layer_tokens: r.exposed_layer_tokens,
                }
            })
            .collect();
        let n = per_request.len();
        let slo = self.config.slo_ms;
        let slo_violations = per_request.iter().filter(|m| m.ttft_ms > slo).count();
        let makespan_ms = match (
            per_request.first(),
            per_request.iter().map(|m| m.done_ms).reduce(f64::max),
        ) {
            (Some(first), Some(last)) => last - first.arrival_ms,
            _ => 0.0,
        };
        let tokens: u64 = self
            .requests
            .iter()
            .map(|r| u64::from(r.tokens_generated))
            .sum();
        let exposed: u64 = per_request.iter().map(|m| m.exposed_tokens).sum();
        MetricsReport {
            arm: self.arm.clone(),
            seed,
            config_fingerprint: None,
            trace: trace.source_label.clone(),
            slo_ms: slo,
            requests: n,
            completed: n,
            output_tokens: tokens,
            makespan_ms,
            throughput_rps: (makespan_ms > 0.0).then(|| n as f64 / (makespan_ms / 1000.0)),
            ttft_ms: LatencySummary::from_values(per_request.iter().map(|m| m.ttft_ms).collect()),
            tpot_ms: LatencySummary::from_values(
                per_request.iter().filter_map(|m| m.tpot_ms).collect(),
            ),
            e2e_ms: LatencySummary::from_values(per_request.iter().map(|m| m.e2e_ms).collect()),
            queueing_ms: LatencySummary::from_values(
                per_request.iter().map(|m| m.queueing_ms).collect(),
            ),
            slo_violations,
            slo_violation_rate: (n > 0).then(|| slo_violations as f64 / n as f64),
            preemptions: self.preemptions,
            kv: KvSummary {
                block_bytes: self.kv.block_bytes,
                static_capacity_blocks: self.kv.static_capacity_blocks,
                peak_capacity_blocks: self.peak_capacity,
                peak_used_blocks: self.peak_used,
            },
            morph: self.stats,
            exposure: ExposureSummary {
                tokens,
                tokens_with_quantized_layers: exposed,
                quantized_layer_tokens: per_request.iter().map(|m| m.exposed_layer_tokens).sum(),
                fraction: (tokens > 0).then(|| exposed as f64 / tokens as f64),
            },
            precision_changes: self.precision_changes.clone(),
            timeline: self.timeline.clone(),
            per_request,
        }
    }
}

#[cfg(test)]
mod tests;
