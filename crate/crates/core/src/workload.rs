//! Arrival traces: CSV ingestion and serialization, rate downscaling, and
//! seeded synthetic bursty traces.
//!
//! The canonical on-disk format is three comma-separated integer columns,
//! `arrival_ms,prompt_tokens,output_tokens`, one request per line. Lines
//! starting with `#` and blank lines are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRACE_HEADER: &str = "# arrival_ms,prompt_tokens,output_tokens";

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("failed to read trace {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: token counts must be positive (prompt={prompt}, output={output})")]
    NonPositiveTokens {
        line: usize,
        prompt: i64,
        output: i64,
    },
    #[error("downscale factor must be positive and finite, got {0}")]
    InvalidFactor(f64),
    #[error("invalid synthetic trace parameters: {0}")]
    InvalidSynth(String),
}

/// A single timestamped request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub arrival_ms: u64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

impl TraceEvent {
    pub fn new(arrival_ms: u64, prompt_tokens: u32, output_tokens: u32) -> Self {
        Self {
            arrival_ms,
            prompt_tokens,
            output_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub source_label: String,
    /// Set when the input was not sorted by arrival and had to be reordered.
    pub reordered: bool,
}

impl Trace {
    /// Builds a trace, stable-sorting the events by arrival time.
    pub fn new(mut events: Vec<TraceEvent>, source_label: impl Into<String>) -> Self {
        let reordered = !events
            .windows(2)
            .all(|w| w[0].arrival_ms <= w[1].arrival_ms);
        if reordered {
            events.sort_by_key(|e| e.arrival_ms);
        }
        Self {
            events,
            source_label: source_label.into(),
            reordered,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Renders the trace in the canonical CSV format.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(16 * self.events.len() + TRACE_HEADER.len() + 1);
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for e in &self.events {
            let _ = writeln!(
                out,
                "{},{},{}",
                e.arrival_ms, e.prompt_tokens, e.output_tokens
            );
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_csv())
    }
}

/// Reads a trace file.
pub fn parse_trace(path: impl AsRef<Path>) -> Result<Trace, WorkloadError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace_str(&text, path.display().to_string())
}

pub fn parse_trace_str(text: &str, label: impl Into<String>) -> Result<Trace, WorkloadError> {
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(WorkloadError::Malformed {
                line: line_no,
                reason: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str, name: &str| -> Result<i64, WorkloadError> {
            s.parse::<i64>().map_err(|_| WorkloadError::Malformed {
                line: line_no,
                reason: format!("{name} is not an integer: {s:?}"),
            })
        };
        let arrival = parse(fields[0], "arrival_ms")?;
        let prompt = parse(fields[1], "prompt_tokens")?;
        let output = parse(fields[2], "output_tokens")?;
        if arrival < 0 {
            return Err(WorkloadError::Malformed {
                line: line_no,
                reason: format!("negative arrival_ms {arrival}"),
            });
        }
        if prompt < 1 || output < 1 {
            return Err(WorkloadError::NonPositiveTokens {
                line: line_no,
                prompt,
                output,
            });
        }
        let to_u32 = |v: i64, name: &str| {
            u32::try_from(v).map_err(|_| WorkloadError::Malformed {
                line: line_no,
                reason: format!("{name} out of range: {v}"),
            })
        };
        events.push(TraceEvent::new(
            arrival as u64,
            to_u32(prompt, "prompt_tokens")?,
            to_u32(output, "output_tokens")?,
        ));
    }
    Ok(Trace::new(events, label))
}

/// Round half up to an integer.
fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

/// Stretches inter-arrival gaps by `factor`, dividing the request rate by it.
///
/// Offsets are scaled relative to the first arrival and rounded half up, so
/// rounding error never accumulates along the trace.
pub fn downscale(trace: &Trace, factor: f64) -> Result<Trace, WorkloadError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(WorkloadError::InvalidFactor(factor));
    }
    let Some(first) = trace.events.first() else {
        return Ok(trace.clone());
    };
    let origin = first.arrival_ms;
    let events = trace
        .events
        .iter()
        .map(|e| TraceEvent {
            arrival_ms: origin + round_half_up((e.arrival_ms - origin) as f64 * factor),
            ..*e
        })
        .collect();
    Ok(Trace {
        events,
        source_label: trace.source_label.clone(),
        reordered: trace.reordered,
    })
}

/// Parameters of a two-rate Poisson arrival process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstSpec {
    pub seed: u64,
    pub base_rps: f64,
    pub burst_rps: f64,
    pub burst_start_ms: u64,
    pub burst_len_ms: u64,
    pub total_ms: u64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

impl BurstSpec {
    /// Homogeneous Poisson arrivals at `rps` for `total_ms`.
    pub fn homogeneous(
        seed: u64,
        rps: f64,
        total_ms: u64,
        prompt_tokens: u32,
        output_tokens: u32,
    ) -> Self {
        Self {
            seed,
            base_rps: rps,
            burst_rps: rps,
            burst_start_ms: 0,
            burst_len_ms: 0,
            total_ms,
            prompt_tokens,
            output_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |msg: String| Err(WorkloadError::InvalidSynth(msg));
        if !(self.base_rps.is_finite() && self.base_rps > 0.0) {
            return bad(format!("base_rps must be > 0, got {}", self.base_rps));
        }
        if !(self.burst_rps.is_finite() && self.burst_rps > 0.0) {
            return bad(format!("burst_rps must be > 0, got {}", self.burst_rps));
        }
        if self.burst_start_ms.saturating_add(self.burst_len_ms) > self.total_ms {
            return bad(format!(
                "burst window [{}, {}) lies outside [0, {}]",
                self.burst_start_ms,
                self.burst_start_ms.saturating_add(self.burst_len_ms),
                self.total_ms
            ));
        }
        if self.prompt_tokens == 0 || self.output_tokens == 0 {
            return bad("token counts must be positive".into());
        }
        Ok(())
    }
}

/// Generates Poisson arrivals at `base_rps` outside the burst window and
/// `burst_rps` inside it.
///
/// Unit-mean exponential variates are mapped through the inverse of the
/// cumulative intensity, so for a fixed seed a higher rate compresses the
/// same arrival pattern rather than drawing a new one.
pub fn synth_burst(spec: &BurstSpec) -> Result<Trace, WorkloadError> {
    spec.validate()?;
    let label = format!(
        "synth(seed={},base={},burst={}@{}+{},total={})",
        spec.seed,
        spec.base_rps,
        spec.burst_rps,
        spec.burst_start_ms,
        spec.burst_len_ms,
        spec.total_ms
    );
    let total = spec.total_ms as f64;
    let burst_lo = spec.burst_start_ms as f64;
    let burst_hi = (spec.burst_start_ms + spec.burst_len_ms) as f64;
    // (segment end, rate per ms)
    let segments = [
        (burst_lo, spec.base_rps / 1000.0),
        (burst_hi, spec.burst_rps / 1000.0),
        (total, spec.base_rps / 1000.0),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut events = Vec::new();
    let mut t = 0.0_f64;
    let mut seg = 0;
    'arrivals: loop {
        let mut mass: f64 = rng.sample(Exp1);
        loop {
            while seg < segments.len() && t >= segments[seg].0 {
                seg += 1;
            }
            if seg == segments.len() {
                break 'arrivals;
            }
            let (end, rate) = segments[seg];
            let available = rate * (end - t);
            if mass <= available {
                t += mass / rate;
                break;
            }
            mass -= available;
            t = end;
        }
        if t >= total {
            break;
        }
        events.push(TraceEvent::new(
            round_half_up(t).min(spec.total_ms),
            spec.prompt_tokens,
            spec.output_tokens,
        ));
    }
    Ok(Trace::new(events, label))
}
