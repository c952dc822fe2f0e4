//! Run outputs: per-request metrics, aggregate report, timelines and the
//! event log.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{Command, Reason};
use crate::kvpool::RequestId;
use crate::precision::Precision;

/// Nearest-rank percentile of an ascending slice. `None` when empty.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub p50: Option<f64>,
    pub p95: Option<f64>,
    pub p99: Option<f64>,
    pub max: Option<f64>,
}

impl LatencySummary {
    pub fn from_values(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        Self {
            count: n,
            mean: (n > 0).then(|| values.iter().sum::<f64>() / n as f64),
            p50: percentile(&values, 50.0),
            p95: percentile(&values, 95.0),
            p99: percentile(&values, 99.0),
            max: values.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub arrival_ms: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub admitted_ms: f64,
    pub first_token_ms: f64,
    pub done_ms: f64,
    pub ttft_ms: f64,
    pub tpot_ms: Option<f64>,
    pub e2e_ms: f64,
    pub queueing_ms: f64,
    pub preemptions: u32,
    pub exposed_tokens: u64,
    pub exposed_layer_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineSample {
    pub t_ms: f64,
    pub kv_capacity_blocks: usize,
    pub kv_used_blocks: usize,
    pub quantized_layers: usize,
    pub queue_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionChange {
    pub t_ms: f64,
    pub layer: usize,
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvSummary {
    pub block_bytes: u64,
    pub static_capacity_blocks: usize,
    pub peak_capacity_blocks: usize,
    pub peak_used_blocks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MorphSummary {
    pub swaps_to_quantized: u64,
    pub swaps_to_full: u64,
    pub peak_quantized_layers: usize,
    pub blocks_attached: u64,
    pub blocks_detached: u64,
    pub faults: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExposureSummary {
    pub tokens: u64,
    /// Tokens generated while at least one layer was quantized.
    pub tokens_with_quantized_layers: u64,
    /// Sum over tokens of the number of quantized layers at generation.
    pub quantized_layer_tokens: u64,
    pub fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub arm: String,
    pub seed: u64,
    pub config_fingerprint: Option<String>,
    pub trace: String,
    pub slo_ms: f64,
    pub requests: usize,
    pub completed: usize,
    pub output_tokens: u64,
    pub makespan_ms: f64,
    pub throughput_rps: Option<f64>,
    pub ttft_ms: LatencySummary,
    pub tpot_ms: LatencySummary,
    pub e2e_ms: LatencySummary,
    pub queueing_ms: LatencySummary,
    pub slo_violations: usize,
    pub slo_violation_rate: Option<f64>,
    pub preemptions: u64,
    pub kv: KvSummary,
    pub morph: MorphSummary,
    pub exposure: ExposureSummary,
    pub precision_changes: Vec<PrecisionChange>,
    pub timeline: Vec<TimelineSample>,
    pub per_request: Vec<RequestMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn timeline_csv(&self) -> String {
        let mut out =
            String::from("t_ms,kv_capacity_blocks,kv_used_blocks,quantized_layers,queue_depth\n");
        for s in &self.timeline {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.t_ms, s.kv_capacity_blocks, s.kv_used_blocks, s.quantized_layers, s.queue_depth
            );
        }
        out
    }

    pub fn precision_csv(&self) -> String {
        let mut out = String::from("t_ms,layer,precision\n");
        for c in &self.precision_changes {
            let _ = writeln!(out, "{},{},{}", c.t_ms, c.layer, c.precision);
        }
        out
    }

    /// Writes `report.json`, `timeline.csv` and `precision.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json() + "\n")?;
        std::fs::write(dir.join("timeline.csv"), self.timeline_csv())?;
        std::fs::write(dir.join("precision.csv"), self.precision_csv())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum LogKind {
    Arrival {
        request: RequestId,
    },
    Admit {
        request: RequestId,
        blocks: usize,
        resumed: bool,
    },
    FirstToken {
        request: RequestId,
    },
    Done {
        request: RequestId,
    },
    Preempt {
        request: RequestId,
        freed_blocks: usize,
    },
    Decision {
        commands: Vec<Command>,
        reason: Reason,
    },
    SwapBegin {
        layer: usize,
        from: Precision,
        to: Precision,
        completes_at_ms: f64,
    },
    SwapComplete {
        layer: usize,
        from: Precision,
        to: Precision,
        freed_bytes: i64,
    },
    RestorePending {
        layer: usize,
    },
    Attach {
        blocks: usize,
        capacity: usize,
    },
    Detach {
        blocks: usize,
        capacity: usize,
        pending: usize,
    },
    Fault {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t_ms: f64,
    #[serde(flatten)]
    pub kind: LogKind,
}

/// One JSON object per line.
pub fn log_jsonl(log: &[LogEntry]) -> String {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).expect("log entry serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_p95_of_1_to_100() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), Some(95.0));
        assert_eq!(percentile(&v, 50.0), Some(50.0));
        assert_eq!(percentile(&v, 99.0), Some(99.0));
        assert_eq!(percentile(&v, 100.0), Some(100.0));
        assert_eq!(percentile(&[7.0], 1.0), Some(7.0));
    }

    #[test]
    fn empty_summary_serializes_nulls() {
        let s = LatencySummary::from_values(Vec::new());
        let json = serde_json::to_value(s).unwrap();
        assert_eq!(json["p95"], serde_json::Value::Null);
        assert_eq!(json["count"], 0);
    }

    #[test]
    fn log_entries_are_flat_json() {
        let e = LogEntry {
            t_ms: 1.5,
            kind: LogKind::Attach {
                blocks: 38,
                capacity: 1215,
            },
        };
        let line = serde_json::to_string(&e).unwrap();
        assert_eq!(
            line,
            r#"{"t_ms":1.5,"event":"Attach","blocks":38,"capacity":1215}"#
        );
        let back: LogEntry = serde_json::from_str(&line).unwrap();
        assert_eq!(back, e);
    }
}
