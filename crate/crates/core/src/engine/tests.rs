use super::*;
use crate::controller::{ControllerConfig, Mode};
use crate::profiler::{baseline_sequence, BaselineKind};
use crate::workload::{synth_burst, BurstSpec, TraceEvent};

fn trace(events: &[(u64, u32, u32)]) -> Trace {
    Trace::new(
        events
            .iter()
            .map(|&(t, p, o)| TraceEvent::new(t, p, o))
            .collect(),
        "test",
    )
}

fn no_attn() -> EngineConfig {
    EngineConfig {
        cost: CostModel {
            attn_ms_per_kv_block: 0.0,
            ..CostModel::default()
        },
        ..EngineConfig::default()
    }
}

fn tiny_pool(blocks: usize) -> EngineConfig {
    EngineConfig {
        static_capacity_blocks: Some(blocks),
        ..no_attn()
    }
}

fn morph(mode: Mode) -> Policy {
    let cfg = ControllerConfig::for_mode(mode, 32);
    let seq = baseline_sequence(BaselineKind::FrontToBack, 32, 0, 4);
    Policy::Morph(Box::new(Controller::new(cfg, seq, 32).unwrap()))
}

fn audited() -> RunOptions {
    RunOptions { audit: true }
}

fn burst() -> Trace {
    synth_burst(&BurstSpec {
        seed: 3,
        base_rps: 4.0,
        burst_rps: 14.0,
        burst_start_ms: 10_000,
        burst_len_ms: 10_000,
        total_ms: 40_000,
        prompt_tokens: 512,
        output_tokens: 256,
    })
    .unwrap()
}

#[test]
fn empty_trace_gives_empty_report() {
    let out = run(
        &trace(&[]),
        &EngineConfig::default(),
        Policy::StaticFull,
        0,
        audited(),
    )
    .unwrap();
    let r = &out.report;
    assert_eq!(r.requests, 0);
    assert_eq!(r.slo_violations, 0);
    assert_eq!(r.ttft_ms.p95, None);
    assert_eq!(r.slo_violation_rate, None);
    assert!(r.timeline.is_empty());
}

#[test]
fn single_request_ttft_is_prefill_time() {
    let cfg = EngineConfig::default();
    let out = run(
        &trace(&[(100, 300, 1)]),
        &cfg,
        Policy::StaticFull,
        0,
        audited(),
    )
    .unwrap();
    let m = &out.report.per_request[0];
    assert_eq!(m.queueing_ms, 0.0);
    assert_eq!(m.ttft_ms, 300.0 * cfg.cost.prefill_ms_per_token);
    assert_eq!(m.tpot_ms, None);
}

#[test]
fn decode_step_formula() {
    let cost = no_attn().cost;
    let mut tags = vec![Precision::Full; 32];
    assert!((decode_step_ms(&cost, &tags, 100) - 9.6).abs() < 1e-9);
    tags[0] = Precision::Q4;
    tags[1] = Precision::Q4;
    assert!((decode_step_ms(&cost, &tags, 100) - 9.36).abs() < 1e-9);
    let with_attn = CostModel {
        attn_ms_per_kv_block: 0.01,
        ..cost
    };
    assert!((decode_step_ms(&with_attn, &tags, 100) - 10.36).abs() < 1e-9);
}

#[test]
fn tpot_is_one_decode_step_when_alone() {
    let cfg = no_attn();
    let out = run(
        &trace(&[(0, 16, 5)]),
        &cfg,
        Policy::StaticFull,
        0,
        audited(),
    )
    .unwrap();
    let m = &out.report.per_request[0];
    assert!((m.tpot_ms.unwrap() - 9.6).abs() < 1e-9);
    assert!((m.done_ms - (16.0 * cfg.cost.prefill_ms_per_token + 4.0 * 9.6)).abs() < 1e-9);
}

#[test]
fn fifo_admission_all_or_nothing() {
    // 4 blocks of 16 tokens: the first request takes 3, the second needs 2
    let out = run(
        &trace(&[(0, 48, 1), (0, 32, 1)]),
        &tiny_pool(4),
        Policy::StaticFull,
        0,
        audited(),
    )
    .unwrap();
    let admits: Vec<_> = out
        .log
        .iter()
        .filter_map(|e| match e.kind {
            LogKind::Admit { request, .. } => Some((e.t_ms, request.0)),
            _ => None,
        })
        .collect();
    assert_eq!(admits[0], (0.0, 0));
    let first_done = out.report.per_request[0].done_ms;
    assert_eq!(admits[1], (first_done, 1));
}

#[test]
fn blocked_head_blocks_the_queue() {
    // head needs 3 of the 2 free blocks; the small request behind it waits
    let out = run(
        &trace(&[(0, 32, 2), (1, 48, 1), (2, 16, 1)]),
        &tiny_pool(4),
        Policy::StaticFull,
        0,
        audited(),
    )
    .unwrap();
    let m = &out.report.per_request;
    assert!(m[2].admitted_ms >= m[1].admitted_ms);
    assert!(m[1].admitted_ms >= m[0].done_ms);
}

#[test]
fn oversized_request_is_unserviceable() {
    let err = run(
        &trace(&[(0, 60, 10)]),
        &tiny_pool(4),
        Policy::StaticFull,
        0,
        RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(
        err,
        EngineError::Unserviceable {
            blocks: 5,
            max_capacity: 4,
            ..
        }
    ));
}

#[test]
fn lifo_preemption_and_recompute() {
    let cfg = tiny_pool(4);
    let p = cfg.cost.prefill_ms_per_token;
    let out = run(
        &trace(&[(0, 32, 20), (0, 32, 20)]),
        &cfg,
        Policy::StaticFull,
        0,
        audited(),
    )
    .unwrap();
    let r = &out.report;
    assert_eq!(r.preemptions, 1);
    let (a, b) = (&r.per_request[0], &r.per_request[1]);
    assert_eq!(a.preemptions, 0);
    assert_eq!(b.preemptions, 1);
    // both got their first token from the shared prefill
    assert_eq!(a.first_token_ms, 64.0 * p);
    assert_eq!(b.first_token_ms, a.first_token_ms);
    // B re-prefills prompt plus its one generated token, then decodes 19 more
    let expected = a.done_ms + 33.0 * p + 19.0 * 9.6;
    assert!(
        (b.done_ms - expected).abs() < 1e-9,
        "{} vs {expected}",
        b.done_ms
    );
}

#[test]
fn static_exposure_counts() {
    let t = trace(&[(0, 64, 8), (50, 64, 4)]);
    let full = run(
        &t,
        &EngineConfig::default(),
        Policy::StaticFull,
        0,
        audited(),
    )
    .unwrap()
    .report;
    assert_eq!(full.exposure.tokens, 12);
    assert_eq!(full.exposure.tokens_with_quantized_layers, 0);
    let quant = run(
        &t,
        &EngineConfig::default(),
        Policy::StaticQuant(Precision::Q4),
        0,
        audited(),
    )
    .unwrap()
    .report;
    assert_eq!(quant.exposure.tokens_with_quantized_layers, 12);
    assert_eq!(quant.exposure.quantized_layer_tokens, 12 * 32);
    assert!(quant.timeline.iter().all(|s| s.quantized_layers == 32));
    // 32 layers * 0.3 GiB freed, in 8 MiB blocks
    assert_eq!(quant.kv.peak_capacity_blocks, 1177 + 1228);
}

#[test]
fn static_quant_model_bytes_constant() {
    let t = burst();
    let cfg = EngineConfig::default();
    let mut sim = Sim::new(&t, &cfg, Policy::StaticQuant(Precision::Q4), audited()).unwrap();
    let expected = cfg.model.model_bytes(Precision::Q4);
    assert_eq!(sim.mem.ledger().model_bytes, expected);
    for i in 0..sim.requests.len() {
        sim.events
            .push(sim.requests[i].arrival_ms, Event::Arrival(i));
    }
    while let Some(s) = sim.events.pop() {
        sim.now = s.t;
        sim.handle(s.event).unwrap();
        if sim.device.is_none() && sim.events.peek_time() != Some(sim.now) {
            sim.schedule().unwrap();
        }
        assert_eq!(sim.mem.ledger().model_bytes, expected);
    }
}

#[test]
fn runs_are_deterministic() {
    let t = burst();
    let a = run(
        &t,
        &EngineConfig::default(),
        morph(Mode::Performance),
        5,
        RunOptions::default(),
    )
    .unwrap();
    let b = run(
        &t,
        &EngineConfig::default(),
        morph(Mode::Performance),
        5,
        RunOptions::default(),
    )
    .unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(log_jsonl(&a.log), log_jsonl(&b.log));
}

#[test]
fn morph_under_pressure_keeps_ledger_and_attach_order() {
    let t = burst();
    let out = run(
        &t,
        &EngineConfig::default(),
        morph(Mode::Performance),
        0,
        audited(),
    )
    .unwrap();
    let r = &out.report;
    assert!(r.morph.swaps_to_quantized > 0);
    assert!(r.morph.peak_quantized_layers <= 16);
    assert_eq!(r.morph.faults, 0);
    assert_eq!(
        r.kv.peak_capacity_blocks,
        r.kv.static_capacity_blocks + 38 * r.morph.peak_quantized_layers
    );
    // every attach is covered by bytes freed by completed swaps since the last one
    let mut freed: i64 = 0;
    for e in &out.log {
        match &e.kind {
            LogKind::SwapComplete { freed_bytes, .. } if *freed_bytes > 0 => freed += freed_bytes,
            LogKind::Attach { blocks, .. } => {
                let bytes = *blocks as i64 * r.kv.block_bytes as i64;
                assert!(bytes <= freed, "attach at {} not covered", e.t_ms);
                freed = 0;
            }
            _ => {}
        }
    }
}

#[test]
fn swapped_layers_form_a_sequence_prefix_and_restore_in_reverse() {
    let out = run(
        &burst(),
        &EngineConfig::default(),
        morph(Mode::Performance),
        0,
        audited(),
    )
    .unwrap();
    let mut swapped: Vec<usize> = Vec::new();
    let mut restores = 0;
    for e in &out.log {
        if let LogKind::SwapBegin { layer, to, .. } = e.kind {
            if to == Precision::Full {
                assert_eq!(swapped.pop(), Some(layer));
                restores += 1;
            } else {
                // front-to-back sequence: the prefix is 0..depth
                assert_eq!(layer, swapped.len());
                swapped.push(layer);
            }
        }
    }
    assert!(restores > 0, "the quiet tail should restore layers");
}

#[test]
fn hysteresis_separates_swaps_and_restores() {
    let cfg = ControllerConfig::for_mode(Mode::Performance, 32);
    let out = run(
        &burst(),
        &EngineConfig::default(),
        morph(Mode::Performance),
        0,
        RunOptions::default(),
    )
    .unwrap();
    let mut last_swap: Option<f64> = None;
    let mut last_restore: Option<f64> = None;
    for e in &out.log {
        if let LogKind::Decision { commands, .. } = &e.kind {
            for c in commands {
                match c {
                    Command::SwapNext(_) => {
                        if let Some(t) = last_restore {
                            assert!(e.t_ms - t >= cfg.hold_ms);
                        }
                        last_swap = Some(e.t_ms);
                    }
                    Command::RestoreNext(_) => {
                        if let Some(t) = last_swap {
                            assert!(e.t_ms - t >= cfg.hold_ms);
                        }
                        if let Some(t) = last_restore {
                            assert!(e.t_ms - t >= cfg.hold_ms);
                        }
                        last_restore = Some(e.t_ms);
                    }
                    _ => {}
                }
            }
        }
    }
}

#[test]
fn light_load_morph_matches_static_full() {
    let t = synth_burst(&BurstSpec::homogeneous(9, 1.0, 30_000, 256, 64)).unwrap();
    let cfg = EngineConfig::default();
    let full = run(&t, &cfg, Policy::StaticFull, 1, audited()).unwrap();
    let morph = run(&t, &cfg, morph(Mode::Performance), 1, audited()).unwrap();
    let mut m = morph.report.clone();
    m.arm = full.report.arm.clone();
    assert_eq!(m, full.report);
    assert_eq!(morph.report.exposure.tokens_with_quantized_layers, 0);
    assert!(!morph
        .log
        .iter()
        .any(|e| matches!(e.kind, LogKind::Decision { .. })));
}

#[test]
fn mismatched_sequence_rejected() {
    let cfg = ControllerConfig::for_mode(Mode::Performance, 8);
    let seq = baseline_sequence(BaselineKind::FrontToBack, 8, 0, 4);
    let policy = Policy::Morph(Box::new(Controller::new(cfg, seq, 8).unwrap()));
    let err = run(
        &trace(&[]),
        &EngineConfig::default(),
        policy,
        0,
        RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, EngineError::Controller(_)));
}

#[test]
fn config_rejects_oversized_static_capacity() {
    let cfg = EngineConfig {
        static_capacity_blocks: Some(5_000),
        ..EngineConfig::default()
    };
    assert!(matches!(cfg.kv_config(), Err(EngineError::Config(_))));
    let cfg = EngineConfig {
        cost: CostModel {
            decode_ms_per_layer: crate::precision::PerPrecision {
                full: 0.3,
                q8: 0.2,
                q4: 0.25,
                q3: 0.1,
            },
            ..CostModel::default()
        },
        ..EngineConfig::default()
    };
    assert!(cfg.kv_config().is_err());
}

#[test]
fn timeline_is_per_interval() {
    let out = run(
        &trace(&[(0, 64, 200), (2_500, 64, 4)]),
        &EngineConfig::default(),
        Policy::StaticFull,
        0,
        audited(),
    )
    .unwrap();
    let ts: Vec<f64> = out.report.timeline.iter().map(|s| s.t_ms).collect();
    assert_eq!(&ts[..3], &[0.0, 1_000.0, 2_000.0]);
    assert!(out.report.timeline[1].kv_used_blocks > 0);
    assert!(out
        .report
        .timeline_csv()
        .starts_with("t_ms,kv_capacity_blocks,kv_used_blocks,quantized_layers,queue_depth\n"));
}

use crate::controller::Command;
