use morphsim_core::controller::{Controller, ControllerConfig, Mode};
use morphsim_core::engine::{gib, run, EngineConfig, Policy, RunOptions};
use morphsim_core::profiler::{baseline_sequence, BaselineKind};
use morphsim_core::workload::{Trace, TraceEvent};
use morphsim_core::Precision;
use proptest::prelude::*;

/// Small device so a handful of requests already fills the KV pool.
fn tight_config() -> EngineConfig {
    let mut cfg = EngineConfig::default();
    cfg.memory.device_budget_bytes = gib(15.0);
    cfg
}

fn morph(mode: Mode, layers: usize) -> Policy {
    let seq = baseline_sequence(BaselineKind::BackToFront, layers, 0, 4);
    Policy::Morph(Box::new(
        Controller::new(ControllerConfig::for_mode(mode, layers), seq, layers).unwrap(),
    ))
}

fn trace_strategy() -> impl Strategy<Value = Trace> {
    prop::collection::vec((0u64..3_000, 1u32..200, 1u32..40), 1..24).prop_map(|reqs| {
        let events = reqs
            .into_iter()
            .map(|(t, p, o)| TraceEvent::new(t, p, o))
            .collect();
        Trace::new(events, "prop")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn requests_complete_in_order_of_lifecycle(trace in trace_strategy(), which in 0usize..4) {
        let cfg = tight_config();
        let layers = cfg.model.num_layers;
        let policy = match which {
            0 => Policy::StaticFull,
            1 => Policy::StaticQuant(Precision::Q4),
            2 => morph(Mode::Accuracy, layers),
            _ => morph(Mode::Performance, layers),
        };
        let out = run(&trace, &cfg, policy, 1, RunOptions { audit: true }).unwrap();
        let r = &out.report;
        prop_assert_eq!(r.completed, trace.len());
        let expected: u64 = trace.events.iter().map(|e| e.output_tokens as u64).sum();
        prop_assert_eq!(r.output_tokens, expected);
        for m in &r.per_request {
            prop_assert!(m.admitted_ms >= m.arrival_ms);
            prop_assert!(m.first_token_ms > m.arrival_ms);
            prop_assert!(m.done_ms >= m.first_token_ms);
            prop_assert_eq!(m.output_tokens > 1, m.tpot_ms.is_some());
        }
        prop_assert!(r.kv.peak_used_blocks <= r.kv.peak_capacity_blocks);
        prop_assert!(r.exposure.fraction.is_none_or(|f| (0.0..=1.0).contains(&f)));
    }

    #[test]
    fn exposure_matches_static_arms(trace in trace_strategy()) {
        let cfg = tight_config();
        let layers = cfg.model.num_layers as u64;
        let full = run(&trace, &cfg, Policy::StaticFull, 1, RunOptions::default()).unwrap().report;
        prop_assert_eq!(full.exposure.tokens_with_quantized_layers, 0);
        prop_assert_eq!(full.exposure.quantized_layer_tokens, 0);
        let quant = run(&trace, &cfg, Policy::StaticQuant(Precision::Q4), 1, RunOptions::default())
            .unwrap()
            .report;
        prop_assert_eq!(quant.exposure.tokens, quant.output_tokens);
        prop_assert_eq!(quant.exposure.tokens_with_quantized_layers, quant.output_tokens);
        prop_assert_eq!(quant.exposure.quantized_layer_tokens, quant.output_tokens * layers);
        prop_assert!(quant.timeline.iter().all(|s| s.quantized_layers == layers as usize));
    }

    #[test]
    fn morph_never_exceeds_its_layer_cap(trace in trace_strategy()) {
        let cfg = tight_config();
        let layers = cfg.model.num_layers;
        let cap = ControllerConfig::for_mode(Mode::Accuracy, layers).max_swapped_layers;
        let r = run(&trace, &cfg, morph(Mode::Accuracy, layers), 3, RunOptions { audit: true })
            .unwrap()
            .report;
        prop_assert!(r.morph.peak_quantized_layers <= cap);
        prop_assert!(r.timeline.iter().all(|s| s.quantized_layers <= cap));
        prop_assert_eq!(r.morph.faults, 0);
    }
}
