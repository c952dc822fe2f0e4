//! Greedy ordering against exhaustive search and random orderings.

use morphsim_core::profiler::{
    baseline_sequence, cumulative_degradation, evaluate_sequence, greedy_sequence, BaselineKind,
    LisWeights, Provenance, SwapSequence, SEQUENCE_FILE_VERSION,
};
use morphsim_core::toymodel::{calibration_batch, ToyModel};

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

fn as_sequence(order: Vec<usize>) -> SwapSequence {
    SwapSequence {
        version: SEQUENCE_FILE_VERSION,
        num_layers: order.len(),
        bits: 4,
        weights: None,
        provenance: Provenance::FrontToBack,
        order,
        per_step_lis: Vec::new(),
    }
}

#[test]
fn greedy_is_near_exhaustive_optimum() {
    for &layers in &[3usize, 4] {
        for &seed in &[7u64, 11, 13] {
            let model = ToyModel::<f64>::build(seed, layers, 8).unwrap();
            let batch = calibration_batch(seed, 32, 8);
            let greedy = greedy_sequence(&model, &batch, LisWeights::default(), 4).unwrap();
            let greedy_cost =
                cumulative_degradation(&evaluate_sequence(&model, &greedy, &batch, 4).unwrap());
            let best = permutations(layers)
                .into_iter()
                .map(|p| {
                    cumulative_degradation(
                        &evaluate_sequence(&model, &as_sequence(p), &batch, 4).unwrap(),
                    )
                })
                .fold(f64::INFINITY, f64::min);
            assert!(
                greedy_cost <= 1.05 * best,
                "L={layers} seed={seed}: greedy {greedy_cost} vs best {best}"
            );
        }
    }
}

#[test]
fn greedy_curve_dominates_mean_random_curve() {
    let model = ToyModel::<f64>::build(7, 8, 16).unwrap();
    let batch = calibration_batch(7, 32, 16);
    let lis = greedy_sequence(&model, &batch, LisWeights::default(), 4).unwrap();
    let lis_curve = evaluate_sequence(&model, &lis, &batch, 4).unwrap();
    let mut mean = [0.0; 9];
    for seed in 0..20 {
        let c = evaluate_sequence(
            &model,
            &baseline_sequence(BaselineKind::Random, 8, seed, 4),
            &batch,
            4,
        )
        .unwrap();
        assert_eq!(c[0], 0.0);
        assert_eq!(c[8], lis_curve[8]);
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v / 20.0;
        }
    }
    for depth in 1..8 {
        assert!(
            lis_curve[depth] <= mean[depth] + 1e-9,
            "depth {depth}: {} > {}",
            lis_curve[depth],
            mean[depth]
        );
    }
}
