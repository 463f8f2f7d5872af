//! Environment, policy and merge properties checked against independent oracles.

mod common;

use common::*;
use fedroute::merge::{ties_merge, TrimScope};
use fedroute::policy::{
    grad_weighted_logprob, init_params, rollout, trajectory_log_prob, ArchConfig, DecodeMode, ParamVector,
};
use fedroute::train::pomo_weights;
use fedroute::vrp::{check_feasibility, generate_instance, Solution, VariantSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch(d: usize, h: usize, layers: usize) -> ArchConfig {
    ArchConfig {
        embed_dim: d,
        heads: h,
        layers,
        clip: 10.0,
    }
}

#[test]
fn masked_rollouts_are_feasible() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = init_params(arch(8, 2, 1), &mut rng).unwrap();
    for v in VariantSpec::all() {
        for _ in 0..100 {
            let inst = generate_instance(v, 10, &mut rng);
            let actions = random_masked_rollout(&inst, &mut rng);
            assert!(check_feasibility(&inst, &Solution::from_actions(&actions)).feasible, "{v}");
        }
        let inst = generate_instance(v, 10, &mut rng);
        for t in rollout(&params, &inst, 10, DecodeMode::Sample, &mut rng).unwrap() {
            assert!(check_feasibility(&inst, &t.solution()).feasible, "{v}");
        }
    }
}

#[test]
fn masks_never_dead_end_without_time_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in VariantSpec::all().into_iter().filter(|v| !v.time_windows) {
        for _ in 0..3 {
            let inst = generate_instance(v, 5, &mut rng);
            let (states, dead, bad) = exhaustive_mask_check(&inst);
            assert!(states > 1);
            assert_eq!(dead, 0, "{v}");
            assert_eq!(bad, 0, "{v}");
        }
    }
}

#[test]
fn sequence_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = init_params(arch(8, 2, 2), &mut rng).unwrap();
    for v in VariantSpec::all() {
        let inst = generate_instance(v, 3, &mut rng);
        for start in 1..=3 {
            let total: f64 = sequences_from(&inst, start)
                .iter()
                .map(|a| trajectory_log_prob(&params, &inst, a).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() <= 1e-9, "{v} start {start}: {total}");
        }
    }
}

#[test]
fn ties_merge_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let like = ParamVector::zeros(arch(4, 1, 1)).unwrap();
    for _ in 0..50 {
        let base: Vec<f64> = (0..like.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = rng.gen_range(1..=5);
        let clients: Vec<Vec<f64>> = (0..k)
            .map(|_| base.iter().map(|b| b + rng.gen_range(-0.1..0.1)).collect())
            .collect();
        let kappa = rng.gen_range(1.0..=100.0);
        let lambda = rng.gen_range(0.0..2.0);
        let models: Vec<ParamVector> = clients.iter().map(|c| like.with_data(c.clone()).unwrap()).collect();
        let got = ties_merge(&like.with_data(base.clone()).unwrap(), &models, kappa, lambda, TrimScope::Global).unwrap();
        let want = ties_reference(&base, &clients, kappa, lambda);
        for (a, b) in got.data.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn shared_baseline_gradient_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = init_params(arch(4, 1, 1), &mut rng).unwrap();
    let inst = generate_instance(VariantSpec::CVRP, 2, &mut rng);
    let exact = exact_pomo_gradient(&params, &inst, 2);
    let samples = 10_000;
    let mut sum = vec![0.0; params.len()];
    let mut sq = vec![0.0; params.len()];
    for _ in 0..samples {
        let trajs = rollout(&params, &inst, 2, DecodeMode::Sample, &mut rng).unwrap();
        let costs: Vec<f64> = trajs.iter().map(|t| t.cost).collect();
        let g = grad_weighted_logprob(&params, &inst, &trajs, &pomo_weights(&costs).unwrap()).unwrap();
        for i in 0..g.len() {
            sum[i] += g.data[i];
            sq[i] += g.data[i] * g.data[i];
        }
    }
    let n = samples as f64;
    let mut within = 0;
    for i in 0..params.len() {
        let mean = sum[i] / n;
        let se = ((sq[i] / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
        if (mean - exact[i]).abs() <= 3.0 * se + 1e-12 {
            within += 1;
        }
    }
    let frac = within as f64 / params.len() as f64;
    assert!(frac >= 0.98, "{within}/{} coordinates within 3 SE", params.len());
}
