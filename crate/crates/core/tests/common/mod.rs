//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use fedroute::env::{feasible_mask, reset, step, DecodeState};
use fedroute::policy::{grad_weighted_logprob, trajectory_log_prob, ParamVector, Trajectory};
use fedroute::vrp::{check_feasibility, evaluate, Instance, Solution};
use rand::Rng;

/// Every mask-respecting action sequence from `state` to completion.
pub fn completions(inst: &Instance, state: &DecodeState, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if state.done {
        out.push(prefix.clone());
        return;
    }
    let mask = feasible_mask(inst, state).expect("reachable state has an allowed action");
    for (a, &ok) in mask.iter().enumerate() {
        if ok {
            let next = step(inst, state, a).unwrap();
            prefix.push(a);
            completions(inst, &next, prefix, out);
            prefix.pop();
        }
    }
}

/// All complete sequences whose first action is customer `start`.
pub fn sequences_from(inst: &Instance, start: usize) -> Vec<Vec<usize>> {
    let s0 = reset(inst);
    let s1 = step(inst, &s0, start).unwrap();
    let mut out = Vec::new();
    completions(inst, &s1, &mut vec![start], &mut out);
    out
}

/// Depth-first search over every reachable state; returns `(states, dead_ends, infeasible_leaves)`.
pub fn exhaustive_mask_check(inst: &Instance) -> (usize, usize, usize) {
    fn go(inst: &Instance, s: &DecodeState, actions: &mut Vec<usize>, acc: &mut (usize, usize, usize)) {
        acc.0 += 1;
        if s.done {
            if !check_feasibility(inst, &Solution::from_actions(actions)).feasible {
                acc.2 += 1;
            }
            return;
        }
        let mask = match feasible_mask(inst, s) {
            Ok(m) => m,
            Err(_) => {
                acc.1 += 1;
                return;
            }
        };
        for (a, &ok) in mask.iter().enumerate() {
            if ok {
                let next = step(inst, s, a).unwrap();
                actions.push(a);
                go(inst, &next, actions, acc);
                actions.pop();
            }
        }
    }
    let mut acc = (0, 0, 0);
    go(inst, &reset(inst), &mut Vec::new(), &mut acc);
    acc
}

/// A rollout choosing uniformly among allowed actions.
pub fn random_masked_rollout<R: Rng>(inst: &Instance, rng: &mut R) -> Vec<usize> {
    let mut s = reset(inst);
    let mut actions = Vec::new();
    while !s.done {
        let mask = feasible_mask(inst, &s).unwrap();
        let allowed: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let a = allowed[rng.gen_range(0..allowed.len())];
        s = step(inst, &s, a).unwrap();
        actions.push(a);
    }
    actions
}

/// Naive ties-merge: rank by magnitude with index tie-break, sign of the sum, mean of agreeing entries.
pub fn ties_reference(base: &[f64], clients: &[Vec<f64>], keep_percent: f64, scale: f64) -> Vec<f64> {
    let len = base.len();
    let keep = {
        let mut k = 0usize;
        while (k as f64) < keep_percent * len as f64 / 100.0 - 1e-9 {
            k += 1;
        }
        k.min(len)
    };
    let mut trimmed = Vec::new();
    for c in clients {
        let tau: Vec<f64> = (0..len).map(|i| c[i] - base[i]).collect();
        let mut t = vec![0.0; len];
        for i in 0..len {
            let mut rank = 0;
            for j in 0..len {
                if tau[j].abs() > tau[i].abs() || (tau[j].abs() == tau[i].abs() && j < i) {
                    rank += 1;
                }
            }
            if rank < keep {
                t[i] = tau[i];
            }
        }
        trimmed.push(t);
    }
    let mut out = base.to_vec();
    for i in 0..len {
        let mut total = 0.0;
        for t in &trimmed {
            total += t[i];
        }
        if total == 0.0 {
            continue;
        }
        let (mut sum, mut count) = (0.0, 0);
        for t in &trimmed {
            if t[i] != 0.0 && (t[i] > 0.0) == (total > 0.0) {
                sum += t[i];
                count += 1;
            }
        }
        if count > 0 {
            out[i] += scale * (sum / count as f64);
        }
    }
    out
}

/// Exact expectation of the multi-start shared-baseline gradient
/// `Σⱼ (Lⱼ − mean L)/S · ∇log pⱼ` over independent starts `1..=S`:
/// `(S−1)/S² · Σⱼ ∇E[Lⱼ]`, with `∇E[Lⱼ] = Σ_seq p · L · ∇log p` by enumeration.
pub fn exact_pomo_gradient(params: &ParamVector, inst: &Instance, starts: usize) -> Vec<f64> {
    let s = starts as f64;
    let mut total = vec![0.0; params.len()];
    for start in 1..=starts {
        let seqs = sequences_from(inst, start);
        let trajs: Vec<Trajectory> = seqs
            .iter()
            .map(|a| Trajectory {
                start,
                actions: a.clone(),
                sum_log_prob: 0.0,
                cost: evaluate(inst, &Solution::from_actions(a)).unwrap(),
            })
            .collect();
        let weights: Vec<f64> = trajs
            .iter()
            .map(|t| trajectory_log_prob(params, inst, &t.actions).unwrap().exp() * t.cost)
            .collect();
        let g = grad_weighted_logprob(params, inst, &trajs, &weights).unwrap();
        for (acc, x) in total.iter_mut().zip(&g.data) {
            *acc += x;
        }
    }
    total.iter().map(|x| x * (s - 1.0) / (s * s)).collect()
}
