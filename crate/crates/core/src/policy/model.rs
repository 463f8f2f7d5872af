//! Pointer-style decoder, multi-start rollouts and the reverse-mode gradient of
//! weighted trajectory log-probabilities.

use rand::Rng;

use super::encoder::{encode_backward, encode_with, Encoded};
use super::linalg::{add_at_b, add_a_bt, dot, log_sum_exp, matmul};
use super::params::{ArchConfig, Offsets, ParamVector};
use crate::env::{dynamic_features, reset, static_features, DecodeState, DYNAMIC_FEATURES};
use crate::error::{Error, Result};
use crate::vrp::{evaluate, Instance, Solution};

/// Logit assigned to masked actions.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

/// One constructed solution. `actions` starts with the forced first customer and
/// lists every later node including depot returns.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start: usize,
    pub actions: Vec<usize>,
    /// Log-probability of every sampled action; the forced first customer contributes nothing.
    pub sum_log_prob: f64,
    pub cost: f64,
}

impl Trajectory {
    pub fn solution(&self) -> Solution {
        Solution::from_actions(&self.actions)
    }
}

pub fn encode(params: &ParamVector, features: &[f64]) -> Result<Encoded> {
    let offsets = Offsets::new(&params.arch);
    encode_with(&params.data, &offsets, &params.arch, features)
}

/// Per-instance decoder precomputation plus scratch space for one step.
struct Decoder<'a> {
    params: &'a [f64],
    offsets: &'a Offsets,
    arch: &'a ArchConfig,
    enc: &'a Encoded,
    keys: Vec<f64>,
    mean: Vec<f64>,
    ctx: Vec<f64>,
    query: Vec<f64>,
    tanh: Vec<f64>,
    logits: Vec<f64>,
}

impl<'a> Decoder<'a> {
    fn new(params: &'a [f64], offsets: &'a Offsets, arch: &'a ArchConfig, enc: &'a Encoded) -> Self {
        let d = arch.embed_dim;
        let n = enc.nodes;
        let mut keys = vec![0.0; n * d];
        matmul(&enc.embeddings, &params[offsets.key_w..offsets.key_w + d * d], n, d, d, &mut keys);
        let mut mean = vec![0.0; d];
        for row in enc.embeddings.chunks_exact(d) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        Self {
            params,
            offsets,
            arch,
            enc,
            keys,
            mean,
            ctx: vec![0.0; arch.context_dim()],
            query: vec![0.0; d],
            tanh: vec![0.0; n],
            logits: vec![0.0; n],
        }
    }

    fn compute(&mut self, current: usize, dynamic: &[f64; DYNAMIC_FEATURES], mask: &[bool]) {
        let d = self.arch.embed_dim;
        self.ctx[..d].copy_from_slice(&self.mean);
        self.ctx[d..2 * d].copy_from_slice(self.enc.row(current));
        self.ctx[2 * d..].copy_from_slice(dynamic);
        let cd = self.arch.context_dim();
        matmul(
            &self.ctx,
            &self.params[self.offsets.ctx_w..self.offsets.ctx_w + cd * d],
            1,
            cd,
            d,
            &mut self.query,
        );
        let inv = 1.0 / (d as f64).sqrt();
        for i in 0..self.enc.nodes {
            if mask[i] {
                let t = (dot(&self.query, &self.keys[i * d..(i + 1) * d]) * inv).tanh();
                self.tanh[i] = t;
                self.logits[i] = self.arch.clip * t;
            } else {
                self.tanh[i] = 0.0;
                self.logits[i] = MASKED_LOGIT;
            }
        }
    }

    /// Log-probabilities of the current logits.
    fn log_probs(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|u| u - lse).collect()
    }
}

/// Accumulators for the decoder part of the backward pass.
struct DecoderGrad {
    d_embeddings: Vec<f64>,
    d_keys: Vec<f64>,
    d_mean: Vec<f64>,
}

impl DecoderGrad {
    fn new(nodes: usize, d: usize) -> Self {
        Self {
            d_embeddings: vec![0.0; nodes * d],
            d_keys: vec![0.0; nodes * d],
            d_mean: vec![0.0; d],
        }
    }

    /// Adds `weight * ∇ log p(action)` for the step last computed by `dec`.
    fn step(&mut self, dec: &Decoder<'_>, current: usize, action: usize, weight: f64, mask: &[bool], grad: &mut [f64]) {
        let d = dec.arch.embed_dim;
        let inv = 1.0 / (d as f64).sqrt();
        let log_p = dec.log_probs();
        let mut d_query = vec![0.0; d];
        for i in 0..dec.enc.nodes {
            if !mask[i] {
                continue;
            }
            let indicator = if i == action { 1.0 } else { 0.0 };
            let du = weight * (indicator - log_p[i].exp());
            let ds = du * dec.arch.clip * (1.0 - dec.tanh[i] * dec.tanh[i]) * inv;
            let key = &dec.keys[i * d..(i + 1) * d];
            for (q, k) in d_query.iter_mut().zip(key) {
                *q += ds * k;
            }
            for (dk, q) in self.d_keys[i * d..(i + 1) * d].iter_mut().zip(&dec.query) {
                *dk += ds * q;
            }
        }
        let cd = dec.arch.context_dim();
        let ctx_w = dec.offsets.ctx_w;
        add_at_b(&dec.ctx, &d_query, 1, cd, d, &mut grad[ctx_w..ctx_w + cd * d]);
        let mut d_ctx = vec![0.0; cd];
        add_a_bt(&d_query, &dec.params[ctx_w..ctx_w + cd * d], 1, cd, d, &mut d_ctx);
        for (m, g) in self.d_mean.iter_mut().zip(&d_ctx[..d]) {
            *m += g;
        }
        for (e, g) in self.d_embeddings[current * d..(current + 1) * d]
            .iter_mut()
            .zip(&d_ctx[d..2 * d])
        {
            *e += g;
        }
    }

    fn finish(mut self, dec: &Decoder<'_>, grad: &mut [f64]) -> Vec<f64> {
        let d = dec.arch.embed_dim;
        let n = dec.enc.nodes;
        let key_w = dec.offsets.key_w;
        add_at_b(&dec.enc.embeddings, &self.d_keys, n, d, d, &mut grad[key_w..key_w + d * d]);
        add_a_bt(&self.d_keys, &dec.params[key_w..key_w + d * d], n, d, d, &mut self.d_embeddings);
        for row in self.d_embeddings.chunks_exact_mut(d) {
            for (e, m) in row.iter_mut().zip(&self.d_mean) {
                *e += m / n as f64;
            }
        }
        self.d_embeddings
    }
}

/// Decoder logits for one state: `clip · tanh(q·kᵢ/√d)` on allowed nodes, [`MASKED_LOGIT`] elsewhere.
pub fn decode_logits(
    params: &ParamVector,
    enc: &Encoded,
    dynamic: &[f64; DYNAMIC_FEATURES],
    current_node: usize,
    mask: &[bool],
) -> Result<Vec<f64>> {
    if mask.len() != enc.nodes {
        return Err(Error::InvalidArgument("mask length differs from node count".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("every action is masked".into()));
    }
    let offsets = Offsets::new(&params.arch);
    let mut dec = Decoder::new(&params.data, &offsets, &params.arch, enc);
    dec.compute(current_node, dynamic, mask);
    Ok(dec.logits)
}

fn pick_greedy(log_p: &[f64], mask: &[bool]) -> usize {
    let mut best = usize::MAX;
    for i in 0..log_p.len() {
        if mask[i] && (best == usize::MAX || log_p[i] > log_p[best]) {
            best = i;
        }
    }
    best
}

fn pick_sample<R: Rng + ?Sized>(log_p: &[f64], mask: &[bool], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = usize::MAX;
    for i in 0..log_p.len() {
        if !mask[i] {
            continue;
        }
        acc += log_p[i].exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn start_state(instance: &Instance, start: usize) -> Result<DecodeState> {
    let mut state = reset(instance);
    if start == 0 || start > instance.n() {
        return Err(Error::InvalidArgument(format!("start node {start} out of range")));
    }
    state.advance(instance, start)?;
    Ok(state)
}

/// Multi-start construction: trajectory `j` is forced to begin at customer `j + 1`.
pub fn rollout<R: Rng + ?Sized>(
    params: &ParamVector,
    instance: &Instance,
    num_starts: usize,
    mode: DecodeMode,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let n = instance.n();
    if num_starts == 0 || num_starts > n {
        return Err(Error::InvalidArgument(format!(
            "num_starts {num_starts} must be in 1..={n}"
        )));
    }
    let arch = params.arch;
    let offsets = Offsets::new(&arch);
    let enc = encode_with(&params.data, &offsets, &arch, &static_features(instance))?;
    let mut dec = Decoder::new(&params.data, &offsets, &arch, &enc);
    let mut mask = vec![false; n + 1];
    let mut out = Vec::with_capacity(num_starts);
    for start in 1..=num_starts {
        let mut state = start_state(instance, start)?;
        let mut actions = vec![start];
        let mut sum_log_prob = 0.0;
        while !state.done {
            let allowed = state.fill_mask(instance, &mut mask)?;
            let action = if allowed == 1 {
                mask.iter().position(|&m| m).unwrap()
            } else {
                let dynamic = dynamic_features(instance, &state);
                dec.compute(state.current_node, &dynamic, &mask);
                let log_p = dec.log_probs();
                let a = match mode {
                    DecodeMode::Greedy => pick_greedy(&log_p, &mask),
                    DecodeMode::Sample => pick_sample(&log_p, &mask, rng),
                };
                sum_log_prob += log_p[a];
                a
            };
            state.advance_unchecked(instance, action);
            actions.push(action);
        }
        if !sum_log_prob.is_finite() {
            return Err(Error::Numeric("non-finite trajectory log-probability".into()));
        }
        let cost = evaluate(instance, &Solution::from_actions(&actions))?;
        out.push(Trajectory {
            start,
            actions,
            sum_log_prob,
            cost,
        });
    }
    Ok(out)
}

/// Replays `actions` and returns their total log-probability, optionally
/// accumulating `weight * ∇ log p` into the decoder gradient.
fn replay(
    dec: &mut Decoder<'_>,
    instance: &Instance,
    actions: &[usize],
    mut backward: Option<(&mut DecoderGrad, f64, &mut [f64])>,
) -> Result<f64> {
    let (&start, rest) = actions
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
    let mut state = start_state(instance, start)?;
    let mut mask = vec![false; instance.n() + 1];
    let mut total = 0.0;
    for &action in rest {
        if state.done {
            return Err(Error::Contract("trajectory continues after completion".into()));
        }
        let allowed = state.fill_mask(instance, &mut mask)?;
        if action > instance.n() || !mask[action] {
            return Err(Error::Contract(format!(
                "trajectory action {action} is masked at step {}",
                state.step
            )));
        }
        if allowed > 1 {
            let dynamic = dynamic_features(instance, &state);
            dec.compute(state.current_node, &dynamic, &mask);
            total += dec.log_probs()[action];
            if let Some((acc, weight, grad)) = backward.as_mut() {
                acc.step(dec, state.current_node, action, *weight, &mask, grad);
            }
        }
        state.advance_unchecked(instance, action);
    }
    if !state.done {
        return Err(Error::Contract("trajectory ends before completion".into()));
    }
    Ok(total)
}

/// Log-probability of a complete action sequence (first entry forced).
pub fn trajectory_log_prob(params: &ParamVector, instance: &Instance, actions: &[usize]) -> Result<f64> {
    let arch = params.arch;
    let offsets = Offsets::new(&arch);
    let enc = encode_with(&params.data, &offsets, &arch, &static_features(instance))?;
    let mut dec = Decoder::new(&params.data, &offsets, &arch, &enc);
    replay(&mut dec, instance, actions, None)
}

/// `Σⱼ wⱼ · sum_log_probⱼ` recomputed from the actions; the objective whose gradient
/// [`grad_weighted_logprob`] returns.
pub fn weighted_logprob(
    params: &ParamVector,
    instance: &Instance,
    trajectories: &[Trajectory],
    weights: &[f64],
) -> Result<f64> {
    if trajectories.len() != weights.len() {
        return Err(Error::InvalidArgument("one weight per trajectory required".into()));
    }
    let arch = params.arch;
    let offsets = Offsets::new(&arch);
    let enc = encode_with(&params.data, &offsets, &arch, &static_features(instance))?;
    let mut dec = Decoder::new(&params.data, &offsets, &arch, &enc);
    let mut total = 0.0;
    for (t, &w) in trajectories.iter().zip(weights) {
        total += w * replay(&mut dec, instance, &t.actions, None)?;
    }
    Ok(total)
}

/// Exact gradient of `Σⱼ wⱼ · log p(trajectoryⱼ)` by replaying every trajectory and
/// back-propagating through the decoder and the shared encoder pass.
pub fn grad_weighted_logprob(
    params: &ParamVector,
    instance: &Instance,
    trajectories: &[Trajectory],
    weights: &[f64],
) -> Result<ParamVector> {
    if trajectories.len() != weights.len() {
        return Err(Error::InvalidArgument("one weight per trajectory required".into()));
    }
    let arch = params.arch;
    let offsets = Offsets::new(&arch);
    let mut grad = params.zeros_like();
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(grad);
    }
    let enc = encode_with(&params.data, &offsets, &arch, &static_features(instance))?;
    let mut dec = Decoder::new(&params.data, &offsets, &arch, &enc);
    let mut acc = DecoderGrad::new(enc.nodes, arch.embed_dim);
    for (t, &w) in trajectories.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        replay(&mut dec, instance, &t.actions, Some((&mut acc, w, &mut grad.data)))?;
    }
    let d_emb = acc.finish(&dec, &mut grad.data);
    encode_backward(&params.data, &offsets, &arch, &enc, d_emb, &mut grad.data);
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(grad)
}
