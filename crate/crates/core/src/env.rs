//! Constructive routing MDP shared by the policy, training and the heuristic baseline.
//!
//! A state is the partial solution built so far. Each action appends either a customer
//! to the current route or the depot (closing the route). Closed variants finish with
//! a final depot return; open variants finish as soon as the last customer is served.

use crate::error::{Error, Result};
use crate::vrp::Instance;

/// Width of the static per-node feature row.
pub const STATIC_FEATURES: usize = 8;
/// Width of the dynamic context vector.
pub const DYNAMIC_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub current_node: usize,
    pub visited: Vec<bool>,
    pub num_visited: usize,
    /// Delivered so far on the current route.
    pub load_out: f64,
    /// Picked up so far on the current route.
    pub load_in: f64,
    pub route_len: f64,
    pub clock: f64,
    pub step: usize,
    pub done: bool,
}

pub fn reset(instance: &Instance) -> DecodeState {
    DecodeState {
        current_node: 0,
        visited: vec![false; instance.n()],
        num_visited: 0,
        load_out: 0.0,
        load_in: 0.0,
        route_len: 0.0,
        clock: 0.0,
        step: 0,
        done: false,
    }
}

impl DecodeState {
    pub fn all_visited(&self) -> bool {
        self.num_visited == self.visited.len()
    }

    /// Whether customer `node` (1-based) can be appended to the current route.
    pub fn customer_feasible(&self, instance: &Instance, node: usize) -> bool {
        if self.visited[node - 1] {
            return false;
        }
        let c = instance.capacity;
        let d = instance.demands[node - 1];
        if d > 0.0 {
            if self.load_out + d > c {
                return false;
            }
            if instance.linehaul_first && self.load_in > 0.0 {
                return false;
            }
        } else if self.load_in - d > c {
            return false;
        }
        let open = instance.spec.open;
        let travel = instance.travel(self.current_node, node);
        if let Some(limit) = instance.duration_limit {
            let closure = if open { 0.0 } else { instance.travel(node, 0) };
            if self.route_len + travel + closure > limit {
                return false;
            }
        }
        if let Some(tw) = &instance.time_windows {
            let arrive = self.clock + travel;
            if arrive.max(tw.start[node]) > tw.end[node] {
                return false;
            }
            if !open {
                let leave = arrive.max(tw.start[node]) + tw.service[node - 1];
                if leave + instance.travel(node, 0) > tw.end[0] {
                    return false;
                }
            }
        }
        true
    }

    /// Writes the action mask into `mask` (length n+1) and returns the number of allowed actions.
    pub fn fill_mask(&self, instance: &Instance, mask: &mut [bool]) -> Result<usize> {
        if self.done {
            return Err(Error::Contract("mask requested on a finished state".into()));
        }
        debug_assert_eq!(mask.len(), instance.n() + 1);
        let mut count = 0;
        for node in 1..mask.len() {
            let ok = self.customer_feasible(instance, node);
            mask[node] = ok;
            count += ok as usize;
        }
        mask[0] = self.current_node != 0 || self.all_visited();
        count += mask[0] as usize;
        if count == 0 {
            return Err(Error::Contract(format!(
                "no feasible action at the depot with {} customers unvisited",
                self.visited.len() - self.num_visited
            )));
        }
        Ok(count)
    }

    /// Applies `node` without checking the mask.
    pub fn advance_unchecked(&mut self, instance: &Instance, node: usize) {
        self.step += 1;
        if node == 0 {
            self.current_node = 0;
            self.load_out = 0.0;
            self.load_in = 0.0;
            self.route_len = 0.0;
            self.clock = 0.0;
            if self.all_visited() {
                self.done = true;
            }
            return;
        }
        let travel = instance.travel(self.current_node, node);
        self.route_len += travel;
        if let Some(tw) = &instance.time_windows {
            self.clock = (self.clock + travel).max(tw.start[node]) + tw.service[node - 1];
        }
        let d = instance.demands[node - 1];
        if d > 0.0 {
            self.load_out += d;
        } else {
            self.load_in -= d;
        }
        self.visited[node - 1] = true;
        self.num_visited += 1;
        self.current_node = node;
        if instance.spec.open && self.all_visited() {
            self.done = true;
        }
    }

    /// Applies `node` after checking it against the mask.
    pub fn advance(&mut self, instance: &Instance, node: usize) -> Result<()> {
        if node > instance.n() {
            return Err(Error::Contract(format!("node {node} out of range")));
        }
        let mut mask = vec![false; instance.n() + 1];
        self.fill_mask(instance, &mut mask)?;
        if !mask[node] {
            return Err(Error::Contract(format!(
                "node {node} is masked at step {}",
                self.step
            )));
        }
        self.advance_unchecked(instance, node);
        Ok(())
    }
}

pub fn feasible_mask(instance: &Instance, state: &DecodeState) -> Result<Vec<bool>> {
    let mut mask = vec![false; instance.n() + 1];
    state.fill_mask(instance, &mut mask)?;
    Ok(mask)
}

pub fn step(instance: &Instance, state: &DecodeState, node: usize) -> Result<DecodeState> {
    let mut next = state.clone();
    next.advance(instance, node)?;
    Ok(next)
}

/// Row-major `(n+1) x 8` matrix: `(x, y, demand, tw start, tw end, service, open, limit)`,
/// zero where the variant lacks the attribute.
pub fn static_features(instance: &Instance) -> Vec<f64> {
    let n = instance.n();
    let mut out = vec![0.0; (n + 1) * STATIC_FEATURES];
    let open = if instance.spec.open { 1.0 } else { 0.0 };
    let limit = instance.duration_limit.unwrap_or(0.0);
    for node in 0..=n {
        let row = &mut out[node * STATIC_FEATURES..(node + 1) * STATIC_FEATURES];
        let p = instance.pos(node);
        row[0] = p[0];
        row[1] = p[1];
        row[2] = instance.demand(node) / instance.capacity;
        if let Some(tw) = &instance.time_windows {
            row[3] = tw.start[node];
            row[4] = tw.end[node];
            row[5] = if node == 0 { 0.0 } else { tw.service[node - 1] };
        }
        row[6] = open;
        row[7] = limit;
    }
    out
}

pub fn dynamic_features(instance: &Instance, state: &DecodeState) -> [f64; DYNAMIC_FEATURES] {
    let c = instance.capacity;
    let budget = match instance.duration_limit {
        Some(l) => (l - state.route_len) / l,
        None => 1.0,
    };
    let clock = match &instance.time_windows {
        Some(tw) => state.clock / tw.end[0],
        None => 0.0,
    };
    [
        (c - state.load_out) / c,
        (c - state.load_in) / c,
        budget,
        clock,
    ]
}
