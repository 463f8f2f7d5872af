//! Classical reference solver: mask-driven nearest-neighbour construction followed by
//! first-improvement local search (2-opt, relocate, in-route shift, cross-route swap).

use crate::env::reset;
use crate::error::{Error, Result};
use crate::vrp::{check_feasibility, evaluate, route_feasible, route_length, Instance, Solution};

/// Move evaluations per instance when no budget is given.
pub const DEFAULT_BUDGET: usize = 2000;

const IMPROVEMENT_EPS: f64 = 1e-12;

/// Extends the current route to the nearest allowed customer, returning to the depot
/// when none is allowed.
pub fn greedy_construct(instance: &Instance) -> Result<Solution> {
    let mut state = reset(instance);
    let mut mask = vec![false; instance.n() + 1];
    let mut actions = Vec::with_capacity(2 * instance.n());
    while !state.done {
        state.fill_mask(instance, &mut mask)?;
        let mut best: Option<(usize, f64)> = None;
        for node in 1..mask.len() {
            if !mask[node] {
                continue;
            }
            let d = instance.travel(state.current_node, node);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((node, d));
            }
        }
        let next = best.map_or(0, |(node, _)| node);
        state.advance_unchecked(instance, next);
        actions.push(next);
    }
    Ok(Solution::from_actions(&actions))
}

struct Search<'a> {
    instance: &'a Instance,
    budget: usize,
    used: usize,
}

impl Search<'_> {
    fn spend(&mut self) -> bool {
        if self.used >= self.budget {
            return false;
        }
        self.used += 1;
        true
    }

    /// First improving segment reversal inside any route.
    fn two_opt(&mut self, routes: &mut [Vec<usize>]) -> Option<bool> {
        for route in routes.iter_mut() {
            let len = route.len();
            if len < 2 {
                continue;
            }
            let current = route_length(self.instance, route);
            for i in 0..len - 1 {
                for j in i + 1..len {
                    if !self.spend() {
                        return None;
                    }
                    route[i..=j].reverse();
                    let cand = route_length(self.instance, route);
                    if cand < current - IMPROVEMENT_EPS && route_feasible(self.instance, route) {
                        return Some(true);
                    }
                    route[i..=j].reverse();
                }
            }
        }
        Some(false)
    }

    /// First improving move of one customer into another route.
    fn relocate(&mut self, routes: &mut Vec<Vec<usize>>) -> Option<bool> {
        let k = routes.len();
        for a in 0..k {
            for i in 0..routes[a].len() {
                let mut from = routes[a].clone();
                let customer = from.remove(i);
                let old_a = route_length(self.instance, &routes[a]);
                let new_a = route_length(self.instance, &from);
                for b in 0..k {
                    if b == a {
                        continue;
                    }
                    let old_b = route_length(self.instance, &routes[b]);
                    for pos in 0..=routes[b].len() {
                        if !self.spend() {
                            return None;
                        }
                        let mut to = routes[b].clone();
                        to.insert(pos, customer);
                        let delta = new_a + route_length(self.instance, &to) - old_a - old_b;
                        if delta < -IMPROVEMENT_EPS
                            && route_feasible(self.instance, &to)
                            && route_feasible(self.instance, &from)
                        {
                            routes[b] = to;
                            routes[a] = from;
                            if routes[a].is_empty() {
                                routes.remove(a);
                            }
                            return Some(true);
                        }
                    }
                }
            }
        }
        Some(false)
    }

    /// First improving exchange of two customers in different routes.
    fn swap(&mut self, routes: &mut [Vec<usize>]) -> Option<bool> {
        let k = routes.len();
        for a in 0..k {
            for b in a + 1..k {
                let old = route_length(self.instance, &routes[a]) + route_length(self.instance, &routes[b]);
                for i in 0..routes[a].len() {
                    for j in 0..routes[b].len() {
                        if !self.spend() {
                            return None;
                        }
                        let mut ra = routes[a].clone();
                        let mut rb = routes[b].clone();
                        std::mem::swap(&mut ra[i], &mut rb[j]);
                        let cand = route_length(self.instance, &ra) + route_length(self.instance, &rb);
                        if cand < old - IMPROVEMENT_EPS
                            && route_feasible(self.instance, &ra)
                            && route_feasible(self.instance, &rb)
                        {
                            routes[a] = ra;
                            routes[b] = rb;
                            return Some(true);
                        }
                    }
                }
            }
        }
        Some(false)
    }

    /// First improving move of one customer to another position of its own route.
    fn shift(&mut self, routes: &mut [Vec<usize>]) -> Option<bool> {
        for route in routes.iter_mut() {
            let len = route.len();
            if len < 3 {
                continue;
            }
            let current = route_length(self.instance, route);
            for i in 0..len {
                for pos in 0..len {
                    if pos == i {
                        continue;
                    }
                    if !self.spend() {
                        return None;
                    }
                    let mut cand = route.clone();
                    let c = cand.remove(i);
                    cand.insert(pos, c);
                    if route_length(self.instance, &cand) < current - IMPROVEMENT_EPS
                        && route_feasible(self.instance, &cand)
                    {
                        *route = cand;
                        return Some(true);
                    }
                }
            }
        }
        Some(false)
    }
}

/// First-improvement descent until a local optimum or `budget` move evaluations.
pub fn local_search(instance: &Instance, solution: &Solution, budget: usize) -> Result<Solution> {
    let report = check_feasibility(instance, solution);
    if !report.feasible {
        return Err(Error::InvalidSolution(format!(
            "local search needs a feasible start ({} violations)",
            report.violations.len()
        )));
    }
    let mut routes = solution.routes.clone();
    let mut search = Search {
        instance,
        budget,
        used: 0,
    };
    loop {
        match search.two_opt(&mut routes) {
            None => break,
            Some(true) => continue,
            Some(false) => {}
        }
        match search.relocate(&mut routes) {
            None => break,
            Some(true) => continue,
            Some(false) => {}
        }
        match search.shift(&mut routes) {
            None => break,
            Some(true) => continue,
            Some(false) => {}
        }
        match search.swap(&mut routes) {
            Some(true) => continue,
            _ => break,
        }
    }
    let out = Solution::new(routes);
    debug_assert!(check_feasibility(instance, &out).feasible);
    Ok(out)
}

pub fn solve(instance: &Instance, budget: usize) -> Result<Solution> {
    let start = greedy_construct(instance)?;
    local_search(instance, &start, budget)
}

/// Cost of [`solve`].
pub fn reference_cost(instance: &Instance, budget: usize) -> Result<f64> {
    evaluate(instance, &solve(instance, budget)?)
}

/// Percentage gap of `model_cost` above `ref_cost`; negative when the model is better.
pub fn gap(model_cost: f64, ref_cost: f64) -> Result<f64> {
    if !(ref_cost > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "reference cost must be positive, got {ref_cost}"
        )));
    }
    Ok(100.0 * (model_cost - ref_cost) / ref_cost)
}
