use super::instance::Instance;
use crate::error::{Error, Result};

/// Slack allowed when comparing accumulated distances and times against limits.
pub const FEAS_TOL: f64 = 1e-9;

/// Routes of customer indices `1..=n`; the depot is implicit at both ends
/// (only at the start for open variants).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Solution {
    pub routes: Vec<Vec<usize>>,
}

impl Solution {
    pub fn new(routes: Vec<Vec<usize>>) -> Self {
        Self { routes }
    }

    /// Splits a flat node sequence at depot visits (node 0).
    pub fn from_actions(actions: &[usize]) -> Self {
        let routes = actions
            .split(|&a| a == 0)
            .filter(|r| !r.is_empty())
            .map(|r| r.to_vec())
            .collect();
        Self { routes }
    }

    pub fn num_customers(&self) -> usize {
        self.routes.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    Capacity,
    Duration,
    TimeWindow,
    Coverage,
    Precedence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Offending route, or `None` for customers missing from every route.
    pub route: Option<usize>,
    pub kind: ViolationKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

fn coverage_errors(n: usize, solution: &Solution) -> Vec<Violation> {
    let mut seen = vec![0u32; n + 1];
    let mut out = Vec::new();
    for (r, route) in solution.routes.iter().enumerate() {
        if route.is_empty() {
            out.push(Violation {
                route: Some(r),
                kind: ViolationKind::Coverage,
                magnitude: 0.0,
            });
        }
        for &c in route {
            if c == 0 || c > n {
                out.push(Violation {
                    route: Some(r),
                    kind: ViolationKind::Coverage,
                    magnitude: c as f64,
                });
                continue;
            }
            seen[c] += 1;
            if seen[c] == 2 {
                out.push(Violation {
                    route: Some(r),
                    kind: ViolationKind::Coverage,
                    magnitude: c as f64,
                });
            }
        }
    }
    for (c, &k) in seen.iter().enumerate().skip(1) {
        if k == 0 {
            out.push(Violation {
                route: None,
                kind: ViolationKind::Coverage,
                magnitude: c as f64,
            });
        }
    }
    out
}

/// Length of one route, including the return leg unless the variant is open.
pub fn route_length(instance: &Instance, route: &[usize]) -> f64 {
    let mut len = 0.0;
    let mut prev = 0;
    for &c in route {
        len += instance.travel(prev, c);
        prev = c;
    }
    if !instance.spec.open {
        len += instance.travel(prev, 0);
    }
    len
}

/// Total travelled distance. Rejects solutions that do not visit every customer exactly once.
pub fn evaluate(instance: &Instance, solution: &Solution) -> Result<f64> {
    if let Some(v) = coverage_errors(instance.n(), solution).first() {
        return Err(Error::InvalidSolution(match v.route {
            Some(r) => format!("route {r} has an empty, duplicate or out-of-range entry"),
            None => format!("customer {} is not visited", v.magnitude),
        }));
    }
    Ok(solution
        .routes
        .iter()
        .map(|r| route_length(instance, r))
        .sum())
}

/// Checks one route against capacity, duration and time-window constraints.
pub fn route_violations(instance: &Instance, index: usize, route: &[usize], out: &mut Vec<Violation>) {
    let spec = instance.spec;
    let c = instance.capacity;
    let mut push = |kind, magnitude: f64| {
        out.push(Violation {
            route: Some(index),
            kind,
            magnitude,
        })
    };

    let mut load_out = 0.0;
    let mut load_in = 0.0;
    let mut picked = false;
    let mut precedence_broken = 0usize;
    for &node in route {
        let d = instance.demand(node);
        if d > 0.0 {
            load_out += d;
            if picked {
                precedence_broken += 1;
            }
        } else {
            load_in += -d;
            picked = true;
        }
    }
    if load_out > c + FEAS_TOL {
        push(ViolationKind::Capacity, load_out - c);
    }
    if load_in > c + FEAS_TOL {
        push(ViolationKind::Capacity, load_in - c);
    }
    if instance.linehaul_first && precedence_broken > 0 {
        push(ViolationKind::Precedence, precedence_broken as f64);
    }

    if let Some(limit) = instance.duration_limit {
        let len = route_length(instance, route);
        if len > limit + FEAS_TOL {
            push(ViolationKind::Duration, len - limit);
        }
    }

    if let Some(tw) = &instance.time_windows {
        let mut clock = 0.0;
        let mut prev = 0;
        let mut late = 0.0;
        for &node in route {
            let arrive = clock + instance.travel(prev, node);
            if arrive > tw.end[node] + FEAS_TOL {
                late += arrive - tw.end[node];
            }
            clock = arrive.max(tw.start[node]) + tw.service[node - 1];
            prev = node;
        }
        if !spec.open {
            let back = clock + instance.travel(prev, 0);
            if back > tw.end[0] + FEAS_TOL {
                late += back - tw.end[0];
            }
        }
        if late > 0.0 {
            push(ViolationKind::TimeWindow, late);
        }
    }
}

pub fn check_feasibility(instance: &Instance, solution: &Solution) -> FeasibilityReport {
    let mut violations = coverage_errors(instance.n(), solution);
    let n = instance.n();
    for (r, route) in solution.routes.iter().enumerate() {
        if route.iter().any(|&c| c == 0 || c > n) {
            continue;
        }
        route_violations(instance, r, route, &mut violations);
    }
    FeasibilityReport {
        feasible: violations.is_empty(),
        violations,
    }
}

/// Feasibility of a single route, ignoring coverage.
pub fn route_feasible(instance: &Instance, route: &[usize]) -> bool {
    let mut v = Vec::new();
    route_violations(instance, 0, route, &mut v);
    v.is_empty()
}
