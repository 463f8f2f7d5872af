use rand::Rng;

use super::variant::VariantSpec;
use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Time-window data, present only for TW variants. Index 0 is the depot.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWindows {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// Service durations for customers 1..=n (stored 0-based).
    pub service: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub spec: VariantSpec,
    pub depot: Point,
    pub coords: Vec<Point>,
    /// Signed demands as a fraction of capacity; negative entries are backhauls.
    pub demands: Vec<f64>,
    pub capacity: f64,
    pub duration_limit: Option<f64>,
    pub time_windows: Option<TimeWindows>,
    /// Forbid linehaul customers after a backhaul on the same route.
    pub linehaul_first: bool,
}

impl Instance {
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    /// Node position; 0 is the depot, `1..=n` are customers.
    #[inline]
    pub fn pos(&self, node: usize) -> Point {
        if node == 0 {
            self.depot
        } else {
            self.coords[node - 1]
        }
    }

    #[inline]
    pub fn travel(&self, a: usize, b: usize) -> f64 {
        dist(self.pos(a), self.pos(b))
    }

    /// Demand of a node (0 for the depot).
    #[inline]
    pub fn demand(&self, node: usize) -> f64 {
        if node == 0 {
            0.0
        } else {
            self.demands[node - 1]
        }
    }

    /// Checks the structural invariants tying optional fields to the variant flags.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if n == 0 {
            return bad("instance has no customers".into());
        }
        if self.demands.len() != n {
            return bad(format!("{} demands for {} customers", self.demands.len(), n));
        }
        if !(self.capacity > 0.0) {
            return bad("capacity must be positive".into());
        }
        if self.duration_limit.is_some() != self.spec.duration_limit {
            return bad("duration limit presence does not match variant".into());
        }
        if let Some(l) = self.duration_limit {
            if !(l > 0.0) {
                return bad("duration limit must be positive".into());
            }
        }
        if self.time_windows.is_some() != self.spec.time_windows {
            return bad("time windows presence does not match variant".into());
        }
        for (i, &d) in self.demands.iter().enumerate() {
            if !d.is_finite() || d == 0.0 || d.abs() > self.capacity {
                return bad(format!("customer {} has invalid demand {d}", i + 1));
            }
            if d < 0.0 && !self.spec.backhaul {
                return bad(format!("customer {} has negative demand without backhaul", i + 1));
            }
        }
        if let Some(tw) = &self.time_windows {
            if tw.start.len() != n + 1 || tw.end.len() != n + 1 || tw.service.len() != n {
                return bad("time window arrays have wrong length".into());
            }
            for i in 0..=n {
                if !(tw.start[i] < tw.end[i]) {
                    return bad(format!("node {i} has empty time window"));
                }
            }
            if tw.service.iter().any(|&s| !(s >= 0.0)) {
                return bad("negative service time".into());
            }
        }
        Ok(())
    }
}

/// Distribution parameters for random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Demand divisor; `None` picks 30 for n ≤ 20, 40 for n ≤ 50, 50 above.
    pub demand_scale: Option<f64>,
    pub backhaul_ratio: f64,
    pub duration_limit: f64,
    pub depot_window_end: f64,
    pub service_time: f64,
    pub tw_width: (f64, f64),
    pub linehaul_first: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            demand_scale: None,
            backhaul_ratio: 0.2,
            duration_limit: 3.0,
            depot_window_end: 3.0,
            service_time: 0.2,
            tw_width: (0.15, 0.6),
            linehaul_first: false,
        }
    }
}

impl GeneratorConfig {
    pub fn demand_scale_for(&self, n: usize) -> f64 {
        self.demand_scale.unwrap_or(match n {
            0..=20 => 30.0,
            21..=50 => 40.0,
            _ => 50.0,
        })
    }
}

pub fn generate_instance<R: Rng + ?Sized>(spec: VariantSpec, n: usize, rng: &mut R) -> Instance {
    generate_instance_with(spec, n, &GeneratorConfig::default(), rng)
}

pub fn generate_instance_with<R: Rng + ?Sized>(
    spec: VariantSpec,
    n: usize,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Instance {
    assert!(n >= 1, "instance needs at least one customer");
    let depot = [rng.gen::<f64>(), rng.gen::<f64>()];
    let horizon = cfg.depot_window_end;
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        loop {
            let p = [rng.gen::<f64>(), rng.gen::<f64>()];
            // A TW customer must admit a depot round trip inside the depot window.
            if spec.time_windows && 2.0 * dist(depot, p) + cfg.service_time > horizon {
                continue;
            }
            coords.push(p);
            break;
        }
    }

    let scale = cfg.demand_scale_for(n);
    let mut demands: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(1..=9) as f64 / scale)
        .collect();
    if spec.backhaul {
        let mut flagged: Vec<bool> = (0..n).map(|_| rng.gen_bool(cfg.backhaul_ratio)).collect();
        if n >= 2 {
            let count = flagged.iter().filter(|&&f| f).count();
            if count == 0 {
                flagged[rng.gen_range(0..n)] = true;
            } else if count == n {
                flagged[rng.gen_range(0..n)] = false;
            }
        }
        for (d, f) in demands.iter_mut().zip(&flagged) {
            if *f {
                *d = -*d;
            }
        }
    }

    let time_windows = spec.time_windows.then(|| {
        let mut start = vec![0.0; n + 1];
        let mut end = vec![horizon; n + 1];
        let service = vec![cfg.service_time; n];
        for i in 0..n {
            let d0 = dist(depot, coords[i]);
            let lo = d0;
            let hi = horizon - cfg.service_time - d0;
            let e = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let w = rng.gen_range(cfg.tw_width.0..=cfg.tw_width.1);
            start[i + 1] = e;
            end[i + 1] = e + w;
        }
        TimeWindows {
            start,
            end,
            service,
        }
    });

    Instance {
        spec,
        depot,
        coords,
        demands,
        capacity: 1.0,
        duration_limit: spec.duration_limit.then_some(cfg.duration_limit),
        time_windows,
        linehaul_first: cfg.linehaul_first,
    }
}

/// The `k`-th symmetry of the unit square applied to every coordinate.
pub fn augment8(instance: &Instance, k: usize) -> Result<Instance> {
    if k >= 8 {
        return Err(Error::InvalidArgument(format!("augmentation index {k} not in 0..8")));
    }
    let f = |p: Point| -> Point {
        let [x, y] = p;
        match k {
            0 => [x, y],
            1 => [1.0 - y, x],
            2 => [1.0 - x, 1.0 - y],
            3 => [y, 1.0 - x],
            4 => [1.0 - x, y],
            5 => [x, 1.0 - y],
            6 => [y, x],
            _ => [1.0 - y, 1.0 - x],
        }
    };
    let mut out = instance.clone();
    out.depot = f(instance.depot);
    for p in &mut out.coords {
        *p = f(*p);
    }
    Ok(out)
}
