use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// One of the 16 routing variants, identified by its four constraint flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct VariantSpec {
    /// Routes do not return to the depot.
    pub open: bool,
    /// Customers may carry negative (pickup) demand.
    pub backhaul: bool,
    /// Per-route distance limit.
    pub duration_limit: bool,
    pub time_windows: bool,
}

impl VariantSpec {
    pub const CVRP: VariantSpec = VariantSpec::new(false, false, false, false);

    pub const fn new(open: bool, backhaul: bool, duration_limit: bool, time_windows: bool) -> Self {
        Self {
            open,
            backhaul,
            duration_limit,
            time_windows,
        }
    }

    /// Packs the flags into the low four bits (O=1, B=2, L=4, TW=8).
    pub fn bits(self) -> u8 {
        (self.open as u8)
            | (self.backhaul as u8) << 1
            | (self.duration_limit as u8) << 2
            | (self.time_windows as u8) << 3
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        if bits > 0xF {
            return None;
        }
        Some(Self::new(
            bits & 1 != 0,
            bits & 2 != 0,
            bits & 4 != 0,
            bits & 8 != 0,
        ))
    }

    /// All 16 variants in flag-bit order.
    pub fn all() -> Vec<VariantSpec> {
        (0u8..16).filter_map(Self::from_bits).collect()
    }

    /// Number of active constraints beyond capacity.
    pub fn constraint_count(self) -> u32 {
        self.bits().count_ones()
    }

    /// Short canonical name such as `OVRPBLTW`.
    pub fn name(self) -> String {
        if self.bits() == 0 {
            return "CVRP".to_string();
        }
        let mut s = String::with_capacity(8);
        if self.open {
            s.push('O');
        }
        s.push_str("VRP");
        if self.backhaul {
            s.push('B');
        }
        if self.duration_limit {
            s.push('L');
        }
        if self.time_windows {
            s.push_str("TW");
        }
        s
    }
}

/// Variants with at most one extra constraint, plus OVRPTW.
pub fn pretrain_variants() -> Vec<VariantSpec> {
    ["CVRP", "OVRP", "VRPB", "VRPL", "VRPTW", "OVRPTW"]
        .iter()
        .map(|n| n.parse().expect("static name"))
        .collect()
}

/// The 10 complex variants used for fine-tuning, in the order they are listed for clients.
pub fn finetune_variants() -> Vec<VariantSpec> {
    [
        "OVRPB", "OVRPL", "VRPBL", "VRPBTW", "VRPLTW", "OVRPBL", "OVRPBTW", "OVRPLTW", "VRPBLTW",
        "OVRPBLTW",
    ]
    .iter()
    .map(|n| n.parse().expect("static name"))
    .collect()
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        if upper == "CVRP" {
            return Ok(Self::CVRP);
        }
        let bad = || Error::InvalidArgument(format!("unknown variant name `{s}`"));
        let (open, rest) = match upper.strip_prefix('O') {
            Some(r) => (true, r),
            None => (false, upper.as_str()),
        };
        let mut rest = rest.strip_prefix("VRP").ok_or_else(bad)?;
        let mut take = |tag: &str| match rest.strip_prefix(tag) {
            Some(r) => {
                rest = r;
                true
            }
            None => false,
        };
        let backhaul = take("B");
        let limit = take("L");
        let tw = take("TW");
        if !rest.is_empty() {
            return Err(bad());
        }
        Ok(Self::new(open, backhaul, limit, tw))
    }
}
