//! Analytic gradients of the weighted log-likelihood against central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{grad_weighted_logprob, rollout, weighted_logprob, DecodeMode};
use super::params::{init_params, ArchConfig};
use crate::error::Result;
use crate::vrp::{generate_instance, VariantSpec};

/// Denominator floor of the relative error; coordinates whose gradient is below it
/// are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub variant: VariantSpec,
    pub max_rel_error: f64,
    /// Index of the worst coordinate.
    pub worst_index: usize,
    pub params: usize,
}

/// Checks every coordinate on one random instance of `variant` with two sampled
/// trajectories weighted `[0.7, -0.4]`.
pub fn gradient_check(arch: ArchConfig, variant: VariantSpec, n: usize, eps: f64, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(arch, &mut rng)?;
    let inst = generate_instance(variant, n, &mut rng);
    let trajs = rollout(&params, &inst, 2.min(n), DecodeMode::Sample, &mut rng)?;
    let weights = [0.7, -0.4];
    let weights = &weights[..trajs.len()];
    let g = grad_weighted_logprob(&params, &inst, &trajs, weights)?;
    let mut worst = (0.0f64, 0usize);
    let mut probe = params.clone();
    for i in 0..params.len() {
        probe.data[i] = params.data[i] + eps;
        let up = weighted_logprob(&probe, &inst, &trajs, weights)?;
        probe.data[i] = params.data[i] - eps;
        let down = weighted_logprob(&probe, &inst, &trajs, weights)?;
        probe.data[i] = params.data[i];
        let fd = (up - down) / (2.0 * eps);
        let rel = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(REL_ERROR_FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheck {
        variant,
        max_rel_error: worst.0,
        worst_index: worst.1,
        params: params.len(),
    })
}
