//! Attention encoder–decoder routing policy with hand-written reverse-mode gradients.

mod checkpoint;
mod encoder;
mod gradcheck;
mod linalg;
mod model;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    Meta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use encoder::{Encoded, NORM_EPS};
pub use gradcheck::{gradient_check, GradCheck, REL_ERROR_FLOOR};
pub use model::{
    decode_logits, encode, grad_weighted_logprob, rollout, trajectory_log_prob, weighted_logprob,
    DecodeMode, Trajectory, MASKED_LOGIT,
};
pub use params::{init_params, ArchConfig, Layout, ParamVector};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{dynamic_features, feasible_mask, reset, static_features};
    use crate::vrp::{evaluate, generate_instance, VariantSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            embed_dim: 16,
            heads: 4,
            layers: 2,
            clip: 10.0,
        }
    }

    fn params(seed: u64) -> ParamVector {
        init_params(small_arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let p = params(1);
        let inst = generate_instance("VRPBTW".parse().unwrap(), 6, &mut ChaCha8Rng::seed_from_u64(2));
        let feats = static_features(&inst);
        let base = encode(&p, &feats).unwrap();
        let perm = [0usize, 3, 1, 6, 2, 5, 4];
        let mut pf = vec![0.0; feats.len()];
        for (new, &old) in perm.iter().enumerate() {
            pf[new * 8..(new + 1) * 8].copy_from_slice(&feats[old * 8..(old + 1) * 8]);
        }
        let permuted = encode(&p, &pf).unwrap();
        assert_eq!(permuted.embeddings.len(), 7 * 16);
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in permuted.row(new).iter().zip(base.row(old)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_parameters_encode_finitely() {
        let p = ParamVector::zeros(small_arch()).unwrap();
        let inst = generate_instance(VariantSpec::CVRP, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let enc = encode(&p, &static_features(&inst)).unwrap();
        assert!(enc.embeddings.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn logits_are_clipped_and_masked() {
        let p = params(3);
        let inst = generate_instance("VRPL".parse().unwrap(), 8, &mut ChaCha8Rng::seed_from_u64(3));
        let enc = encode(&p, &static_features(&inst)).unwrap();
        let mut s = reset(&inst);
        s.advance(&inst, 2).unwrap();
        let mut mask = feasible_mask(&inst, &s).unwrap();
        mask[5] = false;
        let logits = decode_logits(&p, &enc, &dynamic_features(&inst, &s), 2, &mask).unwrap();
        let lse = logits.iter().map(|u| u.exp()).sum::<f64>();
        let mut total = 0.0;
        for (i, &u) in logits.iter().enumerate() {
            if mask[i] {
                assert!(u.abs() <= 10.0);
                total += u.exp() / lse;
            } else {
                assert_eq!(u, MASKED_LOGIT);
                assert_eq!(u.exp() / lse, 0.0);
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
        assert!(decode_logits(&p, &enc, &[1.0; 4], 0, &vec![false; 9]).is_err());
    }

    #[test]
    fn greedy_rollout_deterministic_with_matching_costs() {
        let p = params(5);
        let inst = generate_instance("OVRPBLTW".parse().unwrap(), 10, &mut ChaCha8Rng::seed_from_u64(9));
        let a = rollout(&p, &inst, 8, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = rollout(&p, &inst, 8, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        for (j, t) in a.iter().enumerate() {
            assert_eq!(t.start, j + 1);
            assert_eq!(t.actions[0], j + 1);
            assert_eq!(t.cost, evaluate(&inst, &t.solution()).unwrap());
            let lp = trajectory_log_prob(&p, &inst, &t.actions).unwrap();
            assert!((lp - t.sum_log_prob).abs() < 1e-12);
        }
        assert!(rollout(&p, &inst, 11, DecodeMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gradient_zero_weights_and_linearity() {
        let p = params(7);
        let inst = generate_instance("VRPBL".parse().unwrap(), 6, &mut ChaCha8Rng::seed_from_u64(1));
        let trajs = rollout(&p, &inst, 3, DecodeMode::Sample, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let g0 = grad_weighted_logprob(&p, &inst, &trajs, &[0.0; 3]).unwrap();
        assert!(g0.data.iter().all(|&x| x == 0.0));
        let w1 = [0.3, -0.1, 0.7];
        let w2 = [-0.5, 0.4, 0.2];
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let g1 = grad_weighted_logprob(&p, &inst, &trajs, &w1).unwrap();
        let g2 = grad_weighted_logprob(&p, &inst, &trajs, &w2).unwrap();
        let g12 = grad_weighted_logprob(&p, &inst, &trajs, &sum).unwrap();
        for i in 0..g12.len() {
            assert!((g12.data[i] - g1.data[i] - g2.data[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn replay_rejects_masked_actions() {
        let p = params(7);
        let inst = generate_instance(VariantSpec::CVRP, 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(trajectory_log_prob(&p, &inst, &[1, 1, 2, 3, 4, 0]).is_err());
        assert!(trajectory_log_prob(&p, &inst, &[1, 2, 3]).is_err());
    }
}
