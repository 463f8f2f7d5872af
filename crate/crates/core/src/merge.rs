//! Aggregation of client parameter vectors: weighted federated averaging and
//! ties-merging (trim, elect sign, disjoint mean, scaled add-back).

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::policy::ParamVector;

/// Difference between a client model and the reference model it started from.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub data: Vec<f64>,
}

/// Scope over which the top-κ% magnitudes are selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrimScope {
    /// One selection over the whole flat vector.
    #[default]
    Global,
    /// A separate selection inside every named tensor.
    PerTensor,
}

pub fn task_vector(client: &ParamVector, reference: &ParamVector) -> Result<TaskVector> {
    client.check_compatible(reference)?;
    Ok(TaskVector {
        data: client
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| a - b)
            .collect(),
    })
}

/// Number of entries kept by a keep-percent of `keep_percent` over `len` entries.
pub fn kept_count(len: usize, keep_percent: f64) -> usize {
    let exact = keep_percent * len as f64 / 100.0;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(len)
}

/// Keeps the `⌈κ/100 · len⌉` entries of largest magnitude (lower index wins ties) and zeroes the rest.
pub fn trim(values: &[f64], keep_percent: f64) -> Result<Vec<f64>> {
    if !(keep_percent > 0.0 && keep_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "keep percent {keep_percent} not in (0, 100]"
        )));
    }
    let keep = kept_count(values.len(), keep_percent);
    if keep == values.len() {
        return Ok(values.to_vec());
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; values.len()];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    Ok(out)
}

fn trim_scoped(values: &[f64], keep_percent: f64, scope: TrimScope, like: &ParamVector) -> Result<Vec<f64>> {
    match scope {
        TrimScope::Global => trim(values, keep_percent),
        TrimScope::PerTensor => {
            let mut out = vec![0.0; values.len()];
            for r in like.layout.ranges() {
                let t = trim(&values[r.clone()], keep_percent)?;
                out[r].copy_from_slice(&t);
            }
            Ok(out)
        }
    }
}

#[inline]
fn sgn(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn check_lengths(vectors: &[Vec<f64>]) -> Result<usize> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no vectors to merge".into()))?;
    if vectors.iter().any(|v| v.len() != first.len()) {
        return Err(Error::LayoutMismatch("vectors differ in length".into()));
    }
    Ok(first.len())
}

/// Elementwise sign of the elementwise sum; an exact zero sum votes 0.
pub fn sign_vote(trimmed: &[Vec<f64>]) -> Result<Vec<i8>> {
    let len = check_lengths(trimmed)?;
    Ok((0..len)
        .map(|j| sgn(trimmed.iter().map(|t| t[j]).sum()))
        .collect())
}

/// Per coordinate, the mean over vectors whose entry has the elected sign; zero when
/// the vote is zero or no vector agrees. Zero entries never agree.
pub fn disjoint_merge(trimmed: &[Vec<f64>], signs: &[i8]) -> Result<Vec<f64>> {
    let len = check_lengths(trimmed)?;
    if signs.len() != len {
        return Err(Error::LayoutMismatch("sign vector length differs".into()));
    }
    Ok((0..len)
        .map(|j| {
            let g = signs[j];
            if g == 0 {
                return 0.0;
            }
            let mut sum = 0.0;
            let mut count = 0usize;
            for t in trimmed {
                if sgn(t[j]) == g {
                    sum += t[j];
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect())
}

/// `θ + λ · merge(trim(θₖ − θ))` over all clients.
pub fn ties_merge(
    base: &ParamVector,
    clients: &[ParamVector],
    keep_percent: f64,
    scale: f64,
    scope: TrimScope,
) -> Result<ParamVector> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("ties-merge needs at least one client".into()));
    }
    let trimmed = clients
        .iter()
        .map(|c| {
            let tau = task_vector(c, base)?;
            trim_scoped(&tau.data, keep_percent, scope, base)
        })
        .collect::<Result<Vec<_>>>()?;
    let signs = sign_vote(&trimmed)?;
    let merged = disjoint_merge(&trimmed, &signs)?;
    let data = base
        .data
        .iter()
        .zip(&merged)
        .map(|(b, m)| b + scale * m)
        .collect();
    base.with_data(data)
}

/// `Σₖ (wₖ / Σw) θₖ`, accumulated as `θ₁ + Σₖ (wₖ / Σw)(θₖ − θ₁)` so identical
/// client models average to themselves exactly.
pub fn fed_avg(clients: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("no client models to average".into()))?;
    if weights.len() != clients.len() {
        return Err(Error::InvalidArgument("one weight per client required".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    for c in &clients[1..] {
        first.check_compatible(c)?;
    }
    let mut delta = vec![0.0; first.len()];
    for (c, &w) in clients.iter().zip(weights).skip(1) {
        if w == 0.0 {
            continue;
        }
        let p = w / total;
        for ((acc, x), b) in delta.iter_mut().zip(&c.data).zip(&first.data) {
            *acc += p * (x - b);
        }
    }
    let data = first.data.iter().zip(&delta).map(|(b, d)| b + d).collect();
    first.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, ArchConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ParamVector {
        let arch = ArchConfig {
            embed_dim: 4,
            heads: 1,
            layers: 1,
            clip: 10.0,
        };
        init_params(arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn task_vector_examples() {
        let a = tiny();
        assert!(task_vector(&a, &a).unwrap().data.iter().all(|&x| x == 0.0));
        let mut b = a.clone();
        b.data[0] = a.data[0] + 1.0;
        b.data[1] = a.data[1] - 1.0;
        let t = task_vector(&b, &a).unwrap();
        assert!((t.data[0] - 1.0).abs() < 1e-15 && (t.data[1] + 1.0).abs() < 1e-15);
        let restored = ties_merge(&a, &[b.clone()], 100.0, 1.0, TrimScope::Global).unwrap();
        assert_eq!(restored.data, b.data);
    }

    #[test]
    fn trim_examples() {
        assert_eq!(
            trim(&[0.5, -0.1, 0.02, -0.8], 50.0).unwrap(),
            vec![0.5, 0.0, 0.0, -0.8]
        );
        let v = [0.3, -0.2, 0.1];
        assert_eq!(trim(&v, 100.0).unwrap(), v.to_vec());
        assert_eq!(trim(&[1.0, -1.0, 1.0], 34.0).unwrap(), vec![1.0, -1.0, 0.0]);
        assert!(trim(&v, 0.0).is_err());
        assert_eq!(kept_count(10, 20.0), 2);
        assert_eq!(kept_count(5, 20.0), 1);
        assert_eq!(kept_count(20320, 20.0), 4064);
    }

    #[test]
    fn sign_vote_and_disjoint_examples() {
        let set = vec![vec![1.0, -2.0], vec![3.0, 1.0], vec![-1.0, 1.0]];
        assert_eq!(sign_vote(&set).unwrap(), vec![1, 0]);
        let m = disjoint_merge(&[vec![1.0], vec![3.0], vec![-1.0]], &[1]).unwrap();
        assert_eq!(m, vec![2.0]);
        assert_eq!(disjoint_merge(&set, &[0, 0]).unwrap(), vec![0.0, 0.0]);
        let agree = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let g = sign_vote(&agree).unwrap();
        assert_eq!(disjoint_merge(&agree, &g).unwrap(), vec![2.0, 3.0]);
        assert_eq!(sign_vote(&[vec![-0.5, 0.0, 2.0]]).unwrap(), vec![-1, 0, 1]);
    }

    #[test]
    fn fed_avg_examples() {
        let base = tiny();
        let mk = |v: &[f64]| {
            let mut d = vec![0.0; base.len()];
            d[..v.len()].copy_from_slice(v);
            base.with_data(d).unwrap()
        };
        let avg = fed_avg(&[mk(&[0.0, 2.0]), mk(&[2.0, 0.0])], &[1.0, 1.0]).unwrap();
        assert_eq!(&avg.data[..2], &[1.0, 1.0]);
        let first = fed_avg(&[mk(&[0.0, 2.0]), mk(&[2.0, 0.0])], &[1.0, 0.0]).unwrap();
        assert_eq!(&first.data[..2], &[0.0, 2.0]);
        let two = fed_avg(&[mk(&[1.0, 3.0]), mk(&[3.0, 5.0])], &[0.5, 0.5]).unwrap();
        assert_eq!(&two.data[..2], &[2.0, 4.0]);
        assert!(fed_avg(&[mk(&[1.0])], &[0.0]).is_err());
    }

    #[test]
    fn ties_scale_zero_is_identity() {
        let a = tiny();
        let b = init_params(a.arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = ties_merge(&a, &[b], 20.0, 0.0, TrimScope::Global).unwrap();
        assert_eq!(out.data, a.data);
    }

    #[test]
    fn per_tensor_trim_keeps_share_of_every_tensor() {
        let a = tiny();
        let b = init_params(a.arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = ties_merge(&a, &[b], 20.0, 1.0, TrimScope::PerTensor).unwrap();
        let tau = task_vector(&out, &a).unwrap();
        for r in a.layout.ranges() {
            let nz = tau.data[r.clone()].iter().filter(|&&x| x != 0.0).count();
            assert_eq!(nz, kept_count(r.len(), 20.0));
        }
    }

    proptest! {
        #[test]
        fn trim_is_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..40), k in 1.0f64..100.0) {
            let once = trim(&v, k).unwrap();
            prop_assert_eq!(trim(&once, k).unwrap(), once.clone());
            prop_assert!(once.iter().filter(|&&x| x != 0.0).count() <= kept_count(v.len(), k));
        }

        #[test]
        fn merged_support_follows_vote(
            set in prop::collection::vec(prop::collection::vec(-3i32..4, 6), 1..5)
        ) {
            let set: Vec<Vec<f64>> = set.into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect();
            let g = sign_vote(&set).unwrap();
            let m = disjoint_merge(&set, &g).unwrap();
            for j in 0..m.len() {
                if m[j] != 0.0 {
                    prop_assert_eq!(sgn(m[j]), g[j]);
                }
            }
            let neg: Vec<Vec<f64>> = set.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
            let gn = sign_vote(&neg).unwrap();
            prop_assert!(g.iter().zip(&gn).all(|(a, b)| *a == -*b));
        }

        #[test]
        fn fed_avg_is_convex_and_permutation_invariant(
            rows in prop::collection::vec((prop::collection::vec(-2.0f64..2.0, 4), 0.0f64..3.0), 1..5)
        ) {
            prop_assume!(rows.iter().map(|r| r.1).sum::<f64>() > 1e-3);
            let base = tiny();
            let models: Vec<ParamVector> = rows.iter().map(|(v, _)| {
                let mut d = vec![0.0; base.len()];
                d[..4].copy_from_slice(v);
                base.with_data(d).unwrap()
            }).collect();
            let w: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let avg = fed_avg(&models, &w).unwrap();
            let mut rm = models.clone();
            rm.reverse();
            let mut rw = w.clone();
            rw.reverse();
            let rev = fed_avg(&rm, &rw).unwrap();
            for j in 0..4 {
                let lo = models.iter().map(|m| m.data[j]).fold(f64::INFINITY, f64::min);
                let hi = models.iter().map(|m| m.data[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(avg.data[j] >= lo - 1e-12 && avg.data[j] <= hi + 1e-12);
                prop_assert!((avg.data[j] - rev.data[j]).abs() < 1e-12);
            }
        }
    }
}
