//! Trained/unseen evaluation of fine-tuned models against reference solver costs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baseline::{gap, reference_cost};
use crate::error::{Error, Result};
use crate::policy::{rollout, DecodeMode, ParamVector};
use crate::vrp::{augment8, generate_instance_with, GeneratorConfig, Instance, VariantSpec};
use crate::train::mix_seed;

/// A frozen evaluation dataset with per-instance reference costs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub variant: VariantSpec,
    pub instances: Vec<Instance>,
    pub ref_costs: Vec<f64>,
}

/// Instances of the evaluation set for `(variant, n, seed)`.
pub fn eval_instances(variant: VariantSpec, n: usize, count: usize, seed: u64, gen: &GeneratorConfig) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[variant.bits() as u64, n as u64]));
    (0..count).map(|_| generate_instance_with(variant, n, gen, &mut rng)).collect()
}

/// Reference solver costs, instance-parallel.
pub fn reference_costs(instances: &[Instance], budget: usize) -> Result<Vec<f64>> {
    instances.par_iter().map(|inst| reference_cost(inst, budget)).collect()
}

/// Best greedy multi-start cost, optionally over all 8 coordinate symmetries.
pub fn best_greedy_cost(params: &ParamVector, instance: &Instance, starts: usize, augment: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let views = if augment { 8 } else { 1 };
    let mut best = f64::INFINITY;
    for k in 0..views {
        let view = augment8(instance, k)?;
        for t in rollout(params, &view, starts.min(instance.n()), DecodeMode::Greedy, &mut rng)? {
            best = best.min(t.cost);
        }
    }
    Ok(best)
}

/// One evaluated parameter vector and the table rows it stands for. A pre-trained
/// model appears once per fine-tuning variant so its rows line up with fine-tuned ones.
#[derive(Debug, Clone)]
pub struct EvalModel<'a> {
    pub name: String,
    pub params: &'a ParamVector,
    pub rows: Vec<ModelRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    /// Variant name, or `mix` for a model trained on several variants.
    pub finetune_label: String,
    pub trained: Vec<VariantSpec>,
}

impl ModelRow {
    pub fn single(v: VariantSpec) -> Self {
        Self {
            finetune_label: v.name(),
            trained: vec![v],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetailRow {
    pub model: String,
    pub finetune_label: String,
    pub eval_variant: VariantSpec,
    pub n: usize,
    /// Mean best cost over the evaluation set.
    pub obj: f64,
    /// Mean reference cost over the evaluation set.
    pub ref_obj: f64,
    /// Gap of the mean objective over the mean reference cost.
    pub gap_pct: f64,
    /// Mean over instances of the per-instance gap.
    pub mean_instance_gap_pct: f64,
    pub is_trained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollup {
    pub model: String,
    pub finetune_label: String,
    pub trained_obj: f64,
    pub trained_gap: f64,
    /// `None` when the model was trained on every evaluated variant.
    pub unseen_obj: Option<f64>,
    pub unseen_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub detail: Vec<DetailRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (c > 0).then(|| s / c as f64)
}

impl Metrics {
    /// Per-row means: trained over the row's own variants, unseen over the rest
    /// (unweighted across variants).
    pub fn rollups(&self) -> Vec<Rollup> {
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for d in &self.detail {
            let k = (d.model.as_str(), d.finetune_label.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(model, label)| {
                let rows: Vec<&DetailRow> = self
                    .detail
                    .iter()
                    .filter(|d| d.model == model && d.finetune_label == label)
                    .collect();
                let trained = rows.iter().filter(|d| d.is_trained);
                let unseen = rows.iter().filter(|d| !d.is_trained);
                Rollup {
                    model: model.to_string(),
                    finetune_label: label.to_string(),
                    trained_obj: mean(trained.clone().map(|d| d.obj)).unwrap_or(f64::NAN),
                    trained_gap: mean(trained.map(|d| d.gap_pct)).unwrap_or(f64::NAN),
                    unseen_obj: mean(unseen.clone().map(|d| d.obj)),
                    unseen_gap: mean(unseen.map(|d| d.gap_pct)),
                }
            })
            .collect()
    }

    /// Mean of the unseen gaps of every row of `model`.
    pub fn mean_unseen_gap(&self, model: &str) -> Option<f64> {
        mean(self.rollups().iter().filter(|r| r.model == model).filter_map(|r| r.unseen_gap))
    }
}

/// Evaluates every model on every set: greedy multi-start, best over the
/// augmentations, gaps against the stored reference costs.
pub fn evaluate_matrix(models: &[EvalModel<'_>], sets: &[EvalSet], starts: usize, augment: bool) -> Result<Metrics> {
    let mut detail = Vec::new();
    for model in models {
        for set in sets {
            if set.ref_costs.len() != set.instances.len() {
                return Err(Error::InvalidArgument(format!(
                    "{}: {} reference costs for {} instances",
                    set.variant,
                    set.ref_costs.len(),
                    set.instances.len()
                )));
            }
            if set.instances.is_empty() {
                return Err(Error::InvalidArgument(format!("{}: empty evaluation set", set.variant)));
            }
            let costs = set
                .instances
                .par_iter()
                .map(|inst| best_greedy_cost(model.params, inst, starts, augment))
                .collect::<Result<Vec<f64>>>()?;
            let count = costs.len() as f64;
            let obj = costs.iter().sum::<f64>() / count;
            let ref_obj = set.ref_costs.iter().sum::<f64>() / count;
            let mut inst_gap = 0.0;
            for (c, r) in costs.iter().zip(&set.ref_costs) {
                inst_gap += gap(*c, *r)?;
            }
            let gap_pct = gap(obj, ref_obj)?;
            for row in &model.rows {
                detail.push(DetailRow {
                    model: model.name.clone(),
                    finetune_label: row.finetune_label.clone(),
                    eval_variant: set.variant,
                    n: set.instances[0].n(),
                    obj,
                    ref_obj,
                    gap_pct,
                    mean_instance_gap_pct: inst_gap / count,
                    is_trained: row.trained.contains(&set.variant),
                });
            }
        }
    }
    Ok(Metrics { detail })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Writes the detail table to `detail` and the per-row rollup to `rollup`.
pub fn export_metrics(metrics: &Metrics, detail: &Path, rollup: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(detail)?;
    w.write_record([
        "model",
        "finetune_variant",
        "eval_variant",
        "n",
        "obj",
        "gap_pct",
        "is_trained",
        "ref_obj",
        "mean_instance_gap_pct",
    ])?;
    for d in &metrics.detail {
        w.write_record([
            d.model.clone(),
            d.finetune_label.clone(),
            d.eval_variant.name(),
            d.n.to_string(),
            d.obj.to_string(),
            d.gap_pct.to_string(),
            d.is_trained.to_string(),
            d.ref_obj.to_string(),
            d.mean_instance_gap_pct.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(rollup)?;
    w.write_record(["model", "finetune_variant", "trained_obj", "trained_gap", "unseen_obj", "unseen_gap"])?;
    for r in metrics.rollups() {
        w.write_record([
            r.model,
            r.finetune_label,
            r.trained_obj.to_string(),
            r.trained_gap.to_string(),
            opt(r.unseen_obj),
            opt(r.unseen_gap),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reference costs file: `index,cost` per instance.
pub fn save_ref_costs(path: &Path, costs: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["index", "cost"])?;
    for (i, c) in costs.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_ref_costs(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let cost = rec
            .get(1)
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("bad row {}", out.len()),
            })?;
        out.push(cost);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, ArchConfig};
    use crate::vrp::finetune_variants;

    fn arch() -> ArchConfig {
        ArchConfig {
            embed_dim: 8,
            heads: 2,
            layers: 1,
            clip: 10.0,
        }
    }

    fn sets(count: usize) -> Vec<EvalSet> {
        finetune_variants()
            .into_iter()
            .map(|v| {
                let instances = eval_instances(v, 6, count, 5, &GeneratorConfig::default());
                let ref_costs = reference_costs(&instances, 200).unwrap();
                EvalSet {
                    variant: v,
                    instances,
                    ref_costs,
                }
            })
            .collect()
    }

    #[test]
    fn augmentation_never_hurts() {
        let p = init_params(arch(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for set in sets(3) {
            for inst in &set.instances {
                let plain = best_greedy_cost(&p, inst, 6, false).unwrap();
                let aug = best_greedy_cost(&p, inst, 6, true).unwrap();
                assert!(aug <= plain);
            }
        }
    }

    #[test]
    fn matrix_shape_rollups_and_gap_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params: Vec<ParamVector> = (0..10).map(|_| init_params(arch(), &mut rng).unwrap()).collect();
        let models: Vec<EvalModel> = finetune_variants()
            .into_iter()
            .zip(&params)
            .map(|(v, p)| EvalModel {
                name: "cpl".into(),
                params: p,
                rows: vec![ModelRow::single(v)],
            })
            .collect();
        let s = sets(2);
        let m = evaluate_matrix(&models, &s, 4, false).unwrap();
        assert_eq!(m.detail.len(), 100);
        assert_eq!(m.detail.iter().filter(|d| d.is_trained).count(), 10);
        let roll = m.rollups();
        assert_eq!(roll.len(), 10);
        for (r, v) in roll.iter().zip(finetune_variants()) {
            let own = m
                .detail
                .iter()
                .find(|d| d.finetune_label == r.finetune_label && d.eval_variant == v)
                .unwrap();
            assert!(own.is_trained);
            assert_eq!(r.trained_obj, own.obj);
            let others: Vec<f64> = m
                .detail
                .iter()
                .filter(|d| d.finetune_label == r.finetune_label && d.eval_variant != v)
                .map(|d| d.gap_pct)
                .collect();
            assert_eq!(others.len(), 9);
            let expect = others.iter().sum::<f64>() / 9.0;
            assert!((r.unseen_gap.unwrap() - expect).abs() < 1e-12);
        }
        for d in &m.detail {
            assert!((100.0 * (d.obj - d.ref_obj) / d.ref_obj - d.gap_pct).abs() < 1e-9);
        }
        let again = evaluate_matrix(&models, &s, 4, false).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn export_round_trip_gap_column() {
        let p = init_params(arch(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let model = EvalModel {
            name: "mtf".into(),
            params: &p,
            rows: vec![ModelRow {
                finetune_label: "mix".into(),
                trained: finetune_variants(),
            }],
        };
        let s = sets(2);
        let m = evaluate_matrix(&[model], &s, 3, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (d, r) = (dir.path().join("m.csv"), dir.path().join("r.csv"));
        export_metrics(&m, &d, &r).unwrap();
        let mut rd = csv::Reader::from_path(&d).unwrap();
        let mut rows = 0;
        for rec in rd.records() {
            let rec = rec.unwrap();
            let obj: f64 = rec[4].parse().unwrap();
            let g: f64 = rec[5].parse().unwrap();
            let refo: f64 = rec[7].parse().unwrap();
            assert!((100.0 * (obj - refo) / refo - g).abs() < 1e-9);
            rows += 1;
        }
        assert_eq!(rows, 10);
        let roll = std::fs::read_to_string(&r).unwrap();
        assert!(roll.lines().nth(1).unwrap().ends_with(",-,-"));
    }

    #[test]
    fn ref_costs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ref.csv");
        let costs = vec![1.0 / 3.0, 2.5, 7.125];
        save_ref_costs(&p, &costs).unwrap();
        assert_eq!(load_ref_costs(&p).unwrap(), costs);
    }
}
