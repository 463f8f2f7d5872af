//! Experiment orchestration: pre-training, the three fine-tuning regimes, frozen
//! evaluation datasets, trained/unseen evaluation and the on-disk artifact layout.
//!
//! ```text
//! <out>/data/<VARIANT>_n<n>_eval<seed>.{bin,txt}, ref_<VARIANT>_n<n>_eval<seed>.csv
//! <out>/pretrain/seed<S>/model.ckpt, train_log.csv, metrics.csv, rollup.csv
//! <out>/<mode>/seed<S>/<mode>_client<k>.ckpt, round_log.csv, metrics.csv, rollup.csv
//! <out>/<mode>/seed<S>/rounds/<mode>_round<t>_client<k>.ckpt
//! ```

pub mod config;
pub mod metrics;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{EvalConfig, ExperimentConfig, Mode};
pub use metrics::{
    best_greedy_cost, eval_instances, evaluate_matrix, export_metrics, load_ref_costs, reference_costs,
    save_ref_costs, DetailRow, EvalModel, EvalSet, Metrics, ModelRow, Rollup,
};

use crate::error::{Error, Result};
use crate::fed::{assign_weights, federate, write_round_log, Aggregation, Client, FederationConfig, RoundLog};
use crate::policy::{init_params, load_checkpoint_for, save_checkpoint, Meta, ParamVector};
use crate::train::{
    append_train_log, mix_seed, train_loop, EpochLog, InstanceSource, OptState, TrainConfig, VariantSampler,
};
use crate::vrp::{finetune_variants, load_dataset, pretrain_variants, save_dataset, to_text, VariantSpec};

const INIT_STREAM: u64 = 1;
const PRETRAIN_STREAM: u64 = 2;
const DATA_STREAM: u64 = 3;

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "FEDROUTE_THREADS";

/// Sizes the global worker pool from `FEDROUTE_THREADS` (all cores when unset).
pub fn init_thread_pool() -> Result<usize> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| Error::config(THREADS_ENV, format!("expected a positive integer, got `{s}`")))?,
        Err(_) => 0,
    };
    // A second initialisation (e.g. in tests) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(rayon::current_num_threads())
}

/// Random initialisation followed by multi-variant training on the pre-training set.
pub fn pretrain_model(
    cfg: &ExperimentConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog, &ParamVector) -> Result<()>,
) -> Result<(ParamVector, Vec<EpochLog>)> {
    let init = init_params(cfg.arch, &mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[INIT_STREAM])))?;
    let sampler = VariantSampler::generators_with(&pretrain_variants(), cfg.n, &cfg.generator)?;
    let mut params = init;
    let mut opt = OptState::for_params(&params, cfg.train.lr, cfg.train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[PRETRAIN_STREAM]));
    let log = train_loop(
        &mut params,
        &mut opt,
        &sampler,
        &cfg.train,
        cfg.pretrain_epochs,
        &mut rng,
        on_epoch,
    )?;
    Ok((params, log))
}

/// Fresh-instance generator, or a fixed dataset of `data_cap` instances shared by
/// every regime for the same `(seed, variant)`.
fn client_source(cfg: &ExperimentConfig, variant: VariantSpec, seed: u64) -> InstanceSource {
    match cfg.federation.data_cap {
        None => InstanceSource::generator_with(variant, cfg.n, cfg.generator.clone()),
        Some(cap) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[DATA_STREAM, variant.bits() as u64]));
            InstanceSource::fixed_with(variant, cfg.n, cap, &cfg.generator, &mut rng)
        }
    }
}

/// A fine-tuned model and the variants it was trained on.
#[derive(Debug, Clone)]
pub struct FinetunedModel {
    pub client_id: usize,
    pub label: String,
    pub trained: Vec<VariantSpec>,
    pub params: ParamVector,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutput {
    pub mode: Mode,
    pub models: Vec<FinetunedModel>,
    pub global: Option<ParamVector>,
    pub log: Vec<RoundLog>,
}

/// Local training settings shared by every regime.
fn local_train(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        lr: cfg.federation.local_lr,
        ..cfg.train.clone()
    }
}

/// Runs one fine-tuning regime from `init`.
///
/// * `cpl`: one single-client federation per variant (no aggregation effect),
///   `T` rounds of `E` epochs each.
/// * `mtf`: one client sampling all variants, `T·N` rounds.
/// * `fl`: all clients under the configured aggregation.
///
/// Client `k` always trains on variant `k` with the round streams of client `k`,
/// so regimes see identical data for the same seed. `on_round(t, clients)` fires
/// after every round.
pub fn finetune(
    cfg: &ExperimentConfig,
    mode: Mode,
    init: &ParamVector,
    seed: u64,
    mut on_round: impl FnMut(usize, &[Client]) -> Result<()>,
) -> Result<FinetuneOutput> {
    let variants = finetune_variants();
    let train = local_train(cfg);
    let make_client = |k: usize, v: VariantSpec| {
        Client::new(k, v.name(), VariantSampler::single(client_source(cfg, v, seed)), init.clone())
    };
    let single = FederationConfig {
        selection_ratio: 1.0,
        aggregation: Aggregation::FedAvg,
        ..cfg.federation.clone()
    };
    match mode {
        Mode::Pretrain => Err(Error::config("mode", "pretrain is not a fine-tuning regime")),
        Mode::Cpl => {
            let mut models = Vec::new();
            let mut log = Vec::new();
            for (i, &v) in variants.iter().enumerate() {
                let mut clients = vec![make_client(i + 1, v)];
                let res = federate(init, &mut clients, &single, &train, seed, |t, _, c| on_round(t, c))?;
                log.extend(res.log);
                let c = clients.pop().expect("one client");
                models.push(FinetunedModel {
                    client_id: c.id,
                    label: c.label,
                    trained: vec![v],
                    params: c.params,
                });
            }
            Ok(FinetuneOutput {
                mode,
                models,
                global: None,
                log,
            })
        }
        Mode::Mtf => {
            let sources = variants.iter().map(|&v| client_source(cfg, v, seed)).collect();
            let mut clients = vec![Client::new(1, "mix", VariantSampler::new(sources)?, init.clone())];
            let fed = FederationConfig {
                rounds: single.rounds * variants.len(),
                ..single
            };
            let res = federate(init, &mut clients, &fed, &train, seed, |t, _, c| on_round(t, c))?;
            let c = clients.pop().expect("one client");
            Ok(FinetuneOutput {
                mode,
                models: vec![FinetunedModel {
                    client_id: 1,
                    label: c.label,
                    trained: variants,
                    params: c.params,
                }],
                global: None,
                log: res.log,
            })
        }
        Mode::Fl => {
            let mut clients: Vec<Client> = variants
                .iter()
                .enumerate()
                .map(|(i, &v)| make_client(i + 1, v))
                .collect();
            assign_weights(&mut clients);
            let res = federate(init, &mut clients, &cfg.federation, &train, seed, |t, _, c| on_round(t, c))?;
            let models = clients
                .into_iter()
                .zip(&variants)
                .map(|(c, &v)| FinetunedModel {
                    client_id: c.id,
                    label: c.label,
                    trained: vec![v],
                    params: c.params,
                })
                .collect();
            Ok(FinetuneOutput {
                mode,
                models,
                global: Some(res.global),
                log: res.log,
            })
        }
    }
}

/// Evaluation sets for every fine-tuning variant, generated once per
/// `(variant, n, eval seed)`. With `cache`, sets and reference costs are read
/// from and written to that directory.
pub fn eval_sets(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<Vec<EvalSet>> {
    finetune_variants()
        .into_iter()
        .map(|v| eval_set(cfg, v, cache))
        .collect()
}

fn eval_set_stem(cfg: &ExperimentConfig, v: VariantSpec) -> String {
    format!("{}_n{}_eval{}", v.name(), cfg.n, cfg.eval.seed)
}

fn eval_set(cfg: &ExperimentConfig, v: VariantSpec, cache: Option<&Path>) -> Result<EvalSet> {
    let stem = eval_set_stem(cfg, v);
    if let Some(dir) = cache {
        let data = dir.join(format!("{stem}.bin"));
        let refs = dir.join(format!("ref_{stem}.csv"));
        if data.exists() && refs.exists() {
            let instances = load_dataset(&data)?;
            let ref_costs = load_ref_costs(&refs)?;
            if instances.len() == cfg.eval.set_size && ref_costs.len() == instances.len() {
                return Ok(EvalSet {
                    variant: v,
                    instances,
                    ref_costs,
                });
            }
        }
    }
    let instances = eval_instances(v, cfg.n, cfg.eval.set_size, cfg.eval.seed, &cfg.generator);
    let ref_costs = reference_costs(&instances, cfg.eval.budget)?;
    if let Some(dir) = cache {
        fs::create_dir_all(dir)?;
        save_dataset(&dir.join(format!("{stem}.bin")), &instances)?;
        fs::write(dir.join(format!("{stem}.txt")), to_text(&instances))?;
        save_ref_costs(&dir.join(format!("ref_{stem}.csv")), &ref_costs)?;
    }
    Ok(EvalSet {
        variant: v,
        instances,
        ref_costs,
    })
}

/// The pre-trained model evaluated with one row per fine-tuning variant.
pub fn pretrain_eval_model(params: &ParamVector) -> EvalModel<'_> {
    EvalModel {
        name: "pretrain".into(),
        params,
        rows: finetune_variants().into_iter().map(ModelRow::single).collect(),
    }
}

/// Fine-tuned models as evaluation entries named after `mode`.
pub fn finetuned_eval_models(mode: Mode, models: &[FinetunedModel]) -> Vec<EvalModel<'_>> {
    models
        .iter()
        .map(|m| EvalModel {
            name: mode.as_str().into(),
            params: &m.params,
            rows: vec![ModelRow {
                finetune_label: m.label.clone(),
                trained: m.trained.clone(),
            }],
        })
        .collect()
}

pub fn run_dir(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(mode.as_str()).join(format!("seed{seed}"))
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn meta(cfg: &ExperimentConfig, mode: Mode, seed: u64, client: Option<&FinetunedModel>) -> Meta {
    let mut m = Meta::new();
    m.insert("mode".into(), mode.as_str().into());
    m.insert("seed".into(), seed.to_string());
    m.insert("n".into(), cfg.n.to_string());
    if let Some(c) = client {
        m.insert("client_id".into(), c.client_id.to_string());
        m.insert("label".into(), c.label.clone());
        let trained: Vec<String> = c.trained.iter().map(|v| v.name()).collect();
        m.insert("trained".into(), trained.join(","));
    }
    m
}

/// Loads the configured pre-trained checkpoint for `seed`.
pub fn load_pretrained(cfg: &ExperimentConfig, seed: u64) -> Result<ParamVector> {
    let path = cfg
        .pretrain_checkpoint_for(seed)
        .ok_or_else(|| Error::config("pretrain_checkpoint", "not set"))?;
    if !path.exists() {
        return Err(Error::config(
            "pretrain_checkpoint",
            format!("{} does not exist", path.display()),
        ));
    }
    Ok(load_checkpoint_for(&path, &cfg.arch)?.0)
}

fn write_metrics(metrics: &Metrics, dir: &Path) -> Result<Vec<PathBuf>> {
    let detail = dir.join("metrics.csv");
    let rollup = dir.join("rollup.csv");
    export_metrics(metrics, &detail, &rollup)?;
    Ok(vec![detail, rollup])
}

/// Runs `cfg.mode` for one seed under `cfg.output_dir`, writing checkpoints, logs
/// and metrics. Returns the paths written.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let dir = run_dir(out, cfg.mode, seed);
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let sets = eval_sets(cfg, Some(&data_dir(out)))?;
    match cfg.mode {
        Mode::Pretrain => {
            let log_path = dir.join("train_log.csv");
            if log_path.exists() {
                fs::remove_file(&log_path)?;
            }
            let (params, _) = pretrain_model(cfg, seed, |row, _| {
                crate::train::write_log_line(std::io::stderr(), row)?;
                append_train_log(&log_path, std::slice::from_ref(row))
            })?;
            let ckpt = dir.join("model.ckpt");
            save_checkpoint(&params, &meta(cfg, Mode::Pretrain, seed, None), &ckpt)?;
            let metrics = evaluate_matrix(&[pretrain_eval_model(&params)], &sets, cfg.eval_starts(), cfg.eval.augment)?;
            written.extend([ckpt, log_path]);
            written.extend(write_metrics(&metrics, &dir)?);
        }
        mode => {
            let init = load_pretrained(cfg, seed)?;
            let rounds_dir = dir.join("rounds");
            if cfg.save_round_checkpoints {
                fs::create_dir_all(&rounds_dir)?;
            }
            let out_ft = finetune(cfg, mode, &init, seed, |t, clients| {
                if cfg.save_round_checkpoints {
                    for c in clients {
                        let path = rounds_dir.join(format!("{}_round{}_client{}.ckpt", mode, t, c.id));
                        save_checkpoint(&c.params, &meta(cfg, mode, seed, None), &path)?;
                    }
                }
                Ok(())
            })?;
            for m in &out_ft.models {
                let path = dir.join(format!("{}_client{}.ckpt", mode, m.client_id));
                save_checkpoint(&m.params, &meta(cfg, mode, seed, Some(m)), &path)?;
                written.push(path);
            }
            if let Some(g) = &out_ft.global {
                let path = dir.join(format!("{mode}_global.ckpt"));
                save_checkpoint(g, &meta(cfg, mode, seed, None), &path)?;
                written.push(path);
            }
            let log_path = dir.join("round_log.csv");
            write_round_log(&log_path, &out_ft.log)?;
            written.push(log_path);
            let mut models = vec![pretrain_eval_model(&init)];
            models.extend(finetuned_eval_models(mode, &out_ft.models));
            let metrics = evaluate_matrix(&models, &sets, cfg.eval_starts(), cfg.eval.augment)?;
            written.extend(write_metrics(&metrics, &dir)?);
        }
    }
    Ok(written)
}

/// Evaluates the pre-trained model and every fine-tuned checkpoint found under
/// `cfg.output_dir` for `seed`; writes `<out>/metrics/seed<S>/`.
pub fn evaluate_saved(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<PathBuf>> {
    let out = &cfg.output_dir;
    let sets = eval_sets(cfg, Some(&data_dir(out)))?;
    let pre_path = cfg
        .pretrain_checkpoint_for(seed)
        .unwrap_or_else(|| run_dir(out, Mode::Pretrain, seed).join("model.ckpt"));
    let pre = load_checkpoint_for(&pre_path, &cfg.arch)?.0;
    let mut finetuned: Vec<(Mode, Vec<FinetunedModel>)> = Vec::new();
    for mode in [Mode::Cpl, Mode::Mtf, Mode::Fl] {
        let dir = run_dir(out, mode, seed);
        let mut models = Vec::new();
        for k in 1.. {
            let path = dir.join(format!("{mode}_client{k}.ckpt"));
            if !path.exists() {
                break;
            }
            let (params, m) = load_checkpoint_for(&path, &cfg.arch)?;
            let corrupt = |reason: &str| Error::Corrupt {
                path: path.clone(),
                reason: reason.into(),
            };
            let trained = m
                .get("trained")
                .ok_or_else(|| corrupt("missing `trained` metadata"))?
                .split(',')
                .map(|s| s.parse::<VariantSpec>().map_err(|_| corrupt("bad variant in metadata")))
                .collect::<Result<Vec<_>>>()?;
            models.push(FinetunedModel {
                client_id: k,
                label: m.get("label").cloned().unwrap_or_default(),
                trained,
                params,
            });
        }
        if !models.is_empty() {
            finetuned.push((mode, models));
        }
    }
    let mut entries = vec![pretrain_eval_model(&pre)];
    for (mode, models) in &finetuned {
        entries.extend(finetuned_eval_models(*mode, models));
    }
    let metrics = evaluate_matrix(&entries, &sets, cfg.eval_starts(), cfg.eval.augment)?;
    let dir = out.join("metrics").join(format!("seed{seed}"));
    fs::create_dir_all(&dir)?;
    write_metrics(&metrics, &dir)
}
