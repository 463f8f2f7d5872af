//! Server/client federation protocol: client selection, broadcast, parallel local
//! fine-tuning and aggregation over a number of communication rounds.
//!
//! Randomness is derived per `(round, client)` from one experiment seed, so clients
//! can run on any number of threads with identical results. Only parameter vectors
//! cross the client/server boundary; each client's optimizer moments and data
//! source stay local to it.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::merge::{fed_avg, task_vector, ties_merge, TrimScope};
use crate::policy::ParamVector;
use crate::train::{mix_seed, train_epoch, OptState, TrainConfig, VariantSampler};

/// Stream tag separating client-selection randomness from client training streams.
const SELECTION_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation {
    /// Weighted parameter averaging with client weights `p_i`.
    FedAvg,
    /// Unweighted ties-merging of the selected clients' task vectors.
    Ties {
        keep_percent: f64,
        scale: f64,
        scope: TrimScope,
    },
}

impl Aggregation {
    pub fn ties_default() -> Self {
        Aggregation::Ties {
            keep_percent: 20.0,
            scale: 1.0,
            scope: TrimScope::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub selection_ratio: f64,
    pub local_epochs: usize,
    pub local_lr: f64,
    pub rounds: usize,
    pub aggregation: Aggregation,
    /// Per-client fixed dataset size; `None` draws fresh instances.
    pub data_cap: Option<usize>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            selection_ratio: 1.0,
            local_epochs: 5,
            local_lr: 1e-4,
            rounds: 20,
            aggregation: Aggregation::ties_default(),
            data_cap: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.selection_ratio > 0.0 && self.selection_ratio <= 1.0) {
            return Err(Error::config("federation.selection_ratio", "must be in (0, 1]"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("federation.local_epochs", "must be at least 1"));
        }
        if !(self.local_lr >= 0.0) {
            return Err(Error::config("federation.local_lr", "must be non-negative"));
        }
        if let Aggregation::Ties { keep_percent, .. } = self.aggregation {
            if !(keep_percent > 0.0 && keep_percent <= 100.0) {
                return Err(Error::config("federation.keep_percent", "must be in (0, 100]"));
            }
        }
        if self.data_cap == Some(0) {
            return Err(Error::config("federation.data_cap", "must be positive"));
        }
        Ok(())
    }

    /// Clients selected per round: `max(⌈C·N⌉, 1)`.
    pub fn clients_per_round(&self, n: usize) -> usize {
        ((self.selection_ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    /// 1-based client id.
    pub id: usize,
    /// Label used in logs and checkpoint names (a variant name, or `mix` for MTF).
    pub label: String,
    pub sampler: VariantSampler,
    /// Aggregation weight `p_i`.
    pub weight: f64,
    pub params: ParamVector,
    opt: Option<OptState>,
}

impl Client {
    pub fn new(id: usize, label: impl Into<String>, sampler: VariantSampler, params: ParamVector) -> Self {
        Self {
            id,
            label: label.into(),
            sampler,
            weight: 1.0,
            params,
            opt: None,
        }
    }
}

/// Sets `p_i = |D_i| / Σ|D_j|` when every client has a fixed dataset, equal weights otherwise.
pub fn assign_weights(clients: &mut [Client]) {
    let sizes: Option<Vec<usize>> = clients
        .iter()
        .map(|c| c.sampler.sources.iter().map(|s| s.size()).sum::<Option<usize>>())
        .collect();
    let n = clients.len() as f64;
    match sizes {
        Some(sizes) if sizes.iter().sum::<usize>() > 0 => {
            let total = sizes.iter().sum::<usize>() as f64;
            for (c, s) in clients.iter_mut().zip(sizes) {
                c.weight = s as f64 / total;
            }
        }
        _ => {
            for c in clients.iter_mut() {
                c.weight = 1.0 / n;
            }
        }
    }
}

/// Uniformly selects `max(⌈C·N⌉, 1)` distinct 1-based positions out of `n`, ascending.
pub fn select_clients<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    let cfg = FederationConfig {
        selection_ratio: ratio,
        ..FederationConfig::default()
    };
    let k = cfg.clients_per_round(n);
    let mut ids: Vec<usize> = sample(rng, n, k).into_iter().map(|i| i + 1).collect();
    ids.sort_unstable();
    ids
}

/// Copies `global`, runs `epochs` local epochs on the client's data and returns the result.
pub fn local_update(
    global: &ParamVector,
    client: &mut Client,
    epochs: usize,
    lr: f64,
    train: &TrainConfig,
    seed: u64,
) -> Result<ParamVector> {
    Ok(local_epochs(global, client, epochs, lr, train, seed)?.0)
}

/// Local training; also returns the mean greedy cost of the last epoch.
fn local_epochs(
    global: &ParamVector,
    client: &mut Client,
    epochs: usize,
    lr: f64,
    train: &TrainConfig,
    seed: u64,
) -> Result<(ParamVector, f64)> {
    let mut params = global.clone();
    let opt = client
        .opt
        .get_or_insert_with(|| OptState::for_params(global, lr, train.weight_decay));
    opt.lr = lr;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = f64::NAN;
    for _ in 0..epochs {
        last = train_epoch(&mut params, opt, &client.sampler, train, &mut rng)?.mean_greedy_cost;
    }
    Ok((params, last))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub client_id: usize,
    pub label: String,
    /// Mean greedy cost over the client's last local epoch (NaN when not tracked).
    pub trained_greedy_cost: f64,
    pub task_norm: f64,
    pub wall_time_s: f64,
}

/// One communication round. Selected clients replace their local model with the
/// fine-tuned result; unselected clients keep theirs.
pub fn run_round(
    global: &ParamVector,
    clients: &mut [Client],
    cfg: &FederationConfig,
    train: &TrainConfig,
    round: usize,
    seed: u64,
) -> Result<(ParamVector, Vec<RoundLog>)> {
    let mut sel_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[round as u64, SELECTION_STREAM]));
    let selected: Vec<usize> = select_clients(clients.len(), cfg.selection_ratio, &mut sel_rng)
        .into_iter()
        .map(|i| clients[i - 1].id)
        .collect();

    let outcomes = clients
        .par_iter_mut()
        .filter(|c| selected.contains(&c.id))
        .map(|client| -> Result<RoundLog> {
            let t0 = Instant::now();
            let client_seed = mix_seed(seed, &[round as u64, client.id as u64]);
            let (params, last) =
                local_epochs(global, client, cfg.local_epochs, cfg.local_lr, train, client_seed)?;
            let task_norm = task_vector(&params, global)?
                .data
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            client.params = params;
            Ok(RoundLog {
                round,
                client_id: client.id,
                label: client.label.clone(),
                trained_greedy_cost: last,
                task_norm,
                wall_time_s: t0.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let chosen: Vec<&Client> = clients.iter().filter(|c| selected.contains(&c.id)).collect();
    let models: Vec<ParamVector> = chosen.iter().map(|c| c.params.clone()).collect();
    let next = match cfg.aggregation {
        Aggregation::FedAvg => {
            let weights: Vec<f64> = chosen.iter().map(|c| c.weight).collect();
            fed_avg(&models, &weights)?
        }
        Aggregation::Ties {
            keep_percent,
            scale,
            scope,
        } => ties_merge(global, &models, keep_percent, scale, scope)?,
    };
    Ok((next, outcomes))
}

#[derive(Debug, Clone)]
pub struct FederationResult {
    pub global: ParamVector,
    pub log: Vec<RoundLog>,
}

/// Runs `cfg.rounds` rounds from `init`, resetting every client to `init` first.
/// `on_round(t, global, clients)` is called after each round's aggregation.
pub fn federate(
    init: &ParamVector,
    clients: &mut [Client],
    cfg: &FederationConfig,
    train: &TrainConfig,
    seed: u64,
    mut on_round: impl FnMut(usize, &ParamVector, &[Client]) -> Result<()>,
) -> Result<FederationResult> {
    cfg.validate()?;
    train.validate()?;
    if clients.is_empty() {
        return Err(Error::InvalidArgument("federation needs at least one client".into()));
    }
    for c in clients.iter_mut() {
        init.check_compatible(&c.params)?;
        c.params = init.clone();
        c.opt = None;
    }
    let mut global = init.clone();
    let mut log = Vec::new();
    for t in 0..cfg.rounds {
        let (next, rows) = run_round(&global, clients, cfg, train, t, seed)?;
        global = next;
        log.extend(rows);
        on_round(t, &global, clients)?;
    }
    Ok(FederationResult { global, log })
}

pub fn write_round_log(path: &std::path::Path, rows: &[RoundLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "round",
        "client_id",
        "variant",
        "trained_greedy_cost",
        "task_norm",
        "wall_time_s",
    ])?;
    for r in rows {
        w.write_record([
            r.round.to_string(),
            r.client_id.to_string(),
            r.label.clone(),
            format!("{:.6}", r.trained_greedy_cost),
            format!("{:.6e}", r.task_norm),
            format!("{:.3}", r.wall_time_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}
