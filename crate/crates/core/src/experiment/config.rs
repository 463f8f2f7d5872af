//! Experiment configuration files: `key = value` lines grouped in dotted sections.
//!
//! ```text
//! mode = "fl"
//! n = 10
//! seeds = [1, 2, 3]
//! pretrain_checkpoint = "runs/pretrain/seed{seed}/model.ckpt"
//!
//! [train]
//! lr = 1e-4
//!
//! [federation]
//! rounds = 20
//! aggregation = "ties"
//! ```
//!
//! Every key is optional except where the mode requires it; unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fed::{Aggregation, FederationConfig};
use crate::merge::TrimScope;
use crate::policy::ArchConfig;
use crate::train::TrainConfig;
use crate::vrp::GeneratorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    /// Independent fine-tuning of one model per variant.
    Cpl,
    /// One model fine-tuned on the mixture of all fine-tuning variants.
    Mtf,
    /// Federated fine-tuning.
    Fl,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Cpl => "cpl",
            Mode::Mtf => "mtf",
            Mode::Fl => "fl",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "cpl" => Ok(Mode::Cpl),
            "mtf" => Ok(Mode::Mtf),
            "fl" => Ok(Mode::Fl),
            _ => Err(Error::config("mode", format!("unknown mode `{s}` (pretrain, cpl, mtf, fl)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub set_size: usize,
    /// Seed of the frozen evaluation datasets, independent of training seeds.
    pub seed: u64,
    /// Greedy starts per rollout; `None` uses every customer.
    pub num_starts: Option<usize>,
    pub augment: bool,
    /// Move budget of the reference solver.
    pub budget: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            set_size: 256,
            seed: 20_240_101,
            num_starts: None,
            augment: true,
            budget: crate::baseline::DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// May contain `{seed}`, replaced by the run's seed.
    pub pretrain_checkpoint: Option<String>,
    pub arch: ArchConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub pretrain_epochs: usize,
    pub federation: FederationConfig,
    pub federation_given: bool,
    pub save_round_checkpoints: bool,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pretrain,
            n: 10,
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("runs"),
            pretrain_checkpoint: None,
            arch: ArchConfig::default(),
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            pretrain_epochs: 50,
            federation: FederationConfig::default(),
            federation_given: false,
            save_round_checkpoints: true,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Option<String>,
    n: Option<usize>,
    seeds: Option<Vec<u64>>,
    output_dir: Option<PathBuf>,
    pretrain_checkpoint: Option<String>,
    arch: Option<RawArch>,
    data: Option<RawData>,
    train: Option<RawTrain>,
    federation: Option<RawFederation>,
    eval: Option<RawEval>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    embed_dim: Option<usize>,
    heads: Option<usize>,
    layers: Option<usize>,
    clip: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    linehaul_first: Option<bool>,
    backhaul_ratio: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    batch_size: Option<usize>,
    instances_per_epoch: Option<usize>,
    num_starts: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    track_greedy: Option<bool>,
    epochs: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFederation {
    selection_ratio: Option<f64>,
    local_epochs: Option<usize>,
    local_lr: Option<f64>,
    rounds: Option<usize>,
    aggregation: Option<String>,
    keep_percent: Option<f64>,
    scale: Option<f64>,
    trim_scope: Option<String>,
    data_cap: Option<usize>,
    save_round_checkpoints: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    set_size: Option<usize>,
    seed: Option<u64>,
    num_starts: Option<usize>,
    augment: Option<bool>,
    budget: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // serde reports unknown keys as "unknown field `x`, expected ..."
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("<file>")
                .to_string();
            let at = e.span().map(|s| format!(" (byte {})", s.start)).unwrap_or_default();
            Error::config(field, format!("{msg}{at}"))
        })?;
        let mut cfg = ExperimentConfig::default();
        if let Some(m) = raw.mode {
            cfg.mode = m.parse()?;
        }
        set(&mut cfg.n, raw.n);
        set(&mut cfg.seeds, raw.seeds);
        set(&mut cfg.output_dir, raw.output_dir);
        cfg.pretrain_checkpoint = raw.pretrain_checkpoint;
        if let Some(a) = raw.arch {
            set(&mut cfg.arch.embed_dim, a.embed_dim);
            set(&mut cfg.arch.heads, a.heads);
            set(&mut cfg.arch.layers, a.layers);
            set(&mut cfg.arch.clip, a.clip);
        }
        if let Some(d) = raw.data {
            set(&mut cfg.generator.linehaul_first, d.linehaul_first);
            set(&mut cfg.generator.backhaul_ratio, d.backhaul_ratio);
        }
        if let Some(t) = raw.train {
            set(&mut cfg.train.batch_size, t.batch_size);
            set(&mut cfg.train.instances_per_epoch, t.instances_per_epoch);
            set(&mut cfg.train.num_starts, t.num_starts);
            set(&mut cfg.train.lr, t.lr);
            set(&mut cfg.train.weight_decay, t.weight_decay);
            set(&mut cfg.train.track_greedy, t.track_greedy);
            set(&mut cfg.pretrain_epochs, t.epochs);
        }
        if let Some(f) = raw.federation {
            cfg.federation_given = true;
            let fed = &mut cfg.federation;
            set(&mut fed.selection_ratio, f.selection_ratio);
            set(&mut fed.local_epochs, f.local_epochs);
            set(&mut fed.local_lr, f.local_lr);
            set(&mut fed.rounds, f.rounds);
            fed.data_cap = f.data_cap;
            set(&mut cfg.save_round_checkpoints, f.save_round_checkpoints);
            let scope = match f.trim_scope.as_deref() {
                None | Some("global") => TrimScope::Global,
                Some("per_tensor") => TrimScope::PerTensor,
                Some(other) => {
                    return Err(Error::config(
                        "federation.trim_scope",
                        format!("unknown scope `{other}` (global, per_tensor)"),
                    ))
                }
            };
            fed.aggregation = match f.aggregation.as_deref() {
                None | Some("ties") => Aggregation::Ties {
                    keep_percent: f.keep_percent.unwrap_or(20.0),
                    scale: f.scale.unwrap_or(1.0),
                    scope,
                },
                Some("fedavg") => Aggregation::FedAvg,
                Some(other) => {
                    return Err(Error::config(
                        "federation.aggregation",
                        format!("unknown aggregation `{other}` (fedavg, ties)"),
                    ))
                }
            };
        }
        if let Some(e) = raw.eval {
            set(&mut cfg.eval.set_size, e.set_size);
            set(&mut cfg.eval.seed, e.seed);
            cfg.eval.num_starts = e.num_starts.or(cfg.eval.num_starts);
            set(&mut cfg.eval.augment, e.augment);
            set(&mut cfg.eval.budget, e.budget);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks field ranges and the keys each mode requires.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "needs at least one seed"));
        }
        self.arch
            .validate()
            .map_err(|e| Error::config("arch", e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| Error::config("train", e.to_string()))?;
        if self.train.num_starts < 2 {
            return Err(Error::config("train.num_starts", "needs at least 2 starts for the shared baseline"));
        }
        if !(0.0..=1.0).contains(&self.generator.backhaul_ratio) {
            return Err(Error::config("data.backhaul_ratio", "must be in [0, 1]"));
        }
        self.federation.validate()?;
        if self.eval.set_size == 0 {
            return Err(Error::config("eval.set_size", "must be positive"));
        }
        if self.eval.num_starts == Some(0) {
            return Err(Error::config("eval.num_starts", "must be positive"));
        }
        match self.mode {
            Mode::Pretrain => {}
            Mode::Cpl | Mode::Mtf | Mode::Fl => {
                if self.pretrain_checkpoint.is_none() {
                    return Err(Error::config(
                        "pretrain_checkpoint",
                        format!("required for mode `{}`", self.mode),
                    ));
                }
                if self.mode == Mode::Fl && !self.federation_given {
                    return Err(Error::config("federation", "section required for mode `fl`"));
                }
            }
        }
        Ok(())
    }

    /// Pre-trained checkpoint path for `seed`.
    pub fn pretrain_checkpoint_for(&self, seed: u64) -> Option<PathBuf> {
        self.pretrain_checkpoint
            .as_ref()
            .map(|p| PathBuf::from(p.replace("{seed}", &seed.to_string())))
    }

    /// Greedy starts used at evaluation.
    pub fn eval_starts(&self) -> usize {
        self.eval.num_starts.unwrap_or(self.n).min(self.n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.mode, Mode::Pretrain);
        assert_eq!(c.n, 10);
        assert_eq!(c.eval.set_size, 256);
        assert_eq!(c.train.instances_per_epoch, 2048);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.num_starts, 8);
        assert_eq!(c.seeds.len(), 3);
    }

    #[test]
    fn fl_default_federation_accepted() {
        let c = ExperimentConfig::parse(
            "mode = \"fl\"\npretrain_checkpoint = \"p{seed}.ckpt\"\n[federation]\nrounds = 20\nlocal_epochs = 5\nselection_ratio = 1.0\naggregation = \"ties\"\nkeep_percent = 20\nscale = 1\n",
        )
        .unwrap();
        assert_eq!(c.mode, Mode::Fl);
        assert_eq!(c.federation.rounds * c.federation.local_epochs, 100);
        assert_eq!(c.federation.aggregation, Aggregation::ties_default());
        assert_eq!(c.pretrain_checkpoint_for(7).unwrap(), PathBuf::from("p7.ckpt"));
    }

    #[test]
    fn dotted_keys_equal_sections() {
        let a = ExperimentConfig::parse("train.lr = 0.001\nfederation.data_cap = 500\n").unwrap();
        let b = ExperimentConfig::parse("[train]\nlr = 0.001\n[federation]\ndata_cap = 500\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.federation.data_cap, Some(500));
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::parse(text).unwrap_err() {
            Error::Config { field, .. } => field,
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn diagnostics_name_the_field() {
        assert_eq!(field_of("mode = \"cpl\"\n"), "pretrain_checkpoint");
        assert_eq!(field_of("mode = \"fl\"\npretrain_checkpoint = \"x\"\n"), "federation");
        assert_eq!(field_of("mode = \"nope\"\n"), "mode");
        assert_eq!(field_of("[train]\nlrate = 1\n"), "lrate");
        assert_eq!(field_of("[federation]\naggregation = \"mean\"\n"), "federation.aggregation");
        assert_eq!(field_of("[federation]\nselection_ratio = 0\n"), "federation.selection_ratio");
        assert_eq!(field_of("[arch]\nembed_dim = 30\nheads = 4\n"), "arch");
        assert_eq!(field_of("n = 0\n"), "n");
    }
}
