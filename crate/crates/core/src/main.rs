use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use fedroute::baseline::solve;
use fedroute::experiment::{self, ExperimentConfig, Mode};
use fedroute::policy::gradient_check;
use fedroute::train::mix_seed;
use fedroute::vrp::{evaluate, generate_instance_with, load_dataset, save_dataset, to_text, VariantSpec};
use fedroute::{Error, Result};

#[derive(Parser)]
#[command(name = "fedroute", version, about = "Pre-train and federated fine-tune routing policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of every seed listed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FinetuneMode {
    Cpl,
    Mtf,
    Fl,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-variant pre-training on the simple variants.
    Pretrain(Common),
    /// Fine-tune a pre-trained model on the complex variants.
    Finetune {
        #[arg(long, value_enum)]
        mode: FinetuneMode,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate every saved model on the frozen evaluation sets.
    Evaluate(Common),
    /// Solve a dataset file with the reference heuristic and write per-instance costs.
    Baseline {
        /// Instance dataset file.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients on every variant.
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Write the evaluation sets (and optionally an extra dataset) in binary and text form.
    GenData {
        /// Also write `count` instances of this variant.
        #[arg(long)]
        variant: Option<VariantSpec>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn seeds(cfg: &ExperimentConfig, common: &Common) -> Vec<u64> {
    common.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn write_baseline(data: &Path, out: &Path, budget: usize) -> Result<PathBuf> {
    let instances = load_dataset(data)?;
    let costs = instances
        .par_iter()
        .map(|inst| {
            let sol = solve(inst, budget)?;
            Ok((evaluate(inst, &sol)?, sol.routes.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    let stem = data.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
    let path = out.join(format!("baseline_{stem}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["index", "variant", "cost", "routes"])?;
    for (i, ((cost, routes), inst)) in costs.iter().zip(&instances).enumerate() {
        w.write_record([i.to_string(), inst.spec.name(), cost.to_string(), routes.to_string()])?;
    }
    w.flush()?;
    Ok(path)
}

fn run(cli: Cli) -> Result<bool> {
    experiment::init_thread_pool()?;
    match cli.command {
        Command::Pretrain(common) => {
            let mut cfg = load_config(&common)?;
            cfg.mode = Mode::Pretrain;
            for s in seeds(&cfg, &common) {
                report(&experiment::run(&cfg, s)?);
            }
        }
        Command::Finetune { mode, common } => {
            let mut cfg = load_config(&common)?;
            cfg.mode = match mode {
                FinetuneMode::Cpl => Mode::Cpl,
                FinetuneMode::Mtf => Mode::Mtf,
                FinetuneMode::Fl => Mode::Fl,
            };
            if cfg.pretrain_checkpoint.is_none() {
                let default = cfg.output_dir.join("pretrain").join("seed{seed}").join("model.ckpt");
                cfg.pretrain_checkpoint = Some(default.to_string_lossy().into_owned());
            }
            cfg.validate()?;
            for s in seeds(&cfg, &common) {
                report(&experiment::run(&cfg, s)?);
            }
        }
        Command::Evaluate(common) => {
            let cfg = load_config(&common)?;
            for s in seeds(&cfg, &common) {
                report(&experiment::evaluate_saved(&cfg, s)?);
            }
        }
        Command::Baseline { data, common } => {
            let cfg = load_config(&common)?;
            report(&[write_baseline(&data, &cfg.output_dir, cfg.eval.budget)?]);
        }
        Command::Gradcheck { n, eps, tol, common } => {
            let cfg = load_config(&common)?;
            let seed = common.seed.unwrap_or(cfg.seeds[0]);
            let mut ok = true;
            for v in VariantSpec::all() {
                let r = gradient_check(cfg.arch, v, n, eps, mix_seed(seed, &[v.bits() as u64]))?;
                let pass = r.max_rel_error <= tol;
                ok &= pass;
                println!(
                    "{:<9} params {}  max rel error {:.3e}  {}",
                    v.name(),
                    r.params,
                    r.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(ok);
        }
        Command::GenData { variant, count, common } => {
            let cfg = load_config(&common)?;
            let dir = experiment::data_dir(&cfg.output_dir);
            experiment::eval_sets(&cfg, Some(&dir))?;
            if let Some(v) = variant {
                for s in seeds(&cfg, &common) {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let insts: Vec<_> = (0..count)
                        .map(|_| generate_instance_with(v, cfg.n, &cfg.generator, &mut rng))
                        .collect();
                    let stem = dir.join(format!("{}_n{}_seed{s}", v.name(), cfg.n));
                    save_dataset(&stem.with_extension("bin"), &insts)?;
                    std::fs::write(stem.with_extension("txt"), to_text(&insts))?;
                }
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            report(&files);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config { .. } = e {
                return ExitCode::from(2);
            }
            ExitCode::FAILURE
        }
    }
}
