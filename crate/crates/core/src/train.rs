//! REINFORCE with a shared multi-start baseline, the adaptive-moment optimizer and
//! the epoch loops used for pre-training and local fine-tuning.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policy::{grad_weighted_logprob, rollout, DecodeMode, ParamVector};
use crate::vrp::{generate_instance_with, GeneratorConfig, Instance, VariantSpec};

/// Per-trajectory REINFORCE coefficients `(Lⱼ − mean L) / S` for `S` starts of one instance.
pub fn pomo_weights(costs: &[f64]) -> Result<Vec<f64>> {
    if costs.len() < 2 {
        return Err(Error::InvalidArgument(
            "the shared baseline needs at least two starts".into(),
        ));
    }
    let s = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / s;
    Ok(costs.iter().map(|c| (c - mean) / s).collect())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl OptState {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            weight_decay,
        }
    }

    pub fn for_params(params: &ParamVector, lr: f64, weight_decay: f64) -> Self {
        Self::new(params.len(), lr, weight_decay)
    }

    /// One bias-corrected update of `params` against `grad`.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        params.check_compatible(grad)?;
        if params.len() != self.m.len() {
            return Err(Error::LayoutMismatch(format!(
                "optimizer state has {} entries, parameters {}",
                self.m.len(),
                params.len()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite gradient passed to optimizer".into()));
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for i in 0..params.data.len() {
            let g = grad.data[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            let p = &mut params.data[i];
            *p = *p * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if !params.is_finite() {
            return Err(Error::Numeric("optimizer produced non-finite parameters".into()));
        }
        Ok(())
    }
}

/// Functional form of [`OptState::step`].
pub fn opt_step(
    state: &OptState,
    params: &ParamVector,
    grad: &ParamVector,
) -> Result<(ParamVector, OptState)> {
    let mut s = state.clone();
    let mut p = params.clone();
    s.step(&mut p, grad)?;
    Ok((p, s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub instances_per_epoch: usize,
    pub num_starts: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Also run greedy rollouts on the training instances for the epoch statistics.
    pub track_greedy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            instances_per_epoch: 2048,
            num_starts: 8,
            lr: 1e-4,
            weight_decay: 1e-6,
            track_greedy: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.instances_per_epoch < self.batch_size {
            return Err(Error::config(
                "train.batch_size",
                "must be positive and at most instances_per_epoch",
            ));
        }
        if self.num_starts < 2 {
            return Err(Error::config("train.num_starts", "must be at least 2"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.lr", "lr and weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.instances_per_epoch / self.batch_size
    }
}

/// Where a client or the pre-training loop gets its instances from.
#[derive(Debug, Clone)]
pub enum InstanceSource {
    /// Fresh instances on every draw.
    Generator {
        spec: VariantSpec,
        n: usize,
        config: GeneratorConfig,
        draws: Arc<AtomicUsize>,
    },
    /// A fixed dataset sampled uniformly with replacement.
    Fixed {
        spec: VariantSpec,
        instances: Arc<Vec<Instance>>,
        draws: Arc<AtomicUsize>,
    },
}

impl InstanceSource {
    pub fn generator(spec: VariantSpec, n: usize) -> Self {
        Self::generator_with(spec, n, GeneratorConfig::default())
    }

    pub fn generator_with(spec: VariantSpec, n: usize, config: GeneratorConfig) -> Self {
        InstanceSource::Generator {
            spec,
            n,
            config,
            draws: Arc::default(),
        }
    }

    /// Pre-generates a fixed dataset of `count` instances.
    pub fn fixed<R: Rng + ?Sized>(spec: VariantSpec, n: usize, count: usize, rng: &mut R) -> Self {
        Self::fixed_with(spec, n, count, &GeneratorConfig::default(), rng)
    }

    pub fn fixed_with<R: Rng + ?Sized>(
        spec: VariantSpec,
        n: usize,
        count: usize,
        config: &GeneratorConfig,
        rng: &mut R,
    ) -> Self {
        let instances = (0..count)
            .map(|_| generate_instance_with(spec, n, config, rng))
            .collect();
        InstanceSource::Fixed {
            spec,
            instances: Arc::new(instances),
            draws: Arc::default(),
        }
    }

    pub fn spec(&self) -> VariantSpec {
        match self {
            InstanceSource::Generator { spec, .. } | InstanceSource::Fixed { spec, .. } => *spec,
        }
    }

    /// Dataset size, or `None` for an unbounded generator.
    pub fn size(&self) -> Option<usize> {
        match self {
            InstanceSource::Generator { .. } => None,
            InstanceSource::Fixed { instances, .. } => Some(instances.len()),
        }
    }

    /// Number of instances handed out so far.
    pub fn draws(&self) -> usize {
        match self {
            InstanceSource::Generator { draws, .. } | InstanceSource::Fixed { draws, .. } => {
                draws.load(Ordering::Relaxed)
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Instance {
        match self {
            InstanceSource::Generator {
                spec,
                n,
                config,
                draws,
            } => {
                draws.fetch_add(1, Ordering::Relaxed);
                generate_instance_with(*spec, *n, config, rng)
            }
            InstanceSource::Fixed {
                instances, draws, ..
            } => {
                draws.fetch_add(1, Ordering::Relaxed);
                instances[rng.gen_range(0..instances.len())].clone()
            }
        }
    }
}

/// Picks one source per batch, uniformly.
#[derive(Debug, Clone)]
pub struct VariantSampler {
    pub sources: Vec<InstanceSource>,
}

impl VariantSampler {
    pub fn new(sources: Vec<InstanceSource>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidArgument("sampler needs at least one source".into()));
        }
        Ok(Self { sources })
    }

    pub fn single(source: InstanceSource) -> Self {
        Self {
            sources: vec![source],
        }
    }

    pub fn generators(variants: &[VariantSpec], n: usize) -> Result<Self> {
        Self::generators_with(variants, n, &GeneratorConfig::default())
    }

    pub fn generators_with(variants: &[VariantSpec], n: usize, config: &GeneratorConfig) -> Result<Self> {
        Self::new(
            variants
                .iter()
                .map(|&v| InstanceSource::generator_with(v, n, config.clone()))
                .collect(),
        )
    }

    /// Index of the source for the next batch; a single source consumes no randomness.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.sources.len() == 1 {
            0
        } else {
            rng.gen_range(0..self.sources.len())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub mean_sample_cost: f64,
    /// Mean over instances of the best greedy start; NaN when greedy tracking is off.
    pub mean_greedy_cost: f64,
    /// Mean REINFORCE surrogate `Σⱼ wⱼ log pⱼ` per instance.
    pub mean_loss: f64,
    pub steps: usize,
    /// Batches drawn from each sampler source.
    pub batches_per_source: Vec<usize>,
}

struct InstanceResult {
    grad: ParamVector,
    sample_cost: f64,
    greedy_cost: f64,
    loss: f64,
}

fn instance_update(
    params: &ParamVector,
    source: &InstanceSource,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<InstanceResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instance = source.draw(&mut rng);
    let starts = cfg.num_starts.min(instance.n());
    let trajs = rollout(params, &instance, starts, DecodeMode::Sample, &mut rng)?;
    let costs: Vec<f64> = trajs.iter().map(|t| t.cost).collect();
    let weights = pomo_weights(&costs)?;
    let grad = grad_weighted_logprob(params, &instance, &trajs, &weights)?;
    let loss = trajs
        .iter()
        .zip(&weights)
        .map(|(t, w)| w * t.sum_log_prob)
        .sum::<f64>();
    let greedy_cost = if cfg.track_greedy {
        rollout(params, &instance, starts, DecodeMode::Greedy, &mut rng)?
            .iter()
            .map(|t| t.cost)
            .fold(f64::INFINITY, f64::min)
    } else {
        f64::NAN
    };
    Ok(InstanceResult {
        grad,
        sample_cost: costs.iter().sum::<f64>() / costs.len() as f64,
        greedy_cost,
        loss,
    })
}

/// One epoch of `instances_per_epoch / batch_size` optimizer steps.
///
/// Every instance in a batch gets its own seed drawn from `rng` up front, so the
/// per-instance work may run on any number of threads; gradients are reduced in
/// instance order.
pub fn train_epoch<R: Rng + ?Sized>(
    params: &mut ParamVector,
    opt: &mut OptState,
    sampler: &VariantSampler,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<EpochStats> {
    cfg.validate()?;
    let batches = cfg.batches_per_epoch();
    let mut batches_per_source = vec![0; sampler.sources.len()];
    let mut sample_sum = 0.0;
    let mut greedy_sum = 0.0;
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for _ in 0..batches {
        let src = sampler.pick(rng);
        batches_per_source[src] += 1;
        let source = &sampler.sources[src];
        let seeds: Vec<u64> = (0..cfg.batch_size).map(|_| rng.gen()).collect();
        let results = seeds
            .par_iter()
            .map(|&seed| instance_update(params, source, cfg, seed))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = params.zeros_like();
        for r in &results {
            for (g, x) in grad.data.iter_mut().zip(&r.grad.data) {
                *g += x;
            }
            sample_sum += r.sample_cost;
            greedy_sum += r.greedy_cost;
            if !r.loss.is_finite() {
                return Err(Error::Numeric("non-finite batch loss".into()));
            }
            loss_sum += r.loss;
        }
        count += results.len();
        let inv = 1.0 / results.len() as f64;
        for g in &mut grad.data {
            *g *= inv;
        }
        opt.step(params, &grad)?;
    }
    let c = count as f64;
    Ok(EpochStats {
        mean_sample_cost: sample_sum / c,
        mean_greedy_cost: greedy_sum / c,
        mean_loss: loss_sum / c,
        steps: batches,
        batches_per_source,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub variant_mix: String,
    pub stats: EpochStats,
    pub wall_time_s: f64,
}

fn variant_mix(sampler: &VariantSampler, counts: &[usize]) -> String {
    sampler
        .sources
        .iter()
        .zip(counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, c)| format!("{}:{c}", s.spec()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Runs `epochs` epochs, calling `on_epoch` after each one.
pub fn train_loop<R: Rng + ?Sized>(
    params: &mut ParamVector,
    opt: &mut OptState,
    sampler: &VariantSampler,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochLog, &ParamVector) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let t0 = Instant::now();
        let stats = train_epoch(params, opt, sampler, cfg, rng)?;
        let row = EpochLog {
            epoch,
            variant_mix: variant_mix(sampler, &stats.batches_per_source),
            stats,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&row, params)?;
        log.push(row);
    }
    Ok(log)
}

/// Multi-variant pre-training: each batch draws its variant uniformly from `variants`.
pub fn pretrain<R: Rng + ?Sized>(
    init: &ParamVector,
    variants: &[VariantSpec],
    n: usize,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<(ParamVector, Vec<EpochLog>)> {
    let sampler = VariantSampler::generators(variants, n)?;
    let mut params = init.clone();
    let mut opt = OptState::for_params(&params, cfg.lr, cfg.weight_decay);
    let log = train_loop(&mut params, &mut opt, &sampler, cfg, epochs, rng, |_, _| Ok(()))?;
    Ok((params, log))
}

/// Appends epoch rows to a CSV training log, writing the header for a new file.
pub fn append_train_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record([
            "epoch",
            "variant_mix",
            "mean_sample_cost",
            "mean_greedy_cost",
            "wall_time_s",
        ])?;
    }
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.variant_mix.clone(),
            format!("{:.6}", r.stats.mean_sample_cost),
            format!("{:.6}", r.stats.mean_greedy_cost),
            format!("{:.3}", r.wall_time_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Stable 64-bit mixing of a seed with stream identifiers (SplitMix64 finalizer).
pub fn mix_seed(seed: u64, streams: &[u64]) -> u64 {
    let mut z = seed;
    for &s in streams {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Convenience writer used by the CLI to stream log rows.
pub fn write_log_line<W: Write>(mut w: W, row: &EpochLog) -> std::io::Result<()> {
    writeln!(
        w,
        "epoch {:>4}  sample {:.4}  greedy {:.4}  [{}]  {:.1}s",
        row.epoch, row.stats.mean_sample_cost, row.stats.mean_greedy_cost, row.variant_mix, row.wall_time_s
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, ArchConfig};

    fn small() -> ParamVector {
        let arch = ArchConfig {
            embed_dim: 8,
            heads: 2,
            layers: 1,
            clip: 10.0,
        };
        init_params(arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            instances_per_epoch: 8,
            num_starts: 4,
            lr: 1e-3,
            weight_decay: 0.0,
            track_greedy: true,
        }
    }

    #[test]
    fn pomo_weight_examples() {
        assert_eq!(pomo_weights(&[3.0, 5.0]).unwrap(), vec![-0.5, 0.5]);
        assert_eq!(pomo_weights(&[2.0, 2.0, 2.0]).unwrap(), vec![0.0; 3]);
        let w = pomo_weights(&[1.0, 4.0, 2.5, 7.0]).unwrap();
        assert!(w.iter().sum::<f64>().abs() < 1e-15);
        assert!(pomo_weights(&[1.0]).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = small();
        let g = p.zeros_like();
        let s = OptState::for_params(&p, 1e-3, 0.0);
        let (p2, s2) = opt_step(&s, &p, &g).unwrap();
        assert_eq!(p2.data, p.data);
        assert_eq!(s2.t, 1);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let p = small();
        let mut g = p.zeros_like();
        for (i, x) in g.data.iter_mut().enumerate() {
            *x = if i % 3 == 0 { 0.5 } else if i % 3 == 1 { -2.0 } else { 0.0 };
        }
        let s = OptState::for_params(&p, 1e-3, 0.0);
        let (a, sa) = opt_step(&s, &p, &g).unwrap();
        let (b, sb) = opt_step(&s, &p, &g).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        for i in 0..p.len() {
            let delta = a.data[i] - p.data[i];
            match i % 3 {
                0 => assert!(delta < 0.0 && (delta + 1e-3).abs() < 1e-9),
                1 => assert!(delta > 0.0 && (delta - 1e-3).abs() < 1e-9),
                _ => assert_eq!(delta, 0.0),
            }
        }
        let mut bad = g.clone();
        bad.data[0] = f64::NAN;
        assert!(opt_step(&s, &p, &bad).is_err());
    }

    #[test]
    fn one_step_per_batch_and_lr_zero_fixed_point() {
        let mut p = small();
        let before = p.clone();
        let mut c = cfg();
        c.instances_per_epoch = c.batch_size;
        c.lr = 0.0;
        let mut opt = OptState::for_params(&p, c.lr, c.weight_decay);
        let sampler = VariantSampler::generators(&[VariantSpec::CVRP], 6).unwrap();
        let stats = train_epoch(&mut p, &mut opt, &sampler, &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(stats.steps, 1);
        assert_eq!(opt.t, 1);
        assert_eq!(p.data, before.data);
        assert!(stats.mean_sample_cost > 0.0 && stats.mean_greedy_cost > 0.0);
        assert!(stats.mean_loss.is_finite());
    }

    #[test]
    fn pretrain_is_deterministic_and_single_variant_matches_loop() {
        let p = small();
        let c = cfg();
        let variants = crate::vrp::pretrain_variants();
        let (a, la) = pretrain(&p, &variants, 6, &c, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (b, lb) = pretrain(&p, &variants, 6, &c, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.data, b.data);
        let mix_a: Vec<_> = la.iter().map(|r| r.variant_mix.clone()).collect();
        let mix_b: Vec<_> = lb.iter().map(|r| r.variant_mix.clone()).collect();
        assert_eq!(mix_a, mix_b);

        let (single, _) =
            pretrain(&p, &[VariantSpec::CVRP], 6, &c, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut manual = p.clone();
        let mut opt = OptState::for_params(&manual, c.lr, c.weight_decay);
        let sampler = VariantSampler::generators(&[VariantSpec::CVRP], 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2 {
            train_epoch(&mut manual, &mut opt, &sampler, &c, &mut rng).unwrap();
        }
        assert_eq!(single.data, manual.data);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let p = small();
        let c = cfg();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                pretrain(&p, &[VariantSpec::CVRP], 6, &c, 1, &mut ChaCha8Rng::seed_from_u64(8))
                    .unwrap()
                    .0
            })
        };
        assert_eq!(run(1).data, run(3).data);
    }

    #[test]
    fn train_log_csv_has_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let p = small();
        let (_, log) = pretrain(&p, &[VariantSpec::CVRP], 5, &cfg(), 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        append_train_log(&path, &log).unwrap();
        append_train_log(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch,variant_mix,mean_sample_cost,mean_greedy_cost,wall_time_s"));
    }

    #[test]
    fn mix_seed_separates_streams() {
        assert_ne!(mix_seed(1, &[0, 1]), mix_seed(1, &[1, 0]));
        assert_eq!(mix_seed(1, &[2, 3]), mix_seed(1, &[2, 3]));
    }

    #[test]
    fn fixed_source_counts_draws() {
        let src = InstanceSource::fixed(VariantSpec::CVRP, 5, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(src.size(), Some(3));
        src.draw(&mut ChaCha8Rng::seed_from_u64(1));
        src.draw(&mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(src.draws(), 2);
    }
}
