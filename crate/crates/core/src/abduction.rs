//! The abduction trainers. Each one fits a single adapter by Gaussian noise
//! regression on the source sample while the host network and every other
//! adapter stay frozen:
//!
//! * [`abduct_u`] fits the generator adapter `U` under the source prompt,
//! * [`abduct_delta`] fits the text-encoder adapter `Δ` under the target
//!   prompt with `U` weighted by the annealing schedule,
//! * [`abduct_t_aux`] optionally fits an auxiliary text-encoder adapter under
//!   the source prompt to tighten the reconstruction.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::generator::{per_sample_gamma, GeneratorBackend};
use crate::lora::{check_eta, AdapterStack, AdapterTarget, LoraAdapter, LoraScale, Placement};
use crate::schedule::forward_noise_batch;
use crate::tensor_util::gaussian;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbductionConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub rank_u: usize,
    pub rank_delta: usize,
    pub rank_t_aux: usize,
    pub eta: f64,
    /// Number of `(t, eps)` draws per iteration.
    pub batch_size: usize,
    pub checkpoint_iters: BTreeSet<usize>,
    pub placement: Placement,
    pub seed: u64,
    pub with_t_aux: bool,
    /// Alternation rounds of (U, T_aux) when the auxiliary adapter is enabled.
    pub t_aux_rounds: usize,
}

impl Default for AbductionConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 1e-4,
            rank_u: 512,
            rank_delta: 4,
            rank_t_aux: 4,
            eta: 0.6,
            batch_size: 1,
            checkpoint_iters: [250, 500, 1000].into_iter().collect(),
            placement: Placement::AttentionConvFfn,
            seed: 0,
            with_t_aux: false,
            t_aux_rounds: 1,
        }
    }
}

impl AbductionConfig {
    /// Settings for the toy backend: the published step count and ranks with a
    /// larger step size, because the toy network is trained from scratch at a
    /// far smaller scale than a pretrained text-to-image model.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(DacError::Config("iterations must be positive".into()));
        }
        if self.rank_u == 0 || self.rank_delta == 0 || self.rank_t_aux == 0 {
            return Err(DacError::Config("adapter ranks must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(DacError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DacError::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        check_eta(self.eta)?;
        if self.with_t_aux && self.t_aux_rounds == 0 {
            return Err(DacError::Config("t_aux_rounds must be positive".into()));
        }
        Ok(())
    }

    /// Checkpoint iterations that a run of `iterations` steps reaches.
    pub fn reachable_checkpoints(&self) -> Vec<usize> {
        self.checkpoint_iters
            .iter()
            .copied()
            .filter(|&i| i >= 1 && i <= self.iterations)
            .collect()
    }
}

/// Which trainer is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    U,
    Delta,
    TAux,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::U => "u",
            Stage::Delta => "delta",
            Stage::TAux => "t_aux",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "u" => Some(Stage::U),
            "delta" => Some(Stage::Delta),
            "t_aux" => Some(Stage::TAux),
            _ => None,
        }
    }

    /// Seed offset so the stages draw independent streams from one session seed.
    fn seed_offset(self) -> u64 {
        match self {
            Stage::U => 0x0001,
            Stage::Delta => 0x0002,
            Stage::TAux => 0x0003,
        }
    }
}

/// Seeds a stage derives from the session seed: one for adapter
/// initialization, one for `(t, eps)` draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub init: u64,
    pub noise: u64,
}

pub fn stage_seeds(seed: u64, stage: Stage, round: usize) -> StageSeeds {
    let base = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stage.seed_offset() << 32)
        .wrapping_add(round as u64);
    StageSeeds {
        init: base ^ 0x1111_0000_0000_0000,
        noise: base ^ 0x2222_0000_0000_0000,
    }
}

/// How the frozen generator adapter is weighted during regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UWeight {
    Constant(f64),
    /// `gamma_schedule(t, t_max, eta)` per sampled timestep.
    Annealed(f64),
}

/// The conditioning side of a regression objective; the adapter under
/// training is supplied separately and is placed according to its target.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    pub prompt: String,
    pub u: Option<&'a LoraAdapter>,
    pub u_weight: UWeight,
    /// Frozen text-encoder adapters applied at unit scale.
    pub text_frozen: Vec<&'a LoraAdapter>,
}

/// One set of `(t, eps)` draws.
#[derive(Debug, Clone)]
pub struct NoiseBatch {
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseBatch {
    /// Timesteps uniform in `[1, t_max]` and standard normal noise.
    pub fn draw(backend: &dyn GeneratorBackend, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let t_max = backend.schedule().t_max();
        let ts = (0..n).map(|_| rng.random_range(1..=t_max)).collect();
        let (c, h, w) = backend.latent_shape();
        let eps = gaussian((n, c, h, w), backend.dtype(), backend.device(), rng)?;
        Ok(Self { ts, eps })
    }

    /// A fixed evaluation set of `n` draws from `seed`.
    pub fn evaluation(backend: &dyn GeneratorBackend, n: usize, seed: u64) -> Result<Self> {
        Self::draw(backend, n, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Mean squared noise-regression error of `(objective, trainable)` on `batch`.
/// The result stays attached to the autograd graph of any variable factors.
pub fn regression_loss(
    backend: &dyn GeneratorBackend,
    objective: &Objective,
    trainable: Option<&LoraAdapter>,
    x0: &Tensor,
    batch: &NoiseBatch,
) -> Result<Tensor> {
    let t_max = backend.schedule().t_max();
    let mut text_stack = AdapterStack::empty();
    for a in &objective.text_frozen {
        text_stack.push(a, 1.0);
    }
    let mut gen_stack = AdapterStack::empty();
    if let Some(u) = objective.u {
        let scale = match objective.u_weight {
            UWeight::Constant(g) => LoraScale::Uniform(g),
            UWeight::Annealed(eta) => per_sample_gamma(&batch.ts, t_max, eta)?,
        };
        gen_stack.push(u, scale);
    }
    if let Some(tr) = trainable {
        match tr.target() {
            AdapterTarget::TextEncoder => text_stack.push(tr, 1.0),
            AdapterTarget::Generator => gen_stack.push(tr, 1.0),
        }
    }
    let n = batch.ts.len();
    let x0 = x0.broadcast_as(batch.eps.dims())?.contiguous()?;
    let x_t = forward_noise_batch(&x0, &batch.ts, &batch.eps, backend.schedule())?;
    let text = backend.encode_text_with(&objective.prompt, &text_stack)?;
    let pred = backend.predict_noise_with(&x_t, &batch.ts, &text, &gen_stack)?;
    debug_assert_eq!(pred.dim(0)?, n);
    Ok((pred - &batch.eps)?.sqr()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// An adapter whose factors are autograd variables, plus its optimizer.
pub struct TrainableAdapter {
    adapter: LoraAdapter,
    vars: Vec<Var>,
    opt: AdamW,
}

impl TrainableAdapter {
    /// Adaptive-moment optimizer with no weight decay and a constant rate.
    pub fn new(initial: &LoraAdapter, learning_rate: f64) -> Result<Self> {
        let mut vars = Vec::new();
        let adapter = initial.map_factors(|_, _, t| {
            let v = Var::from_tensor(&t.copy()?)?;
            let live = v.as_tensor().clone();
            vars.push(v);
            Ok(live)
        })?;
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self { adapter, vars, opt })
    }

    /// The live adapter (shares storage with the variables).
    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Frozen copy of the current values.
    pub fn snapshot(&self) -> Result<LoraAdapter> {
        self.adapter.map_factors(|_, _, t| Ok(t.detach().copy()?))
    }

    pub fn step(&mut self, loss: &Tensor) -> Result<()> {
        Ok(self.opt.backward_step(loss)?)
    }

    pub fn gradients(&self, loss: &Tensor) -> Result<GradStore> {
        Ok(loss.backward()?)
    }
}

/// One optimization step. Returns the loss measured before the update.
pub fn regression_step(
    backend: &dyn GeneratorBackend,
    objective: &Objective,
    trainable: &mut TrainableAdapter,
    x0: &Tensor,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<f64> {
    let batch = NoiseBatch::draw(backend, batch_size, rng)?;
    let loss = match regression_loss(backend, objective, Some(trainable.adapter()), x0, &batch) {
        Err(e @ DacError::Numeric { .. }) => {
            return Err(DacError::Training {
                iteration,
                timestep: batch.ts[0],
                reason: e.to_string(),
            })
        }
        other => other?,
    };
    let value = scalar(&loss)?;
    if !value.is_finite() {
        return Err(DacError::Training {
            iteration,
            timestep: batch.ts[0],
            reason: format!("regression loss is {value}"),
        });
    }
    trainable.step(&loss)?;
    Ok(value)
}

/// Receives progress from a running trainer.
pub trait AbductionObserver {
    fn on_iteration(&mut self, _stage: Stage, _iteration: usize, _total: usize, _loss: f64) -> Result<()> {
        Ok(())
    }

    /// Called with a frozen snapshot at each configured checkpoint.
    fn on_checkpoint(&mut self, _stage: Stage, _iteration: usize, _adapter: &LoraAdapter) -> Result<()> {
        Ok(())
    }

    /// Called when a stage (or one alternation round of it) has finished.
    fn on_stage_complete(&mut self, _outcome: &StageOutcome, _round: usize) -> Result<()> {
        Ok(())
    }
}

impl AbductionObserver for () {}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub adapter: LoraAdapter,
    pub losses: Vec<f64>,
    pub checkpoints: BTreeMap<usize, LoraAdapter>,
    pub seeds: StageSeeds,
    /// Host and frozen-adapter checksums, identical before and after.
    pub frozen_checksums: Vec<String>,
}

fn frozen_checksums(backend: &dyn GeneratorBackend, frozen: &[&LoraAdapter]) -> Result<Vec<String>> {
    let mut v = vec![backend.host_checksum()?];
    for a in frozen {
        v.push(a.checksum()?);
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    backend: &dyn GeneratorBackend,
    stage: Stage,
    objective: &Objective,
    initial: LoraAdapter,
    x0: &Tensor,
    cfg: &AbductionConfig,
    seeds: StageSeeds,
    observer: &mut dyn AbductionObserver,
) -> Result<StageOutcome> {
    let mut frozen: Vec<&LoraAdapter> = objective.text_frozen.clone();
    if let Some(u) = objective.u {
        frozen.push(u);
    }
    let before = frozen_checksums(backend, &frozen)?;
    let mut trainable = TrainableAdapter::new(&initial, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.noise);
    let checkpoints_at: BTreeSet<usize> = cfg.reachable_checkpoints().into_iter().collect();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = BTreeMap::new();
    for it in 1..=cfg.iterations {
        let loss = regression_step(backend, objective, &mut trainable, x0, cfg.batch_size, &mut rng, it)?;
        losses.push(loss);
        observer.on_iteration(stage, it, cfg.iterations, loss)?;
        if checkpoints_at.contains(&it) {
            let snap = trainable.snapshot()?;
            observer.on_checkpoint(stage, it, &snap)?;
            checkpoints.insert(it, snap);
        }
    }
    let after = frozen_checksums(backend, &frozen)?;
    if before != after {
        return Err(DacError::State(format!(
            "{} abduction modified frozen weights",
            stage.as_str()
        )));
    }
    Ok(StageOutcome {
        stage,
        adapter: trainable.snapshot()?,
        losses,
        checkpoints,
        seeds,
        frozen_checksums: after,
    })
}

/// Abduction-1: fits `U` so the generator reproduces `x0` under `prompt`, with
/// the text encoder unmodified (or with a frozen auxiliary text adapter, and
/// optionally continuing from an earlier `U`, when alternating).
#[allow(clippy::too_many_arguments)]
pub fn abduct_u(
    backend: &dyn GeneratorBackend,
    x0: &Tensor,
    prompt: &str,
    cfg: &AbductionConfig,
    t_aux: Option<&LoraAdapter>,
    resume: Option<&LoraAdapter>,
    round: usize,
    observer: &mut dyn AbductionObserver,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let seeds = stage_seeds(cfg.seed, Stage::U, round);
    let initial = match resume {
        Some(u) => u.clone(),
        None => LoraAdapter::init(
            &backend.host_layers(AdapterTarget::Generator),
            AdapterTarget::Generator,
            cfg.placement,
            cfg.rank_u,
            seeds.init,
            backend.dtype(),
            backend.device(),
        )?,
    };
    let objective = Objective {
        prompt: prompt.to_string(),
        u: None,
        u_weight: UWeight::Constant(1.0),
        text_frozen: t_aux.into_iter().collect(),
    };
    run_stage(backend, Stage::U, &objective, initial, x0, cfg, seeds, observer)
}

/// Abduction-2: fits `Δ` on the text encoder's attention layers so that
/// `(prompt_prime, U annealed, Δ)` reproduces `x0`. `Δ` is returned in the
/// reconstruction orientation.
pub fn abduct_delta(
    backend: &dyn GeneratorBackend,
    x0: &Tensor,
    prompt_prime: &str,
    u: &LoraAdapter,
    t_aux: Option<&LoraAdapter>,
    cfg: &AbductionConfig,
    observer: &mut dyn AbductionObserver,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let seeds = stage_seeds(cfg.seed, Stage::Delta, 0);
    let initial = LoraAdapter::init(
        &backend.host_layers(AdapterTarget::TextEncoder),
        AdapterTarget::TextEncoder,
        Placement::AttentionOnly,
        cfg.rank_delta,
        seeds.init,
        backend.dtype(),
        backend.device(),
    )?;
    let objective = Objective {
        prompt: prompt_prime.to_string(),
        u: Some(u),
        u_weight: UWeight::Annealed(cfg.eta),
        text_frozen: t_aux.into_iter().collect(),
    };
    let mut no_checkpoints = cfg.clone();
    no_checkpoints.checkpoint_iters.clear();
    run_stage(backend, Stage::Delta, &objective, initial, x0, &no_checkpoints, seeds, observer)
}

/// Auxiliary text-encoder abduction under the source prompt with `U` frozen
/// at full weight.
#[allow(clippy::too_many_arguments)]
pub fn abduct_t_aux(
    backend: &dyn GeneratorBackend,
    x0: &Tensor,
    prompt: &str,
    u: &LoraAdapter,
    cfg: &AbductionConfig,
    resume: Option<&LoraAdapter>,
    round: usize,
    observer: &mut dyn AbductionObserver,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let seeds = stage_seeds(cfg.seed, Stage::TAux, round);
    let initial = match resume {
        Some(t) => t.clone(),
        None => LoraAdapter::init(
            &backend.host_layers(AdapterTarget::TextEncoder),
            AdapterTarget::TextEncoder,
            Placement::AttentionOnly,
            cfg.rank_t_aux,
            seeds.init,
            backend.dtype(),
            backend.device(),
        )?,
    };
    let objective = Objective {
        prompt: prompt.to_string(),
        u: Some(u),
        u_weight: UWeight::Constant(1.0),
        text_frozen: Vec::new(),
    };
    let mut no_checkpoints = cfg.clone();
    no_checkpoints.checkpoint_iters.clear();
    run_stage(backend, Stage::TAux, &objective, initial, x0, &no_checkpoints, seeds, observer)
}

/// Everything the pipeline abducts for one source image.
#[derive(Debug, Clone)]
pub struct Abductions {
    pub u: StageOutcome,
    pub t_aux: Option<StageOutcome>,
    pub delta: StageOutcome,
    /// Stage outcomes of every alternation round, in order.
    pub history: Vec<StageOutcome>,
}

/// Runs Abduction-1 (alternating with the auxiliary adapter if enabled), then
/// Abduction-2.
pub fn abduct_all(
    backend: &dyn GeneratorBackend,
    x0: &Tensor,
    prompt: &str,
    prompt_prime: &str,
    cfg: &AbductionConfig,
    observer: &mut dyn AbductionObserver,
) -> Result<Abductions> {
    cfg.validate()?;
    let mut history = Vec::new();
    let mut u = abduct_u(backend, x0, prompt, cfg, None, None, 0, observer)?;
    observer.on_stage_complete(&u, 0)?;
    let mut t_aux: Option<StageOutcome> = None;
    if cfg.with_t_aux {
        for round in 0..cfg.t_aux_rounds {
            if round > 0 {
                history.push(u.clone());
                let mut next = abduct_u(
                    backend,
                    x0,
                    prompt,
                    cfg,
                    t_aux.as_ref().map(|t| &t.adapter),
                    Some(&u.adapter),
                    round,
                    observer,
                )?;
                // Checkpoints describe the first Abduction-1 pass only.
                next.checkpoints = std::mem::take(&mut u.checkpoints);
                u = next;
                observer.on_stage_complete(&u, round)?;
            }
            let t = abduct_t_aux(
                backend,
                x0,
                prompt,
                &u.adapter,
                cfg,
                t_aux.as_ref().map(|t| &t.adapter),
                round,
                observer,
            )?;
            observer.on_stage_complete(&t, round)?;
            if let Some(prev) = t_aux.replace(t) {
                history.push(prev);
            }
        }
    }
    let delta = abduct_delta(
        backend,
        x0,
        prompt_prime,
        &u.adapter,
        t_aux.as_ref().map(|t| &t.adapter),
        cfg,
        observer,
    )?;
    observer.on_stage_complete(&delta, 0)?;
    Ok(Abductions {
        u,
        t_aux,
        delta,
        history,
    })
}

/// Centered moving average with a trailing window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= w {
            sum -= losses[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{disc_image, tiny_backend};
    use candle_core::DType;

    fn quick(iterations: usize) -> AbductionConfig {
        AbductionConfig {
            iterations,
            learning_rate: 1e-3,
            rank_u: 4,
            rank_delta: 2,
            rank_t_aux: 2,
            checkpoint_iters: [2, 4, 100].into_iter().collect(),
            ..AbductionConfig::default()
        }
    }

    #[test]
    fn defaults_match_documented_hyperparameters() {
        let c = AbductionConfig::default();
        assert_eq!((c.iterations, c.rank_u, c.rank_delta, c.batch_size), (1000, 512, 4, 1));
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.eta, 0.6);
        assert_eq!(c.reachable_checkpoints(), vec![250, 500, 1000]);
        assert_eq!(c.placement, Placement::AttentionConvFfn);
        assert!(!c.with_t_aux);
    }

    #[test]
    fn config_validation() {
        assert!(AbductionConfig { eta: 1.5, ..quick(1) }.validate().is_err());
        assert!(AbductionConfig { eta: 0.0, ..quick(1) }.validate().is_err());
        assert!(AbductionConfig { iterations: 0, ..quick(1) }.validate().is_err());
        assert!(AbductionConfig { rank_u: 0, ..quick(1) }.validate().is_err());
        assert!(quick(1).validate().is_ok());
        assert_eq!(quick(3).reachable_checkpoints(), vec![2]);
    }

    #[test]
    fn zero_rate_step_is_a_no_op_returning_the_frozen_loss() {
        let b = tiny_backend(DType::F64);
        let x0 = b.encode_image(&disc_image(8)).unwrap();
        let init = LoraAdapter::init(
            &b.host_layers(AdapterTarget::Generator),
            AdapterTarget::Generator,
            Placement::AttentionConvFfn,
            3,
            9,
            DType::F64,
            b.device(),
        )
        .unwrap();
        let before = init.checksum().unwrap();
        let host = b.host_checksum().unwrap();
        let mut tr = TrainableAdapter::new(&init, 0.0).unwrap();
        let objective = Objective {
            prompt: "a red circle".into(),
            u: None,
            u_weight: UWeight::Constant(1.0),
            text_frozen: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = NoiseBatch::draw(&b, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let frozen = scalar(&regression_loss(&b, &objective, None, &x0, &batch).unwrap()).unwrap();
        let loss = regression_step(&b, &objective, &mut tr, &x0, 1, &mut rng, 1).unwrap();
        assert_eq!(loss, frozen);
        assert_eq!(tr.snapshot().unwrap().checksum().unwrap(), before);
        assert_eq!(b.host_checksum().unwrap(), host);
    }

    #[test]
    fn noise_batches_sample_positive_timesteps() {
        let b = tiny_backend(DType::F32);
        let batch = NoiseBatch::evaluation(&b, 256, 1).unwrap();
        assert!(batch.ts.iter().all(|&t| (1..=1000).contains(&t)));
        assert_eq!(batch.eps.dims(), &[256, 3, 8, 8]);
    }

    #[test]
    fn abduction_is_reproducible_and_checkpointed() {
        let b = tiny_backend(DType::F32);
        let x0 = b.encode_image(&disc_image(8)).unwrap();
        let cfg = quick(5);
        let run = || abduct_u(&b, &x0, "a red circle", &cfg, None, None, 0, &mut ()).unwrap();
        let (r1, r2) = (run(), run());
        assert_eq!(r1.losses, r2.losses);
        assert_eq!(r1.losses.len(), 5);
        assert_eq!(r1.adapter.checksum().unwrap(), r2.adapter.checksum().unwrap());
        assert_eq!(r1.checkpoints.keys().copied().collect::<Vec<_>>(), vec![2, 4]);
        assert!(r1.adapter.contribution_norm().unwrap() > 0.0);
    }

    #[test]
    fn delta_targets_text_attention_only_and_keeps_u_frozen() {
        let b = tiny_backend(DType::F32);
        let x0 = b.encode_image(&disc_image(8)).unwrap();
        let cfg = quick(3);
        let u = abduct_u(&b, &x0, "a red circle", &cfg, None, None, 0, &mut ()).unwrap();
        let u_sum = u.adapter.checksum().unwrap();
        let d = abduct_delta(&b, &x0, "a blue circle", &u.adapter, None, &cfg, &mut ()).unwrap();
        assert_eq!(u.adapter.checksum().unwrap(), u_sum);
        assert_eq!(d.adapter.target(), AdapterTarget::TextEncoder);
        assert!(d.adapter.pairs().all(|p| p.layer_path().contains(".attn.")));
        assert!(d.checkpoints.is_empty());
        assert_eq!(d.frozen_checksums.len(), 2);
    }

    #[test]
    fn nan_loss_aborts_with_iteration_and_timestep() {
        let b = tiny_backend(DType::F32);
        let x0 = (b.encode_image(&disc_image(8)).unwrap() * f64::NAN).unwrap();
        let err = abduct_u(&b, &x0, "a red circle", &quick(2), None, None, 0, &mut ()).unwrap_err();
        assert!(matches!(err, DacError::Training { iteration: 1, .. }), "{err}");
        assert!(err.to_string().contains("unet.conv_in"), "{err}");
    }

    #[test]
    fn alternation_records_every_round() {
        let b = tiny_backend(DType::F32);
        let x0 = b.encode_image(&disc_image(8)).unwrap();
        let cfg = AbductionConfig {
            with_t_aux: true,
            t_aux_rounds: 2,
            ..quick(2)
        };
        struct Count(Vec<(Stage, usize)>);
        impl AbductionObserver for Count {
            fn on_stage_complete(&mut self, o: &StageOutcome, round: usize) -> Result<()> {
                self.0.push((o.stage, round));
                Ok(())
            }
        }
        let mut seen = Count(vec![]);
        let all = abduct_all(&b, &x0, "a red circle", "a blue circle", &cfg, &mut seen).unwrap();
        assert_eq!(
            seen.0,
            vec![(Stage::U, 0), (Stage::TAux, 0), (Stage::U, 1), (Stage::TAux, 1), (Stage::Delta, 0)]
        );
        assert!(all.t_aux.is_some());
        assert_eq!(all.history.len(), 2);
        assert_eq!(all.u.checkpoints.keys().copied().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let s = [
            stage_seeds(0, Stage::U, 0),
            stage_seeds(0, Stage::U, 1),
            stage_seeds(0, Stage::Delta, 0),
            stage_seeds(1, Stage::U, 0),
        ];
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(smoothed(&[], 3), Vec::<f64>::new());
    }
}
