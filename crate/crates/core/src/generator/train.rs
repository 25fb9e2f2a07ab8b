//! Training the toy backend from the synthetic corpus, and its checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::ToyCorpusSpec;
use super::{Network, ToyArchitecture, ToyBackend};
use crate::archive;
use crate::error::{DacError, Result};
use crate::lora::AdapterStack;
use crate::schedule::{forward_noise_batch, NoiseSchedule, ScheduleConfig};
use crate::tensor_util::{atomic_write, gaussian};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of training prompts replaced by the all-padding prompt.
    pub unconditional_fraction: f64,
    /// Decay of the exponential moving average kept of the weights; 0 disables it.
    pub ema_decay: f64,
    pub heldout_samples: usize,
    pub seed: u64,
    pub architecture: ToyArchitecture,
    pub t_max: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            learning_rate: 2e-3,
            unconditional_fraction: 0.1,
            ema_decay: 0.995,
            heldout_samples: 64,
            seed: 0,
            architecture: ToyArchitecture::default(),
            t_max: 1000,
        }
    }
}

impl ToyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.batch_size == 0 || self.heldout_samples == 0 {
            return Err(DacError::Config("batch and held-out sizes must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DacError::Config("learning rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(0.0..=1.0).contains(&self.unconditional_fraction) {
            return Err(DacError::Config("EMA decay must be in [0, 1), unconditional fraction in [0, 1]".into()));
        }
        if self.t_max < 2 {
            return Err(DacError::Config("t_max must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Held-out loss of the untrained network.
    pub baseline_loss: f64,
    pub heldout_loss: f64,
    /// `(step, mean training loss over the preceding window)`.
    pub trace: Vec<(usize, f64)>,
}

/// Contents of `config.json` in a toy checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCheckpointConfig {
    pub format: String,
    pub architecture: ToyArchitecture,
    pub schedule: ScheduleConfig,
    pub corpus: ToyCorpusSpec,
    pub corpus_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub train: ToyTrainConfig,
    pub report: TrainReport,
}

pub const TOY_FORMAT: &str = "dac-toy-backend";

/// One training or evaluation batch.
struct Batch {
    x0: Tensor,
    ids: Vec<Vec<u32>>,
    ts: Vec<usize>,
    eps: Tensor,
}

fn draw_batch(
    corpus: &ToyCorpusSpec,
    net: &Network,
    n: usize,
    uncond: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let res = corpus.resolution;
    let mut pixels = Vec::with_capacity(n * 3 * res * res);
    let mut ids = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    for _ in 0..n {
        let scene = corpus.sample_scene(rng);
        pixels.extend(scene.render(corpus));
        ids.push(if rng.random_bool(uncond) {
            net.tokenizer.empty()
        } else {
            net.tokenizer.encode(&scene.caption(corpus))?
        });
        ts.push(rng.random_range(1..=net.schedule.t_max()));
    }
    let x0 = ((Tensor::from_vec(pixels, (n, 3, res, res), &net.device)?.to_dtype(net.dtype)? * 2.0)? - 1.0)?;
    let eps = gaussian((n, 3, res, res), net.dtype, &net.device, rng)?;
    Ok(Batch { x0, ids, ts, eps })
}

fn batch_loss(net: &Network, b: &Batch) -> Result<Tensor> {
    let x_t = forward_noise_batch(&b.x0, &b.ts, &b.eps, &net.schedule)?;
    let text = net.text.forward(&b.ids, &AdapterStack::empty(), &net.device)?;
    // Velocity regression: the noise loss reweighted by 1 / alpha_bar, which
    // keeps the high-noise end (where samples get their layout) trained.
    let pred = net.unet.forward(&x_t, &b.ts, &text, &AdapterStack::empty(), false)?;
    let target = net.velocity_target(&b.x0, &b.eps, &b.ts)?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Mean noise-prediction error over held-out batches (the quantity the
/// abduction objectives regress), independent of the training weighting.
fn heldout_loss(net: &Network, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let x_t = forward_noise_batch(&b.x0, &b.ts, &b.eps, &net.schedule)?;
        let text = net.text.forward(&b.ids, &AdapterStack::empty(), &net.device)?;
        let pred = net.predict(&x_t, &b.ts, &text, &AdapterStack::empty())?;
        total += (pred - &b.eps)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total / batches.len() as f64)
}

fn lr_at(cfg: &ToyTrainConfig, step: usize) -> f64 {
    // Constant, then linear decay to a tenth over the final quarter.
    let frac = step as f64 / cfg.steps.max(1) as f64;
    let factor = if frac <= 0.75 { 1.0 } else { 1.0 - 0.9 * (frac - 0.75) / 0.25 };
    cfg.learning_rate * factor
}

/// Trains a fresh toy backend on seeded corpus samples. All randomness derives
/// from `cfg.seed`, so a rerun reproduces the weights exactly.
pub fn train_toy_backend(corpus: &ToyCorpusSpec, cfg: &ToyTrainConfig, device: &Device) -> Result<(ToyBackend, TrainReport)> {
    corpus.validate()?;
    cfg.validate()?;
    if corpus.resolution != cfg.architecture.image_size {
        return Err(DacError::Config(format!(
            "corpus resolution {} differs from network image size {}",
            corpus.resolution, cfg.architecture.image_size
        )));
    }
    let schedule = NoiseSchedule::linear(cfg.t_max, 1e-4, 0.02)?;
    let init = Network::random(&cfg.architecture, schedule.clone(), cfg.seed, DType::F32, device)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0e7a_1000_0001);
    let eval_batches = (0..cfg.heldout_samples.div_ceil(cfg.batch_size))
        .map(|i| {
            let n = cfg.batch_size.min(cfg.heldout_samples - i * cfg.batch_size);
            draw_batch(corpus, &init, n, cfg.unconditional_fraction, &mut eval_rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline_loss = heldout_loss(&init, &eval_batches)?;
    log::info!("toy backend: untrained held-out loss {baseline_loss:.5}");

    let vars: BTreeMap<String, Var> = init
        .params
        .iter()
        .map(|(k, t)| Ok((k.clone(), Var::from_tensor(t)?)))
        .collect::<Result<_>>()?;
    let live: BTreeMap<String, Tensor> = vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    let net = Network::from_params(&cfg.architecture, schedule.clone(), live)?;
    let mut ema: BTreeMap<String, Tensor> = init.params.clone();
    let mut opt = AdamW::new(
        vars.values().cloned().collect(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::new();
    let mut window = (0.0, 0usize);
    for step in 0..cfg.steps {
        let batch = draw_batch(corpus, &net, cfg.batch_size, cfg.unconditional_fraction, &mut rng)?;
        let loss = batch_loss(&net, &batch)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(DacError::Training {
                iteration: step,
                timestep: batch.ts[0],
                reason: "toy backend loss is not finite".into(),
            });
        }
        opt.set_learning_rate(lr_at(cfg, step));
        opt.backward_step(&loss)?;
        if cfg.ema_decay > 0.0 {
            for (k, v) in &vars {
                let e = ema.get_mut(k).expect("ema mirrors params");
                *e = ((&*e * cfg.ema_decay)? + (v.as_tensor().detach() * (1.0 - cfg.ema_decay))?)?;
            }
        }
        window.0 += value;
        window.1 += 1;
        if window.1 == 50 || step + 1 == cfg.steps {
            let mean = window.0 / window.1 as f64;
            trace.push((step + 1, mean));
            log::info!("toy backend: step {} loss {mean:.5}", step + 1);
            window = (0.0, 0);
        }
    }

    let final_params: BTreeMap<String, Tensor> = if cfg.ema_decay > 0.0 && cfg.steps > 0 {
        ema
    } else {
        vars.iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect::<Result<_>>()?
    };
    let trained = Network::from_params(&cfg.architecture, schedule, final_params)?;
    let heldout = heldout_loss(&trained, &eval_batches)?;
    log::info!("toy backend: held-out loss {heldout:.5} (untrained {baseline_loss:.5})");
    Ok((
        ToyBackend { net: trained },
        TrainReport {
            baseline_loss,
            heldout_loss: heldout,
            trace,
        },
    ))
}

pub const TOY_WEIGHTS: &str = "weights.safetensors";
pub const TOY_CONFIG: &str = "config.json";

pub fn save_toy_backend(
    backend: &ToyBackend,
    corpus: &ToyCorpusSpec,
    cfg: &ToyTrainConfig,
    report: &TrainReport,
    dir: &Path,
) -> Result<ToyCheckpointConfig> {
    std::fs::create_dir_all(dir)?;
    let config = ToyCheckpointConfig {
        format: TOY_FORMAT.into(),
        architecture: backend.net.arch.clone(),
        schedule: backend.net.schedule.config().clone(),
        corpus: corpus.clone(),
        corpus_hash: corpus.hash(),
        seed: cfg.seed,
        steps: cfg.steps,
        train: cfg.clone(),
        report: report.clone(),
    };
    let mut meta = archive::Metadata::new();
    meta.insert("format".into(), TOY_FORMAT.into());
    meta.insert("corpus_hash".into(), config.corpus_hash.clone());
    meta.insert("seed".into(), cfg.seed.to_string());
    archive::save(&dir.join(TOY_WEIGHTS), &backend.net.params, &meta)?;
    atomic_write(&dir.join(TOY_CONFIG), &serde_json::to_vec_pretty(&config)?)?;
    Ok(config)
}

pub fn load_toy_backend(dir: &Path, device: &Device) -> Result<(ToyBackend, ToyCheckpointConfig)> {
    let cfg_path = dir.join(TOY_CONFIG);
    let bytes = std::fs::read(&cfg_path).map_err(|e| DacError::load(&cfg_path, e))?;
    let config: ToyCheckpointConfig = serde_json::from_slice(&bytes).map_err(|e| DacError::load(&cfg_path, e))?;
    if config.format != TOY_FORMAT {
        return Err(DacError::load(&cfg_path, format!("unknown format `{}`", config.format)));
    }
    if config.corpus.hash() != config.corpus_hash {
        return Err(DacError::load(&cfg_path, "corpus hash does not match the recorded corpus"));
    }
    let weights = dir.join(TOY_WEIGHTS);
    let (params, _) = archive::load(&weights, device)?;
    let schedule = NoiseSchedule::from_config(&config.schedule).map_err(|e| DacError::load(&cfg_path, e))?;
    let backend = ToyBackend::from_params(&config.architecture, schedule, params).map_err(|e| DacError::load(&weights, e))?;
    Ok((backend, config))
}
