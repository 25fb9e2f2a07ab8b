//! The text-conditional diffusion generator: a noise-prediction network and a
//! text encoder, both with adapter injection points.
//!
//! Two backends share one network implementation: [`ToyBackend`] works
//! directly in pixel space and is trained from the synthetic corpus, while
//! [`ExternalBackend`] loads weights from disk and maps images through a
//! latent codec.

pub mod conformance;
pub mod corpus;
mod nn;
mod text;
mod train;
mod unet;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::error::{DacError, Result};
use crate::imaging::Image;
use crate::lora::{gamma_schedule, AdapterStack, AdapterTarget, HostLayer, LoraAdapter, LoraScale};
use crate::schedule::{ddim_sample, NoiseSchedule, ScheduleConfig};
use crate::tensor_util::{all_finite, hash_tensor, seeded_gaussian};

pub use text::Tokenizer;
pub use train::{
    load_toy_backend, save_toy_backend, train_toy_backend, ToyCheckpointConfig, ToyTrainConfig, TrainReport, TOY_CONFIG,
    TOY_WEIGHTS,
};
pub use unet::ToyArchitecture;

use nn::{ParamSource, Registry};
use text::TextEncoder;
use unet::UNet;

/// Identifies a backend instance for provenance records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: String,
    pub host_checksum: String,
    pub latent_space: bool,
}

/// A text-conditional noise predictor plus text encoder with adapter slots.
///
/// All forward passes are pure functions of their inputs, the host weights and
/// the adapters supplied.
pub trait GeneratorBackend: Send + Sync {
    fn kind(&self) -> &str;
    fn schedule(&self) -> &NoiseSchedule;
    fn device(&self) -> &Device;
    fn dtype(&self) -> DType;
    /// Side length of the square RGB images this backend consumes.
    fn image_size(&self) -> usize;
    /// `(channels, height, width)` of one diffusion sample.
    fn latent_shape(&self) -> (usize, usize, usize);
    /// Adapter-capable layers of the given network.
    fn host_layers(&self, target: AdapterTarget) -> Vec<HostLayer>;
    fn tokenizer(&self) -> &Tokenizer;
    /// Token features `(1, tokens, dim)` with the given text-encoder adapters.
    fn encode_text_with(&self, prompt: &str, adapters: &AdapterStack) -> Result<Tensor>;
    /// Features of the all-padding (unconditional) prompt.
    fn encode_unconditional(&self, adapters: &AdapterStack) -> Result<Tensor>;
    /// Predicted noise `(b, c, h, w)` with the given generator adapters.
    fn predict_noise_with(&self, x_t: &Tensor, ts: &[usize], text: &Tensor, adapters: &AdapterStack) -> Result<Tensor>;
    /// Source image to the diffusion sample `x0`, shape `(1, c, h, w)`.
    fn encode_image(&self, img: &Image) -> Result<Tensor>;
    fn decode_image(&self, x0: &Tensor) -> Result<Vec<Image>>;
    /// Frozen-trunk features `(b, n)` used by the image-alignment proxy.
    fn image_features(&self, img: &Image) -> Result<Tensor>;
    /// SHA-256 over every host parameter.
    fn host_checksum(&self) -> Result<String>;

    fn descriptor(&self) -> Result<BackendDescriptor> {
        Ok(BackendDescriptor {
            kind: self.kind().to_string(),
            host_checksum: self.host_checksum()?,
            latent_space: self.kind() != "toy",
        })
    }

    /// Prompt features with `delta` applied at `-beta`; `beta = -1` gives the
    /// reconstruction form, `beta = 0` or no delta the frozen encoding.
    fn encode_text(&self, prompt: &str, delta: Option<&LoraAdapter>, beta: f64) -> Result<Tensor> {
        crate::lora::check_beta(beta)?;
        let stack = match delta {
            Some(d) => AdapterStack::single(d, -beta),
            None => AdapterStack::empty(),
        };
        self.encode_text_with(prompt, &stack)
    }

    /// Noise prediction at timestep `t` with `u` scaled by `gamma`.
    fn predict_noise(
        &self,
        x_t: &Tensor,
        t: usize,
        text: &Tensor,
        u: Option<&LoraAdapter>,
        gamma: f64,
    ) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(DacError::range("gamma", format!("{gamma} not in [0, 1]")));
        }
        let stack = match u {
            Some(u) => AdapterStack::single(u, gamma),
            None => AdapterStack::empty(),
        };
        let b = x_t.dim(0)?;
        self.predict_noise_with(x_t, &vec![t; b], text, &stack)
    }
}

/// How the generator adapter is weighted along the sampling trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum GammaMode {
    Constant(f64),
    /// The annealing schedule with the given floor.
    Annealed(f64),
}

impl GammaMode {
    pub fn at(self, t: usize, t_max: usize) -> Result<f64> {
        match self {
            GammaMode::Constant(g) => Ok(g),
            GammaMode::Annealed(eta) => gamma_schedule(t, t_max, eta),
        }
    }
}

/// Seeded starting noise for `n` samples.
pub fn initial_noise(backend: &dyn GeneratorBackend, n: usize, seed: u64) -> Result<Tensor> {
    let (c, h, w) = backend.latent_shape();
    seeded_gaussian((n, c, h, w), backend.dtype(), backend.device(), seed)
}

/// DDIM sampling from `x_t_max` with fixed text features and an optional
/// generator adapter weighted per timestep.
pub fn sample(
    backend: &dyn GeneratorBackend,
    text: &Tensor,
    x_t_max: &Tensor,
    steps: usize,
    u: Option<&LoraAdapter>,
    gamma: GammaMode,
) -> Result<Tensor> {
    let sched = backend.schedule();
    let t_max = sched.t_max();
    let predict = |x: &Tensor, t: usize| -> Result<Tensor> {
        let g = gamma.at(t, t_max)?;
        backend.predict_noise(x, t, text, u, g)
    };
    ddim_sample(x_t_max, steps, predict, sched)
}

/// Unadapted samples of `prompt`, `n` at once from one seed.
pub fn generate(backend: &dyn GeneratorBackend, prompt: &str, n: usize, seed: u64, steps: usize) -> Result<Vec<Image>> {
    let text = backend.encode_text(prompt, None, 0.0)?;
    let x = initial_noise(backend, n, seed)?;
    backend.decode_image(&sample(backend, &text, &x, steps, None, GammaMode::Constant(0.0))?)
}

/// Host weights and modules of the shared network.
#[derive(Debug, Clone)]
struct Network {
    arch: ToyArchitecture,
    schedule: NoiseSchedule,
    tokenizer: Tokenizer,
    text: TextEncoder,
    unet: UNet,
    params: BTreeMap<String, Tensor>,
    layers: Vec<HostLayer>,
    device: Device,
    dtype: DType,
}

impl Network {
    fn random(arch: &ToyArchitecture, schedule: NoiseSchedule, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut src = ParamSource::Init {
            rng: &mut rng,
            dtype,
            device: device.clone(),
            out: BTreeMap::new(),
        };
        let mut reg = Registry::default();
        let tokenizer = Tokenizer::new(arch.max_tokens);
        let text = TextEncoder::new(&mut src, &mut reg, tokenizer.vocab_size(), arch.max_tokens, arch.text_dim, arch.text_layers)?;
        let unet = UNet::new(&mut src, &mut reg, arch, dtype)?;
        let ParamSource::Init { out, .. } = src else {
            unreachable!("source constructed as Init")
        };
        Ok(Self {
            arch: arch.clone(),
            schedule,
            tokenizer,
            text,
            unet,
            params: out,
            layers: reg.layers,
            device: device.clone(),
            dtype,
        })
    }

    fn from_params(arch: &ToyArchitecture, schedule: NoiseSchedule, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let first = params
            .values()
            .next()
            .ok_or_else(|| DacError::Validation("weight archive is empty".into()))?;
        let (dtype, device) = (first.dtype(), first.device().clone());
        if let Some((name, _)) = params.iter().find(|(_, t)| t.dtype() != dtype) {
            return Err(DacError::Validation(format!("parameter `{name}` has a mixed dtype")));
        }
        let mut src = ParamSource::Lookup { map: &params, used: 0 };
        let mut reg = Registry::default();
        let tokenizer = Tokenizer::new(arch.max_tokens);
        let text = TextEncoder::new(&mut src, &mut reg, tokenizer.vocab_size(), arch.max_tokens, arch.text_dim, arch.text_layers)?;
        let unet = UNet::new(&mut src, &mut reg, arch, dtype)?;
        let ParamSource::Lookup { used, .. } = src else {
            unreachable!("source constructed as Lookup")
        };
        if used != params.len() {
            return Err(DacError::Validation(format!(
                "archive has {} parameters, the architecture uses {used}",
                params.len()
            )));
        }
        Ok(Self {
            arch: arch.clone(),
            schedule,
            tokenizer,
            text,
            unet,
            params,
            layers: reg.layers,
            device,
            dtype,
        })
    }

    fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let params = self
            .params
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_params(&self.arch, self.schedule.clone(), params)
    }

    fn host_layers(&self, target: AdapterTarget) -> Vec<HostLayer> {
        let prefix = match target {
            AdapterTarget::Generator => "unet.",
            AdapterTarget::TextEncoder => "text.",
        };
        self.layers.iter().filter(|l| l.path.starts_with(prefix)).cloned().collect()
    }

    fn encode_ids(&self, ids: &[Vec<u32>], adapters: &AdapterStack) -> Result<Tensor> {
        let out = self.text.forward(ids, adapters, &self.device)?;
        if !all_finite(&out)? {
            return Err(DacError::Numeric {
                layer: "text encoder".into(),
            });
        }
        Ok(out)
    }

    fn predict(&self, x_t: &Tensor, ts: &[usize], text: &Tensor, adapters: &AdapterStack) -> Result<Tensor> {
        let (c, h, w) = (self.arch.channels, self.arch.image_size, self.arch.image_size);
        let dims = x_t.dims();
        if dims.len() != 4 || dims[1..] != [c, h, w] {
            return Err(DacError::Shape(format!("x_t is {dims:?}, expected (b, {c}, {h}, {w})")));
        }
        if let Some(&t) = ts.iter().find(|&&t| t > self.schedule.t_max()) {
            return Err(DacError::range("timestep", format!("{t} > {}", self.schedule.t_max())));
        }
        let v = self.unet.forward(x_t, ts, text, adapters, false)?;
        let out = self.noise_from_velocity(x_t, ts, &v)?;
        if !all_finite(&out)? {
            // Re-run with per-block checks to name the first offending layer.
            self.unet.forward(x_t, ts, text, adapters, true)?;
            return Err(DacError::Numeric {
                layer: "unet (output)".into(),
            });
        }
        Ok(out)
    }

    /// Per-sample `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` shaped `(b, 1, 1, 1)`.
    fn coefficients(&self, ts: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut signal = Vec::with_capacity(ts.len());
        let mut noise = Vec::with_capacity(ts.len());
        for &t in ts {
            let ab = self.schedule.alpha_bar(t)?;
            signal.push(ab.sqrt());
            noise.push((1.0 - ab).max(0.0).sqrt());
        }
        let shape = (ts.len(), 1, 1, 1);
        let as_tensor = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, &self.device)?.to_dtype(self.dtype)?)
        };
        Ok((as_tensor(signal)?, as_tensor(noise)?))
    }

    /// The UNet regresses the velocity `v = sqrt(ab) eps - sqrt(1 - ab) x0`;
    /// the noise follows as `eps = sqrt(1 - ab) x_t + sqrt(ab) v`. At high
    /// noise levels this makes `eps ~ x_t` free instead of learned.
    fn noise_from_velocity(&self, x_t: &Tensor, ts: &[usize], v: &Tensor) -> Result<Tensor> {
        let (signal, noise) = self.coefficients(ts)?;
        Ok((x_t.broadcast_mul(&noise)? + v.broadcast_mul(&signal)?)?)
    }

    /// Training target of the UNet for `(x0, eps)` at `ts`.
    fn velocity_target(&self, x0: &Tensor, eps: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (signal, noise) = self.coefficients(ts)?;
        Ok((eps.broadcast_mul(&signal)? - x0.broadcast_mul(&noise)?)?)
    }

    fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            hash_tensor(&mut h, t)?;
        }
        Ok(hex::encode(h.finalize()))
    }

    fn pixels_to_x0(&self, img: &Image) -> Result<Tensor> {
        let s = self.arch.image_size;
        if img.width() != s || img.height() != s {
            return Err(DacError::Validation(format!(
                "image is {}x{}, backend expects {s}x{s}",
                img.width(),
                img.height()
            )));
        }
        Ok(((img.to_tensor(self.dtype, &self.device)? * 2.0)? - 1.0)?)
    }
}

/// Pixel-space backend trained on the synthetic corpus: `x0 = 2 I - 1`.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    net: Network,
}

impl ToyBackend {
    /// Untrained network with seeded random weights.
    pub fn random(arch: &ToyArchitecture, schedule: NoiseSchedule, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            net: Network::random(arch, schedule, seed, dtype, device)?,
        })
    }

    pub fn from_params(arch: &ToyArchitecture, schedule: NoiseSchedule, params: BTreeMap<String, Tensor>) -> Result<Self> {
        Ok(Self {
            net: Network::from_params(arch, schedule, params)?,
        })
    }

    pub fn architecture(&self) -> &ToyArchitecture {
        &self.net.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.net.params
    }

    /// Same weights in another precision (used by derivative checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            net: self.net.to_dtype(dtype)?,
        })
    }

    /// Batched text features for already tokenized prompts.
    pub fn encode_ids(&self, ids: &[Vec<u32>], adapters: &AdapterStack) -> Result<Tensor> {
        self.net.encode_ids(ids, adapters)
    }
}

impl GeneratorBackend for ToyBackend {
    fn kind(&self) -> &str {
        "toy"
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.net.schedule
    }

    fn device(&self) -> &Device {
        &self.net.device
    }

    fn dtype(&self) -> DType {
        self.net.dtype
    }

    fn image_size(&self) -> usize {
        self.net.arch.image_size
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.net.arch.image_size;
        (self.net.arch.channels, s, s)
    }

    fn host_layers(&self, target: AdapterTarget) -> Vec<HostLayer> {
        self.net.host_layers(target)
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.net.tokenizer
    }

    fn encode_text_with(&self, prompt: &str, adapters: &AdapterStack) -> Result<Tensor> {
        let ids = self.net.tokenizer.encode(prompt)?;
        self.net.encode_ids(&[ids], adapters)
    }

    fn encode_unconditional(&self, adapters: &AdapterStack) -> Result<Tensor> {
        self.net.encode_ids(&[self.net.tokenizer.empty()], adapters)
    }

    fn predict_noise_with(&self, x_t: &Tensor, ts: &[usize], text: &Tensor, adapters: &AdapterStack) -> Result<Tensor> {
        self.net.predict(x_t, ts, text, adapters)
    }

    fn encode_image(&self, img: &Image) -> Result<Tensor> {
        self.net.pixels_to_x0(img)
    }

    fn decode_image(&self, x0: &Tensor) -> Result<Vec<Image>> {
        Image::from_batch(&((x0 + 1.0)? / 2.0)?)
    }

    fn image_features(&self, img: &Image) -> Result<Tensor> {
        self.net.unet.trunk_features(&self.net.pixels_to_x0(img)?)
    }

    fn host_checksum(&self) -> Result<String> {
        self.net.checksum()
    }
}

/// Affine map between images and the latent space the network was trained in:
/// `latent = scale * (2 I - 1) + shift`. A learned autoencoder would sit
/// behind the same two hooks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentCodec {
    pub scale: f64,
    pub shift: f64,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self { scale: 1.0, shift: 0.0 }
    }
}

/// Stored alongside external weights: everything needed to rebuild the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub format: String,
    pub architecture: ToyArchitecture,
    pub schedule: ScheduleConfig,
    pub codec: LatentCodec,
    /// Pinned sample recorded when the weights were exported.
    pub reference: Option<ReferenceSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSample {
    pub prompt: String,
    pub seed: u64,
    pub steps: usize,
    /// SHA-256 of the sampled latent.
    pub checksum: String,
}

pub const EXTERNAL_FORMAT: &str = "dac-external-backend";
pub const EXTERNAL_CONFIG: &str = "config.json";
pub const EXTERNAL_WEIGHTS: &str = "weights.safetensors";

/// Backend built from weights on disk, operating in a latent space.
#[derive(Debug, Clone)]
pub struct ExternalBackend {
    net: Network,
    codec: LatentCodec,
    config: ExternalConfig,
    source: PathBuf,
}

impl ExternalBackend {
    pub fn load(weights_path: &Path, config: ExternalConfig, device: &Device) -> Result<Self> {
        if config.format != EXTERNAL_FORMAT {
            return Err(DacError::load(weights_path, format!("unknown backend format `{}`", config.format)));
        }
        if !weights_path.is_file() {
            return Err(DacError::load(weights_path, "weights file not found"));
        }
        if !(config.codec.scale.is_finite() && config.codec.scale != 0.0 && config.codec.shift.is_finite()) {
            return Err(DacError::load(weights_path, "latent codec must have a finite nonzero scale"));
        }
        let (params, _) = archive::load(weights_path, device)?;
        let schedule = NoiseSchedule::from_config(&config.schedule).map_err(|e| DacError::load(weights_path, e))?;
        let net = Network::from_params(&config.architecture, schedule, params).map_err(|e| DacError::load(weights_path, e))?;
        Ok(Self {
            net,
            codec: config.codec,
            config,
            source: weights_path.to_path_buf(),
        })
    }

    /// Loads `config.json` and `weights.safetensors` from a directory.
    pub fn load_dir(dir: &Path, device: &Device) -> Result<Self> {
        let cfg_path = dir.join(EXTERNAL_CONFIG);
        let bytes = std::fs::read(&cfg_path).map_err(|e| DacError::load(&cfg_path, e))?;
        let config: ExternalConfig = serde_json::from_slice(&bytes).map_err(|e| DacError::load(&cfg_path, e))?;
        Self::load(&dir.join(EXTERNAL_WEIGHTS), config, device)
    }

    /// Writes a toy network in the external layout with the given codec and a
    /// pinned reference sample. The network is used as-is in latent space.
    pub fn export(toy: &ToyBackend, codec: LatentCodec, dir: &Path, reference_prompt: &str, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let weights = dir.join(EXTERNAL_WEIGHTS);
        let mut meta = archive::Metadata::new();
        meta.insert("format".into(), EXTERNAL_FORMAT.into());
        archive::save(&weights, toy.params(), &meta)?;
        let mut config = ExternalConfig {
            format: EXTERNAL_FORMAT.into(),
            architecture: toy.architecture().clone(),
            schedule: toy.schedule().config().clone(),
            codec,
            reference: None,
        };
        let backend = Self::load(&weights, config.clone(), toy.device())?;
        let steps = 10;
        config.reference = Some(ReferenceSample {
            prompt: reference_prompt.into(),
            seed,
            steps,
            checksum: backend.reference_checksum(reference_prompt, seed, steps)?,
        });
        crate::tensor_util::atomic_write(&dir.join(EXTERNAL_CONFIG), &serde_json::to_vec_pretty(&config)?)?;
        Self::load(&weights, config, toy.device())
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    fn reference_checksum(&self, prompt: &str, seed: u64, steps: usize) -> Result<String> {
        let text = self.encode_text(prompt, None, 0.0)?;
        let x = initial_noise(self, 1, seed)?;
        let out = sample(self, &text, &x, steps, None, GammaMode::Constant(0.0))?;
        let mut h = Sha256::new();
        hash_tensor(&mut h, &out)?;
        Ok(hex::encode(h.finalize()))
    }

    /// Re-samples the pinned reference and compares checksums. Returns
    /// `Ok(false)` on mismatch and an error when no reference was recorded.
    pub fn verify_reference(&self) -> Result<bool> {
        let r = self
            .config
            .reference
            .as_ref()
            .ok_or_else(|| DacError::State("backend config has no reference sample".into()))?;
        Ok(self.reference_checksum(&r.prompt, r.seed, r.steps)? == r.checksum)
    }
}

impl GeneratorBackend for ExternalBackend {
    fn kind(&self) -> &str {
        "external"
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.net.schedule
    }

    fn device(&self) -> &Device {
        &self.net.device
    }

    fn dtype(&self) -> DType {
        self.net.dtype
    }

    fn image_size(&self) -> usize {
        self.net.arch.image_size
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.net.arch.image_size;
        (self.net.arch.channels, s, s)
    }

    fn host_layers(&self, target: AdapterTarget) -> Vec<HostLayer> {
        self.net.host_layers(target)
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.net.tokenizer
    }

    fn encode_text_with(&self, prompt: &str, adapters: &AdapterStack) -> Result<Tensor> {
        let ids = self.net.tokenizer.encode(prompt)?;
        self.net.encode_ids(&[ids], adapters)
    }

    fn encode_unconditional(&self, adapters: &AdapterStack) -> Result<Tensor> {
        self.net.encode_ids(&[self.net.tokenizer.empty()], adapters)
    }

    fn predict_noise_with(&self, x_t: &Tensor, ts: &[usize], text: &Tensor, adapters: &AdapterStack) -> Result<Tensor> {
        self.net.predict(x_t, ts, text, adapters)
    }

    fn encode_image(&self, img: &Image) -> Result<Tensor> {
        Ok(((self.net.pixels_to_x0(img)? * self.codec.scale)? + self.codec.shift)?)
    }

    fn decode_image(&self, x0: &Tensor) -> Result<Vec<Image>> {
        let pixels = ((x0 - self.codec.shift)? / self.codec.scale)?;
        Image::from_batch(&((pixels + 1.0)? / 2.0)?)
    }

    fn image_features(&self, img: &Image) -> Result<Tensor> {
        self.net.unet.trunk_features(&self.encode_image(img)?)
    }

    fn host_checksum(&self) -> Result<String> {
        self.net.checksum()
    }
}

/// Per-sample generator-adapter scale for a batch of timesteps.
pub(crate) fn per_sample_gamma(ts: &[usize], t_max: usize, eta: f64) -> Result<LoraScale> {
    Ok(LoraScale::PerSample(
        ts.iter().map(|&t| gamma_schedule(t, t_max, eta)).collect::<Result<_>>()?,
    ))
}

/// Which kind of backend a model directory holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Toy,
    External,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Toy => "toy",
            BackendKind::External => "external",
        }
    }

    /// Abduction settings suited to the backend.
    pub fn abduction_defaults(self) -> crate::abduction::AbductionConfig {
        match self {
            BackendKind::Toy => crate::abduction::AbductionConfig::toy(),
            BackendKind::External => crate::abduction::AbductionConfig::default(),
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = DacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackendKind::Toy),
            "external" => Ok(BackendKind::External),
            other => Err(DacError::Validation(format!("unknown backend `{other}` (expected toy or external)"))),
        }
    }
}

/// A loaded backend together with the scene vocabulary used to score it.
pub struct LoadedBackend {
    pub kind: BackendKind,
    pub backend: Box<dyn GeneratorBackend>,
    /// The training corpus for toy checkpoints; for external backends the
    /// default vocabulary at the backend resolution.
    pub corpus: corpus::ToyCorpusSpec,
}

pub fn open_backend(kind: BackendKind, dir: &Path, device: &Device) -> Result<LoadedBackend> {
    match kind {
        BackendKind::Toy => {
            let (backend, cfg) = load_toy_backend(dir, device)?;
            Ok(LoadedBackend {
                kind,
                backend: Box::new(backend),
                corpus: cfg.corpus,
            })
        }
        BackendKind::External => {
            let backend = ExternalBackend::load_dir(dir, device)?;
            let corpus = corpus::ToyCorpusSpec::at_resolution(backend.image_size());
            Ok(LoadedBackend {
                kind,
                backend: Box::new(backend),
                corpus,
            })
        }
    }
}

