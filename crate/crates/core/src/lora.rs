//! Low-rank adapters: factor pairs, placement policy, scaled injection into
//! linear and convolutional host layers, negation and on-disk archives.
//!
//! A host layer with weight `W` (shape `d_out x d_in`, convolution kernels
//! flattened to `c_out x (c_in * kh * kw)`) computes `(W + s * A * B) z` where
//! `A` is `d_out x r` and `B` is `r x d_in`. There is no `alpha / r`
//! multiplier. The correction is evaluated as `A (B z)` so a zero `B` adds an
//! exact zero.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::conv::{conv_out_hw, im2col, weight_matmul};
use crate::error::{DacError, Result};
use crate::tensor_util::{gaussian, hash_tensor, to_vec_f64};

/// Standard deviation of the Gaussian init for `A`; `B` starts at zero.
pub const INIT_STD: f64 = 0.02;

const ARCHIVE_FORMAT: &str = "dac-lora";
const ARCHIVE_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Generator,
    TextEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    AttentionOnly,
    #[default]
    AttentionConvFfn,
}

/// Class of a host layer, used by the placement policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Attention,
    Conv,
    Ffn,
}

impl Placement {
    pub fn admits(self, kind: LayerKind) -> bool {
        match self {
            Placement::AttentionOnly => kind == LayerKind::Attention,
            Placement::AttentionConvFfn => true,
        }
    }
}

macro_rules! str_enum {
    ($ty:ty { $($variant:path => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($variant => $name),* }
            }
        }
        impl std::str::FromStr for $ty {
            type Err = DacError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)*
                    other => Err(DacError::Validation(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(AdapterTarget {
    AdapterTarget::Generator => "generator",
    AdapterTarget::TextEncoder => "text_encoder",
});

str_enum!(Placement {
    Placement::AttentionOnly => "attention_only",
    Placement::AttentionConvFfn => "attention_conv_ffn",
});

/// Description of an injectable host layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostLayer {
    pub path: String,
    pub kind: LayerKind,
    pub d_out: usize,
    /// Input width; `c_in * kh * kw` for convolutions.
    pub d_in: usize,
    pub kernel: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct LoraFactorPair {
    layer_path: String,
    a: Tensor,
    b: Tensor,
}

impl LoraFactorPair {
    pub fn new(layer_path: impl Into<String>, a: Tensor, b: Tensor) -> Result<Self> {
        let layer_path = layer_path.into();
        let (d_out, r) = a.dims2()?;
        let (r_b, d_in) = b.dims2()?;
        if r != r_b {
            return Err(DacError::Shape(format!(
                "`{layer_path}`: A is {d_out}x{r} but B is {r_b}x{d_in}"
            )));
        }
        if r == 0 || r > d_out.min(d_in) {
            return Err(DacError::Shape(format!(
                "`{layer_path}`: rank {r} must be in [1, min({d_out}, {d_in})]"
            )));
        }
        if a.dtype() != b.dtype() {
            return Err(DacError::Shape(format!("`{layer_path}`: factor dtypes differ")));
        }
        Ok(Self { layer_path, a, b })
    }

    /// `A ~ N(0, INIT_STD^2)`, `B = 0`; rank is clamped to `min(d_out, d_in)`.
    pub fn init(
        layer: &HostLayer,
        rank: usize,
        dtype: DType,
        device: &Device,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let r = rank.min(layer.d_out).min(layer.d_in).max(1);
        let a = (gaussian((layer.d_out, r), dtype, device, rng)? * INIT_STD)?;
        let b = Tensor::zeros((r, layer.d_in), dtype, device)?;
        Self::new(layer.path.clone(), a, b)
    }

    pub fn layer_path(&self) -> &str {
        &self.layer_path
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.a.dims()[0]
    }

    pub fn d_in(&self) -> usize {
        self.b.dims()[1]
    }

    /// Dense `A * B`.
    pub fn product(&self) -> Result<Tensor> {
        Ok(self.a.matmul(&self.b)?)
    }

    pub fn negated(&self) -> Result<Self> {
        Ok(Self {
            layer_path: self.layer_path.clone(),
            a: self.a.neg()?,
            b: self.b.clone(),
        })
    }

    pub fn is_zero(&self) -> Result<bool> {
        Ok(to_vec_f64(&self.b)?.iter().all(|v| *v == 0.0)
            || to_vec_f64(&self.a)?.iter().all(|v| *v == 0.0))
    }
}

/// Per-layer scale multiplier, either shared by the batch or one per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum LoraScale {
    Uniform(f64),
    PerSample(Vec<f64>),
}

impl LoraScale {
    pub fn is_zero(&self) -> bool {
        match self {
            LoraScale::Uniform(s) => *s == 0.0,
            LoraScale::PerSample(v) => v.iter().all(|s| *s == 0.0),
        }
    }

    /// Multiplies `corr` (leading dimension = batch) by the scale.
    fn apply(&self, corr: &Tensor) -> Result<Tensor> {
        match self {
            LoraScale::Uniform(s) if *s == 1.0 => Ok(corr.clone()),
            LoraScale::Uniform(s) => Ok((corr * *s)?),
            LoraScale::PerSample(v) => {
                let batch = corr.dim(0)?;
                if v.len() != batch {
                    return Err(DacError::Shape(format!(
                        "{} per-sample scales for batch of {batch}",
                        v.len()
                    )));
                }
                let mut shape = vec![batch];
                shape.extend(std::iter::repeat_n(1, corr.rank() - 1));
                let s = Tensor::from_vec(v.clone(), shape, corr.device())?.to_dtype(corr.dtype())?;
                Ok(corr.broadcast_mul(&s)?)
            }
        }
    }
}

impl From<f64> for LoraScale {
    fn from(s: f64) -> Self {
        LoraScale::Uniform(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterMetadata {
    pub target: AdapterTarget,
    pub placement: Placement,
    pub rank: usize,
    pub created_from_session: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    meta: AdapterMetadata,
    pairs: BTreeMap<String, LoraFactorPair>,
}

impl LoraAdapter {
    pub fn new(meta: AdapterMetadata, pairs: Vec<LoraFactorPair>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for pair in pairs {
            let path = pair.layer_path.clone();
            if map.insert(path.clone(), pair).is_some() {
                return Err(DacError::Validation(format!("duplicate layer path `{path}`")));
            }
        }
        Ok(Self { meta, pairs: map })
    }

    /// Fresh adapter over every host layer admitted by `placement`.
    /// Text-encoder adapters only ever cover attention projections.
    pub fn init(
        layers: &[HostLayer],
        target: AdapterTarget,
        placement: Placement,
        rank: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(DacError::Config("adapter rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = layers
            .iter()
            .filter(|l| placement.admits(l.kind))
            .filter(|l| target == AdapterTarget::Generator || l.kind == LayerKind::Attention)
            .map(|l| LoraFactorPair::init(l, rank, dtype, device, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        if pairs.is_empty() {
            return Err(DacError::Config(format!(
                "placement {} admits no host layer",
                placement.as_str()
            )));
        }
        Self::new(
            AdapterMetadata {
                target,
                placement,
                rank,
                created_from_session: None,
            },
            pairs,
        )
    }

    pub fn meta(&self) -> &AdapterMetadata {
        &self.meta
    }

    pub fn target(&self) -> AdapterTarget {
        self.meta.target
    }

    pub fn placement(&self) -> Placement {
        self.meta.placement
    }

    pub fn with_session(mut self, session: impl Into<String>) -> Self {
        self.meta.created_from_session = Some(session.into());
        self
    }

    pub fn pair(&self, path: &str) -> Option<&LoraFactorPair> {
        self.pairs.get(path)
    }

    pub fn pairs(&self) -> impl Iterator<Item = &LoraFactorPair> {
        self.pairs.values()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same adapter with every factor replaced by `f(path, factor)`.
    pub fn map_factors<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&str, char, &Tensor) -> Result<Tensor>,
    {
        let pairs = self
            .pairs
            .values()
            .map(|p| {
                LoraFactorPair::new(
                    p.layer_path.clone(),
                    f(&p.layer_path, 'A', &p.a)?,
                    f(&p.layer_path, 'B', &p.b)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.meta.clone(), pairs)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        self.map_factors(|_, _, t| Ok(t.to_dtype(dtype)?))
    }

    /// All-zero adapter with the same layout.
    pub fn zeroed(&self) -> Result<Self> {
        self.map_factors(|_, _, t| Ok(t.zeros_like()?))
    }

    /// Frobenius norm of the stacked effective corrections `A * B`.
    pub fn contribution_norm(&self) -> Result<f64> {
        let mut acc = 0.0;
        for p in self.pairs.values() {
            acc += to_vec_f64(&p.product()?)?.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(acc.sqrt())
    }

    /// SHA-256 over metadata and factor bytes.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.meta)?);
        for p in self.pairs.values() {
            h.update(p.layer_path.as_bytes());
            hash_tensor(&mut h, &p.a)?;
            hash_tensor(&mut h, &p.b)?;
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Checks every pair against the host layers it claims to adapt.
    pub fn validate_against(&self, layers: &[HostLayer]) -> Result<()> {
        let by_path: BTreeMap<&str, &HostLayer> =
            layers.iter().map(|l| (l.path.as_str(), l)).collect();
        for p in self.pairs.values() {
            let host = by_path.get(p.layer_path()).ok_or_else(|| {
                DacError::Validation(format!("adapter layer `{}` has no host", p.layer_path()))
            })?;
            if host.d_out != p.d_out() || host.d_in != p.d_in() {
                return Err(DacError::Shape(format!(
                    "`{}`: host is {}x{}, adapter is {}x{}",
                    p.layer_path(),
                    host.d_out,
                    host.d_in,
                    p.d_out(),
                    p.d_in()
                )));
            }
        }
        Ok(())
    }
}

/// An ordered set of adapters and the scales they apply at.
#[derive(Debug, Clone, Default)]
pub struct AdapterStack<'a> {
    entries: Vec<(&'a LoraAdapter, LoraScale)>,
}

impl<'a> AdapterStack<'a> {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(adapter: &'a LoraAdapter, scale: impl Into<LoraScale>) -> Self {
        Self::empty().with(adapter, scale)
    }

    pub fn with(mut self, adapter: &'a LoraAdapter, scale: impl Into<LoraScale>) -> Self {
        self.entries.push((adapter, scale.into()));
        self
    }

    pub fn push(&mut self, adapter: &'a LoraAdapter, scale: impl Into<LoraScale>) {
        self.entries.push((adapter, scale.into()));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &'a LoraAdapter> + '_ {
        self.entries.iter().map(|(a, _)| *a)
    }

    /// Non-zero-scaled pairs attached to `path`.
    pub fn lookup<'s>(&'s self, path: &'s str) -> impl Iterator<Item = (&'a LoraFactorPair, &'s LoraScale)> + 's {
        self.entries
            .iter()
            .filter(|(_, s)| !s.is_zero())
            .filter_map(move |(a, s)| a.pair(path).map(|p| (p, s)))
    }
}

fn linear_2d(z: &Tensor, w: &Tensor) -> Result<Tensor> {
    let d_in = *z.dims().last().unwrap_or(&0);
    if w.dim(1)? != d_in {
        return Err(DacError::Shape(format!(
            "linear input width {d_in} vs weight {:?}",
            w.dims()
        )));
    }
    let lead: Vec<usize> = z.dims()[..z.rank() - 1].to_vec();
    let rows: usize = lead.iter().product();
    let out = z.reshape((rows, d_in))?.matmul(&w.t()?)?;
    let mut shape = lead;
    shape.push(w.dim(0)?);
    Ok(out.reshape(shape)?)
}

/// `(W + sum_i s_i A_i B_i) z + bias` over the last axis of `z`.
pub(crate) fn linear_with_adapters<'p>(
    z: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    adapters: impl IntoIterator<Item = (&'p LoraFactorPair, &'p LoraScale)>,
) -> Result<Tensor> {
    let mut out = linear_2d(z, w)?;
    for (pair, scale) in adapters {
        if pair.d_out() != w.dim(0)? || pair.d_in() != w.dim(1)? {
            return Err(DacError::Shape(format!(
                "`{}`: adapter {}x{} on host {:?}",
                pair.layer_path(),
                pair.d_out(),
                pair.d_in(),
                w.dims()
            )));
        }
        let corr = linear_2d(&linear_2d(z, pair.b())?, pair.a())?;
        out = (out + scale.apply(&corr)?)?;
    }
    match bias {
        Some(b) => Ok(out.broadcast_add(b)?),
        None => Ok(out),
    }
}

/// `(W + scale * A * B) z`.
pub fn adapted_linear(z: &Tensor, w: &Tensor, pair: &LoraFactorPair, scale: f64) -> Result<Tensor> {
    let scale = LoraScale::Uniform(scale);
    let adapters = (!scale.is_zero()).then_some((pair, &scale));
    linear_with_adapters(z, w, None, adapters)
}

/// Text-encoder projection under an edit weight: `(W - beta * A * B) y`.
/// `beta = -1` is the reconstruction form, `beta = +1` the full edit.
pub fn text_adapted(y: &Tensor, w: &Tensor, pair: &LoraFactorPair, beta: f64) -> Result<Tensor> {
    check_beta(beta)?;
    adapted_linear(y, w, pair, -beta)
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&beta) {
        return Err(DacError::Config(format!("beta {beta} not in [-1, 1]")));
    }
    Ok(())
}

/// Convolution geometry shared by the host and its correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

/// Host convolution plus the factored low-rank corrections: the input is
/// unfolded once into patch columns, the host kernel and each `B` (a
/// `kh x kw` convolution into `r` channels) act on the same columns, and `A`
/// maps the `r` channels back like a `1 x 1` convolution.
pub(crate) fn conv_with_adapters<'p>(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeometry,
    adapters: impl IntoIterator<Item = (&'p LoraFactorPair, &'p LoraScale)>,
) -> Result<Tensor> {
    let (c_out, c_in, kh, kw) = w.dims4()?;
    let (b, c_x, h, wd) = x.dims4()?;
    if c_x != c_in {
        return Err(DacError::Shape(format!(
            "conv input has {c_x} channels, kernel expects {c_in}"
        )));
    }
    let cols = im2col(x, kh, kw, geom.stride, geom.padding)?;
    let (oh, ow) = conv_out_hw(h, wd, kh, kw, geom.stride, geom.padding);
    let mut out = weight_matmul(&w.reshape((c_out, c_in * kh * kw))?, &cols)?;
    for (pair, scale) in adapters {
        if pair.d_out() != c_out || pair.d_in() != c_in * kh * kw {
            return Err(DacError::Shape(format!(
                "`{}`: adapter {}x{} on kernel {:?}",
                pair.layer_path(),
                pair.d_out(),
                pair.d_in(),
                w.dims()
            )));
        }
        let corr = weight_matmul(pair.a(), &weight_matmul(pair.b(), &cols)?)?;
        out = (out + scale.apply(&corr)?)?;
    }
    let out = out.reshape((b, c_out, oh, ow))?;
    match bias {
        Some(bias) => Ok(out.broadcast_add(&bias.reshape((1, c_out, 1, 1))?)?),
        None => Ok(out),
    }
}

/// Host convolution plus `scale` times the low-rank correction.
pub fn conv_adapted(
    x: &Tensor,
    w: &Tensor,
    pair: &LoraFactorPair,
    scale: f64,
    geom: ConvGeometry,
) -> Result<Tensor> {
    let scale = LoraScale::Uniform(scale);
    let adapters = (!scale.is_zero()).then_some((pair, &scale));
    conv_with_adapters(x, w, None, geom, adapters)
}

/// Annealing weight on the generator adapter:
/// `(1 - eta) / t_max^2 * (t - t_max)^2 + eta`, from 1 at `t = 0` to `eta` at `t_max`.
pub fn gamma_schedule(t: usize, t_max: usize, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    if t_max == 0 || t > t_max {
        return Err(DacError::range("timestep", format!("{t} not in [0, {t_max}]")));
    }
    // Evaluated as `eta + (1 - eta) * s` so both endpoints are exact.
    let s = ((t_max - t) as f64 / t_max as f64).powi(2);
    Ok(eta + (1.0 - eta) * s)
}

pub fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(DacError::Config(format!("eta {eta} not in (0, 1]")));
    }
    Ok(())
}

/// Adapter with every effective correction `A * B` negated (one factor flipped).
pub fn negate(adapter: &LoraAdapter) -> Result<LoraAdapter> {
    let pairs = adapter
        .pairs()
        .map(LoraFactorPair::negated)
        .collect::<Result<Vec<_>>>()?;
    LoraAdapter::new(adapter.meta.clone(), pairs)
}

pub fn encode_adapter(adapter: &LoraAdapter) -> Result<Vec<u8>> {
    let (tensors, meta) = adapter_archive(adapter)?;
    archive::encode(&tensors, &meta)
}

fn adapter_archive(adapter: &LoraAdapter) -> Result<(BTreeMap<String, Tensor>, archive::Metadata)> {
    let mut tensors = BTreeMap::new();
    for p in adapter.pairs() {
        tensors.insert(format!("{}.A", p.layer_path), p.a.clone());
        tensors.insert(format!("{}.B", p.layer_path), p.b.clone());
    }
    let mut meta = archive::Metadata::new();
    meta.insert("format".into(), ARCHIVE_FORMAT.into());
    meta.insert("version".into(), ARCHIVE_VERSION.into());
    meta.insert("target".into(), adapter.meta.target.as_str().into());
    meta.insert("placement".into(), adapter.meta.placement.as_str().into());
    meta.insert("rank".into(), adapter.meta.rank.to_string());
    meta.insert(
        "created_from_session".into(),
        adapter.meta.created_from_session.clone().unwrap_or_default(),
    );
    Ok((tensors, meta))
}

pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    let (tensors, meta) = adapter_archive(adapter)?;
    archive::save(path, &tensors, &meta)
}

pub fn decode_adapter(bytes: &[u8], device: &Device, origin: &Path) -> Result<LoraAdapter> {
    let (tensors, meta) = archive::decode(bytes, device, origin)?;
    let field = |key: &str| {
        meta.get(key)
            .cloned()
            .ok_or_else(|| DacError::load(origin, format!("metadata missing `{key}`")))
    };
    if field("format")? != ARCHIVE_FORMAT {
        return Err(DacError::load(origin, "not a LoRA adapter archive"));
    }
    let version = field("version")?;
    if version != ARCHIVE_VERSION {
        return Err(DacError::load(
            origin,
            format!("adapter archive version {version}, expected {ARCHIVE_VERSION}"),
        ));
    }
    let bad = |e: DacError| DacError::load(origin, e);
    let session = field("created_from_session")?;
    let adapter_meta = AdapterMetadata {
        target: field("target")?.parse().map_err(bad)?,
        placement: field("placement")?.parse().map_err(bad)?,
        rank: field("rank")?
            .parse()
            .map_err(|e| DacError::load(origin, format!("bad rank: {e}")))?,
        created_from_session: (!session.is_empty()).then_some(session),
    };
    let mut a_factors = BTreeMap::new();
    let mut b_factors = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(path) = name.strip_suffix(".A") {
            a_factors.insert(path.to_string(), t);
        } else if let Some(path) = name.strip_suffix(".B") {
            b_factors.insert(path.to_string(), t);
        } else {
            return Err(DacError::load(origin, format!("unexpected tensor `{name}`")));
        }
    }
    let mut pairs = Vec::with_capacity(a_factors.len());
    for (path, a) in a_factors {
        let b = b_factors
            .remove(&path)
            .ok_or_else(|| DacError::load(origin, format!("`{path}` has no B factor")))?;
        pairs.push(LoraFactorPair::new(path, a, b).map_err(bad)?);
    }
    if let Some(path) = b_factors.keys().next() {
        return Err(DacError::load(origin, format!("`{path}` has no A factor")));
    }
    LoraAdapter::new(adapter_meta, pairs).map_err(bad)
}

pub fn load_adapter(path: &Path, device: &Device) -> Result<LoraAdapter> {
    let bytes = std::fs::read(path).map_err(|e| DacError::load(path, e))?;
    decode_adapter(&bytes, device, path)
}
