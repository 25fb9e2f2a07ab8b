//! Host layers with adapter slots and the few functional ops the toy
//! networks need. Normalizations are written with primitive tensor ops so
//! that every path is differentiable.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;

use crate::error::{DacError, Result};
use crate::fused::standardize;
pub(crate) use crate::fused::silu;
use crate::lora::{conv_with_adapters, linear_with_adapters, AdapterStack, ConvGeometry, HostLayer, LayerKind};
use crate::tensor_util::gaussian;

pub(crate) enum Init {
    /// Normal with standard deviation `1 / sqrt(fan_in)` times the factor.
    FanIn(f64),
    Zeros,
    Ones,
}

/// Source of named parameters: either a fresh initializer or a loaded map.
pub(crate) enum ParamSource<'a> {
    Init {
        rng: &'a mut ChaCha8Rng,
        dtype: DType,
        device: Device,
        out: BTreeMap<String, Tensor>,
    },
    Lookup {
        map: &'a BTreeMap<String, Tensor>,
        used: usize,
    },
}

impl ParamSource<'_> {
    pub(crate) fn get(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<Tensor> {
        match self {
            ParamSource::Init {
                rng,
                dtype,
                device,
                out,
            } => {
                let t = match init {
                    Init::FanIn(factor) => {
                        (gaussian(shape, *dtype, device, rng)? * (factor / (fan_in as f64).sqrt()))?
                    }
                    Init::Zeros => Tensor::zeros(shape, *dtype, device)?,
                    Init::Ones => Tensor::ones(shape, *dtype, device)?,
                };
                out.insert(name.to_string(), t.clone());
                Ok(t)
            }
            ParamSource::Lookup { map, used } => {
                let t = map
                    .get(name)
                    .ok_or_else(|| DacError::Validation(format!("missing parameter `{name}`")))?;
                if t.dims() != shape {
                    return Err(DacError::Shape(format!(
                        "parameter `{name}` is {:?}, architecture expects {shape:?}",
                        t.dims()
                    )));
                }
                *used += 1;
                Ok(t.clone())
            }
        }
    }
}

/// Records every adapter-capable layer created while building a network.
#[derive(Default)]
pub(crate) struct Registry {
    pub layers: Vec<HostLayer>,
}

#[derive(Debug, Clone)]
pub(crate) struct HostLinear {
    path: String,
    weight: Tensor,
    bias: Option<Tensor>,
}

impl HostLinear {
    pub(crate) fn new(
        src: &mut ParamSource,
        reg: &mut Registry,
        path: &str,
        d_in: usize,
        d_out: usize,
        kind: LayerKind,
        init_factor: f64,
    ) -> Result<Self> {
        let weight = src.get(&format!("{path}.weight"), &[d_out, d_in], d_in, Init::FanIn(init_factor))?;
        let bias = Some(src.get(&format!("{path}.bias"), &[d_out], d_in, Init::Zeros)?);
        reg.layers.push(HostLayer {
            path: path.to_string(),
            kind,
            d_out,
            d_in,
            kernel: None,
        });
        Ok(Self {
            path: path.to_string(),
            weight,
            bias,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, adapters: &AdapterStack) -> Result<Tensor> {
        linear_with_adapters(x, &self.weight, self.bias.as_ref(), adapters.lookup(&self.path))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct HostConv {
    path: String,
    weight: Tensor,
    bias: Tensor,
    geom: ConvGeometry,
}

impl HostConv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        src: &mut ParamSource,
        reg: &mut Registry,
        path: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        init_factor: f64,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = src.get(&format!("{path}.weight"), &[c_out, c_in, k, k], fan_in, Init::FanIn(init_factor))?;
        let bias = src.get(&format!("{path}.bias"), &[c_out], fan_in, Init::Zeros)?;
        reg.layers.push(HostLayer {
            path: path.to_string(),
            kind: LayerKind::Conv,
            d_out: c_out,
            d_in: fan_in,
            kernel: Some((k, k)),
        });
        Ok(Self {
            path: path.to_string(),
            weight,
            bias,
            geom: ConvGeometry {
                stride: 1,
                padding: k / 2,
            },
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, adapters: &AdapterStack) -> Result<Tensor> {
        conv_with_adapters(x, &self.weight, Some(&self.bias), self.geom, adapters.lookup(&self.path))
    }
}

/// Affine normalization over the trailing axis.
#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub(crate) fn new(src: &mut ParamSource, path: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: src.get(&format!("{path}.weight"), &[dim], dim, Init::Ones)?,
            bias: src.get(&format!("{path}.bias"), &[dim], dim, Init::Zeros)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = standardize(x, NORM_EPS)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    pub(crate) fn new(src: &mut ParamSource, path: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(channels).max(1);
        if !channels.is_multiple_of(groups) {
            return Err(DacError::Config(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            groups,
            weight: src.get(&format!("{path}.weight"), &[channels], channels, Init::Ones)?,
            bias: src.get(&format!("{path}.bias"), &[channels], channels, Init::Zeros)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let grouped = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let normed = standardize(&grouped, NORM_EPS)?.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Single-head scaled dot-product attention over `(batch, tokens, dim)`.
pub(crate) fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dim = q.dim(D::Minus1)? as f64;
    let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / dim.sqrt())?;
    let weights = softmax_last(&scores)?;
    Ok(weights.matmul(&v.contiguous()?)?)
}

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Sinusoidal embedding of integer timesteps, `(batch, dim)`.
pub(crate) fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}
