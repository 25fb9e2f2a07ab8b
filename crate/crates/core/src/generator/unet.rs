//! Small U-shaped noise-prediction network with one cross-attention block per
//! resolution attending to the text features.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::nn::{attention, silu, timestep_embedding, GroupNorm, HostConv, HostLinear, LayerNorm, ParamSource, Registry};
use crate::error::{DacError, Result};
use crate::lora::{AdapterStack, LayerKind};
use crate::tensor_util::all_finite;

/// Shape hyper-parameters of the toy networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyArchitecture {
    pub image_size: usize,
    pub channels: usize,
    /// Channel width at each of the three resolutions.
    pub widths: [usize; 3],
    pub time_dim: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub max_tokens: usize,
    pub norm_groups: usize,
}

impl Default for ToyArchitecture {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            widths: [16, 32, 64],
            time_dim: 64,
            text_dim: 32,
            text_layers: 2,
            max_tokens: 8,
            norm_groups: 8,
        }
    }
}

impl ToyArchitecture {
    /// A very small variant for fast interface tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            channels: 3,
            widths: [4, 8, 8],
            time_dim: 8,
            text_dim: 8,
            text_layers: 1,
            max_tokens: 8,
            norm_groups: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(4) || self.image_size < 4 {
            return Err(DacError::Config(format!(
                "image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.widths.contains(&0) || self.time_dim < 2 || self.text_dim == 0 {
            return Err(DacError::Config("network widths must be positive".into()));
        }
        if self.max_tokens == 0 || self.text_layers == 0 {
            return Err(DacError::Config("text encoder must have tokens and layers".into()));
        }
        Ok(())
    }
}

fn guard(t: Tensor, layer: &str, check: bool) -> Result<Tensor> {
    if check && !all_finite(&t)? {
        return Err(DacError::Numeric { layer: layer.into() });
    }
    Ok(t)
}

#[derive(Debug, Clone)]
struct ResBlock {
    path: String,
    norm1: GroupNorm,
    conv1: HostConv,
    temb: HostLinear,
    norm2: GroupNorm,
    conv2: HostConv,
    skip: Option<HostConv>,
}

impl ResBlock {
    fn new(src: &mut ParamSource, reg: &mut Registry, path: &str, c_in: usize, c_out: usize, arch: &ToyArchitecture) -> Result<Self> {
        let g = arch.norm_groups;
        Ok(Self {
            path: path.into(),
            norm1: GroupNorm::new(src, &format!("{path}.norm1"), c_in, g)?,
            conv1: HostConv::new(src, reg, &format!("{path}.conv1"), c_in, c_out, 3, 1.0)?,
            temb: HostLinear::new(src, reg, &format!("{path}.temb"), arch.time_dim, c_out, LayerKind::Ffn, 1.0)?,
            norm2: GroupNorm::new(src, &format!("{path}.norm2"), c_out, g)?,
            conv2: HostConv::new(src, reg, &format!("{path}.conv2"), c_out, c_out, 3, 0.5)?,
            skip: (c_in != c_out)
                .then(|| HostConv::new(src, reg, &format!("{path}.skip"), c_in, c_out, 1, 1.0))
                .transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, ad: &AdapterStack, check: bool) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?, ad)?;
        let t = self.temb.forward(temb, ad)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?, ad)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x, ad)?,
            None => x.clone(),
        };
        guard((h + skip)?, &self.path, check)
    }
}

#[derive(Debug, Clone)]
struct CrossAttnBlock {
    path: String,
    norm: GroupNorm,
    q: HostLinear,
    k: HostLinear,
    v: HostLinear,
    o: HostLinear,
    ln: LayerNorm,
    fc1: HostLinear,
    fc2: HostLinear,
}

impl CrossAttnBlock {
    fn new(src: &mut ParamSource, reg: &mut Registry, path: &str, c: usize, arch: &ToyArchitecture) -> Result<Self> {
        let d = arch.text_dim;
        Ok(Self {
            path: path.into(),
            norm: GroupNorm::new(src, &format!("{path}.norm"), c, arch.norm_groups)?,
            q: HostLinear::new(src, reg, &format!("{path}.attn.q"), c, c, LayerKind::Attention, 1.0)?,
            k: HostLinear::new(src, reg, &format!("{path}.attn.k"), d, c, LayerKind::Attention, 1.0)?,
            v: HostLinear::new(src, reg, &format!("{path}.attn.v"), d, c, LayerKind::Attention, 1.0)?,
            o: HostLinear::new(src, reg, &format!("{path}.attn.o"), c, c, LayerKind::Attention, 0.5)?,
            ln: LayerNorm::new(src, &format!("{path}.ffn.ln"), c)?,
            fc1: HostLinear::new(src, reg, &format!("{path}.ffn.fc1"), c, 2 * c, LayerKind::Ffn, 1.0)?,
            fc2: HostLinear::new(src, reg, &format!("{path}.ffn.fc2"), 2 * c, c, LayerKind::Ffn, 0.5)?,
        })
    }

    fn forward(&self, x: &Tensor, text: &Tensor, ad: &AdapterStack, check: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.q.forward(&tokens, ad)?;
        let k = self.k.forward(text, ad)?;
        let v = self.v.forward(text, ad)?;
        let attended = self.o.forward(&attention(&q, &k, &v)?, ad)?;
        let resid = (x.reshape((b, c, h * w))?.transpose(1, 2)? + attended)?;
        let ff = self.fc2.forward(&silu(&self.fc1.forward(&self.ln.forward(&resid)?, ad)?)?, ad)?;
        let out = (resid + ff)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        guard(out, &self.path, check)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct UNet {
    time_dim: usize,
    dtype: DType,
    time1: HostLinear,
    time2: HostLinear,
    conv_in: HostConv,
    down0: (ResBlock, CrossAttnBlock),
    down1: (ResBlock, CrossAttnBlock),
    mid: (ResBlock, CrossAttnBlock),
    up1: (ResBlock, CrossAttnBlock),
    up0: (ResBlock, CrossAttnBlock),
    norm_out: GroupNorm,
    conv_out: HostConv,
}

impl UNet {
    pub(crate) fn new(src: &mut ParamSource, reg: &mut Registry, arch: &ToyArchitecture, dtype: DType) -> Result<Self> {
        let [w0, w1, w2] = arch.widths;
        let td = arch.time_dim;
        let level = |name: &str, c_in: usize, c_out: usize, src: &mut ParamSource, reg: &mut Registry| {
            Ok::<_, DacError>((
                ResBlock::new(src, reg, &format!("unet.{name}.res"), c_in, c_out, arch)?,
                CrossAttnBlock::new(src, reg, &format!("unet.{name}.xattn"), c_out, arch)?,
            ))
        };
        let time1 = HostLinear::new(src, reg, "unet.time.fc1", td, td, LayerKind::Ffn, 1.0)?;
        let time2 = HostLinear::new(src, reg, "unet.time.fc2", td, td, LayerKind::Ffn, 1.0)?;
        let conv_in = HostConv::new(src, reg, "unet.conv_in", arch.channels, w0, 3, 1.0)?;
        let down0 = level("down0", w0, w0, src, reg)?;
        let down1 = level("down1", w0, w1, src, reg)?;
        let mid = level("mid", w1, w2, src, reg)?;
        let up1 = level("up1", w2 + w1, w1, src, reg)?;
        let up0 = level("up0", w1 + w0, w0, src, reg)?;
        Ok(Self {
            time_dim: td,
            dtype,
            time1,
            time2,
            conv_in,
            down0,
            down1,
            mid,
            up1,
            up0,
            norm_out: GroupNorm::new(src, "unet.norm_out", w0, arch.norm_groups)?,
            conv_out: HostConv::new(src, reg, "unet.conv_out", w0, arch.channels, 3, 0.2)?,
        })
    }

    /// Predicted noise for `x_t` `(b, c, h, w)` at per-sample timesteps, given
    /// text features `(b or 1, tokens, dim)`. With `check`, every block's
    /// output is tested for non-finite values and the first offender is named.
    pub(crate) fn forward(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        text: &Tensor,
        ad: &AdapterStack,
        check: bool,
    ) -> Result<Tensor> {
        let (b, ..) = x_t.dims4()?;
        if ts.len() != b {
            return Err(DacError::Shape(format!("{} timesteps for a batch of {b}", ts.len())));
        }
        let text = match text.dim(0)? {
            n if n == b => text.clone(),
            1 => text.broadcast_as((b, text.dim(1)?, text.dim(2)?))?.contiguous()?,
            n => return Err(DacError::Shape(format!("text batch {n} vs image batch {b}"))),
        };
        let temb = timestep_embedding(ts, self.time_dim, self.dtype, x_t.device())?;
        let temb = silu(&self.time2.forward(&silu(&self.time1.forward(&temb, ad)?)?, ad)?)?;
        let temb = guard(temb, "unet.time", check)?;

        let level = |blk: &(ResBlock, CrossAttnBlock), x: &Tensor| -> Result<Tensor> {
            let h = blk.0.forward(x, &temb, ad, check)?;
            blk.1.forward(&h, &text, ad, check)
        };
        let h = guard(self.conv_in.forward(x_t, ad)?, "unet.conv_in", check)?;
        let s0 = level(&self.down0, &h)?;
        let s1 = level(&self.down1, &s0.avg_pool2d(2)?)?;
        let m = level(&self.mid, &s1.avg_pool2d(2)?)?;
        let u1 = level(&self.up1, &Tensor::cat(&[&m.upsample_nearest2d(s1.dim(2)?, s1.dim(3)?)?, &s1], 1)?)?;
        let u0 = level(&self.up0, &Tensor::cat(&[&u1.upsample_nearest2d(s0.dim(2)?, s0.dim(3)?)?, &s0], 1)?)?;
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&u0)?)?, ad)?;
        guard(out, "unet.conv_out", check)
    }

    /// Activations of the frozen downsampling trunk at `t = 0`, flattened per
    /// sample: the output of the first two residual blocks, no attention.
    pub(crate) fn trunk_features(&self, x0: &Tensor) -> Result<Tensor> {
        let ad = AdapterStack::empty();
        let b = x0.dim(0)?;
        let temb = timestep_embedding(&vec![0; b], self.time_dim, self.dtype, x0.device())?;
        let temb = silu(&self.time2.forward(&silu(&self.time1.forward(&temb, &ad)?)?, &ad)?)?;
        let h = self.conv_in.forward(x0, &ad)?;
        let r0 = self.down0.0.forward(&h, &temb, &ad, false)?;
        let r1 = self.down1.0.forward(&r0.avg_pool2d(2)?, &temb, &ad, false)?;
        Ok(Tensor::cat(&[r0.flatten_from(1)?, r1.flatten_from(1)?], 1)?)
    }
}
