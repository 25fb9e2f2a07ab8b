//! Interface contract every [`GeneratorBackend`] must satisfy. Backends are
//! checked with [`check_backend`]; each failed clause is reported by name.

use candle_core::Tensor;

use super::{initial_noise, GeneratorBackend};
use crate::error::{DacError, Result};
use crate::imaging::Image;
use crate::lora::{AdapterTarget, LayerKind, LoraAdapter, Placement};
use crate::tensor_util::{tensor_bytes, to_vec_f64};

fn max_rel_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (a, b) = (to_vec_f64(a)?, to_vec_f64(b)?);
    if a.len() != b.len() {
        return Ok(f64::INFINITY);
    }
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    Ok(a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale)
}

fn bytes_equal(a: &Tensor, b: &Tensor) -> Result<bool> {
    Ok(a.dims() == b.dims() && tensor_bytes(a)? == tensor_bytes(b)?)
}

fn ensure(ok: bool, clause: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(DacError::Validation(format!("conformance: {clause}")))
    }
}

/// Runs every clause against `backend` using `prompt` (which must tokenize).
pub fn check_backend(backend: &dyn GeneratorBackend, prompt: &str) -> Result<()> {
    let gen_layers = backend.host_layers(AdapterTarget::Generator);
    let text_layers = backend.host_layers(AdapterTarget::TextEncoder);
    for kind in [LayerKind::Attention, LayerKind::Conv, LayerKind::Ffn] {
        ensure(gen_layers.iter().any(|l| l.kind == kind), "generator exposes attention, conv and FFN layers")?;
    }
    ensure(
        text_layers.iter().any(|l| l.kind == LayerKind::Attention),
        "text encoder exposes attention layers",
    )?;
    ensure(
        gen_layers.iter().all(|g| text_layers.iter().all(|t| t.path != g.path)),
        "generator and text-encoder layer paths are disjoint",
    )?;

    let dev = backend.device().clone();
    let dtype = backend.dtype();
    let delta = LoraAdapter::init(&text_layers, AdapterTarget::TextEncoder, Placement::AttentionOnly, 2, 1, dtype, &dev)?;
    let u = LoraAdapter::init(&gen_layers, AdapterTarget::Generator, Placement::AttentionConvFfn, 4, 2, dtype, &dev)?;

    // text encoder
    let base = backend.encode_text(prompt, None, 0.0)?;
    ensure(bytes_equal(&base, &backend.encode_text(prompt, None, 0.0)?)?, "text encoding is deterministic")?;
    ensure(
        max_rel_diff(&backend.encode_text(prompt, Some(&delta), 0.0)?, &base)? == 0.0,
        "delta at beta = 0 is the frozen encoding",
    )?;
    ensure(
        max_rel_diff(&backend.encode_text(prompt, Some(&delta), 1.0)?, &base)? <= 1e-7,
        "zero-initialized delta is transparent",
    )?;
    ensure(
        matches!(backend.encode_text("", None, 0.0), Err(DacError::Validation(_))),
        "empty prompt is a validation error",
    )?;
    ensure(backend.encode_text(prompt, None, 1.5).is_err(), "beta outside [-1, 1] is rejected")?;

    // noise predictor
    let x = initial_noise(backend, 2, 7)?;
    let t = backend.schedule().t_max() / 2;
    let none = backend.predict_noise(&x, t, &base, None, 0.0)?;
    ensure(bytes_equal(&none, &backend.predict_noise(&x, t, &base, None, 0.0)?)?, "noise prediction is deterministic")?;
    ensure(
        bytes_equal(&backend.predict_noise(&x, t, &base, Some(&u), 0.0)?, &none)?,
        "gamma = 0 equals no generator adapter",
    )?;
    ensure(
        max_rel_diff(&backend.predict_noise(&x, t, &base, Some(&u), 1.0)?, &none)? <= 1e-7,
        "zero-initialized generator adapter is transparent",
    )?;
    ensure(backend.predict_noise(&x, t, &base, Some(&u), 1.5).is_err(), "gamma outside [0, 1] is rejected")?;
    ensure(none.dims() == x.dims(), "prediction has the sample's shape")?;
    let (c, h, w) = backend.latent_shape();
    let wrong = Tensor::zeros((1, c, h + 1, w), dtype, &dev)?;
    ensure(backend.predict_noise(&wrong, t, &base, None, 0.0).is_err(), "mis-shaped sample is rejected")?;
    ensure(
        backend.predict_noise(&x, backend.schedule().t_max() + 1, &base, None, 0.0).is_err(),
        "timestep beyond t_max is rejected",
    )?;

    // image codec
    let s = backend.image_size();
    let img = Image::new(s, s, (0..3 * s * s).map(|i| (i % 17) as f32 / 16.0).collect())?.quantized();
    let x0 = backend.encode_image(&img)?;
    ensure(x0.dims() == [1, c, h, w], "encoded image has the latent shape")?;
    let back = &backend.decode_image(&x0)?[0];
    ensure(back.mse(&img)? < 1e-10, "decode inverts encode")?;
    ensure(back.quantized() == img, "decode inverts encode after quantization")?;
    ensure(backend.image_features(&img)?.dim(0)? == 1, "image features are per sample")?;
    let small = Image::new(s / 2, s / 2, vec![0.5; 3 * (s / 2) * (s / 2)])?;
    ensure(backend.encode_image(&small).is_err(), "wrong image size is rejected")?;

    ensure(backend.host_checksum()? == backend.host_checksum()?, "host checksum is stable")?;
    Ok(())
}
