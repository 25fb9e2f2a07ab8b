//! Fixed-vocabulary tokenizer and the small self-attention text encoder.

use candle_core::{Device, Tensor};

use super::nn::{attention, HostLinear, Init, LayerNorm, ParamSource, Registry};
use crate::error::{DacError, Result};
use crate::lora::{AdapterStack, LayerKind};

const VOCAB: &[&str] = &[
    "<pad>", "a", "an", "the", "of", "left", "right", "above", "below", "next", "to", "and",
    "with", "on", "in", "at", "is", "big", "small", "large", "tiny", "red", "green", "blue",
    "yellow", "white", "black", "purple", "orange", "pink", "gray", "brown", "cyan", "circle",
    "square", "triangle", "star", "heart", "ring", "cross", "diamond", "hexagon", "shape",
    "object", "photo", "picture", "image", "painting", "drawing", "sketch", "style",
    "background", "dark", "light", "bright", "top", "bottom", "center", "corner", "one", "two",
    "covered", "by", "snow",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    max_len: usize,
}

impl Tokenizer {
    pub const PAD: u32 = 0;

    pub fn new(max_len: usize) -> Self {
        Self { max_len }
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Token ids padded to `max_len`.
    pub fn encode(&self, prompt: &str) -> Result<Vec<u32>> {
        let words: Vec<String> = prompt
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return Err(DacError::Validation("prompt is empty".into()));
        }
        if words.len() > self.max_len {
            return Err(DacError::Validation(format!(
                "prompt has {} words, at most {} fit",
                words.len(),
                self.max_len
            )));
        }
        let mut ids = words
            .iter()
            .map(|w| {
                VOCAB
                    .iter()
                    .position(|v| v == w)
                    .map(|i| i as u32)
                    .ok_or_else(|| DacError::Validation(format!("word `{w}` is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.resize(self.max_len, Self::PAD);
        Ok(ids)
    }

    /// The all-padding sequence used as the unconditional prompt.
    pub fn empty(&self) -> Vec<u32> {
        vec![Self::PAD; self.max_len]
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    q: HostLinear,
    k: HostLinear,
    v: HostLinear,
    o: HostLinear,
    ln2: LayerNorm,
    fc1: HostLinear,
    fc2: HostLinear,
}

#[derive(Debug, Clone)]
pub(crate) struct TextEncoder {
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    dim: usize,
}

impl TextEncoder {
    pub(crate) fn new(
        src: &mut ParamSource,
        reg: &mut Registry,
        vocab: usize,
        max_len: usize,
        dim: usize,
        n_layers: usize,
    ) -> Result<Self> {
        let token_embedding = src.get("text.token_embedding", &[vocab, dim], 1, Init::FanIn(0.5))?;
        let position_embedding = src.get("text.position_embedding", &[max_len, dim], 1, Init::FanIn(0.1))?;
        let layers = (0..n_layers)
            .map(|i| {
                let p = format!("text.layers.{i}");
                Ok(EncoderLayer {
                    ln1: LayerNorm::new(src, &format!("{p}.ln1"), dim)?,
                    q: HostLinear::new(src, reg, &format!("{p}.attn.q"), dim, dim, LayerKind::Attention, 1.0)?,
                    k: HostLinear::new(src, reg, &format!("{p}.attn.k"), dim, dim, LayerKind::Attention, 1.0)?,
                    v: HostLinear::new(src, reg, &format!("{p}.attn.v"), dim, dim, LayerKind::Attention, 1.0)?,
                    o: HostLinear::new(src, reg, &format!("{p}.attn.o"), dim, dim, LayerKind::Attention, 0.5)?,
                    ln2: LayerNorm::new(src, &format!("{p}.ln2"), dim)?,
                    fc1: HostLinear::new(src, reg, &format!("{p}.ffn.fc1"), dim, 2 * dim, LayerKind::Ffn, 1.0)?,
                    fc2: HostLinear::new(src, reg, &format!("{p}.ffn.fc2"), 2 * dim, dim, LayerKind::Ffn, 0.5)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_ln: LayerNorm::new(src, "text.final_ln", dim)?,
            dim,
        })
    }

    /// Token features `(batch, max_len, dim)` for a batch of id sequences.
    pub(crate) fn forward(&self, ids: &[Vec<u32>], adapters: &AdapterStack, device: &Device) -> Result<Tensor> {
        let batch = ids.len();
        let len = ids.first().map(Vec::len).unwrap_or(0);
        let flat: Vec<u32> = ids.iter().flatten().copied().collect();
        let idx = Tensor::from_vec(flat, batch * len, device)?;
        let mut h = self
            .token_embedding
            .index_select(&idx, 0)?
            .reshape((batch, len, self.dim))?
            .broadcast_add(&self.position_embedding.narrow(0, 0, len)?)?;
        for layer in &self.layers {
            let x = layer.ln1.forward(&h)?;
            let q = layer.q.forward(&x, adapters)?;
            let k = layer.k.forward(&x, adapters)?;
            let v = layer.v.forward(&x, adapters)?;
            h = (h + layer.o.forward(&attention(&q, &k, &v)?, adapters)?)?;
            let x = layer.ln2.forward(&h)?;
            let ff = layer.fc2.forward(&layer.fc1.forward(&x, adapters)?.gelu()?, adapters)?;
            h = (h + ff)?;
        }
        self.final_ln.forward(&h)
    }
}
