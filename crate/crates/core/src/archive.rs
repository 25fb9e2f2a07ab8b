//! Named-tensor archives (safetensors layout) with a string metadata record.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{DacError, Result};
use crate::tensor_util::{atomic_write, tensor_bytes};

pub type Metadata = BTreeMap<String, String>;

/// The header's metadata map is written in hash order, so the whole record
/// is stored as one JSON-encoded entry to keep archive bytes deterministic.
const METADATA_KEY: &str = "dac.metadata";

pub fn encode(tensors: &BTreeMap<String, Tensor>, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut owned = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let dtype = match t.dtype() {
            DType::F64 => Dtype::F64,
            DType::F32 => Dtype::F32,
            other => {
                return Err(DacError::Validation(format!(
                    "unsupported archive dtype {other:?} for `{name}`"
                )))
            }
        };
        owned.push((name.clone(), dtype, t.dims().to_vec(), tensor_bytes(t)?));
    }
    let views = owned
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| DacError::Validation(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let info: HashMap<String, String> = [(METADATA_KEY.to_string(), serde_json::to_string(metadata)?)].into();
    safetensors::serialize(views, Some(info)).map_err(|e| DacError::Validation(e.to_string()))
}

pub fn decode(
    bytes: &[u8],
    device: &Device,
    origin: &Path,
) -> Result<(BTreeMap<String, Tensor>, Metadata)> {
    let (_, header) =
        SafeTensors::read_metadata(bytes).map_err(|e| DacError::load(origin, e))?;
    let raw = header.metadata().clone().unwrap_or_default();
    let metadata: Metadata = match raw.get(METADATA_KEY) {
        Some(json) => serde_json::from_str(json).map_err(|e| DacError::load(origin, e))?,
        // Archives written by other tools keep their flat map.
        None => raw.into_iter().collect(),
    };
    let st = SafeTensors::deserialize(bytes).map_err(|e| DacError::load(origin, e))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            Dtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            other => {
                return Err(DacError::load(
                    origin,
                    format!("tensor `{name}` has unsupported dtype {other:?}"),
                ))
            }
        };
        out.insert(name, t);
    }
    Ok((out, metadata))
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, metadata: &Metadata) -> Result<()> {
    atomic_write(path, &encode(tensors, metadata)?)
}

pub fn load(path: &Path, device: &Device) -> Result<(BTreeMap<String, Tensor>, Metadata)> {
    let bytes = std::fs::read(path).map_err(|e| DacError::load(path, e))?;
    decode(&bytes, device, path)
}
