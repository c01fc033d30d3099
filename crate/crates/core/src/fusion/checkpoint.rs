//! Checkpoint container:
//!
//! ```text
//! b"MMFDCKPT" | u32 version | u64 header_len | header JSON | f64 LE payload
//! ```
//!
//! The header echoes the [`ModelConfig`] and lists every parameter's name and
//! shape in store order; the payload is the concatenation of all parameter
//! values. Floats are stored as raw bits, so a round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MMFDCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<(String, Vec<usize>)>,
}

pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params().total_elements());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params().tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(record: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        record,
        msg: msg.into(),
    }
}

/// Rebuilds the model from its config echo and overwrites every parameter.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad(0, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(0, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + hlen).ok_or_else(|| bad(0, "truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(0, e.to_string()))?;
    let mut model = Model::new(header.config)?;
    if header.params.len() != model.params().len() {
        return Err(bad(
            0,
            format!(
                "{} parameters stored, config implies {}",
                header.params.len(),
                model.params().len()
            ),
        ));
    }
    let mut pos = 20 + hlen;
    for (i, (name, shape)) in header.params.into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(pos..pos + 8 * n)
            .ok_or_else(|| bad(i + 1, format!("parameter {name} truncated")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model
            .params_mut()
            .set(&name, Tensor::new(shape, data)?)
            .map_err(|e| bad(i + 1, e.to_string()))?;
        pos += 8 * n;
    }
    if pos != bytes.len() {
        return Err(bad(0, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(&std::fs::read(path)?)
}
