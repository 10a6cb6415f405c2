//! Self-describing generator checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, JSON header
//! (format tag, spec, tensor names and shapes), then every tensor as
//! little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Generator, GeneratorSpec};

const MAGIC: &[u8; 8] = b"MVRECON\0";
pub const FORMAT_TAG: &str = "mvrecon-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    spec: GeneratorSpec,
    tensors: Vec<TensorEntry>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_generator(g: &Generator) -> Vec<u8> {
    let params = g.params();
    let header = Header {
        format: FORMAT_TAG.into(),
        kind: "generator".into(),
        spec: g.spec().clone(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * g.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_generator(bytes: &[u8], path: &Path) -> Result<Generator> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not an mvrecon checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| bad(path, format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG || header.kind != "generator" {
        return Err(bad(
            path,
            format!("unsupported format {} / {}", header.format, header.kind),
        ));
    }
    let mut g = Generator::new(header.spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut offset = 12 + hlen;
    let params = g.params_mut();
    if params.len() != header.tensors.len() {
        return Err(bad(path, "tensor count does not match spec"));
    }
    for (p, entry) in params.into_iter().zip(&header.tensors) {
        let shape = (entry.shape[0], entry.shape[1]);
        if p.name != entry.name || p.value.dim() != shape {
            return Err(bad(path, format!("unexpected tensor {}", entry.name)));
        }
        let n = shape.0 * shape.1;
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(path, "truncated tensor data"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.value = Array2::from_shape_vec(shape, values).unwrap();
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad(path, "trailing bytes"));
    }
    Ok(g)
}

pub fn save_generator(path: &Path, g: &Generator) -> Result<()> {
    fs::write(path, encode_generator(g)).map_err(|e| Error::UnwritablePath {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    let bytes = fs::read(path).map_err(|e| bad(path, e.to_string()))?;
    decode_generator(&bytes, path)
}

pub fn generator_digest(g: &Generator) -> String {
    hex::encode(Sha256::digest(encode_generator(g)))
}
