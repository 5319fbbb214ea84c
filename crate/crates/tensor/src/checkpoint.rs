//! `VSD1` weight container: magic, little-endian u64 header length, JSON
//! header mapping tensor name to shape/dtype/offset, then the raw payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSD1";

#[derive(Serialize, Deserialize, Debug)]
struct Entry {
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Checkpoint(msg.into()))
}

pub fn write_checkpoint<F: Scalar, W: Write>(mut w: W, tensors: &[(&str, &Tensor<F>)]) -> Result<()> {
    let mut header = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in tensors {
        if header
            .insert(name.to_string(), Entry { shape: t.shape().to_vec(), dtype: F::DTYPE.into(), offset })
            .is_some()
        {
            return ckpt_err(format!("duplicate tensor name `{name}`"));
        }
        offset += t.numel() * F::BYTES;
    }
    let header = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(offset);
    for (_, t) in tensors {
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads every tensor, converting stored f32/f64 payloads to `F`.
pub fn read_checkpoint<F: Scalar, R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor<F>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return ckpt_err(format!("bad magic {magic:?}, expected VSD1"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: BTreeMap<String, Entry> =
        serde_json::from_slice(&header).map_err(|e| TensorError::Checkpoint(format!("header: {e}")))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut out = BTreeMap::new();
    for (name, e) in header {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return ckpt_err(format!("tensor `{name}`: unsupported dtype {other}")),
        };
        let numel: usize = e.shape.iter().product();
        let end = e.offset + numel * width;
        if end > payload.len() {
            return ckpt_err(format!("tensor `{name}` runs past end of payload"));
        }
        let data = payload[e.offset..end]
            .chunks_exact(width)
            .map(|c| if width == 4 { F::from_f64(f32::read_le(c) as f64) } else { F::from_f64(f64::read_le(c)) })
            .collect();
        out.insert(name, Tensor::from_vec(data, &e.shape)?);
    }
    Ok(out)
}

pub fn save_checkpoint<F: Scalar>(path: impl AsRef<Path>, store: &ParamStore<F>) -> Result<()> {
    let tensors: Vec<_> = store.named_values().collect();
    write_checkpoint(BufWriter::new(File::create(path)?), &tensors)
}

/// Loads values into an existing store; every parameter must be present with a matching shape.
pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>, store: &mut ParamStore<F>) -> Result<()> {
    let mut tensors = read_checkpoint::<F, _>(BufReader::new(File::open(path)?))?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let Some(t) = tensors.remove(&name) else {
            return ckpt_err(format!("missing tensor `{name}`"));
        };
        store.set_value(id, t).map_err(|e| TensorError::Checkpoint(format!("tensor `{name}`: {e}")))?;
    }
    if let Some(extra) = tensors.keys().next() {
        return ckpt_err(format!("unexpected tensor `{extra}`"));
    }
    Ok(())
}
