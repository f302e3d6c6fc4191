use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 11] = b"MCLE-CKPT-1";

/// Decoded checkpoint archive: a JSON metadata block plus named arrays.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Layout: magic, u64 LE header length, JSON header, raw little-endian data.
pub fn write_checkpoint<'a>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        let flat = t.flatten_all()?;
        let offset = blob.len();
        let dtype = match t.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                "f64"
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                "f32"
            }
        };
        entries.push(Entry {
            name: name.to_owned(),
            dtype: dtype.into(),
            shape: t.dims().to_vec(),
            offset,
            len: blob.len() - offset,
        });
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })?;

    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let write = |f: &mut fs::File, bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(&tmp, e));
    write(&mut f, CHECKPOINT_MAGIC)?;
    write(&mut f, &(header.len() as u64).to_le_bytes())?;
    write(&mut f, &header)?;
    write(&mut f, &blob)?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic_len = CHECKPOINT_MAGIC.len();
    if bytes.len() < magic_len + 8 || &bytes[..magic_len] != CHECKPOINT_MAGIC {
        return Err(ckpt_err(format!("{} is not an MCLE-CKPT-1 archive", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[magic_len..magic_len + 8].try_into().unwrap()) as usize;
    let hstart = magic_len + 8;
    let data_start = hstart + hlen;
    if bytes.len() < data_start {
        return Err(ckpt_err("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[hstart..data_start])?;
    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let raw = data
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| ckpt_err(format!("array {} out of bounds", e.name)))?;
        let t = match e.dtype.as_str() {
            "f64" => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            "f32" => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            other => return Err(ckpt_err(format!("unknown dtype {other}"))),
        };
        tensors.insert(e.name, t);
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}
