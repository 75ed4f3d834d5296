//! Single-file tar archives holding a JSON manifest plus raw little-endian tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::StateDict;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MANIFEST: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors/";

fn header(path: &str, len: usize) -> Result<tar::Header> {
    let mut h = tar::Header::new_gnu();
    h.set_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    h.set_size(len as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_cksum();
    Ok(h)
}

/// Each entry is `tensors/<name>` holding `u32 rank, u64 dims..., payload`.
pub fn write_archive<T: Scalar, M: Serialize>(path: &Path, manifest: &M, tensors: &StateDict<T>) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut ar = tar::Builder::new(file);
    let mbytes = serde_json::to_vec_pretty(manifest)?;
    ar.append(&header(MANIFEST, mbytes.len())?, mbytes.as_slice())?;
    for (name, t) in tensors {
        let mut blob = Vec::with_capacity(4 + 8 * t.shape().len() + t.len() * 8);
        blob.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            blob.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        blob.extend_from_slice(&T::to_le_bytes_vec(t.data()));
        let entry = format!("{TENSOR_DIR}{name}");
        ar.append(&header(&entry, blob.len())?, blob.as_slice())?;
    }
    let mut inner = ar.into_inner()?;
    inner.flush()?;
    Ok(())
}

fn decode_blob<T: Scalar>(name: &str, blob: &[u8]) -> Result<Tensor<T>> {
    let bad = |d: &str| Error::format(name, d.to_string());
    if blob.len() < 4 {
        return Err(bad("truncated tensor header"));
    }
    let rank = u32::from_le_bytes(blob[..4].try_into().unwrap()) as usize;
    let body = 4 + 8 * rank;
    if blob.len() < body {
        return Err(bad("truncated tensor shape"));
    }
    let shape: Vec<usize> = blob[4..body]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let data = T::from_le_bytes_slice(&blob[body..]).ok_or_else(|| bad("payload length is not a whole number of elements"))?;
    Tensor::from_vec(&shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn read_archive<T: Scalar, M: DeserializeOwned>(path: &Path) -> Result<(M, StateDict<T>)> {
    let file = BufReader::new(File::open(path)?);
    let mut ar = tar::Archive::new(file);
    let mut manifest = None;
    let mut tensors = StateDict::new();
    let entries = ar
        .entries()
        .map_err(|e| Error::format("archive", e.to_string()))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::format("archive", e.to_string()))?;
        let name = entry
            .path()
            .map_err(|e| Error::format("archive", e.to_string()))?
            .to_string_lossy()
            .into_owned();
        let mut buf = Vec::new();
        entry
            .read_to_end(&mut buf)
            .map_err(|e| Error::format(&name, e.to_string()))?;
        if name == MANIFEST {
            manifest = Some(
                serde_json::from_slice(&buf).map_err(|e| Error::format(MANIFEST, e.to_string()))?,
            );
        } else if let Some(key) = name.strip_prefix(TENSOR_DIR) {
            tensors.insert(key.to_string(), decode_blob(key, &buf)?);
        }
    }
    let manifest = manifest.ok_or_else(|| Error::format(MANIFEST, "missing from archive"))?;
    Ok((manifest, tensors))
}
