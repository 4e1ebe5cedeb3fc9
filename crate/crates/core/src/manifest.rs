//! Weight files: a JSON manifest plus one raw little-endian buffer.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{check_same_dtype, DType, Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    /// Buffer path, relative to the manifest's directory.
    pub data_file: String,
}

fn data_file_for(manifest_path: &Path) -> String {
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
    format!("{stem}.bin")
}

fn resolve(manifest_path: &Path, data_file: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(data_file)
}

/// Writes every parameter of `params`, in store order.
pub fn save_weights<T: Element>(params: &ParamStore<T>, manifest_path: &Path) -> Result<Manifest> {
    let mut buf = Vec::with_capacity(params.nbytes());
    let mut tensors = Vec::with_capacity(params.len());
    for p in params.iter() {
        let offset = buf.len();
        for &x in p.tensor.data() {
            x.write_le(&mut buf);
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: T::DTYPE,
            offset,
            nbytes: buf.len() - offset,
        });
    }
    let manifest = Manifest { tensors, data_file: data_file_for(manifest_path) };
    fs::write(resolve(manifest_path, &manifest.data_file), &buf)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(manifest_path, json)?;
    Ok(manifest)
}

pub fn read_manifest(manifest_path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path)?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(vec![format!("{}: {e}", manifest_path.display())]))
}

/// Overwrites the values of `params` from a manifest. Every name in `params`
/// must be present with a matching shape and dtype. Entries the store does not
/// know are returned as warnings, or rejected when `strict`.
pub fn load_weights<T: Element>(params: &mut ParamStore<T>, manifest_path: &Path, strict: bool) -> Result<Vec<String>> {
    let manifest = read_manifest(manifest_path)?;
    let buf = fs::read(resolve(manifest_path, &manifest.data_file))?;
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    let mut loaded = Vec::new();

    for e in &manifest.tensors {
        if !seen.insert(e.name.as_str()) {
            errors.push(format!("duplicate entry {}", e.name));
            continue;
        }
        let Some(p) = params.get(&e.name) else {
            let msg = format!("unknown entry {}", e.name);
            if strict {
                errors.push(msg);
            } else {
                warnings.push(msg);
            }
            continue;
        };
        if let Err(err) = check_same_dtype::<T>("load_weights", e.dtype) {
            errors.push(format!("{}: {err}", e.name));
            continue;
        }
        if e.shape != p.tensor.shape() {
            errors.push(format!("{}: shape {:?} in manifest, expected {:?}", e.name, e.shape, p.tensor.shape()));
            continue;
        }
        let numel: usize = e.shape.iter().product();
        let size = e.dtype.size_of();
        if e.nbytes != numel * size {
            errors.push(format!("{}: nbytes {} does not match shape {:?}", e.name, e.nbytes, e.shape));
            continue;
        }
        let Some(bytes) = e.offset.checked_add(e.nbytes).and_then(|end| buf.get(e.offset..end)) else {
            errors.push(format!("{}: truncated buffer ({} bytes at offset {}, file has {})", e.name, e.nbytes, e.offset, buf.len()));
            continue;
        };
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        loaded.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    for name in params.names() {
        if !seen.contains(name) {
            errors.push(format!("missing entry {name}"));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Manifest(errors));
    }
    for (name, tensor) in loaded {
        params.get_mut(&name).expect("checked above").tensor = tensor;
    }
    Ok(warnings)
}
