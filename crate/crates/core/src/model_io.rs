//! Binary model files (`FABM`) with a JSON sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FABM"  u32 version  u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 rank, rank x u32 dims, values as f64
//! ```
//!
//! The sidecar (`<file>.json`) records the classifier spec and how the
//! weights were produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_classifier, ClassifierSpec};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"FABM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: String,
    pub activity: u8,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
    /// Learning rate used by the inner loop during pretraining, if any.
    #[serde(default)]
    pub inner_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format_version: u32,
    pub spec: ClassifierSpec,
    pub provenance: Provenance,
}

pub fn sidecar_path(model_path: &Path) -> PathBuf {
    let mut s = model_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_tensors(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Decodes the tensor list of a model file, in stored order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::ModelFile("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFile(format!("unsupported format version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::ModelFile("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::ModelFile("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::ModelFile(format!("`{name}`: {e}")))?;
        out.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::ModelFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_model(path: &Path, params: &ParamSet, spec: &ClassifierSpec, provenance: &Provenance) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_tensors(params)).map_err(|e| Error::io(path, e))?;
    let sidecar = ModelSidecar {
        format_version: FORMAT_VERSION,
        spec: *spec,
        provenance: provenance.clone(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Loads a model and checks every tensor against the layout implied by its spec.
pub fn load_model(path: &Path) -> Result<(ParamSet, ModelSidecar)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: ModelSidecar = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode_tensors(&bytes)?;

    // The template fixes names, order, shapes and which entries are buffers.
    let mut params = build_classifier(&sidecar.spec, &mut crate::rng::stream(0))?;
    if tensors.len() != params.len() {
        return Err(Error::ModelFile(format!(
            "file holds {} tensors, spec expects {}",
            tensors.len(),
            params.len()
        )));
    }
    for (i, (name, tensor)) in tensors.into_iter().enumerate() {
        let (expected, entry) = params.entry_at_mut(i).expect("same length");
        if expected != name || entry.value.shape() != tensor.shape() {
            return Err(Error::ModelFile(format!(
                "tensor #{i} is `{name}` {:?}, expected `{expected}` {:?}",
                tensor.shape(),
                entry.value.shape()
            )));
        }
        entry.value = tensor;
    }
    Ok((params, sidecar))
}
