use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{tensor::TensorView, Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::tensor_bytes;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "metgan";

/// Single-file archive: structured header (spec, seed, format version and
/// free-form metadata) plus named tensors, stored as safetensors.
///
/// The header lives under one metadata key so the serialized bytes are a
/// pure function of the contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub seed: u64,
    pub spec: serde_json::Value,
    pub extra: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    seed: u64,
    spec: serde_json::Value,
    extra: serde_json::Value,
}

struct RawTensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl View for RawTensor {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.data)
    }

    fn data_len(&self) -> usize {
        self.data.len()
    }
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, seed: u64, spec: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            seed,
            spec,
            extra: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        }
    }

    pub fn with_tensors(mut self, prefix: &str, tensors: BTreeMap<String, Tensor>) -> Self {
        for (n, t) in tensors {
            self.tensors.insert(format!("{prefix}{n}"), t);
        }
        self
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_owned(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            spec: self.spec.clone(),
            extra: self.extra.clone(),
        };
        let mut info = HashMap::new();
        info.insert(HEADER_KEY.to_owned(), serde_json::to_string(&header)?);
        let mut raw = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let dtype = match t.dtype() {
                DType::F64 => Dtype::F64,
                _ => Dtype::F32,
            };
            raw.push((
                name.clone(),
                RawTensor {
                    dtype,
                    shape: t.dims().to_vec(),
                    data: tensor_bytes(t)?,
                },
            ));
        }
        safetensors::serialize(raw, Some(info))
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, metadata) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_json = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint("missing header".into()))?;
        let header: Header = serde_json::from_str(header_json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, view_to_tensor(&view, device)?);
        }
        Ok(Self {
            kind: header.kind,
            seed: header.seed,
            spec: header.spec,
            extra: header.extra,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }

    /// Content hash of the serialized archive, used as provenance id.
    pub fn id(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(hex::encode(&digest[..8]))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }
}

fn view_to_tensor(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    let dtype = match view.dtype() {
        Dtype::F32 => DType::F32,
        Dtype::F64 => DType::F64,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(Tensor::from_raw_buffer(view.data(), dtype, view.shape(), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dev = Device::Cpu;
        let a = Tensor::new(&[[1.5f32, -0.0], [f32::MIN_POSITIVE, 3.25]], &dev).unwrap();
        let b = Tensor::new(&[0.1f64, 1e-300], &dev).unwrap();
        let mut ck = Checkpoint::new("test", 42, serde_json::json!({"size": 4}));
        ck.extra = serde_json::json!({"note": "x"});
        ck.tensors.insert("a".into(), a.clone());
        ck.tensors.insert("b".into(), b.clone());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, &dev).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.seed, 42);
        assert_eq!(back.spec, serde_json::json!({"size": 4}));
        assert_eq!(tensor_bytes(&back.tensors["a"]).unwrap(), tensor_bytes(&a).unwrap());
        assert_eq!(tensor_bytes(&back.tensors["b"]).unwrap(), tensor_bytes(&b).unwrap());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint", &Device::Cpu).is_err());
    }
}
