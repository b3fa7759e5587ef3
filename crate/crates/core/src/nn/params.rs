use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    /// `N(0, 2 / fan_in)` with fan-in taken from dims 1.. of the shape.
    He,
    Zeros,
}

#[derive(Debug, Clone)]
enum Param {
    Trainable(Var),
    Frozen(Tensor),
}

impl Param {
    fn tensor(&self) -> &Tensor {
        match self {
            Param::Trainable(v) => v.as_tensor(),
            Param::Frozen(t) => t,
        }
    }
}

/// Named parameters of one network, ordered by name.
///
/// Networks are built by asking the store for each parameter in a fixed
/// order: a name that already exists is returned as is (after a shape
/// check), an unknown name is created from the store's seeded generator.
/// Loading a checkpoint is therefore "pre-populate, then build".
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
    frozen: bool,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            params: BTreeMap::new(),
            dtype,
            device: device.clone(),
            frozen: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Store pre-populated with tensors (e.g. from a checkpoint).
    pub fn from_tensors(
        tensors: BTreeMap<String, Tensor>,
        dtype: DType,
        device: &Device,
        frozen: bool,
    ) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, t) in tensors {
            let t = t.to_dtype(dtype)?.to_device(device)?;
            let p = if frozen {
                Param::Frozen(t.detach())
            } else {
                Param::Trainable(Var::from_tensor(&t)?)
            };
            params.insert(name, p);
        }
        Ok(Self {
            params,
            dtype,
            device: device.clone(),
            frozen,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn get(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
    ) -> Result<Tensor> {
        if let Some(p) = self.params.get(name) {
            let t = p.tensor();
            if t.dims() != shape {
                return Err(Error::shape(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            return Ok(t.clone());
        }
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Normal(std) => sample_normal(&mut self.rng, std, numel),
            Init::He => {
                let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
                sample_normal(&mut self.rng, (2.0 / fan_in as f64).sqrt(), numel)
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let p = if self.frozen {
            Param::Frozen(t)
        } else {
            Param::Trainable(Var::from_tensor(&t)?)
        };
        let out = p.tensor().clone();
        self.params.insert(name.to_owned(), p);
        Ok(out)
    }

    /// Trainable variables in name order; empty for a frozen store.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter_map(|(n, p)| match p {
                Param::Trainable(v) => Some((n.clone(), v.clone())),
                Param::Frozen(_) => None,
            })
            .collect()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), p.tensor().clone()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor().elem_count()).sum()
    }

    /// Copy whose parameters are detached constants: gradients flow through
    /// the network to its input but never into these tensors.
    pub fn frozen_copy(&self) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (n, p) in &self.params {
            let t = p.tensor().copy()?.detach();
            params.insert(n.clone(), Param::Frozen(t));
        }
        Ok(Self {
            params,
            dtype: self.dtype,
            device: self.device.clone(),
            frozen: true,
            rng: self.rng.clone(),
        })
    }

    /// Overwrites parameter values in place; names and shapes must match.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for (name, p) in &self.params {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            match p {
                Param::Trainable(v) => v.set(&src.to_dtype(self.dtype)?)?,
                Param::Frozen(_) => {
                    return Err(Error::Checkpoint(format!(
                        "cannot overwrite frozen parameter `{name}`"
                    )))
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and raw little-endian values.
    pub fn checksum(&self) -> Result<String> {
        checksum_tensors(&self.tensors())
    }
}

fn sample_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

pub fn checksum_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        hasher.update(tensor_bytes(t)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    })
}
