//! PatchGAN discriminators.
//!
//! Layer stack for `n_layers = 3`: three stride-2 convolutions with channel
//! doubling, one stride-1 convolution and a stride-1 score convolution, all
//! `k = 4, p = 1`. Each score then sees a 70×70 input window and a 256×256
//! input yields a 30×30 grid.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, leaky_relu, Checkpoint, Conv2d, ConvConfig, Init, ParamStore};

pub const DISCRIMINATOR_KIND: &str = "discriminator";
const KERNEL: usize = 4;
const PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    /// Number of stride-2 convolutions.
    pub n_layers: usize,
    pub base_channels: usize,
    /// Conditional critics score `[output, source]` stacked on channels.
    pub conditional: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            n_layers: 3,
            base_channels: 64,
            conditional: false,
        }
    }
}

impl DiscriminatorSpec {
    pub fn input_channels(&self) -> usize {
        if self.conditional {
            2
        } else {
            1
        }
    }

    /// `(kernel, stride)` per layer from input to score.
    pub fn layer_geometry(&self) -> Vec<(usize, usize)> {
        let mut layers = vec![(KERNEL, 2); self.n_layers];
        layers.push((KERNEL, 1));
        layers.push((KERNEL, 1));
        layers
    }

    /// Side of the score grid for a square input of side `n`.
    pub fn output_side(&self, n: usize) -> Option<usize> {
        self.layer_geometry().iter().try_fold(n, |n, &(k, s)| {
            (n + 2 * PADDING).checked_sub(k).map(|v| v / s + 1)
        })
    }

    /// Receptive field from the recurrence `r ← (r − 1)·s + k`, output to input.
    pub fn receptive_field(&self) -> usize {
        self.layer_geometry()
            .iter()
            .rev()
            .fold(1, |r, &(k, s)| (r - 1) * s + k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.base_channels == 0 {
            return Err(Error::config("discriminator needs at least one layer and channel"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    seed: u64,
    store: ParamStore,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        Self::with_dtype(spec, seed, DType::F32, &Device::Cpu)
    }

    pub fn with_dtype(spec: DiscriminatorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(spec, seed, ParamStore::new(seed, dtype, device))
    }

    fn build(spec: DiscriminatorSpec, seed: u64, mut store: ParamStore) -> Result<Self> {
        spec.validate()?;
        let init = Init::Normal(0.02);
        let width = |i: usize| spec.base_channels * (1usize << i.min(3));
        let mut convs = Vec::new();
        let mut cin = spec.input_channels();
        for i in 0..spec.n_layers {
            let cout = width(i);
            convs.push(Conv2d::new(
                &mut store,
                &format!("conv{i}"),
                cin,
                cout,
                ConvConfig::strided(KERNEL, 2, PADDING, init),
            )?);
            cin = cout;
        }
        let cout = width(spec.n_layers);
        convs.push(Conv2d::new(
            &mut store,
            &format!("conv{}", spec.n_layers),
            cin,
            cout,
            ConvConfig::strided(KERNEL, 1, PADDING, init),
        )?);
        convs.push(Conv2d::new(
            &mut store,
            "score",
            cout,
            1,
            ConvConfig::strided(KERNEL, 1, PADDING, init),
        )?);
        Ok(Self {
            spec,
            seed,
            store,
            convs,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Raw (logit) patch scores, `(B, 1, h, w)`.
    pub fn patch_scores(&self, input: &Tensor) -> Result<Tensor> {
        self.forward(input, false)
    }

    /// Scores with normalization statistics held constant. Instance
    /// normalization couples every patch through two scalars per channel;
    /// holding them fixed isolates the convolutional footprint.
    pub fn patch_scores_local(&self, input: &Tensor) -> Result<Tensor> {
        self.forward(input, true)
    }

    fn forward(&self, input: &Tensor, detach_stats: bool) -> Result<Tensor> {
        let c = input.dim(1)?;
        if c != self.spec.input_channels() {
            return Err(Error::shape(format!(
                "{} discriminator expects {} channels, got {c}",
                if self.spec.conditional { "conditional" } else { "unconditional" },
                self.spec.input_channels()
            )));
        }
        let last = self.convs.len() - 1;
        let mut h = input.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i == last {
                break;
            }
            if i > 0 {
                h = instance_norm(&h, detach_stats)?;
            }
            h = leaky_relu(&h, 0.2)?;
        }
        Ok(h)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(DISCRIMINATOR_KIND, self.seed, serde_json::to_value(&self.spec)?)
            .with_tensors("", self.store.tensors()))
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        ck.expect_kind(DISCRIMINATOR_KIND)?;
        let spec: DiscriminatorSpec = serde_json::from_value(ck.spec.clone())?;
        Self::from_parts(spec, ck.seed, ck.tensors.clone(), device)
    }

    pub(crate) fn from_parts(
        spec: DiscriminatorSpec,
        seed: u64,
        tensors: std::collections::BTreeMap<String, Tensor>,
        device: &Device,
    ) -> Result<Self> {
        let dtype = tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let store = ParamStore::from_tensors(tensors, dtype, device, false)?;
        Self::build(spec, seed, store)
    }
}

/// Stacks a generated (or real) output with its source image for a
/// conditional critic.
pub fn conditional_input(output: &Tensor, source: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[output, source], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(conditional: bool) -> DiscriminatorSpec {
        DiscriminatorSpec {
            n_layers: 3,
            base_channels: 4,
            conditional,
        }
    }

    #[test]
    fn geometry_oracles() {
        let spec = DiscriminatorSpec::default();
        assert_eq!(spec.receptive_field(), 70);
        assert_eq!(spec.output_side(256), Some(30));
        assert_eq!(spec.output_side(64), Some(6));
    }

    #[test]
    fn conditional_channel_contract() {
        let d = Discriminator::new(small(true), 0).unwrap();
        let one = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let two = Tensor::zeros((1, 2, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(d.patch_scores(&one).is_err());
        assert_eq!(d.patch_scores(&two).unwrap().dims(), &[1, 1, 6, 6]);
        let u = Discriminator::new(small(false), 0).unwrap();
        assert!(u.patch_scores(&two).is_err());
        assert!(u.patch_scores(&one).is_ok());
    }

    #[test]
    fn scores_are_finite_and_deterministic() {
        let d = Discriminator::new(small(false), 3).unwrap();
        let x = Tensor::rand(-1f32, 1.0, (2, 1, 64, 64), &Device::Cpu).unwrap();
        let a: Vec<f32> = d.patch_scores(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = d.patch_scores(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
        let d2 = Discriminator::new(small(false), 3).unwrap();
        let c: Vec<f32> = d2.patch_scores(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, c);
    }
}
