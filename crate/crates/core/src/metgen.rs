//! MetGen, the dual-pathway generator.
//!
//! The anatomy (or tumour) image runs through an encoder/decoder U-net. The
//! binary label runs through a chain of SPADE residual blocks at reduced
//! resolution; its features are resampled and concatenated into the
//! highest-resolution decoder levels before their merge convolution.
//! With `spade_blocks = 0` the label path is absent and the network is the
//! plain U-net used by the Pix2Pix and CycleGAN baselines.
//!
//! A built [`Generator`] is immutable during inference and may be shared
//! across threads for concurrent forward passes; parameter updates go
//! through the optimizer and need exclusive access to the training loop.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, masks_to_tensor, tensor_to_images, Image, Mask};
use crate::error::{Error, Result};
use crate::nn::{
    instance_norm, leaky_relu, resize_nearest, Checkpoint, Conv2d, ConvConfig, Init, ParamStore,
};

const GAN_INIT: Init = Init::Normal(0.02);
pub const GENERATOR_KIND: &str = "generator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub image_size: usize,
    pub unet_depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Number of SPADE residual blocks on the label path; 0 removes the path.
    pub spade_blocks: usize,
    pub spade_hidden_channels: usize,
    pub spade_feature_channels: usize,
    /// The label path runs at `image_size / spade_downsample`.
    pub spade_downsample: usize,
    /// Decoder levels (0 = full resolution) that receive label features.
    pub fusion_levels: Vec<usize>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            image_size: 256,
            unet_depth: 4,
            base_channels: 64,
            max_channels: 512,
            spade_blocks: 7,
            spade_hidden_channels: 128,
            spade_feature_channels: 64,
            spade_downsample: 4,
            fusion_levels: vec![0, 1],
        }
    }
}

impl GeneratorSpec {
    /// Reduced network for desk-scale phantom experiments.
    pub fn desk(image_size: usize) -> Self {
        Self {
            image_size,
            unet_depth: 2,
            base_channels: 8,
            max_channels: 64,
            spade_blocks: 7,
            spade_hidden_channels: 8,
            spade_feature_channels: 8,
            spade_downsample: 4,
            fusion_levels: vec![0, 1],
        }
    }

    /// Same backbone without the label path.
    pub fn plain_unet(mut self) -> Self {
        self.spade_blocks = 0;
        self.fusion_levels.clear();
        self
    }

    pub fn has_label_path(&self) -> bool {
        self.spade_blocks > 0
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet_depth == 0 || self.base_channels == 0 || self.max_channels == 0 {
            return Err(Error::config("unet_depth and channel counts must be positive"));
        }
        let stride = 1usize << self.unet_depth;
        if self.image_size == 0 || self.image_size % stride != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by 2^{}",
                self.image_size, self.unet_depth
            )));
        }
        if self.has_label_path() {
            if self.spade_downsample == 0 || self.image_size % self.spade_downsample != 0 {
                return Err(Error::config(format!(
                    "image_size {} is not divisible by spade_downsample {}",
                    self.image_size, self.spade_downsample
                )));
            }
            if self.fusion_levels.is_empty() {
                return Err(Error::config("a label path needs at least one fusion level"));
            }
            if self.spade_hidden_channels == 0 || self.spade_feature_channels == 0 {
                return Err(Error::config("SPADE channel counts must be positive"));
            }
        } else if !self.fusion_levels.is_empty() {
            return Err(Error::config("fusion levels given without a label path"));
        }
        if let Some(&l) = self.fusion_levels.iter().find(|&&l| l >= self.unet_depth) {
            return Err(Error::config(format!(
                "fusion level {l} is not a decoder level (depth {})",
                self.unet_depth
            )));
        }
        Ok(())
    }
}

/// Image-to-image mapping conditioned on a label, `(B,1,H,W) × (B,1,H,W) → (B,1,H,W)`.
pub trait Translate {
    fn translate(&self, image: &Tensor, label: &Tensor) -> Result<Tensor>;
}

/// Encoder/decoder with skip connections. Decoder level `i` merges the
/// upsampled features, the encoder skip and optional extra channels.
#[derive(Debug, Clone)]
pub(crate) struct UNet {
    input: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    merge: Vec<Conv2d>,
    extra: Vec<usize>,
}

impl UNet {
    pub(crate) fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        depth: usize,
        channels: impl Fn(usize) -> usize,
        extra: &[usize],
        init: Init,
    ) -> Result<Self> {
        let input = Conv2d::new(
            store,
            &format!("{prefix}.enc0"),
            in_channels,
            channels(0),
            ConvConfig::same(3, init),
        )?;
        let mut down = Vec::with_capacity(depth);
        for level in 1..=depth {
            down.push(Conv2d::new(
                store,
                &format!("{prefix}.enc{level}"),
                channels(level - 1),
                channels(level),
                ConvConfig::strided(4, 2, 1, init),
            )?);
        }
        let mut up = Vec::with_capacity(depth);
        let mut merge = Vec::with_capacity(depth);
        for level in 0..depth {
            up.push(Conv2d::new(
                store,
                &format!("{prefix}.up{level}"),
                channels(level + 1),
                channels(level),
                ConvConfig::same(3, init),
            )?);
            merge.push(Conv2d::new(
                store,
                &format!("{prefix}.merge{level}"),
                2 * channels(level) + extra[level],
                channels(level),
                ConvConfig::same(3, init),
            )?);
        }
        Ok(Self {
            input,
            down,
            up,
            merge,
            extra: extra.to_vec(),
        })
    }

    pub(crate) fn depth(&self) -> usize {
        self.down.len()
    }

    pub(crate) fn out_channels(&self) -> usize {
        self.input.out_channels()
    }

    /// Channel-wise concatenation with the label features (for levels that
    /// take extra channels) followed by the level's merge convolution.
    pub(crate) fn merge(&self, level: usize, decoder: &Tensor, extra: Option<&Tensor>) -> Result<Tensor> {
        let conv = self
            .merge
            .get(level)
            .ok_or_else(|| Error::shape(format!("no decoder level {level}")))?;
        if self.extra[level] == 0 {
            return conv.forward(decoder);
        }
        let extra = extra.ok_or_else(|| {
            Error::shape(format!("decoder level {level} expects label features"))
        })?;
        let (_, _, h, w) = decoder.dims4()?;
        let (_, _, eh, ew) = extra.dims4()?;
        if (h, w) != (eh, ew) {
            return Err(Error::shape(format!(
                "level {level}: decoder features are {h}×{w}, label features {eh}×{ew}"
            )));
        }
        conv.forward(&Tensor::cat(&[decoder, extra], 1)?)
    }

    /// Returns the full-resolution decoder output. `extra(level, h, w)`
    /// supplies label features for levels that expect them.
    pub(crate) fn forward(
        &self,
        x: &Tensor,
        extra: &dyn Fn(usize, usize, usize) -> Result<Option<Tensor>>,
    ) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.depth() + 1);
        let mut h = leaky_relu(&self.input.forward(x)?, 0.2)?;
        skips.push(h.clone());
        for conv in &self.down {
            h = leaky_relu(&instance_norm(&conv.forward(&h)?, false)?, 0.2)?;
            skips.push(h.clone());
        }
        for level in (0..self.depth()).rev() {
            let skip = &skips[level];
            let (_, _, sh, sw) = skip.dims4()?;
            let up = h.upsample_nearest2d(sh, sw)?;
            let up = instance_norm(&self.up[level].forward(&up)?, false)?.relu()?;
            let cat = Tensor::cat(&[&up, skip], 1)?;
            let label = if self.extra[level] > 0 {
                extra(level, sh, sw)?
            } else {
                None
            };
            h = instance_norm(&self.merge(level, &cat, label.as_ref())?, false)?.relu()?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct SpadeNorm {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl SpadeNorm {
    fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            shared: Conv2d::new(store, &format!("{name}.shared"), 1, hidden, ConvConfig::same(3, GAN_INIT))?,
            gamma: Conv2d::new(store, &format!("{name}.gamma"), hidden, channels, ConvConfig::same(3, GAN_INIT))?,
            beta: Conv2d::new(store, &format!("{name}.beta"), hidden, channels, ConvConfig::same(3, GAN_INIT))?,
        })
    }

    fn forward(&self, x: &Tensor, label: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let label = resize_nearest(label, h, w)?;
        let actv = self.shared.forward(&label)?.relu()?;
        let gamma = self.gamma.forward(&actv)?;
        let beta = self.beta.forward(&actv)?;
        let normed = instance_norm(x, false)?;
        Ok(((normed * (gamma + 1.0)?)? + beta)?)
    }
}

#[derive(Debug, Clone)]
struct SpadeResBlock {
    norm1: SpadeNorm,
    conv1: Conv2d,
    norm2: SpadeNorm,
    conv2: Conv2d,
}

impl SpadeResBlock {
    fn new(store: &mut ParamStore, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: SpadeNorm::new(store, &format!("{name}.norm1"), channels, hidden)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, ConvConfig::same(3, GAN_INIT))?,
            norm2: SpadeNorm::new(store, &format!("{name}.norm2"), channels, hidden)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, ConvConfig::same(3, GAN_INIT))?,
        })
    }

    fn forward(&self, x: &Tensor, label: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&leaky_relu(&self.norm1.forward(x, label)?, 0.2)?)?;
        let h = self.conv2.forward(&leaky_relu(&self.norm2.forward(&h, label)?, 0.2)?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct SpadePath {
    input: Conv2d,
    blocks: Vec<SpadeResBlock>,
    resolution: usize,
}

impl SpadePath {
    fn new(store: &mut ParamStore, spec: &GeneratorSpec) -> Result<Self> {
        let c = spec.spade_feature_channels;
        let input = Conv2d::new(store, "spade.input", 1, c, ConvConfig::same(3, GAN_INIT))?;
        let blocks = (0..spec.spade_blocks)
            .map(|i| SpadeResBlock::new(store, &format!("spade.block{i}"), c, spec.spade_hidden_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input,
            blocks,
            resolution: spec.image_size / spec.spade_downsample,
        })
    }

    fn forward(&self, label: &Tensor) -> Result<Tensor> {
        let label = resize_nearest(label, self.resolution, self.resolution)?;
        let mut x = self.input.forward(&label)?;
        for block in &self.blocks {
            x = block.forward(&x, &label)?;
        }
        leaky_relu(&x, 0.2)
    }
}

/// Brings label-path features to a decoder level's resolution.
fn match_resolution(features: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, fh, fw) = features.dims4()?;
    if h >= fh {
        resize_nearest(features, h, w)
    } else {
        Ok(features.avg_pool2d((fh / h, fw / w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    seed: u64,
    store: ParamStore,
    unet: UNet,
    head: Conv2d,
    label_path: Option<SpadePath>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        Self::with_dtype(spec, seed, DType::F32, &Device::Cpu)
    }

    pub fn with_dtype(spec: GeneratorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, device);
        Self::build(spec, seed, store)
    }

    fn build(spec: GeneratorSpec, seed: u64, mut store: ParamStore) -> Result<Self> {
        spec.validate()?;
        let extra: Vec<usize> = (0..spec.unet_depth)
            .map(|l| {
                if spec.fusion_levels.contains(&l) {
                    spec.spade_feature_channels
                } else {
                    0
                }
            })
            .collect();
        let unet = UNet::new(
            &mut store,
            "unet",
            1,
            spec.unet_depth,
            |l| spec.channels(l),
            &extra,
            GAN_INIT,
        )?;
        let head = Conv2d::new(&mut store, "head", spec.channels(0), 1, ConvConfig::same(1, GAN_INIT))?;
        let label_path = if spec.has_label_path() {
            Some(SpadePath::new(&mut store, &spec)?)
        } else {
            None
        };
        Ok(Self {
            spec,
            seed,
            store,
            unet,
            head,
            label_path,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Label-path output at the SPADE resolution, `None` for a plain U-net.
    pub fn label_features(&self, label: &Tensor) -> Result<Option<Tensor>> {
        self.label_path.as_ref().map(|p| p.forward(label)).transpose()
    }

    /// Merge convolution of decoder level `level`. Fusion levels concatenate
    /// `label_features` (already at the level's resolution) onto the decoder
    /// features; other levels ignore them.
    pub fn fuse_features(
        &self,
        level: usize,
        decoder_features: &Tensor,
        label_features: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.unet.merge(level, decoder_features, label_features)
    }

    fn check_input(&self, t: &Tensor, what: &str) -> Result<()> {
        let (_, c, h, w) = t.dims4()?;
        let s = self.spec.image_size;
        if c != 1 || h != s || w != s {
            return Err(Error::shape(format!(
                "{what} must be (B, 1, {s}, {s}), got {:?}",
                t.dims()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Tensor, label: &Tensor) -> Result<Tensor> {
        self.check_input(image, "image")?;
        self.check_input(label, "label")?;
        if image.dim(0)? != label.dim(0)? {
            return Err(Error::shape("image and label batch sizes differ"));
        }
        let features = self.label_features(label)?;
        let extra = |_level: usize, h: usize, w: usize| -> Result<Option<Tensor>> {
            features.as_ref().map(|f| match_resolution(f, h, w)).transpose()
        };
        let h = self.unet.forward(image, &extra)?;
        Ok(self.head.forward(&h)?.tanh()?)
    }

    /// Convenience single-image inference in `[-1, 1]`.
    pub fn translate_image(&self, image: &Image, label: &Mask) -> Result<Image> {
        let dtype = self.store.dtype();
        let device = self.store.device().clone();
        let x = images_to_tensor(&[image], dtype, &device)?;
        let l = masks_to_tensor(&[label], dtype, &device)?;
        let out = self.forward(&x, &l)?;
        Ok(tensor_to_images(&out)?.remove(0))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(GENERATOR_KIND, self.seed, serde_json::to_value(&self.spec)?)
            .with_tensors("", self.store.tensors()))
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        ck.expect_kind(GENERATOR_KIND)?;
        let spec: GeneratorSpec = serde_json::from_value(ck.spec.clone())?;
        Self::from_parts(spec, ck.seed, ck.tensors.clone(), device)
    }

    pub(crate) fn from_parts(
        spec: GeneratorSpec,
        seed: u64,
        tensors: std::collections::BTreeMap<String, Tensor>,
        device: &Device,
    ) -> Result<Self> {
        let dtype = tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let n = tensors.len();
        let store = ParamStore::from_tensors(tensors, dtype, device, false)?;
        let g = Self::build(spec, seed, store)?;
        if g.store.len() != n {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {n} tensors, architecture expects {}",
                g.store.len()
            )));
        }
        Ok(g)
    }
}

impl Translate for Generator {
    fn translate(&self, image: &Tensor, label: &Tensor) -> Result<Tensor> {
        self.forward(image, label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> GeneratorSpec {
        GeneratorSpec {
            image_size: 16,
            unet_depth: 2,
            base_channels: 4,
            max_channels: 16,
            spade_blocks: 2,
            spade_hidden_channels: 4,
            spade_feature_channels: 4,
            spade_downsample: 4,
            fusion_levels: vec![0, 1],
        }
    }

    fn inputs(size: usize) -> (Tensor, Tensor) {
        let dev = Device::Cpu;
        let x = Tensor::rand(-1f32, 1.0, (1, 1, size, size), &dev).unwrap();
        let mut l = vec![0f32; size * size];
        for r in 4..8 {
            for c in 4..8 {
                l[r * size + c] = 1.0;
            }
        }
        let l = Tensor::from_vec(l, (1, 1, size, size), &dev).unwrap();
        (x, l)
    }

    #[test]
    fn shape_contract_and_range() {
        let g = Generator::new(GeneratorSpec::desk(64), 1).unwrap();
        let (x, l) = inputs(64);
        let y = g.forward(&x, &l).unwrap();
        assert_eq!(y.dims(), &[1, 1, 64, 64]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let spec = GeneratorSpec {
            image_size: 30,
            ..toy()
        };
        assert!(Generator::new(spec, 0).is_err());
        let spec = GeneratorSpec {
            fusion_levels: vec![2],
            ..toy()
        };
        assert!(Generator::new(spec, 0).is_err());
    }

    #[test]
    fn same_seed_same_parameters_and_outputs() {
        let a = Generator::new(toy(), 7).unwrap();
        let b = Generator::new(toy(), 7).unwrap();
        assert_eq!(a.params().checksum().unwrap(), b.params().checksum().unwrap());
        let (x, l) = inputs(16);
        let ya: Vec<f32> = a.forward(&x, &l).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let yb: Vec<f32> = b.forward(&x, &l).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(ya, yb);
        let c = Generator::new(toy(), 8).unwrap();
        assert_ne!(a.params().checksum().unwrap(), c.params().checksum().unwrap());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let g = Generator::new(toy(), 0).unwrap();
        let (x, _) = inputs(16);
        let (_, l) = inputs(32);
        assert!(g.forward(&x, &l).is_err());
    }

    #[test]
    fn fusion_concatenates_channels() {
        let g = Generator::new(toy(), 0).unwrap();
        let dev = Device::Cpu;
        // Level 0: decoder carries 2·4 channels, label path adds 4.
        let dec = Tensor::rand(0f32, 1.0, (1, 8, 16, 16), &dev).unwrap();
        let lab = Tensor::rand(0f32, 1.0, (1, 4, 16, 16), &dev).unwrap();
        let fused = g.fuse_features(0, &dec, Some(&lab)).unwrap();
        assert_eq!(fused.dims(), &[1, 4, 16, 16]);
        let small = Tensor::rand(0f32, 1.0, (1, 4, 8, 8), &dev).unwrap();
        assert!(g.fuse_features(0, &dec, Some(&small)).is_err());
    }

    #[test]
    fn zeroed_label_features_equal_convolution_of_zero_padded_input() {
        let g = Generator::new(toy(), 3).unwrap();
        let dev = Device::Cpu;
        let dec = Tensor::rand(0f32, 1.0, (1, 8, 16, 16), &dev).unwrap();
        let zeros = Tensor::zeros((1, 4, 16, 16), DType::F32, &dev).unwrap();
        let fused = g.fuse_features(0, &dec, Some(&zeros)).unwrap();
        let cat = Tensor::cat(&[&dec, &zeros], 1).unwrap();
        let direct = g.unet.merge[0].forward(&cat).unwrap();
        let diff = (fused - direct).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn non_fusion_levels_pass_decoder_through() {
        let spec = GeneratorSpec {
            fusion_levels: vec![0],
            ..toy()
        };
        let g = Generator::new(spec, 0).unwrap();
        let dev = Device::Cpu;
        // Level 1: 2·8 decoder channels, no label channels.
        let dec = Tensor::rand(0f32, 1.0, (1, 16, 8, 8), &dev).unwrap();
        let lab = Tensor::rand(0f32, 1.0, (1, 4, 8, 8), &dev).unwrap();
        let with = g.fuse_features(1, &dec, Some(&lab)).unwrap();
        let without = g.fuse_features(1, &dec, None).unwrap();
        let diff = (with - without).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn plain_unet_ignores_label() {
        let g = Generator::new(toy().plain_unet(), 2).unwrap();
        let (x, l) = inputs(16);
        let zero = l.zeros_like().unwrap();
        let a = g.forward(&x, &l).unwrap();
        let b = g.forward(&x, &zero).unwrap();
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn accepts_rotated_inputs() {
        let g = Generator::new(toy(), 5).unwrap();
        let (x, l) = inputs(16);
        let xr = x.flip(&[2, 3]).unwrap();
        let lr = l.flip(&[2, 3]).unwrap();
        assert_eq!(g.forward(&xr, &lr).unwrap().dims(), &[1, 1, 16, 16]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let g = Generator::new(toy(), 11).unwrap();
        let bytes = g.checkpoint().unwrap().to_bytes().unwrap();
        let back = Generator::from_checkpoint(
            &Checkpoint::from_bytes(&bytes, &Device::Cpu).unwrap(),
            &Device::Cpu,
        )
        .unwrap();
        assert_eq!(back.spec(), g.spec());
        assert_eq!(back.params().checksum().unwrap(), g.params().checksum().unwrap());
        let (x, l) = inputs(16);
        let a: Vec<f32> = g.forward(&x, &l).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = back.forward(&x, &l).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
