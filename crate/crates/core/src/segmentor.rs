//! U-net segmentor: pretrained then frozen as the third player of GAN
//! training, and trained from scratch in the downstream study.
//!
//! A frozen segmentor holds detached parameters. Gradients still flow
//! through it to its input, never into its weights, and it is safe to share
//! across evaluation threads. Training is bit-reproducible for a fixed seed
//! when the compute backend runs single-threaded (`RAYON_NUM_THREADS=1`).

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, masks_to_tensor, rotate, tensor_to_images, Image, Mask, Rotation, Sample};
use crate::error::{Error, Result};
use crate::losses::weighted_bce;
use crate::metgen::UNet;
use crate::metrics::{lesion_scores, match_lesions, mean, MatchPolicy, SegScores};
use crate::nn::{sigmoid, Adam, AdamConfig, Checkpoint, Conv2d, ConvConfig, Init, ParamStore};

pub const SEGMENTOR_KIND: &str = "segmentor";
const INFERENCE_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentorSpec {
    pub unet_depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Probability cutoff for binary predictions.
    pub threshold: f32,
}

impl Default for SegmentorSpec {
    fn default() -> Self {
        Self {
            unet_depth: 4,
            base_channels: 32,
            max_channels: 256,
            threshold: 0.5,
        }
    }
}

impl SegmentorSpec {
    pub fn desk() -> Self {
        Self {
            unet_depth: 2,
            base_channels: 8,
            max_channels: 32,
            threshold: 0.5,
        }
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(self.max_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet_depth == 0 || self.base_channels == 0 {
            return Err(Error::config("segmentor depth and channels must be positive"));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::config("segmentor threshold must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentorSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Random right-angle rotations at train time.
    pub augment: bool,
}

impl Default for SegmentorSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr: 1e-3,
            augment: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Segmentor {
    spec: SegmentorSpec,
    seed: u64,
    store: ParamStore,
    unet: UNet,
    head: Conv2d,
}

impl Segmentor {
    pub fn new(spec: SegmentorSpec, seed: u64) -> Result<Self> {
        Self::with_dtype(spec, seed, DType::F32, &Device::Cpu)
    }

    pub fn with_dtype(spec: SegmentorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(spec, seed, ParamStore::new(seed, dtype, device))
    }

    fn build(spec: SegmentorSpec, seed: u64, mut store: ParamStore) -> Result<Self> {
        spec.validate()?;
        let extra = vec![0; spec.unet_depth];
        let unet = UNet::new(
            &mut store,
            "unet",
            1,
            spec.unet_depth,
            |l| spec.channels(l),
            &extra,
            Init::He,
        )?;
        let head = Conv2d::new(&mut store, "head", unet.out_channels(), 1, ConvConfig::same(1, Init::He))?;
        Ok(Self {
            spec,
            seed,
            store,
            unet,
            head,
        })
    }

    pub fn spec(&self) -> &SegmentorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    /// Detaches every parameter from the optimizer. Idempotent.
    pub fn freeze(self) -> Result<Self> {
        if self.is_frozen() {
            return Ok(self);
        }
        let store = self.store.frozen_copy()?;
        Self::build(self.spec, self.seed, store)
    }

    pub fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }

    pub fn segment_logits(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        let stride = 1usize << self.spec.unet_depth;
        if c != 1 || h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(format!(
                "segmentor input must be (B, 1, H, W) with H, W divisible by {stride}, got {:?}",
                image.dims()
            )));
        }
        let none = |_: usize, _: usize, _: usize| -> Result<Option<Tensor>> { Ok(None) };
        let h = self.unet.forward(image, &none)?;
        self.head.forward(&h)
    }

    /// Per-pixel lesion probability in `[0, 1]`.
    pub fn segment(&self, image: &Tensor) -> Result<Tensor> {
        sigmoid(&self.segment_logits(image)?)
    }

    pub fn predict_probabilities(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let x = images_to_tensor(chunk, self.store.dtype(), self.store.device())?;
            out.extend(tensor_to_images(&self.segment(&x)?)?);
        }
        Ok(out)
    }

    pub fn predict_masks(&self, images: &[&Image]) -> Result<Vec<Mask>> {
        let t = self.spec.threshold;
        Ok(self
            .predict_probabilities(images)?
            .iter()
            .map(|p| p.mapv(|v| u8::from(v > t)))
            .collect())
    }

    /// Lesion-wise scores of the thresholded predictions against `labels`.
    pub fn evaluate(&self, images: &[&Image], labels: &[&Mask], policy: MatchPolicy) -> Result<SegEvaluation> {
        if images.len() != labels.len() {
            return Err(Error::shape("image and label counts differ"));
        }
        let preds = self.predict_masks(images)?;
        SegEvaluation::from_masks(&preds, labels, policy)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(SEGMENTOR_KIND, self.seed, serde_json::to_value(&self.spec)?)
            .with_tensors("", self.store.tensors());
        ck.extra = serde_json::json!({
            "frozen": self.is_frozen(),
            "checksum": self.checksum()?,
        });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        ck.expect_kind(SEGMENTOR_KIND)?;
        let spec: SegmentorSpec = serde_json::from_value(ck.spec.clone())?;
        let frozen = ck.extra.get("frozen").and_then(|v| v.as_bool()).unwrap_or(false);
        let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let store = ParamStore::from_tensors(ck.tensors.clone(), dtype, device, frozen)?;
        Self::build(spec, ck.seed, store)
    }
}

/// Corpus-level lesion-wise segmentation scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEvaluation {
    /// Per-image means.
    pub mean: SegScores,
    pub per_image: Vec<SegScores>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl SegEvaluation {
    pub fn from_masks(preds: &[Mask], labels: &[&Mask], policy: MatchPolicy) -> Result<Self> {
        let mut per_image = Vec::with_capacity(preds.len());
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, l) in preds.iter().zip(labels) {
            let m = match_lesions(p, l, policy)?;
            tp += m.tp;
            fp += m.fp;
            fn_ += m.fn_;
            per_image.push(lesion_scores(&m));
        }
        let avg = |f: fn(&SegScores) -> f64| mean(&per_image.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            mean: SegScores {
                dice: avg(|s| s.dice),
                precision: avg(|s| s.precision),
                recall: avg(|s| s.recall),
                jaccard: avg(|s| s.jaccard),
            },
            per_image,
            tp,
            fp,
            fn_,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<EpochRecord>,
    pub final_validation: Option<SegEvaluation>,
    pub warnings: Vec<String>,
    pub checksum: String,
}

/// Trains a segmentor from scratch on `(image, label)` pairs with the
/// class-balanced weighted cross-entropy also used as the GAN constraint.
pub fn train_segmentor(
    train: &[(&Image, &Mask)],
    validation: &[(&Image, &Mask)],
    spec: &SegmentorSpec,
    schedule: &SegmentorSchedule,
    seed: u64,
) -> Result<(Segmentor, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::config("cannot train a segmentor on an empty dataset"));
    }
    if schedule.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let seg = Segmentor::new(spec.clone(), seed)?;
    let mut opt = Adam::new(
        seg.params().vars(),
        AdamConfig {
            lr: schedule.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
    )?;
    let mut warnings = Vec::new();
    if schedule.epochs == 0 {
        let msg = "zero epochs requested: returning an untrained segmentor".to_owned();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let dtype = seg.params().dtype();
    let device = seg.params().device().clone();
    let mut records = Vec::with_capacity(schedule.epochs);
    for epoch in 1..=schedule.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for batch in order.chunks(schedule.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let (img, lab) = train[i];
                let rot = if schedule.augment {
                    Rotation::random(&mut rng)
                } else {
                    Rotation::R0
                };
                images.push(rotate(img, rot));
                labels.push(rotate(lab, rot));
            }
            let x = images_to_tensor(&images.iter().collect::<Vec<_>>(), dtype, &device)?;
            let y = masks_to_tensor(&labels.iter().collect::<Vec<_>>(), dtype, &device)?;
            let loss = weighted_bce(&seg.segment(&x)?, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: "segmentor pretraining loss".into(),
                });
            }
            losses.push(value);
            opt.step(&loss.backward()?, schedule.lr)?;
        }
        let validation_dice = if validation.is_empty() {
            None
        } else {
            Some(evaluate_pairs(&seg, validation)?.mean.dice)
        };
        log::debug!(
            "segmentor epoch {epoch}: loss {:.4} val dice {validation_dice:?}",
            mean(&losses)
        );
        records.push(EpochRecord {
            epoch,
            mean_loss: mean(&losses),
            validation_dice,
        });
    }
    let final_validation = if validation.is_empty() {
        None
    } else {
        Some(evaluate_pairs(&seg, validation)?)
    };
    let checksum = seg.checksum()?;
    Ok((
        seg,
        PretrainReport {
            epochs: records,
            final_validation,
            warnings,
            checksum,
        },
    ))
}

fn evaluate_pairs(seg: &Segmentor, pairs: &[(&Image, &Mask)]) -> Result<SegEvaluation> {
    let images: Vec<&Image> = pairs.iter().map(|p| p.0).collect();
    let labels: Vec<&Mask> = pairs.iter().map(|p| p.1).collect();
    seg.evaluate(&images, &labels, MatchPolicy::default())
}

/// Pretraining on the tumour channel of paired samples.
pub fn pretrain_segmentor(
    train: &[Sample],
    validation: &[Sample],
    spec: &SegmentorSpec,
    schedule: &SegmentorSchedule,
    seed: u64,
) -> Result<(Segmentor, PretrainReport)> {
    fn pairs(s: &[Sample]) -> Vec<(&Image, &Mask)> {
        s.iter().map(|s| (&s.tumour, &s.label)).collect()
    }
    train_segmentor(&pairs(train), &pairs(validation), spec, schedule, seed)
}
