//! Paired two-channel samples and the transforms applied to them before
//! training: intensity normalization, right-angle rotations, dataset
//! splitting, file ingestion and the procedural phantom corpus.

mod io;
mod phantom;
mod split;

pub use io::{export_dataset, load_dataset, Channel, LoadOptions};
pub use phantom::{make_phantom_corpus, phantom_sample, PhantomConfig};
pub use split::{split_dataset, DatasetSplit};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image, row-major `(height, width)`.
pub type Image = Array2<f32>;

/// Binary mask, values in `{0, 1}`.
pub type Mask = Array2<u8>;

/// A registered triple: anatomy image, tumour image and binary lesion label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub anatomy: Image,
    pub tumour: Image,
    pub label: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, anatomy: Image, tumour: Image, label: Mask) -> Result<Self> {
        let id = id.into();
        if anatomy.dim() != tumour.dim() || anatomy.dim() != label.dim() {
            return Err(Error::shape(format!(
                "sample `{id}`: anatomy {:?}, tumour {:?}, label {:?}",
                anatomy.dim(),
                tumour.dim(),
                label.dim()
            )));
        }
        if label.iter().any(|&v| v > 1) {
            return Err(Error::config(format!("sample `{id}`: label is not binary")));
        }
        Ok(Self {
            id,
            anatomy,
            tumour,
            label,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.anatomy.dim()
    }

    pub fn has_lesion(&self) -> bool {
        self.label.iter().any(|&v| v == 1)
    }

    /// Applies the same rotation to all three channels.
    pub fn rotated(&self, rotation: Rotation) -> Sample {
        Sample {
            id: self.id.clone(),
            anatomy: rotate(&self.anatomy, rotation),
            tumour: rotate(&self.tumour, rotation),
            label: rotate(&self.label, rotation),
        }
    }
}

/// Affine map of `[lo, hi]` onto `[-1, 1]`; values outside the source range
/// clamp to the endpoints.
pub fn normalize(image: &Image, lo: f32, hi: f32) -> Result<Image> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!(
            "degenerate intensity range [{lo}, {hi}]"
        )));
    }
    let scale = 2.0 / (hi - lo);
    Ok(image.mapv(|v| ((v - lo) * scale - 1.0).clamp(-1.0, 1.0)))
}

/// Inverse of [`normalize`] onto `[0, 1]`, used by the similarity metrics.
pub fn to_unit_range(image: &Image) -> Image {
    image.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Counter-clockwise rotation by a multiple of 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::ALL[rng.random_range(0..4)]
    }

    pub fn inverse(self) -> Self {
        match self {
            Rotation::R0 => Rotation::R0,
            Rotation::R90 => Rotation::R270,
            Rotation::R180 => Rotation::R180,
            Rotation::R270 => Rotation::R90,
        }
    }
}

/// Rotates a 2D array counter-clockwise. A pixel at `(r, c)` of an `H×W`
/// array lands at `(W-1-c, r)` under a 90 degree turn.
pub fn rotate<T: Clone>(a: &Array2<T>, rotation: Rotation) -> Array2<T> {
    let (h, w) = a.dim();
    match rotation {
        Rotation::R0 => a.clone(),
        Rotation::R90 => Array2::from_shape_fn((w, h), |(i, j)| a[[j, w - 1 - i]].clone()),
        Rotation::R180 => Array2::from_shape_fn((h, w), |(i, j)| a[[h - 1 - i, w - 1 - j]].clone()),
        Rotation::R270 => Array2::from_shape_fn((w, h), |(i, j)| a[[h - 1 - j, i]].clone()),
    }
}

/// Random right-angle rotation shared by all channels.
pub fn augment_rotate<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    sample.rotated(Rotation::random(rng))
}

/// Stacks same-sized images into a `(B, 1, H, W)` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::shape("cannot stack an empty image list"))?;
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::shape(format!(
                "cannot stack {:?} with {:?}",
                img.dim(),
                (h, w)
            )));
        }
        data.extend(img.iter().copied());
    }
    let t = Tensor::from_vec(data, (images.len(), 1, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

pub fn masks_to_tensor(masks: &[&Mask], dtype: DType, device: &Device) -> Result<Tensor> {
    let images: Vec<Image> = masks.iter().map(|m| m.mapv(f32::from)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    images_to_tensor(&refs, dtype, device)
}

/// Splits a `(B, 1, H, W)` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("expected one channel, got {c}")));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks_exact(h * w)
        .take(b)
        .map(|chunk| Array2::from_shape_vec((h, w), chunk.to_vec()).expect("chunk size"))
        .collect())
}

pub fn threshold_mask(image: &Image, threshold: f32) -> Mask {
    image.mapv(|v| u8::from(v >= threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) as f32)
    }

    #[test]
    fn normalize_endpoints_midpoint_and_clamp() {
        let img = Array2::from_elem((3, 3), 10.0f32);
        assert!(normalize(&img, 10.0, 20.0).unwrap().iter().all(|&v| v == -1.0));
        let mid = Array2::from_elem((2, 2), 15.0f32);
        assert!(normalize(&mid, 10.0, 20.0).unwrap().iter().all(|&v| v == 0.0));
        let hot = Array2::from_elem((2, 2), 99.0f32);
        assert!(normalize(&hot, 10.0, 20.0).unwrap().iter().all(|&v| v == 1.0));
        assert!(normalize(&img, 5.0, 5.0).is_err());
    }

    #[test]
    fn rotation_zero_is_identity_and_half_turn_is_involution() {
        let a = ramp(4, 4);
        assert_eq!(rotate(&a, Rotation::R0), a);
        assert_eq!(rotate(&rotate(&a, Rotation::R180), Rotation::R180), a);
    }

    #[test]
    fn quarter_turn_moves_blob_by_index_permutation() {
        // Index-permutation oracle on a 5x5 mask: (r, c) -> (W-1-c, r).
        let w = 5;
        for (r, c) in [(1usize, 3usize), (0, 0), (4, 2), (2, 2)] {
            let mut m = Mask::zeros((5, 5));
            m[[r, c]] = 1;
            let rot = rotate(&m, Rotation::R90);
            let pos: Vec<_> = rot.indexed_iter().filter(|(_, &v)| v == 1).map(|(p, _)| p).collect();
            assert_eq!(pos, vec![(w - 1 - c, r)]);
        }
    }

    #[test]
    fn sample_rotation_keeps_channels_aligned() {
        let mut label = Mask::zeros((6, 6));
        label[[1, 4]] = 1;
        let mut anatomy = Image::zeros((6, 6));
        anatomy[[1, 4]] = 1.0;
        let s = Sample::new("a", anatomy.clone(), anatomy, label).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            let r = augment_rotate(&s, &mut rng);
            for ((p, &l), (_, &a)) in r.label.indexed_iter().zip(r.anatomy.indexed_iter()) {
                assert_eq!(f32::from(l), a, "misaligned at {p:?}");
                assert_eq!(r.tumour[p], a);
            }
        }
    }

    #[test]
    fn sample_rejects_mismatched_channels() {
        let a = Image::zeros((4, 4));
        let b = Image::zeros((4, 5));
        assert!(Sample::new("x", a.clone(), b, Mask::zeros((4, 4))).is_err());
        let mut bad = Mask::zeros((4, 4));
        bad[[0, 0]] = 3;
        assert!(Sample::new("x", a.clone(), a, bad).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let a = ramp(3, 5);
        let b = a.mapv(|v| -v);
        let t = images_to_tensor(&[&a, &b], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 1, 3, 5]);
        let back = tensor_to_images(&t).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    proptest! {
        #[test]
        fn normalize_lands_in_unit_interval(vals in proptest::collection::vec(-1e4f32..1e4, 16), lo in -100f32..100.0, span in 0.01f32..500.0) {
            let img = Array2::from_shape_vec((4, 4), vals).unwrap();
            let n = normalize(&img, lo, lo + span).unwrap();
            prop_assert!(n.iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn rotation_then_inverse_is_identity(h in 1usize..7, w in 1usize..7, k in 0usize..4) {
            let a = ramp(h, w);
            let rot = Rotation::ALL[k];
            prop_assert_eq!(rotate(&rotate(&a, rot), rot.inverse()), a);
        }
    }
}
