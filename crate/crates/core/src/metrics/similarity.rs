use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stats::mean;
use crate::data::{to_unit_range, Image};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("metric inputs differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::shape("metric inputs are empty"));
    }
    Ok(())
}

pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).collect();
    Ok(mean(&d))
}

pub fn msd(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .collect();
    Ok(mean(&d))
}

/// Pearson correlation over pixels.
pub fn ccoeff(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let xa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let xb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let (ma, mb) = (mean(&xa), mean(&xb));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in xa.iter().zip(&xb) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance("correlation of a constant image".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn gaussian_kernel() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let rows = Array2::from_shape_fn((h, w - n + 1), |(i, j)| (0..n).map(|t| k[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((h - n + 1, w - n + 1), |(i, j)| (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean local structural similarity, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let x = a.mapv(|v| v as f64);
    let y = b.mapv(|v| v as f64);
    let k = gaussian_kernel();
    let mx = filter(&x, &k);
    let my = filter(&y, &k);
    let sxx = filter(&(&x * &x), &k);
    let syy = filter(&(&y * &y), &k);
    let sxy = filter(&(&x * &y), &k);
    let map: Vec<f64> = ndarray::Zip::from(&mx)
        .and(&my)
        .and(&sxx)
        .and(&syy)
        .and(&sxy)
        .map_collect(|&mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .into_iter()
        .collect();
    Ok(mean(&map))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub mae: f64,
    pub msd: f64,
    pub ssim: f64,
    /// `None` when either image is constant.
    pub ccoeff: Option<f64>,
}

impl SimilarityReport {
    /// Scores two images in network range `[-1, 1]` after remapping both
    /// to `[0, 1]`.
    pub fn compute(generated: &Image, reference: &Image) -> Result<Self> {
        let a = to_unit_range(generated);
        let b = to_unit_range(reference);
        let ccoeff = match ccoeff(&a, &b) {
            Ok(v) => Some(v),
            Err(Error::ZeroVariance(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            mae: mae(&a, &b)?,
            msd: msd(&a, &b)?,
            ssim: ssim(&a, &b)?,
            ccoeff,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_shape_fn((h, w), |_| rng.random::<f32>())
    }

    #[test]
    fn mae_msd_closed_forms() {
        let a = Image::zeros((4, 4));
        let b = Image::from_elem((4, 4), 0.5);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(msd(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &b).unwrap(), 0.5);
        assert_eq!(msd(&a, &b).unwrap(), 0.25);
        assert!(mae(&a, &Image::zeros((4, 5))).is_err());
    }

    #[test]
    fn ssim_constant_images_reduce_to_luminance_term() {
        let (c1, c2) = (0.2f64, 0.7f64);
        let a = Image::from_elem((16, 16), c1 as f32);
        let b = Image::from_elem((16, 16), c2 as f32);
        let k = K1 * K1;
        let (c1, c2) = (c1 as f32 as f64, c2 as f32 as f64);
        let expect = (2.0 * c1 * c2 + k) / (c1 * c1 + c2 * c2 + k);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::zeros((10, 16));
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = random(24, 20, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ccoeff_sign_and_affine_cases() {
        let a = random(8, 8, 2);
        let neg = a.mapv(|v| -v);
        let aff = a.mapv(|v| 3.0 * v + 0.25);
        assert!((ccoeff(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ccoeff(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((ccoeff(&a, &aff).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(
            ccoeff(&a, &Image::zeros((8, 8))),
            Err(Error::ZeroVariance(_))
        ));
    }

    #[test]
    fn report_tolerates_constant_images() {
        let a = Image::from_elem((16, 16), -1.0);
        let r = SimilarityReport::compute(&a, &a).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.ccoeff, None);
        assert!((r.ssim - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn metrics_are_symmetric_and_bounded(seed in 0u64..1000) {
            let a = random(16, 16, seed);
            let b = random(16, 16, seed + 7919);
            prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            prop_assert_eq!(msd(&a, &b).unwrap(), msd(&b, &a).unwrap());
            let s = ssim(&a, &b).unwrap();
            prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s));
            let c = ccoeff(&a, &b).unwrap();
            prop_assert!((c - ccoeff(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn affine_invariance(seed in 0u64..1000, scale in 0.8f32..1.25, shift in -0.1f32..0.1) {
            let a = random(32, 32, seed);
            let noise = random(32, 32, seed + 1);
            let b = &a * 0.9 + &noise * 0.1;
            let ta = a.mapv(|v| v * scale + shift);
            let tb = b.mapv(|v| v * scale + shift);
            prop_assert!((ccoeff(&a, &b).unwrap() - ccoeff(&ta, &tb).unwrap()).abs() < 1e-6);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&ta, &tb).unwrap()).abs() < 1e-3);
        }
    }
}
