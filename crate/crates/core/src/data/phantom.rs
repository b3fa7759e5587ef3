use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{normalize, Image, Mask, Sample};
use crate::error::{Error, Result};

/// Procedural two-channel corpus with exactly known lesion ground truth.
///
/// Anatomy is a smooth textured background with bright non-tumour
/// hyperintensities. The tumour channel shares the anatomy's low-frequency
/// structure and carries bright discs exactly on the label support; a
/// fraction of discs is rendered at reduced contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_samples: usize,
    pub size: usize,
    pub blob_count_range: [usize; 2],
    pub blob_radius_range: [f32; 2],
    pub hyperintensity_count_range: [usize; 2],
    pub background_texture_scale: f32,
    pub tumour_brightness: f32,
    pub dim_tumour_fraction: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            size: 64,
            blob_count_range: [0, 3],
            blob_radius_range: [3.0, 6.0],
            hyperintensity_count_range: [1, 4],
            background_texture_scale: 16.0,
            tumour_brightness: 0.8,
            dim_tumour_fraction: 0.3,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [rmin, rmax] = self.blob_radius_range;
        if self.size < 4 {
            return Err(Error::config("phantom size must be at least 4"));
        }
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::config(format!("invalid blob radius range [{rmin}, {rmax}]")));
        }
        if rmax > self.size as f32 / 2.0 {
            return Err(Error::config(format!(
                "blob radius {rmax} exceeds half the image side {}",
                self.size
            )));
        }
        if self.blob_count_range[0] > self.blob_count_range[1]
            || self.hyperintensity_count_range[0] > self.hyperintensity_count_range[1]
        {
            return Err(Error::config("count ranges must be [min, max] with min <= max"));
        }
        if !(self.tumour_brightness > 0.0 && self.tumour_brightness <= 1.0) {
            return Err(Error::config("tumour_brightness must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.dim_tumour_fraction) {
            return Err(Error::config("dim_tumour_fraction must lie in [0, 1]"));
        }
        if !(self.background_texture_scale >= 1.0) {
            return Err(Error::config("background_texture_scale must be >= 1 pixel"));
        }
        Ok(())
    }
}

pub fn make_phantom_corpus(config: &PhantomConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..config.n_samples)
        .map(|i| phantom_sample(config, i))
        .collect()
}

/// Generates sample `index` of the corpus. Each sample draws from its own
/// ChaCha stream, so any generation order yields the same corpus.
pub fn phantom_sample(config: &PhantomConfig, index: usize) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let n = config.size;
    let noise = Normal::new(0.0f32, 1.0).expect("unit normal");

    let low = smooth_field(n, config.background_texture_scale, &mut rng);
    let mut anatomy = Image::zeros((n, n));
    let mut tumour = Image::zeros((n, n));
    for ((a, t), &l) in anatomy.iter_mut().zip(tumour.iter_mut()).zip(low.iter()) {
        *a = 0.15 + 0.45 * l + 0.03 * noise.sample(&mut rng);
        *t = 0.05 + 0.25 * l + 0.02 * noise.sample(&mut rng);
    }

    let [rmin, rmax] = config.blob_radius_range;
    let draw_radius = |rng: &mut ChaCha8Rng| {
        if rmax > rmin {
            rng.random_range(rmin..=rmax)
        } else {
            rmin
        }
    };

    // Hyperintensities: anatomy only, never labelled.
    let [hmin, hmax] = config.hyperintensity_count_range;
    let n_hyper = rng.random_range(hmin..=hmax);
    for _ in 0..n_hyper {
        let r = draw_radius(&mut rng).max(1.0) * 0.8;
        let cy = rng.random_range(0.0..n as f32);
        let cx = rng.random_range(0.0..n as f32);
        let amp = rng.random_range(0.45f32..0.6);
        let s2 = 2.0 * r * r * 0.5;
        for ((y, x), a) in anatomy.indexed_iter_mut() {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            if d2 < 9.0 * r * r {
                *a += amp * (-d2 / s2).exp();
            }
        }
    }

    // Tumour discs, pairwise separated so each is its own 8-connected component.
    let [bmin, bmax] = config.blob_count_range;
    let n_blobs = rng.random_range(bmin..=bmax);
    let mut blobs: Vec<(f32, f32, f32)> = Vec::with_capacity(n_blobs);
    let mut label = Mask::zeros((n, n));
    for _ in 0..n_blobs {
        let r = draw_radius(&mut rng);
        let margin = r.ceil();
        let span = n as f32 - 2.0 * margin;
        let mut placed = None;
        for _ in 0..100 {
            let (cy, cx) = if span > 0.0 {
                (
                    margin + rng.random_range(0.0..span),
                    margin + rng.random_range(0.0..span),
                )
            } else {
                (n as f32 / 2.0, n as f32 / 2.0)
            };
            let clear = blobs
                .iter()
                .all(|&(by, bx, br)| ((by - cy).powi(2) + (bx - cx).powi(2)).sqrt() > br + r + 2.0);
            if clear {
                placed = Some((cy, cx));
                break;
            }
        }
        let Some((cy, cx)) = placed else { continue };
        let dim = rng.random_bool(f64::from(config.dim_tumour_fraction));
        let level = if dim {
            0.5 * config.tumour_brightness
        } else {
            config.tumour_brightness
        };
        for ((y, x), t) in tumour.indexed_iter_mut() {
            let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
            if d2 <= r * r {
                *t += level * (0.85 + 0.15 * (1.0 - d2 / (r * r)));
                label[[y, x]] = 1;
            }
        }
        blobs.push((cy, cx, r));
    }

    let anatomy = normalize(&anatomy, 0.0, 1.0)?;
    let tumour = normalize(&tumour, 0.0, 1.0)?;
    Sample::new(format!("phantom_{index:05}"), anatomy, tumour, label)
}

/// Bilinearly interpolated coarse Gaussian noise rescaled to `[0, 1]`.
fn smooth_field(n: usize, scale: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let cells = (n as f32 / scale).ceil() as usize + 2;
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let coarse = Array2::from_shape_fn((cells, cells), |_| normal.sample(rng));
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut field = Array2::from_shape_fn((n, n), |(y, x)| {
        let fy = y as f32 / scale;
        let fx = x as f32 / scale;
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (smooth(fy - iy as f32), smooth(fx - ix as f32));
        let top = coarse[[iy, ix]] * (1.0 - tx) + coarse[[iy, ix + 1]] * tx;
        let bottom = coarse[[iy + 1, ix]] * (1.0 - tx) + coarse[[iy + 1, ix + 1]] * tx;
        top * (1.0 - ty) + bottom * ty
    });
    let lo = field.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = field.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    field.mapv_inplace(|v| (v - lo) / span);
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::connected_components;

    fn small(n: usize) -> PhantomConfig {
        PhantomConfig {
            n_samples: n,
            size: 32,
            blob_radius_range: [2.0, 4.0],
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn empty_config_yields_empty_corpus() {
        assert!(make_phantom_corpus(&small(0)).unwrap().is_empty());
    }

    #[test]
    fn identical_configs_are_bit_identical() {
        let a = make_phantom_corpus(&small(6)).unwrap();
        let b = make_phantom_corpus(&small(6)).unwrap();
        assert_eq!(a, b);
        let c = make_phantom_corpus(&PhantomConfig { seed: 1, ..small(6) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_blob_range_gives_one_component() {
        let cfg = PhantomConfig {
            blob_count_range: [1, 1],
            ..small(20)
        };
        for s in make_phantom_corpus(&cfg).unwrap() {
            assert_eq!(connected_components(&s.label).len(), 1, "{}", s.id);
        }
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let cfg = PhantomConfig {
            blob_radius_range: [2.0, 17.0],
            ..small(1)
        };
        assert!(make_phantom_corpus(&cfg).is_err());
    }

    #[test]
    fn channels_are_normalized_and_label_binary() {
        for s in make_phantom_corpus(&small(5)).unwrap() {
            assert!(s.anatomy.iter().chain(s.tumour.iter()).all(|v| (-1.0..=1.0).contains(v)));
            assert!(s.label.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let cfg = small(4);
        let corpus = make_phantom_corpus(&cfg).unwrap();
        assert_eq!(phantom_sample(&cfg, 3).unwrap(), corpus[3]);
    }
}
