use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::Array2;

use super::{normalize, Image, Mask, Sample};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

/// Dataset layout: `<root>/<channel>/<id>.<ext>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Anatomy,
    Tumour,
    Label,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Anatomy, Channel::Tumour, Channel::Label];

    pub fn dir_name(self) -> &'static str {
        match self {
            Channel::Anatomy => "anatomy",
            Channel::Tumour => "tumour",
            Channel::Label => "label",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Output side length; every channel is resized to `side × side`.
    pub side: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { side: 256 }
    }
}

/// Loads every sample listed in `<root>/anatomy`, sorted by id.
///
/// Bit depth is taken from each file, so 8- and 16-bit inputs both map their
/// native range onto `[-1, 1]`. Labels are binarized at half their range.
pub fn load_dataset(root: &Path, options: &LoadOptions) -> Result<Vec<Sample>> {
    if options.side == 0 {
        return Err(Error::config("side length must be positive"));
    }
    let anatomy_dir = root.join(Channel::Anatomy.dir_name());
    let entries = fs::read_dir(&anatomy_dir).map_err(|e| Error::io(&anatomy_dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&anatomy_dir, e))?.path();
        let supported = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if supported {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_owned());
            }
        }
    }
    ids.sort();
    ids.dedup();
    ids.iter().map(|id| load_sample(root, id, options.side)).collect()
}

fn find_channel_file(root: &Path, channel: Channel, id: &str) -> Result<PathBuf> {
    let dir = root.join(channel.dir_name());
    EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::MissingChannel {
            id: id.to_owned(),
            channel: channel.dir_name().to_owned(),
        })
}

fn load_sample(root: &Path, id: &str, side: usize) -> Result<Sample> {
    let mut paths = Vec::with_capacity(3);
    for channel in Channel::ALL {
        paths.push(find_channel_file(root, channel, id)?);
    }
    let mut buffers = Vec::with_capacity(3);
    for path in &paths {
        buffers.push(image::open(path)?.to_luma32f());
    }
    let dims = buffers[0].dimensions();
    for (buf, path) in buffers.iter().zip(&paths).skip(1) {
        if buf.dimensions() != dims {
            return Err(Error::DimensionMismatch { file: path.clone() });
        }
    }
    let side = side as u32;
    let fit = |buf: &ImageBuffer<Luma<f32>, Vec<f32>>, filter| {
        if buf.dimensions() == (side, side) {
            to_array(buf)
        } else {
            to_array(&imageops::resize(buf, side, side, filter))
        }
    };
    let anatomy = fit(&buffers[0], FilterType::Triangle);
    let tumour = fit(&buffers[1], FilterType::Triangle);
    let label = fit(&buffers[2], FilterType::Nearest);
    Sample::new(
        id,
        normalize(&anatomy, 0.0, 1.0)?,
        normalize(&tumour, 0.0, 1.0)?,
        label.mapv(|v| u8::from(v >= 0.5)),
    )
}

fn to_array(buf: &ImageBuffer<Luma<f32>, Vec<f32>>) -> Image {
    let (w, h) = buf.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), buf.as_raw().clone()).expect("buffer size")
}

/// Writes samples in the dataset layout: 16-bit PNG for the image channels,
/// 8-bit PNG (0/255) for labels.
pub fn export_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    for channel in Channel::ALL {
        let dir = root.join(channel.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        write_image16(&file_for(root, Channel::Anatomy, &s.id), &s.anatomy)?;
        write_image16(&file_for(root, Channel::Tumour, &s.id), &s.tumour)?;
        write_mask(&file_for(root, Channel::Label, &s.id), &s.label)?;
    }
    Ok(())
}

fn file_for(root: &Path, channel: Channel, id: &str) -> PathBuf {
    root.join(channel.dir_name()).join(format!("{id}.png"))
}

fn write_image16(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = img.dim();
    let raw: Vec<u16> = img
        .iter()
        .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16)
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size");
    buf.save(path)?;
    Ok(())
}

fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let buf = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size");
    buf.save(path)?;
    Ok(())
}
