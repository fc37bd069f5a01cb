//! Image arrays, multi-scale views and train-time augmentation.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;

use crate::error::{Error, Result};

/// Side length every source image is normalized to before deriving scales.
pub const SOURCE_SIZE: u32 = 256;
/// Side length of the enlarged image random crops are taken from.
pub const AUGMENT_RESIZE: u32 = 304;

/// Square RGB image, channels-last, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    size: usize,
    data: Vec<f32>,
}

impl ImageArray {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {size}x{size}x3",
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn from_rgb(img: &RgbImage) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::Shape(format!(
                "expected a square image, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let data = img
            .as_raw()
            .iter()
            .map(|&b| b as f32 / 127.5 - 1.0)
            .collect();
        Ok(Self {
            size: img.width() as usize,
            data,
        })
    }

    pub fn to_rgb(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        RgbImage::from_raw(self.size as u32, self.size as u32, raw).expect("buffer sized at construction")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Channels-first copy, `[3, size, size]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.size * self.size;
        let mut out = vec![0f32; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c];
            }
        }
        out
    }

    pub fn from_chw(size: usize, chw: &[f32]) -> Result<Self> {
        let hw = size * size;
        if chw.len() != 3 * hw {
            return Err(Error::Shape(format!(
                "expected {} channel-first values, got {}",
                3 * hw,
                chw.len()
            )));
        }
        let mut data = vec![0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = chw[c * hw + p];
            }
        }
        Ok(Self { size, data })
    }

    pub fn resized(&self, size: usize) -> ImageArray {
        if size == self.size {
            return self.clone();
        }
        let img = imageops::resize(&self.to_rgb(), size as u32, size as u32, FilterType::Triangle);
        ImageArray::from_rgb(&img).expect("resize keeps the image square")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb().save(path)?;
        Ok(())
    }
}

/// Loads a PNG/JPEG, converts to RGB and resizes to the square source size.
pub fn load_source_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    if img.width() == SOURCE_SIZE && img.height() == SOURCE_SIZE {
        return Ok(img);
    }
    Ok(imageops::resize(&img, SOURCE_SIZE, SOURCE_SIZE, FilterType::Triangle))
}

/// Stacks images of one size into a `[n, 3, size, size]` tensor.
pub fn images_to_tensor(images: &[&ImageArray], device: &Device) -> Result<Tensor> {
    let size = images
        .first()
        .map(|i| i.size())
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let mut buf = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.size() != size {
            return Err(Error::Shape(format!(
                "mixed sizes in batch: {} and {}",
                size,
                img.size()
            )));
        }
        buf.extend(img.to_chw());
    }
    Ok(Tensor::from_vec(buf, (images.len(), 3, size, size), device)?)
}

/// Splits a `[n, 3, s, s]` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageArray>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 || h != w {
        return Err(Error::Shape(format!("expected [n, 3, s, s], got {:?}", t.dims())));
    }
    let flat: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    flat.chunks_exact(3 * h * w)
        .take(n)
        .map(|chw| ImageArray::from_chw(h, chw))
        .collect()
}

/// Tiles images into a square-ish mosaic with a 2 px gutter.
pub fn mosaic(images: &[ImageArray]) -> Option<RgbImage> {
    let first = images.first()?;
    let s = first.size() as u32;
    let cols = (images.len() as f64).sqrt().ceil() as u32;
    let rows = (images.len() as u32).div_ceil(cols);
    let gap = 2;
    let mut canvas = RgbImage::from_pixel(cols * (s + gap) + gap, rows * (s + gap) + gap, Rgb([0, 0, 0]));
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i as u32 / cols, i as u32 % cols);
        let tile = if img.size() as u32 == s {
            img.to_rgb()
        } else {
            img.resized(s as usize).to_rgb()
        };
        imageops::replace(&mut canvas, &tile, (gap + c * (s + gap)) as i64, (gap + r * (s + gap)) as i64);
    }
    Some(canvas)
}

/// Every scale of one source image, plus the enlarged versions random crops come from.
///
/// All scales are resized from the same source, so they are views of one picture.
#[derive(Debug, Clone)]
pub struct ScaledImage {
    scales: Vec<usize>,
    plain: Vec<ImageArray>,
    enlarged: Vec<ImageArray>,
}

impl ScaledImage {
    pub fn from_source(src: &RgbImage, scales: &[usize], augment: bool) -> Result<Self> {
        let src = ImageArray::from_rgb(src)?;
        let plain = scales.iter().map(|&s| src.resized(s)).collect();
        let enlarged = if augment {
            scales
                .iter()
                .map(|&s| src.resized(enlarged_size(s)))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            scales: scales.to_vec(),
            plain,
            enlarged,
        })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn at(&self, scale: usize) -> Option<&ImageArray> {
        self.scales
            .iter()
            .position(|&s| s == scale)
            .map(|i| &self.plain[i])
    }

    /// A random crop (shared across scales) with an optional horizontal flip.
    ///
    /// Falls back to the plain images when built without augmentation support.
    pub fn augmented<R: Rng>(&self, rng: &mut R) -> Vec<ImageArray> {
        if self.enlarged.is_empty() {
            return self.plain.clone();
        }
        let span = AUGMENT_RESIZE - SOURCE_SIZE;
        let fx = rng.random_range(0..=span) as f64 / AUGMENT_RESIZE as f64;
        let fy = rng.random_range(0..=span) as f64 / AUGMENT_RESIZE as f64;
        let flip = rng.random_bool(0.5);
        self.scales
            .iter()
            .zip(&self.enlarged)
            .map(|(&s, big)| {
                let b = big.size();
                let ox = ((fx * b as f64).round() as usize).min(b - s);
                let oy = ((fy * b as f64).round() as usize).min(b - s);
                let mut data = Vec::with_capacity(s * s * 3);
                for y in 0..s {
                    for x in 0..s {
                        let sx = if flip { ox + s - 1 - x } else { ox + x };
                        let at = ((oy + y) * b + sx) * 3;
                        data.extend_from_slice(&big.data()[at..at + 3]);
                    }
                }
                ImageArray { size: s, data }
            })
            .collect()
    }
}

fn enlarged_size(scale: usize) -> usize {
    (scale as f64 * AUGMENT_RESIZE as f64 / SOURCE_SIZE as f64).round() as usize
}
