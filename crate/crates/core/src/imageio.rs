//! Image decoding/encoding and the image-derived constants of the pipeline:
//! the fused network input, the max-channel map and the dark-region mask.
//!
//! On disk: 8-bit PNG or JPEG in, 8-bit PNG out. Samples map to tensor values
//! by division by exactly 255.0; encoding clamps to `[0, 1]` and rounds
//! half away from zero.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded 8-bit image, 1 or 3 channels, interleaved samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedFormat(format!(
                "{} channels (expected 1 or 3)",
                channels
            )));
        }
        if samples.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} image needs {} samples, got {}",
                width,
                height,
                channels,
                width * height * channels,
                samples.len()
            )));
        }
        Ok(Self { width, height, channels, samples })
    }

    /// Planar `3 x H x W` tensor in `[0, 1]`; grayscale replicates to 3 channels.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for c in 0..3 {
                    let s = if self.channels == 1 {
                        self.samples[p]
                    } else {
                        self.samples[p * 3 + c]
                    };
                    data[c * plane + p] = s as f64 / 255.0;
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("buffer dims")
    }

    /// Quantizes a `3 x H x W` tensor: clamp to `[0, 1]`, scale by 255, round
    /// half away from zero.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 channels to encode, got {}",
                c
            )));
        }
        let plane = h * w;
        let data = t.data();
        let mut samples = vec![0u8; 3 * plane];
        for p in 0..plane {
            for ch in 0..3 {
                let v = data[ch * plane + p].clamp(0.0, 1.0);
                samples[p * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
        Ok(Self { width: w, height: h, channels: 3, samples })
    }
}

/// Loads an 8-bit PNG or JPEG as a `3 x H x W` tensor in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let dynimg = image::open(path)?;
    let (width, height) = (dynimg.width(), dynimg.height());
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension { width, height });
    }
    let buffer = match dynimg {
        image::DynamicImage::ImageLuma8(img) => {
            ImageBuffer::new(width as usize, height as usize, 1, img.into_raw())?
        }
        image::DynamicImage::ImageRgb8(img) => {
            ImageBuffer::new(width as usize, height as usize, 3, img.into_raw())?
        }
        image::DynamicImage::ImageLumaA8(_) | image::DynamicImage::ImageRgba8(_) => {
            let rgb = dynimg.to_rgb8();
            ImageBuffer::new(width as usize, height as usize, 3, rgb.into_raw())?
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{:?} (only 8-bit samples are supported)",
                other.color()
            )))
        }
    };
    Ok(buffer.to_tensor())
}

/// Writes a `3 x H x W` tensor as an 8-bit PNG.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = ImageBuffer::from_tensor(t)?;
    let img: image::RgbImage =
        image::ImageBuffer::from_raw(buf.width as u32, buf.height as u32, buf.samples)
            .expect("sample count matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::Io { path: path.to_path_buf(), source },
            other => Error::Codec(other),
        })
}

/// HSV value channel: per-pixel max over R, G, B (`3 x H x W -> 1 x H x W`).
pub fn value_channel(img: &Tensor) -> Result<Tensor> {
    img.per_pixel_max()
}

/// Maximum channel of the original low-light image; identical to
/// [`value_channel`], kept as a named alias so the smoothness loss reads
/// directly.
pub fn max_channel_map(img: &Tensor) -> Result<Tensor> {
    value_channel(img)
}

/// Concatenates `[R, G, B, V]` into the 4-channel network input.
pub fn fuse_input(img: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let (vc, vh, vw) = v.dims3()?;
    if c != 3 || vc != 1 || vh != h || vw != w {
        return Err(Error::ShapeMismatch(format!(
            "fuse_input expects 3xHxW and 1xHxW, got {:?} and {:?}",
            img.shape(),
            v.shape()
        )));
    }
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(img.data());
    data.extend_from_slice(v.data());
    Tensor::new(vec![4, h, w], data)
}

/// Pixels at or below the `fraction` luminance quantile (nearest rank).
#[derive(Debug, Clone)]
pub struct DarkRegionMask {
    pub height: usize,
    pub width: usize,
    pub fraction: f64,
    pub threshold: f64,
    mask: Vec<bool>,
}

impl DarkRegionMask {
    pub fn contains(&self, pixel: usize) -> bool {
        self.mask[pixel]
    }

    pub fn selected_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// 0/1 indicator map as a `1 x H x W` tensor (1 = dark pixel).
    pub fn indicator(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("mask dims")
    }
}

/// Thresholds per-pixel mean luminance at its `fraction` nearest-rank
/// quantile; ties (`<= threshold`) may select more than `fraction` of the
/// pixels.
pub fn dark_region_mask(img: &Tensor, fraction: f64) -> Result<DarkRegionMask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "dark-region fraction must lie in (0, 1), got {}",
            fraction
        )));
    }
    let (_, h, w) = img.dims3()?;
    let lum = img.channel_mean()?;
    let mut sorted = lum.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite luminance"));
    let n = sorted.len();
    let rank = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let threshold = sorted[rank - 1];
    let mask = lum.data().iter().map(|&l| l <= threshold).collect();
    Ok(DarkRegionMask { height: h, width: w, fraction, threshold, mask })
}
