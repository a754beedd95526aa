//! Canonical image representation, PNG I/O, resizing and cropping.
//!
//! Images are `H x W x 3` grids of `f32` in `[0, 1]`, row-major with the
//! three RGB channels interleaved. Stored 8-bit values map to `v / 255`
//! with no gamma handling.

use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Validating constructor: length must be `height * width * 3` and every
    /// value finite and inside `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty dimensions {height}x{width}")));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {height}x{width}x3",
                data.len()
            )));
        }
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("element {i} = {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Build from a per-pixel function; results are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| clamp_unit(*v)));
            }
        }
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-planar copy (`c`, then `h`, then `w`), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * CHANNELS];
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * plane + i] = px[c];
            }
        }
        out
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// An image together with its category index and an opaque provenance id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: usize,
    pub source_id: String,
}

/// Decode an 8-bit PNG. Grayscale is replicated across channels and any
/// alpha channel is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let decode_err = |reason: String| Error::Decode { path: path.to_path_buf(), reason };
    let mut reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.set_format(ImageFormat::Png);
    let decoded = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(img) => img,
        img @ (DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgba8(_)) => img.to_rgb8(),
        other => {
            return Err(decode_err(format!(
                "unsupported pixel format {:?}; only 8-bit gray/RGB PNG is accepted",
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    ImageTensor::from_vec(h as usize, w as usize, data)
}

/// Quantize one value the way `save_image` does.
#[inline]
pub fn to_byte(v: f32) -> u8 {
    // f32::round rounds half away from zero.
    (clamp_unit(v) * 255.0).round() as u8
}

/// Write an 8-bit RGB PNG.
pub fn save_image(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.data.iter().map(|v| to_byte(*v)).collect();
    let buf = RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Encode { path: path.to_path_buf(), reason: other.to_string() },
    })
}

/// Bilinear resize with half-pixel-centred sampling and clamped borders.
pub fn resize_bilinear(image: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidParameter(format!("resize target {out_h}x{out_w} must be >= 1")));
    }
    if out_h == image.height && out_w == image.width {
        return Ok(image.clone());
    }
    let ys = sample_axis(image.height, out_h);
    let xs = sample_axis(image.width, out_w);
    Ok(ImageTensor::from_fn(out_h, out_w, |y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let mut px = [0.0f32; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let top = lerp(image.get(y0, x0, c), image.get(y0, x1, c), fx);
            let bottom = lerp(image.get(y1, x0, c), image.get(y1, x1, c), fx);
            *out = lerp(top, bottom, fy);
        }
        px
    }))
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // Exact when a == b.
    a + (b - a) * t
}

fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Centre-crop so both dimensions become the largest multiples of `n`.
/// When the surplus is odd, the extra row/column comes off the bottom/right.
pub fn center_crop_to_multiple(image: &ImageTensor, n: usize) -> Result<ImageTensor> {
    if n == 0 || n > image.height.min(image.width) {
        return Err(Error::InvalidParameter(format!(
            "grid divisor {n} must be in 1..={}",
            image.height.min(image.width)
        )));
    }
    let out_h = image.height / n * n;
    let out_w = image.width / n * n;
    let top = (image.height - out_h) / 2;
    let left = (image.width - out_w) / 2;
    Ok(crop(image, top, left, out_h, out_w))
}

pub(crate) fn crop(image: &ImageTensor, top: usize, left: usize, h: usize, w: usize) -> ImageTensor {
    let mut data = Vec::with_capacity(h * w * CHANNELS);
    for y in top..top + h {
        let start = (y * image.width + left) * CHANNELS;
        data.extend_from_slice(&image.data[start..start + w * CHANNELS]);
    }
    ImageTensor { height: h, width: w, data }
}
