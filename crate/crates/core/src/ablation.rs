//! Feature-removal operators.
//!
//! Each operator suppresses one image cue while leaving the others as intact
//! as possible, and (except colour removal) takes a window/grid size that
//! sets how strongly the cue is weakened:
//!
//! * colour: replace R, G, B by their mean;
//! * texture: flat-kernel mean-shift filtering in the joint position/colour
//!   domain, which flattens fine texture but keeps strong edges;
//! * shape: blur the image only inside a dilated band around detected edges;
//! * topology: cut the image into an `n x n` grid and permute the tiles.
//!
//! All operators are pure and deterministic.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{center_crop_to_multiple, resize_bilinear, ImageTensor, CHANNELS};
use crate::rng::SplitMix64;

pub const DEFAULT_RANGE_RADIUS: f32 = 0.2;
pub const DEFAULT_EDGE_THRESHOLD: f32 = 0.2;
pub const MEAN_SHIFT_MAX_ITER: usize = 20;
pub const MEAN_SHIFT_EPS: f64 = 1e-3;

/// Maximum response of the 3x3 gradient kernel to a unit step.
const SOBEL_UNIT_RESPONSE: f32 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationKind {
    #[serde(rename = "color")]
    ColorRemoval,
    #[serde(rename = "texture")]
    TextureWeaken,
    #[serde(rename = "shape")]
    ShapeWeaken,
    #[serde(rename = "topology")]
    TopologyShuffle,
}

impl AblationKind {
    pub const ALL: [AblationKind; 4] = [
        AblationKind::ColorRemoval,
        AblationKind::TextureWeaken,
        AblationKind::ShapeWeaken,
        AblationKind::TopologyShuffle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::ColorRemoval => "color",
            AblationKind::TextureWeaken => "texture",
            AblationKind::ShapeWeaken => "shape",
            AblationKind::TopologyShuffle => "topology",
        }
    }

    /// Filter-window kinds must use odd windows; the topology grid may be any size.
    fn requires_odd_window(self) -> bool {
        matches!(self, AblationKind::TextureWeaken | AblationKind::ShapeWeaken)
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown ablation kind '{s}'")))
    }
}

/// One feature-removal operator with its strength parameters.
///
/// `window` is the filter side for texture/shape weakening and the grid side
/// for topology shuffling; colour removal ignores it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub kind: AblationKind,
    pub window: usize,
    pub range_radius: f32,
    pub edge_threshold: f32,
    pub seed: u64,
}

impl AblationSpec {
    pub fn new(kind: AblationKind, window: usize) -> Self {
        Self {
            kind,
            window,
            range_radius: DEFAULT_RANGE_RADIUS,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidParameter("window must be >= 1".into()));
        }
        if self.kind.requires_odd_window() && self.window % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "{} window must be odd, got {}",
                self.kind, self.window
            )));
        }
        if !(self.range_radius > 0.0 && self.range_radius <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "range_radius {} outside (0, 1]",
                self.range_radius
            )));
        }
        if !(self.edge_threshold > 0.0 && self.edge_threshold <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "edge_threshold {} outside (0, 1]",
                self.edge_threshold
            )));
        }
        Ok(())
    }

    /// True when the operator is the identity on every input.
    pub fn is_identity(&self) -> bool {
        self.kind != AblationKind::ColorRemoval && self.window == 1
    }
}

/// Boolean per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl EdgeMask {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Dilation by a square structuring element of side `2 * radius + 1`.
    pub fn dilate(&self, radius: usize) -> EdgeMask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        // Separable: a square max filter is a row max followed by a column max.
        let mut rows = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                rows[y * w + x] = (lo..=hi).any(|xx| self.mask[y * w + xx]);
            }
        }
        let mut mask = vec![false; h * w];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                mask[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
            }
        }
        EdgeMask { height: h, width: w, mask }
    }
}

/// Replace every pixel by its channel mean.
///
/// The sum is formed in f64, where three f32 values add exactly, so a gray
/// pixel maps to itself bit for bit and the operator is idempotent.
pub fn remove_color(image: &ImageTensor) -> ImageTensor {
    ImageTensor::from_fn(image.height(), image.width(), |y, x| {
        let [r, g, b] = image.pixel(y, x).map(f64::from);
        [((r + g + b) / 3.0) as f32; 3]
    })
}

/// Flat-kernel mean-shift filtering.
///
/// Each pixel starts at its own `(x, y, r, g, b)` state and repeatedly moves
/// to the mean of the input pixels that lie inside the square spatial window
/// around the current position and within `range_radius` (Euclidean, RGB) of
/// the current colour. Iteration stops when the joint state moves less than
/// `eps` or after `max_iter` steps; the pixel takes the converged colour.
pub fn mean_shift_filter(
    image: &ImageTensor,
    spatial_window: usize,
    range_radius: f32,
    max_iter: usize,
    eps: f64,
) -> Result<ImageTensor> {
    if spatial_window == 0 || spatial_window % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "spatial window must be odd and >= 1, got {spatial_window}"
        )));
    }
    if !(range_radius > 0.0) {
        return Err(Error::InvalidParameter(format!("range radius {range_radius} must be > 0")));
    }
    if max_iter == 0 || !(eps >= 0.0) {
        return Err(Error::InvalidParameter("max_iter must be >= 1 and eps >= 0".into()));
    }
    if spatial_window == 1 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let half = spatial_window as f64 / 2.0;
    let r2 = range_radius as f64 * range_radius as f64;

    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w * CHANNELS);
            for x in 0..w {
                let c = mean_shift_pixel(image, y, x, half, r2, max_iter, eps);
                row.extend(c.iter().map(|v| *v as f32));
            }
            row
        })
        .collect();
    ImageTensor::from_vec(h, w, rows.concat())
}

fn mean_shift_pixel(
    image: &ImageTensor,
    y: usize,
    x: usize,
    half: f64,
    r2: f64,
    max_iter: usize,
    eps: f64,
) -> [f64; 3] {
    let (h, w) = (image.height() as i64, image.width() as i64);
    let (mut py, mut px) = (y as f64, x as f64);
    let mut color = image.pixel(y, x).map(f64::from);
    for _ in 0..max_iter {
        let y_lo = ((py - half).ceil() as i64).max(0);
        let y_hi = ((py + half).floor() as i64).min(h - 1);
        let x_lo = ((px - half).ceil() as i64).max(0);
        let x_hi = ((px + half).floor() as i64).min(w - 1);
        let (mut sy, mut sx, mut sc, mut count) = (0.0, 0.0, [0.0f64; 3], 0usize);
        for yy in y_lo..=y_hi {
            for xx in x_lo..=x_hi {
                let p = image.pixel(yy as usize, xx as usize).map(f64::from);
                let d2: f64 = (0..3).map(|c| (p[c] - color[c]).powi(2)).sum();
                if d2 <= r2 {
                    sy += yy as f64;
                    sx += xx as f64;
                    for c in 0..3 {
                        sc[c] += p[c];
                    }
                    count += 1;
                }
            }
        }
        if count == 0 {
            break;
        }
        let n = count as f64;
        let (ny, nx) = (sy / n, sx / n);
        let nc = sc.map(|s| s / n);
        let shift2 = (ny - py).powi(2)
            + (nx - px).powi(2)
            + (0..3).map(|c| (nc[c] - color[c]).powi(2)).sum::<f64>();
        py = ny;
        px = nx;
        color = nc;
        if shift2.sqrt() < eps {
            break;
        }
    }
    color
}

/// Unit-scaled 3x3 gradient-magnitude edge detector on the channel mean,
/// with replicated borders. A pixel is an edge when `|g| / 8 >= threshold`.
pub fn detect_edges(image: &ImageTensor, threshold: f32) -> Result<EdgeMask> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!("edge threshold {threshold} outside (0, 1]")));
    }
    let (h, w) = (image.height(), image.width());
    let lum: Vec<f32> = image.data().chunks_exact(CHANNELS).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let at = |y: i64, x: i64| -> f32 {
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        lum[yy * w + xx]
    };
    let mut mask = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            // Symmetric pairs are summed first so that mirrored inputs give
            // bit-identical magnitudes.
            let col = |cx: i64| (at(y - 1, cx) + at(y + 1, cx)) + 2.0 * at(y, cx);
            let row = |ry: i64| (at(ry, x - 1) + at(ry, x + 1)) + 2.0 * at(ry, x);
            let gx = col(x + 1) - col(x - 1);
            let gy = row(y + 1) - row(y - 1);
            let g = (gx * gx + gy * gy).sqrt();
            mask[y as usize * w + x as usize] = g / SOBEL_UNIT_RESPONSE >= threshold;
        }
    }
    Ok(EdgeMask { height: h, width: w, mask })
}

/// Normalised 1-D Gaussian taps of length `window`, sigma = window / 3.
pub fn gaussian_kernel(window: usize) -> Vec<f32> {
    let radius = (window / 2) as i64;
    let sigma = window as f64 / 3.0;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / sum) as f32).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(image: &ImageTensor, window: usize) -> ImageTensor {
    let kernel = gaussian_kernel(window);
    let radius = (window / 2) as i64;
    let (h, w) = (image.height(), image.width());
    let src = image.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0f32;
                for (k, tap) in kernel.iter().enumerate() {
                    let xx = (x as i64 + k as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += tap * src[(y * w + xx) * CHANNELS + c];
                }
                tmp[(y * w + x) * CHANNELS + c] = acc;
            }
        }
    }
    ImageTensor::from_fn(h, w, |y, x| {
        let mut px = [0.0f32; 3];
        for (c, out) in px.iter_mut().enumerate() {
            for (k, tap) in kernel.iter().enumerate() {
                let yy = (y as i64 + k as i64 - radius).clamp(0, h as i64 - 1) as usize;
                *out += tap * tmp[(yy * w + x) * CHANNELS + c];
            }
        }
        px
    })
}

/// Blur only the band of pixels within `(window - 1) / 2` of a detected edge.
pub fn weaken_shape(image: &ImageTensor, window: usize, threshold: f32) -> Result<ImageTensor> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidParameter(format!("shape window must be odd and >= 1, got {window}")));
    }
    let band = detect_edges(image, threshold)?.dilate((window - 1) / 2);
    if band.count() == 0 {
        return Ok(image.clone());
    }
    let blurred = gaussian_blur(image, window);
    Ok(ImageTensor::from_fn(image.height(), image.width(), |y, x| {
        if band.get(y, x) {
            blurred.pixel(y, x)
        } else {
            image.pixel(y, x)
        }
    }))
}

/// Tile permutation used by [`shuffle_topology`]: output tile `i` (row-major)
/// is taken from input tile `perm[i]`.
pub fn tile_permutation(n: usize, seed: u64) -> Vec<usize> {
    SplitMix64::new(seed).permutation(n * n)
}

/// Cut into an `n x n` grid and reassemble the tiles in shuffled order.
pub fn shuffle_topology(image: &ImageTensor, n: usize, seed: u64) -> Result<ImageTensor> {
    if n == 0 {
        return Err(Error::InvalidParameter("grid side must be >= 1".into()));
    }
    let (h, w) = (image.height(), image.width());
    if h % n != 0 || w % n != 0 {
        return Err(Error::InvalidParameter(format!(
            "image {h}x{w} is not divisible into a {n}x{n} grid; crop it first"
        )));
    }
    let perm = tile_permutation(n, seed);
    let (th, tw) = (h / n, w / n);
    Ok(ImageTensor::from_fn(h, w, |y, x| {
        let src_tile = perm[(y / th) * n + x / tw];
        let sy = (src_tile / n) * th + y % th;
        let sx = (src_tile % n) * tw + x % tw;
        image.pixel(sy, sx)
    }))
}

/// Dispatch `spec` to its operator.
pub fn apply(spec: &AblationSpec, image: &ImageTensor) -> Result<ImageTensor> {
    spec.validate()?;
    match spec.kind {
        AblationKind::ColorRemoval => Ok(remove_color(image)),
        AblationKind::TextureWeaken => {
            mean_shift_filter(image, spec.window, spec.range_radius, MEAN_SHIFT_MAX_ITER, MEAN_SHIFT_EPS)
        }
        AblationKind::ShapeWeaken => weaken_shape(image, spec.window, spec.edge_threshold),
        AblationKind::TopologyShuffle => shuffle_topology(image, spec.window, spec.seed),
    }
}

/// Like [`apply`], but topology shuffles first centre-crop to a multiple of
/// the grid and resize back, so the output always has the input's size.
pub fn apply_keep_size(spec: &AblationSpec, image: &ImageTensor) -> Result<ImageTensor> {
    if spec.kind != AblationKind::TopologyShuffle {
        return apply(spec, image);
    }
    spec.validate()?;
    let cropped = center_crop_to_multiple(image, spec.window)?;
    let shuffled = shuffle_topology(&cropped, spec.window, spec.seed)?;
    resize_bilinear(&shuffled, image.height(), image.width())
}

/// One spec per window, all other parameters copied from `base`.
pub fn sweep_levels(kind: AblationKind, windows: &[usize], base: &AblationSpec) -> Result<Vec<AblationSpec>> {
    if windows.is_empty() {
        return Err(Error::InvalidParameter("sweep needs at least one window".into()));
    }
    if windows.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::InvalidParameter(format!("sweep windows {windows:?} must be strictly increasing")));
    }
    windows
        .iter()
        .map(|&window| {
            let spec = AblationSpec { kind, window, ..*base };
            spec.validate().map(|_| spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = SplitMix64::new(seed);
        ImageTensor::from_fn(h, w, |_, _| {
            [rng.next_f64() as f32, rng.next_f64() as f32, rng.next_f64() as f32]
        })
    }

    fn step_image(h: usize, w: usize, at: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |_, x| if x < at { [0.0; 3] } else { [1.0; 3] })
    }

    #[test]
    fn color_removal_examples() {
        let img = ImageTensor::from_vec(1, 2, vec![0.3, 0.6, 0.9, 0.5, 0.5, 0.5]).unwrap();
        let out = remove_color(&img);
        for c in 0..3 {
            assert!((out.get(0, 0, c) - 0.6).abs() < 1e-7);
        }
        assert_eq!(out.pixel(0, 1), [0.5; 3]);
    }

    #[test]
    fn color_removal_matches_per_pixel_mean() {
        let img = random_image(7, 9, 21);
        let out = remove_color(&img);
        for y in 0..7 {
            for x in 0..9 {
                let p = img.pixel(y, x).map(f64::from);
                let m = (p[0] + p[1] + p[2]) / 3.0;
                assert_eq!(out.pixel(y, x), [m as f32; 3]);
            }
        }
    }

    #[test]
    fn mean_shift_constant_image_unchanged() {
        let img = ImageTensor::filled(6, 5, [0.3, 0.4, 0.5]);
        let out = mean_shift_filter(&img, 5, 0.2, 20, 1e-3).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn mean_shift_window_one_is_identity() {
        let img = random_image(6, 6, 2);
        assert_eq!(mean_shift_filter(&img, 1, 0.2, 20, 1e-3).unwrap(), img);
    }

    #[test]
    fn mean_shift_rejects_bad_parameters() {
        let img = random_image(3, 3, 2);
        assert!(mean_shift_filter(&img, 2, 0.2, 5, 1e-3).is_err());
        assert!(mean_shift_filter(&img, 3, 0.0, 5, 1e-3).is_err());
        assert!(mean_shift_filter(&img, 3, 0.2, 0, 1e-3).is_err());
    }

    #[test]
    fn mean_shift_flattens_low_contrast_stripes_but_keeps_strong_edge() {
        // Stripes of contrast 0.05 inside a dark region next to a bright one.
        let img = ImageTensor::from_fn(12, 12, |y, x| {
            if x >= 6 {
                [0.9; 3]
            } else if y % 2 == 0 {
                [0.10; 3]
            } else {
                [0.15; 3]
            }
        });
        let out = mean_shift_filter(&img, 5, 0.2, 20, 1e-4).unwrap();
        for y in 2..10 {
            for x in 0..6 {
                assert!((out.get(y, x, 0) - 0.125).abs() < 0.02, "({y},{x}) = {}", out.get(y, x, 0));
            }
            for x in 6..12 {
                assert_eq!(out.pixel(y, x), [0.9; 3]);
            }
        }
    }

    #[test]
    fn edges_of_constant_image_are_empty() {
        let img = ImageTensor::filled(5, 5, [0.7; 3]);
        assert_eq!(detect_edges(&img, 0.2).unwrap().count(), 0);
    }

    #[test]
    fn step_edge_response() {
        let img = step_image(5, 6, 3);
        let mask = detect_edges(&img, 0.2).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                // Columns 2 and 3 straddle the step and see a response of 4, i.e. 0.5.
                assert_eq!(mask.get(y, x), x == 2 || x == 3);
            }
        }
        // 0.5 is the exact unit-scaled response: threshold 0.5 keeps it, 0.51 drops it.
        assert_eq!(detect_edges(&img, 0.5).unwrap().count(), 10);
        assert_eq!(detect_edges(&img, 0.51).unwrap().count(), 0);
    }

    #[test]
    fn detect_edges_rejects_bad_threshold() {
        let img = step_image(3, 3, 1);
        assert!(detect_edges(&img, 0.0).is_err());
        assert!(detect_edges(&img, 1.5).is_err());
    }

    #[test]
    fn dilation_grows_a_point_into_a_square() {
        let mut mask = EdgeMask { height: 7, width: 7, mask: vec![false; 49] };
        mask.mask[3 * 7 + 3] = true;
        let d = mask.dilate(2);
        assert_eq!(d.count(), 25);
        assert!(d.get(1, 1) && d.get(5, 5) && !d.get(0, 3));
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        for window in [1, 3, 5, 9, 13] {
            let k = gaussian_kernel(window);
            assert_eq!(k.len(), window);
            let s: f32 = k.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for i in 0..window {
                assert_eq!(k[i], k[window - 1 - i]);
            }
        }
        assert_eq!(gaussian_kernel(1), vec![1.0]);
    }

    #[test]
    fn weaken_shape_constant_and_window_one() {
        let img = ImageTensor::filled(8, 8, [0.2; 3]);
        assert_eq!(weaken_shape(&img, 7, 0.2).unwrap(), img);
        let img = random_image(8, 8, 5);
        assert_eq!(weaken_shape(&img, 1, 0.2).unwrap(), img);
    }

    #[test]
    fn weaken_shape_matches_direct_convolution_in_band() {
        let img = step_image(16, 16, 8);
        let window = 5;
        let out = weaken_shape(&img, window, 0.2).unwrap();
        let band = detect_edges(&img, 0.2).unwrap().dilate(2);

        // Direct 2-D convolution oracle with the same taps.
        let sigma = window as f64 / 3.0;
        let mut taps = vec![0.0f64; window * window];
        for (i, t) in taps.iter_mut().enumerate() {
            let (dy, dx) = ((i / window) as f64 - 2.0, (i % window) as f64 - 2.0);
            *t = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
        let total: f64 = taps.iter().sum();
        for y in 0..16i64 {
            for x in 0..16i64 {
                let here = out.get(y as usize, x as usize, 0) as f64;
                if band.get(y as usize, x as usize) {
                    let mut acc = 0.0;
                    for dy in -2..=2i64 {
                        for dx in -2..=2i64 {
                            let yy = (y + dy).clamp(0, 15) as usize;
                            let xx = (x + dx).clamp(0, 15) as usize;
                            acc += taps[((dy + 2) * 5 + dx + 2) as usize] * img.get(yy, xx, 0) as f64;
                        }
                    }
                    assert!((here - acc / total).abs() < 1e-5, "({y},{x}) {here} vs {}", acc / total);
                } else {
                    assert_eq!(out.pixel(y as usize, x as usize), img.pixel(y as usize, x as usize));
                }
            }
        }
        assert_eq!(band.count(), 16 * 6);
    }

    #[test]
    fn shuffle_grid_one_is_identity() {
        let img = random_image(6, 4, 3);
        assert_eq!(shuffle_topology(&img, 1, 123).unwrap(), img);
    }

    #[test]
    fn shuffle_rejects_indivisible_image() {
        let img = random_image(7, 6, 3);
        assert!(shuffle_topology(&img, 2, 0).is_err());
        assert!(shuffle_topology(&img, 0, 0).is_err());
    }

    #[test]
    fn shuffle_permutation_matches_hand_rolled_reference() {
        // Independent splitmix64 + Fisher-Yates for four tiles, seed 0.
        let mut state: u64 = 0;
        let mut next = || {
            state = state.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        };
        let mut expected = [0usize, 1, 2, 3];
        for i in (1..4).rev() {
            let j = (next() % (i as u64 + 1)) as usize;
            expected.swap(i, j);
        }
        assert_eq!(tile_permutation(2, 0), expected.to_vec());

        // And the image is reassembled accordingly.
        let img = ImageTensor::from_fn(4, 4, |y, x| [((y / 2) * 2 + x / 2) as f32 / 4.0, 0.0, 0.0]);
        let out = shuffle_topology(&img, 2, 0).unwrap();
        for t in 0..4 {
            let (ty, tx) = ((t / 2) * 2, (t % 2) * 2);
            assert_eq!(out.get(ty, tx, 0), expected[t] as f32 / 4.0);
        }
    }

    #[test]
    fn apply_dispatch_examples() {
        let gray = ImageTensor::filled(6, 6, [0.4; 3]);
        assert_eq!(apply(&AblationSpec::new(AblationKind::ColorRemoval, 1), &gray).unwrap(), gray);
        let img = random_image(6, 6, 8);
        assert_eq!(apply(&AblationSpec::new(AblationKind::TopologyShuffle, 1), &img).unwrap(), img);
        let spec = AblationSpec::new(AblationKind::TextureWeaken, 3);
        assert_eq!(
            apply(&spec, &img).unwrap(),
            mean_shift_filter(&img, 3, 0.2, MEAN_SHIFT_MAX_ITER, MEAN_SHIFT_EPS).unwrap()
        );
    }

    #[test]
    fn apply_rejects_invalid_spec() {
        let img = random_image(4, 4, 8);
        assert!(apply(&AblationSpec::new(AblationKind::TextureWeaken, 4), &img).is_err());
        let mut spec = AblationSpec::new(AblationKind::ShapeWeaken, 3);
        spec.edge_threshold = 0.0;
        assert!(apply(&spec, &img).is_err());
        // Even grids are fine for topology.
        assert!(apply(&AblationSpec::new(AblationKind::TopologyShuffle, 2), &img).is_ok());
    }

    #[test]
    fn apply_keep_size_handles_indivisible_grid() {
        let img = random_image(10, 10, 1);
        let spec = AblationSpec { seed: 4, ..AblationSpec::new(AblationKind::TopologyShuffle, 3) };
        assert!(apply(&spec, &img).is_err());
        let out = apply_keep_size(&spec, &img).unwrap();
        assert_eq!((out.height(), out.width()), (10, 10));
    }

    #[test]
    fn sweep_levels_examples() {
        let base = AblationSpec::new(AblationKind::TextureWeaken, 1);
        let specs = sweep_levels(AblationKind::TextureWeaken, &[1, 3, 5], &base).unwrap();
        assert_eq!(specs.iter().map(|s| s.window).collect::<Vec<_>>(), vec![1, 3, 5]);
        assert_eq!(sweep_levels(AblationKind::ShapeWeaken, &[3], &base).unwrap().len(), 1);
        assert!(sweep_levels(AblationKind::ShapeWeaken, &[], &base).is_err());
        assert!(sweep_levels(AblationKind::ShapeWeaken, &[3, 3], &base).is_err());
        assert!(sweep_levels(AblationKind::ShapeWeaken, &[5, 3], &base).is_err());
        assert!(sweep_levels(AblationKind::ShapeWeaken, &[2, 4], &base).is_err());
        assert!(sweep_levels(AblationKind::TopologyShuffle, &[1, 2, 4], &base).is_ok());
    }

    #[test]
    fn sweep_window_one_is_identity_for_filters() {
        let img = random_image(9, 9, 17);
        let base = AblationSpec::new(AblationKind::TextureWeaken, 1);
        for kind in [AblationKind::TextureWeaken, AblationKind::ShapeWeaken] {
            let spec = sweep_levels(kind, &[1, 5], &base).unwrap()[0];
            assert!(spec.is_identity());
            assert_eq!(apply(&spec, &img).unwrap(), img);
        }
    }

    #[test]
    fn kind_round_trips_through_str() {
        for kind in AblationKind::ALL {
            assert_eq!(kind.as_str().parse::<AblationKind>().unwrap(), kind);
        }
        assert!("blur".parse::<AblationKind>().is_err());
    }

    fn histogram(img: &ImageTensor, c: usize) -> Vec<u32> {
        let mut v: Vec<u32> = img.data().chunks(3).map(|p| p[c].to_bits()).collect();
        v.sort_unstable();
        v
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn operators_preserve_range(seed in any::<u64>(), kind_ix in 0usize..4, w in 0usize..3) {
            let img = random_image(12, 12, seed);
            let kind = AblationKind::ALL[kind_ix];
            let window = if kind == AblationKind::TopologyShuffle { [1, 2, 3][w] } else { [1, 3, 5][w] };
            let spec = AblationSpec { seed, ..AblationSpec::new(kind, window) };
            let out = apply(&spec, &img).unwrap();
            prop_assert!(ImageTensor::from_vec(12, 12, out.data().to_vec()).is_ok());
            // Determinism.
            prop_assert_eq!(out, apply(&spec, &img).unwrap());
        }

        #[test]
        fn remove_color_is_idempotent(seed in any::<u64>()) {
            let img = random_image(5, 7, seed);
            let once = remove_color(&img);
            prop_assert_eq!(remove_color(&once), once);
        }

        #[test]
        fn shuffle_preserves_histogram_and_inverts(seed in any::<u64>(), n in 1usize..5) {
            let img = random_image(n * 3, n * 2, seed ^ 0xABCD);
            let out = shuffle_topology(&img, n, seed).unwrap();
            for c in 0..3 {
                prop_assert_eq!(histogram(&img, c), histogram(&out, c));
            }
            // Undo with the inverse permutation.
            let perm = tile_permutation(n, seed);
            let (th, tw) = (3, 2);
            let back = ImageTensor::from_fn(img.height(), img.width(), |y, x| {
                let tile = (y / th) * n + x / tw;
                let dst = perm.iter().position(|p| *p == tile).unwrap();
                out.pixel((dst / n) * th + y % th, (dst % n) * tw + x % tw)
            });
            prop_assert_eq!(back, img);
        }

        #[test]
        fn weaken_shape_only_touches_band(seed in any::<u64>(), w in 0usize..3) {
            let window = [3, 5, 7][w];
            // Blocky image so there are real edges and real flat areas.
            let mut rng = SplitMix64::new(seed);
            let blocks: Vec<f32> = (0..16).map(|_| rng.next_f64() as f32).collect();
            let img = ImageTensor::from_fn(16, 16, |y, x| [blocks[(y / 4) * 4 + x / 4]; 3]);
            let band = detect_edges(&img, 0.2).unwrap().dilate((window - 1) / 2);
            let out = weaken_shape(&img, window, 0.2).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    if !band.get(y, x) {
                        prop_assert_eq!(out.pixel(y, x), img.pixel(y, x));
                    }
                }
            }
        }

        #[test]
        fn edge_mask_is_mirror_symmetric(seed in any::<u64>()) {
            let img = random_image(9, 11, seed);
            let mirrored = ImageTensor::from_fn(9, 11, |y, x| img.pixel(y, 10 - x));
            let a = detect_edges(&img, 0.2).unwrap();
            let b = detect_edges(&mirrored, 0.2).unwrap();
            for y in 0..9 {
                for x in 0..11 {
                    prop_assert_eq!(a.get(y, x), b.get(y, 10 - x));
                }
            }
        }
    }
}
