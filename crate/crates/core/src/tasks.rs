//! Classification tasks: loading from image directories, synthetic tasks
//! whose discriminative cue is known by construction, and training-time
//! augmentation.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, resize_bilinear, save_image, ImageTensor, LabeledImage};
use crate::rng::SplitMix64;

pub const BACKGROUND: f32 = 0.5;
/// The two fill tones. They are close enough together that the default
/// mean-shift range radius merges them, while both are far enough from the
/// background for the object outline to register as an edge.
pub const TONE_DARK: f32 = 0.0;
pub const TONE_LIGHT: f32 = 0.08;
/// Spatial period of every fill texture, in pixels.
pub const TEXTURE_PERIOD: usize = 6;
pub const SCALE_RANGE: (f64, f64) = (0.4, 0.7);
pub const POSITION_JITTER: f64 = 0.2;
const STAR_INNER_RATIO: f64 = 0.382;
const DOT_RADIUS_SQ: f64 = 4.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub categories: Vec<String>,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    /// The category whose cue reliance is being probed.
    pub target_category: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.categories.len();
        if k == 0 {
            return Err(Error::Dataset(format!("task '{}' has no categories", self.name)));
        }
        if self.target_category >= k {
            return Err(Error::Dataset(format!(
                "target category {} out of range for {k} categories",
                self.target_category
            )));
        }
        if let Some(bad) = self.train.iter().chain(&self.val).find(|s| s.label >= k) {
            return Err(Error::Dataset(format!("image '{}' has label {} >= {k}", bad.source_id, bad.label)));
        }
        let train_ids: HashSet<&str> = self.train.iter().map(|s| s.source_id.as_str()).collect();
        if let Some(dup) = self.val.iter().find(|s| train_ids.contains(s.source_id.as_str())) {
            return Err(Error::Dataset(format!("'{}' appears in both train and val", dup.source_id)));
        }
        Ok(())
    }

    pub fn target_name(&self) -> &str {
        &self.categories[self.target_category]
    }

    /// Validation images of the target category.
    pub fn target_val(&self) -> impl Iterator<Item = &LabeledImage> {
        self.val.iter().filter(move |s| s.label == self.target_category)
    }

    /// Common side length of all images, if square and uniform.
    pub fn image_size(&self) -> Option<usize> {
        let first = self.train.first().or(self.val.first())?;
        let s = first.image.height();
        self.train
            .iter()
            .chain(&self.val)
            .all(|i| i.image.height() == s && i.image.width() == s)
            .then_some(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticMode {
    /// Same shape (a disc) everywhere; classes differ only in fill texture.
    TextureDiscriminative,
    /// Same fill (horizontal stripes) everywhere; classes differ only in shape.
    ShapeDiscriminative,
}

impl SyntheticMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticMode::TextureDiscriminative => "texture",
            SyntheticMode::ShapeDiscriminative => "shape",
        }
    }
}

impl FromStr for SyntheticMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "texture" | "texture_discriminative" => Ok(SyntheticMode::TextureDiscriminative),
            "shape" | "shape_discriminative" => Ok(SyntheticMode::ShapeDiscriminative),
            other => Err(Error::InvalidParameter(format!("unknown synthetic mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    HorizontalStripes,
    VerticalStripes,
    Checkerboard,
    Dots,
}

pub const SHAPES: [ShapeKind; 4] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Star];
pub const TEXTURES: [TextureKind; 4] = [
    TextureKind::HorizontalStripes,
    TextureKind::VerticalStripes,
    TextureKind::Checkerboard,
    TextureKind::Dots,
];

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
        }
    }
}

impl TextureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TextureKind::HorizontalStripes => "hstripes",
            TextureKind::VerticalStripes => "vstripes",
            TextureKind::Checkerboard => "checker",
            TextureKind::Dots => "dots",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub mode: SyntheticMode,
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_val: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn new(mode: SyntheticMode, seed: u64) -> Self {
        Self { mode, classes: 4, per_class_train: 300, per_class_val: 50, image_size: 64, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class_train == 0 || self.per_class_val == 0 {
            return Err(Error::InvalidParameter("class and per-class counts must be >= 1".into()));
        }
        if self.classes > SHAPES.len() {
            return Err(Error::InvalidParameter(format!(
                "{} classes requested but the synthetic vocabulary has only {}",
                self.classes,
                SHAPES.len()
            )));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidParameter(format!("image size {} is below 16", self.image_size)));
        }
        Ok(())
    }

    /// The (shape, texture) pair rendered for class `c`.
    pub fn class_design(&self, c: usize) -> (ShapeKind, TextureKind) {
        match self.mode {
            SyntheticMode::TextureDiscriminative => (ShapeKind::Disc, TEXTURES[c]),
            SyntheticMode::ShapeDiscriminative => (SHAPES[c], TextureKind::HorizontalStripes),
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes)
            .map(|c| {
                let (s, t) = self.class_design(c);
                format!("{}-{}", s.as_str(), t.as_str())
            })
            .collect()
    }
}

/// Random placement of one object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    /// Radius of the circumscribing circle.
    pub radius: f64,
    pub rotation: f64,
    pub phase_x: usize,
    pub phase_y: usize,
}

impl Placement {
    pub fn draw(rng: &mut SplitMix64, size: usize) -> Self {
        let s = size as f64;
        let diameter = rng.uniform(SCALE_RANGE.0, SCALE_RANGE.1) * s;
        let cx = s / 2.0 + rng.uniform(-POSITION_JITTER, POSITION_JITTER) * s;
        let cy = s / 2.0 + rng.uniform(-POSITION_JITTER, POSITION_JITTER) * s;
        let rotation = rng.uniform(0.0, 2.0 * PI);
        let phase_x = rng.below(TEXTURE_PERIOD as u64) as usize;
        let phase_y = rng.below(TEXTURE_PERIOD as u64) as usize;
        Self { cx, cy, radius: diameter / 2.0, rotation, phase_x, phase_y }
    }
}

fn polygon(p: &Placement, radii: &[f64]) -> Vec<(f64, f64)> {
    let k = radii.len() as f64;
    radii
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let a = p.rotation + 2.0 * PI * i as f64 / k;
            (p.cx + r * a.cos(), p.cy + r * a.sin())
        })
        .collect()
}

/// Even-odd point-in-polygon test.
fn inside_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Binary object mask sampled at pixel centres, row-major.
pub fn shape_mask(shape: ShapeKind, p: &Placement, size: usize) -> Vec<bool> {
    let poly = match shape {
        ShapeKind::Disc => Vec::new(),
        ShapeKind::Square => polygon(p, &[p.radius; 4]),
        ShapeKind::Triangle => polygon(p, &[p.radius; 3]),
        ShapeKind::Star => {
            let r = p.radius;
            polygon(p, &(0..10).map(|i| if i % 2 == 0 { r } else { r * STAR_INNER_RATIO }).collect::<Vec<_>>())
        }
    };
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            mask.push(match shape {
                ShapeKind::Disc => (px - p.cx).powi(2) + (py - p.cy).powi(2) <= p.radius * p.radius,
                _ => inside_polygon(&poly, px, py),
            });
        }
    }
    mask
}

/// Whether the fill texture is dark at pixel `(y, x)`.
pub fn texture_is_dark(texture: TextureKind, y: usize, x: usize, phase_y: usize, phase_x: usize) -> bool {
    let half = TEXTURE_PERIOD / 2;
    let (yy, xx) = (y + phase_y, x + phase_x);
    match texture {
        TextureKind::HorizontalStripes => (yy / half) % 2 == 0,
        TextureKind::VerticalStripes => (xx / half) % 2 == 0,
        TextureKind::Checkerboard => (yy / half + xx / half) % 2 == 0,
        TextureKind::Dots => {
            let p = TEXTURE_PERIOD as f64;
            let dy = (yy % TEXTURE_PERIOD) as f64 + 0.5 - p / 2.0;
            let dx = (xx % TEXTURE_PERIOD) as f64 + 0.5 - p / 2.0;
            dx * dx + dy * dy <= DOT_RADIUS_SQ
        }
    }
}

/// Render one object on the mid-gray background.
pub fn render(shape: ShapeKind, texture: TextureKind, p: &Placement, size: usize) -> ImageTensor {
    let mask = shape_mask(shape, p, size);
    ImageTensor::from_fn(size, size, |y, x| {
        if mask[y * size + x] {
            let v = if texture_is_dark(texture, y, x, p.phase_y, p.phase_x) { TONE_DARK } else { TONE_LIGHT };
            [v; 3]
        } else {
            [BACKGROUND; 3]
        }
    })
}

/// Build a synthetic task. Image `j` of every class draws its placement from
/// the same stream, so the placement distribution is identical across
/// classes; validation images use stream indices after the training ones.
pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<TaskSpec> {
    spec.validate()?;
    let names = spec.class_names();
    let make = |split: &str, offset: usize, count: usize| -> Vec<LabeledImage> {
        (0..spec.classes * count)
            .into_par_iter()
            .map(|k| {
                let (class, j) = (k / count, k % count);
                let mut rng = SplitMix64::stream(spec.seed, (offset + j) as u64);
                let placement = Placement::draw(&mut rng, spec.image_size);
                let (shape, texture) = spec.class_design(class);
                LabeledImage {
                    image: render(shape, texture, &placement, spec.image_size),
                    label: class,
                    source_id: format!("{split}/{}/{j:04}", names[class]),
                }
            })
            .collect()
    };
    let task = TaskSpec {
        name: format!("synthetic-{}", spec.mode.as_str()),
        categories: names.clone(),
        train: make("train", 0, spec.per_class_train),
        val: make("val", spec.per_class_train, spec.per_class_val),
        target_category: 0,
    };
    task.validate()?;
    Ok(task)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Load `<root>/{train,val}/<category>/*.png`, keeping the first `train_n`
/// / `val_n` files per category in filename order and resizing each image
/// to `input_size` square.
pub fn build_task_from_dirs(
    root: impl AsRef<Path>,
    categories: &[String],
    target: &str,
    train_n: usize,
    val_n: usize,
    input_size: usize,
) -> Result<TaskSpec> {
    let root = root.as_ref();
    if categories.is_empty() {
        return Err(Error::Dataset("no categories given".into()));
    }
    let target_category = categories
        .iter()
        .position(|c| c == target)
        .ok_or_else(|| Error::Dataset(format!("target '{target}' is not among the categories")))?;
    let load_split = |split: &str, cap: usize| -> Result<Vec<LabeledImage>> {
        let mut out = Vec::new();
        for (label, cat) in categories.iter().enumerate() {
            let dir = root.join(split).join(cat);
            if !dir.is_dir() {
                return Err(Error::Dataset(format!("missing directory {}", dir.display())));
            }
            let files = list_pngs(&dir)?;
            if files.is_empty() {
                return Err(Error::Dataset(format!("class '{cat}' has no images in {}", dir.display())));
            }
            if files.len() < cap {
                return Err(Error::Dataset(format!(
                    "class '{cat}' has {} {split} images, {cap} requested",
                    files.len()
                )));
            }
            let loaded = files[..cap]
                .par_iter()
                .map(|path| {
                    let img = load_image(path)?;
                    let img = if img.height() == input_size && img.width() == input_size {
                        img
                    } else {
                        resize_bilinear(&img, input_size, input_size)?
                    };
                    let stem = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok(LabeledImage { image: img, label, source_id: format!("{split}/{cat}/{stem}") })
                })
                .collect::<Result<Vec<_>>>()?;
            out.extend(loaded);
        }
        Ok(out)
    };
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "task".into());
    let task = TaskSpec {
        name,
        categories: categories.to_vec(),
        train: load_split("train", train_n)?,
        val: load_split("val", val_n)?,
        target_category,
    };
    task.validate()?;
    Ok(task)
}

/// Number of PNG files in `<root>/<split>/<category>` for each category.
pub fn count_images(root: impl AsRef<Path>, split: &str, categories: &[String]) -> Result<Vec<usize>> {
    categories
        .iter()
        .map(|cat| {
            let dir = root.as_ref().join(split).join(cat);
            if !dir.is_dir() {
                return Err(Error::Dataset(format!("missing directory {}", dir.display())));
            }
            Ok(list_pngs(&dir)?.len())
        })
        .collect()
}

/// Category names found under `<root>/train`, sorted.
pub fn discover_categories(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = root.as_ref().join("train");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.is_dir() {
            names.push(path.file_name().expect("directory entry has a name").to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!("no category directories in {}", dir.display())));
    }
    Ok(names)
}

/// Write a task in the `<root>/<split>/<category>/<name>.png` layout.
/// Returns the written paths in task order.
pub fn write_task(task: &TaskSpec, root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    for split in ["train", "val"] {
        for cat in &task.categories {
            let dir = root.join(split).join(cat);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    let jobs: Vec<(PathBuf, &ImageTensor)> = [("train", &task.train), ("val", &task.val)]
        .into_iter()
        .flat_map(|(split, items)| {
            items.iter().enumerate().map(move |(i, s)| {
                let stem = s.source_id.rsplit('/').next().filter(|x| !x.is_empty()).map(str::to_owned);
                let stem = stem.unwrap_or_else(|| format!("{i:05}"));
                let file = if stem.ends_with(".png") { stem } else { format!("{stem}.png") };
                (root.join(split).join(&task.categories[s.label]).join(file), &s.image)
            })
        })
        .collect();
    jobs.par_iter().map(|(path, img)| save_image(img, path)).collect::<Result<()>>()?;
    Ok(jobs.into_iter().map(|(p, _)| p).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub horizontal_flip_prob: f64,
    pub max_shift_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { horizontal_flip_prob: 0.5, max_shift_fraction: 0.1, seed: 0 }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::InvalidParameter(format!(
                "flip probability {} outside [0, 1]",
                self.horizontal_flip_prob
            )));
        }
        if !(0.0..0.5).contains(&self.max_shift_fraction) {
            return Err(Error::InvalidParameter(format!(
                "shift fraction {} outside [0, 0.5)",
                self.max_shift_fraction
            )));
        }
        Ok(())
    }
}

pub fn flip_horizontal(image: &ImageTensor) -> ImageTensor {
    let w = image.width();
    ImageTensor::from_fn(image.height(), w, |y, x| image.pixel(y, w - 1 - x))
}

/// Translate by `(dy, dx)` pixels; vacated pixels replicate the nearest edge.
pub fn shift(image: &ImageTensor, dy: i64, dx: i64) -> ImageTensor {
    let (h, w) = (image.height() as i64, image.width() as i64);
    ImageTensor::from_fn(image.height(), image.width(), |y, x| {
        let sy = (y as i64 - dy).clamp(0, h - 1) as usize;
        let sx = (x as i64 - dx).clamp(0, w - 1) as usize;
        image.pixel(sy, sx)
    })
}

/// Random flip, then random integer shift. Always consumes three draws.
pub fn augment(image: &ImageTensor, spec: &AugmentSpec, rng: &mut SplitMix64) -> ImageTensor {
    let flip = rng.bernoulli(spec.horizontal_flip_prob);
    let my = (spec.max_shift_fraction * image.height() as f64).floor() as i64;
    let mx = (spec.max_shift_fraction * image.width() as f64).floor() as i64;
    let dy = rng.range_inclusive(-my, my);
    let dx = rng.range_inclusive(-mx, mx);
    let base = if flip { flip_horizontal(image) } else { image.clone() };
    if dy == 0 && dx == 0 {
        base
    } else {
        shift(&base, dy, dx)
    }
}
