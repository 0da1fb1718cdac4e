//! Seeded synthetic-shapes dataset with exact ground-truth boxes.
//!
//! Each image holds one filled shape on uniform noise. Shapes never touch
//! the default patch square in the top-left corner.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape `{s}`")))
    }

    /// Whether pixel `(px, py)` lies in the shape drawn in the `side x side`
    /// box at `(x0, y0)`. Pixel centers sit at half-integers.
    fn contains(self, x0: usize, y0: usize, side: usize, px: usize, py: usize) -> bool {
        let s = side as f64;
        let fx = px as f64 + 0.5 - x0 as f64;
        let fy = py as f64 + 0.5 - y0 as f64;
        if fx < 0.0 || fy < 0.0 || fx > s || fy > s {
            return false;
        }
        match self {
            ShapeKind::Disk => {
                let r = (side / 2) as f64;
                let (dx, dy) = (fx - r, fy - r);
                dx * dx + dy * dy <= r * r
            }
            ShapeKind::Square => true,
            ShapeKind::Triangle => {
                // apex at the top center, base along the bottom edge
                (fx - s / 2.0).abs() <= fy / 2.0
            }
            ShapeKind::Cross => {
                let arm = s / 3.0;
                let in_band = |v: f64| v >= arm && v <= 2.0 * arm;
                in_band(fx) || in_band(fy)
            }
        }
    }
}

/// Pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `3 x H x W` in `[0, 1]`, quantized to multiples of `1/255`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub gt_box: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub label: usize,
    pub class_name: String,
    pub bbox: [usize; 4],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub records: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub classes: Vec<ShapeKind>,
    pub image_size: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        DatasetConfig {
            n,
            classes: ShapeKind::ALL.to_vec(),
            image_size: 64,
            seed,
        }
    }
}

/// Side of the default square patch: about 8.2% of the image area
/// (18 px at 64, 64 px at 224).
pub fn default_patch_side(image_size: usize) -> usize {
    (0.082f64.sqrt() * image_size as f64).round() as usize
}

fn image_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED69)
}

fn hsv_to_rgb(h: f64) -> [f64; 3] {
    let h6 = (h * 6.0) % 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Renders one image from its own seed.
pub fn render_shape(kind: ShapeKind, label: usize, size: usize, seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = default_patch_side(size);
    let min_side = (0.25 * size as f64).ceil() as usize;
    let max_side = (0.60 * size as f64).floor() as usize;
    let side = rng.gen_range(min_side..=max_side);
    let (x0, y0) = loop {
        let x0 = rng.gen_range(0..=size - side);
        let y0 = rng.gen_range(0..=size - side);
        // keep the shape's box clear of the top-left patch square
        if x0 >= patch || y0 >= patch {
            break (x0, y0);
        }
    };
    let color = hsv_to_rgb(rng.gen::<f64>());
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for v in data.iter_mut() {
        *v = (rng.gen_range(0.0..0.3f64) * 255.0).round() as f32 / 255.0;
    }
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for py in y0..(y0 + side).min(size) {
        for px in x0..(x0 + side).min(size) {
            if kind.contains(x0, y0, side, px, py) {
                for (c, &cv) in color.iter().enumerate() {
                    data[c * plane + py * size + px] = (cv * 255.0).round() as f32 / 255.0;
                }
                bx0 = bx0.min(px);
                by0 = by0.min(py);
                bx1 = bx1.max(px + 1);
                by1 = by1.max(py + 1);
            }
        }
    }
    LabeledImage {
        pixels: Tensor::from_parts(vec![3, size, size], data),
        label,
        gt_box: BBox {
            x0: bx0,
            y0: by0,
            x1: bx1,
            y1: by1,
        },
    }
}

/// Generates a class-balanced dataset fully determined by `cfg.seed`.
pub fn gen_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    if cfg.image_size < 32 {
        return Err(Error::InvalidArgument(format!(
            "image size {} is below the minimum of 32",
            cfg.image_size
        )));
    }
    if cfg.classes.is_empty() {
        return Err(Error::InvalidArgument("no shape classes given".into()));
    }
    let k = cfg.classes.len();
    let mut labels: Vec<usize> = (0..cfg.n).map(|i| i % k).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut images = Vec::with_capacity(cfg.n);
    let mut records = Vec::with_capacity(cfg.n);
    for (i, &label) in labels.iter().enumerate() {
        let seed = image_seed(cfg.seed, i);
        let kind = cfg.classes[label];
        let img = render_shape(kind, label, cfg.image_size, seed);
        records.push(ManifestRecord {
            file: format!("img_{i:05}.ppm"),
            label,
            class_name: kind.name().to_string(),
            bbox: img.gt_box.as_array(),
            seed,
        });
        images.push(img);
    }
    Ok(Dataset {
        images,
        records,
        class_names: cfg.classes.iter().map(|k| k.name().to_string()).collect(),
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::new();
    for (img, rec) in dataset.images.iter().zip(&dataset.records) {
        imageio::write_ppm(&dir.join(&rec.file), &img.pixels)?;
        serde_json::to_writer(&mut manifest, rec)?;
        manifest.write_all(b"\n").expect("write to Vec");
    }
    imageio::write_atomic(&dir.join("manifest.jsonl"), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.jsonl");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut images = Vec::new();
    let mut records = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)?;
        let pixels = imageio::read_ppm(&dir.join(&rec.file))?;
        if class_names.len() <= rec.label {
            class_names.resize(rec.label + 1, String::new());
        }
        class_names[rec.label] = rec.class_name.clone();
        let [x0, y0, x1, y1] = rec.bbox;
        images.push(LabeledImage {
            pixels,
            label: rec.label,
            gt_box: BBox { x0, y0, x1, y1 },
        });
        records.push(rec);
    }
    Ok(Dataset {
        images,
        records,
        class_names,
    })
}
