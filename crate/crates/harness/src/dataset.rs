//! Procedural image sets and on-disk image folders.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use gilab_core::{ImageBatch, ImageShape};
use image::imageops::{self, FilterType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Every synthetic family has this many classes.
pub const SYNTH_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Two-colour ramps: horizontal, vertical, diagonal, radial.
    Gradients,
    /// Flat foreground shape on a flat background: disk, square, triangle, cross.
    Shapes,
    /// Checkerboards with four cell sizes.
    Checker,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::Gradients => "gradients",
            SynthKind::Shapes => "shapes",
            SynthKind::Checker => "checker",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(SynthKind::Gradients),
            "shapes" => Ok(SynthKind::Shapes),
            "checker" => Ok(SynthKind::Checker),
            other => Err(HarnessError::Config(format!(
                "unknown synthetic dataset kind `{other}` (expected gradients, shapes or checker)"
            ))),
        }
    }
}

/// Images in `[0, 1]` with one integer label each.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        self.images.shape()
    }
}

fn random_colour(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    (0..channels).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Background and foreground colours at least 0.3 apart in some channel.
fn colour_pair(rng: &mut ChaCha8Rng, channels: usize) -> (Vec<f64>, Vec<f64>) {
    loop {
        let a = random_colour(rng, channels);
        let b = random_colour(rng, channels);
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() >= 0.3) {
            return (a, b);
        }
    }
}

fn inside_shape(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
        2 => dy <= r * 0.7 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
        _ => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
    }
}

fn render(kind: SynthKind, class: usize, size: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (bg, fg) = colour_pair(rng, channels);
    let s = size as f64;
    let mut img = vec![0.0; channels * size * size];
    let put = |img: &mut [f64], y: usize, x: usize, t: f64| {
        for c in 0..channels {
            img[(c * size + y) * size + x] = bg[c] + t * (fg[c] - bg[c]);
        }
    };
    match kind {
        SynthKind::Gradients => {
            let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
            for y in 0..size {
                for x in 0..size {
                    let (fx, fy) = (x as f64 / (s - 1.0), y as f64 / (s - 1.0));
                    let t = match class {
                        0 => fx,
                        1 => fy,
                        2 => (fx + fy) / 2.0,
                        _ => {
                            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                            (d / (0.75 * s)).min(1.0)
                        }
                    };
                    put(&mut img, y, x, t);
                }
            }
        }
        SynthKind::Shapes => {
            let r = rng.random_range(0.25..0.4) * s;
            let cx = rng.random_range(r * 0.8..s - r * 0.8);
            let cy = rng.random_range(r * 0.8..s - r * 0.8);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    put(&mut img, y, x, if inside_shape(class, dx, dy, r) { 1.0 } else { 0.0 });
                }
            }
        }
        SynthKind::Checker => {
            let cell = ((class + 1) * size / 8).max(1);
            let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for y in 0..size {
                for x in 0..size {
                    let on = ((y + oy) / cell + (x + ox) / cell) % 2 == 0;
                    put(&mut img, y, x, if on { 1.0 } else { 0.0 });
                }
            }
        }
    }
    img
}

/// `n` seeded images of `kind`, `channels × size × size`; image `i` has
/// label `i mod 4`.
pub fn synth_dataset(kind: SynthKind, n: usize, size: usize, channels: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(HarnessError::Config("synthetic dataset needs n >= 1".into()));
    }
    if size < 8 {
        return Err(HarnessError::Config(format!("synthetic image size {size} must be >= 8")));
    }
    if channels == 0 {
        return Err(HarnessError::Config("synthetic dataset needs channels >= 1".into()));
    }
    let shape = ImageShape::new(channels, size, size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % SYNTH_CLASSES).collect();
    let data = labels
        .iter()
        .flat_map(|&class| render(kind, class, size, channels, &mut rng))
        .collect();
    Ok(Dataset {
        name: format!("{kind}-{size}"),
        images: ImageBatch::new(shape, data)?,
        labels,
        num_classes: SYNTH_CLASSES,
    })
}

/// Decodes any supported image to `channels × height × width` in `[0, 1]`.
///
/// 8- and 16-bit inputs are scaled by their type's maximum. Resizing is
/// bilinear. One channel is taken as luma, three as RGB.
pub fn load_image(path: &Path, size: Option<(usize, usize)>, channels: usize) -> Result<(ImageShape, Vec<f64>)> {
    if channels != 1 && channels != 3 {
        return Err(HarnessError::Config(format!(
            "images can be loaded with 1 or 3 channels, not {channels}"
        )));
    }
    let img = image::open(path).map_err(|e| HarnessError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rgb = img.to_rgb32f();
    if let Some((h, w)) = size {
        if (rgb.height() as usize, rgb.width() as usize) != (h, w) {
            rgb = imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; channels * plane];
    for (i, p) in rgb.pixels().enumerate() {
        let [r, g, b] = p.0.map(|v| f64::from(v).clamp(0.0, 1.0));
        match channels {
            1 => data[i] = 0.299 * r + 0.587 * g + 0.114 * b,
            3 => {
                data[i] = r;
                data[plane + i] = g;
                data[2 * plane + i] = b;
            }
            _ => unreachable!("channel count checked above"),
        }
    }
    Ok((ImageShape::new(channels, h, w), data))
}

fn parse_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| HarnessError::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| HarnessError::Dataset(format!("{}: {e}", path.display())))?;
        if row.len() != 2 {
            return Err(HarnessError::Dataset(format!(
                "{} row {}: expected `file,label`",
                path.display(),
                line + 1
            )));
        }
        match row[1].parse::<usize>() {
            Ok(label) => out.push((row[0].to_string(), label)),
            Err(_) if line == 0 => continue, // header
            Err(_) => {
                return Err(HarnessError::Dataset(format!(
                    "{} row {}: label `{}` is not a non-negative integer",
                    path.display(),
                    line + 1,
                    &row[1]
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Dataset(format!("{} lists no images", path.display())));
    }
    Ok(out)
}

/// Reads `dir/labels.csv` (`file,label` rows, optional header) and the
/// images it names, resized to `size × size`.
pub fn load_image_folder(dir: &Path, size: usize, channels: usize) -> Result<Dataset> {
    let labels_path = dir.join("labels.csv");
    if !labels_path.is_file() {
        return Err(HarnessError::Dataset(format!("missing labels file {}", labels_path.display())));
    }
    let entries = parse_labels(&labels_path)?;
    let mut data = Vec::new();
    let mut shape = None;
    for (file, _) in &entries {
        let (s, pixels) = load_image(&dir.join(file), Some((size, size)), channels)?;
        shape = Some(s);
        data.extend(pixels);
    }
    let labels: Vec<usize> = entries.iter().map(|(_, l)| *l).collect();
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "images".into());
    Ok(Dataset {
        name,
        images: ImageBatch::new(shape.expect("at least one entry"), data)?,
        num_classes: labels.iter().max().map_or(1, |m| m + 1),
        labels,
    })
}

/// Writes one image of `batch` as an 8-bit RGB PNG; one channel is
/// replicated to grey, other counts use the first three channels.
pub fn save_png(batch: &ImageBatch, slot: usize, path: &Path) -> Result<()> {
    let shape = batch.shape();
    let (h, w) = (shape.height, shape.width);
    let plane = h * w;
    let src = batch.image(slot);
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (i, p) in out.pixels_mut().enumerate() {
        let ch = |c: usize| to_u8(src[c.min(shape.channels - 1) * plane + i]);
        p.0 = if shape.channels >= 3 { [ch(0), ch(1), ch(2)] } else { [ch(0); 3] };
    }
    out.save(path).map_err(|e| HarnessError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
