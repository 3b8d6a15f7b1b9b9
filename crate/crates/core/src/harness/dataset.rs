//! Synthetic shapes: four shapes in two color families on a dark
//! background, one class per (shape, family) pair.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{write_atomic, Image};
use crate::par;
use crate::rng::{self, Rng, Stream};

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const FAMILIES: [&str; 2] = ["warm", "cool"];
pub const BACKGROUND: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub image_size: usize,
    /// Class `c` is shape `c / 2` in family `c % 2`; at most 8.
    pub classes: usize,
    pub per_class: usize,
    /// Uniform per-channel noise in `[-noise, noise]` added everywhere.
    pub noise: f64,
    /// Randomize position, scale and hue. Off gives one centered shape of
    /// half-extent `size / 4` at the family's base hue.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            classes: 8,
            per_class: 256,
            noise: 0.05,
            jitter: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (2..=8).contains(&self.classes),
            "classes must lie in 2..=8, got {}",
            self.classes
        );
        ensure!(self.image_size >= 8, "image_size must be >= 8");
        ensure!(self.per_class >= 1, "per_class must be >= 1");
        ensure!((0.0..=0.5).contains(&self.noise), "noise must lie in [0, 0.5]");
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_name(class: usize) -> String {
        format!("{}_{}", FAMILIES[class % 2], SHAPES[class / 2])
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Base hue and jitter range in degrees per family.
fn hue(family: usize, rng: Option<&mut Rng>) -> f64 {
    let (base, spread) = if family == 0 { (20.0, 25.0) } else { (215.0, 35.0) };
    match rng {
        Some(r) => base + r.random_range(-spread..=spread),
        None => base,
    }
}

/// Whether the pixel center `(x, y)` lies in the shape of half-extent `s`
/// centered at `(cx, cy)`.
fn inside(shape: usize, x: f64, y: f64, cx: f64, cy: f64, s: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    match shape {
        0 => dx * dx + dy * dy <= s * s,
        1 => dx.abs() <= s && dy.abs() <= s,
        2 => dy.abs() <= s && dx.abs() <= 0.5 * (dy + s),
        _ => (dx.abs() <= s / 3.0 && dy.abs() <= s) || (dy.abs() <= s / 3.0 && dx.abs() <= s),
    }
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Renders image `index` of class `class`. Pixel values are stored at
/// 8-bit precision so files written to disk read back identically.
pub fn render(spec: &DatasetSpec, class: usize, index: usize) -> Image {
    let n = spec.image_size;
    let mut r = rng::substream(spec.seed, Stream::Dataset, class as u64, index as u64);
    let (shape, family) = (class / 2, class % 2);
    let nf = n as f64;
    let (cx, cy, s, h) = if spec.jitter {
        let s = nf * r.random_range(0.2..0.34);
        let cx = r.random_range(s + 1.0..=nf - s - 1.0);
        let cy = r.random_range(s + 1.0..=nf - s - 1.0);
        (cx, cy, s, hue(family, Some(&mut r)))
    } else {
        (nf / 2.0, nf / 2.0, nf / 4.0, hue(family, None))
    };
    let color = hsv(h, 0.85, 0.95);
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let on = inside(shape, x as f64 + 0.5, y as f64 + 0.5, cx, cy, s);
            for c in color {
                let base = if on { c } else { BACKGROUND as f64 };
                let noise = if spec.noise > 0.0 {
                    r.random_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                data.push(quantize(base + noise));
            }
        }
    }
    Image::new(n, n, data).expect("rendered pixels are clamped to [0, 1]")
}

/// Images in class-major order with their labels.
pub fn generate(spec: &DatasetSpec) -> Result<(Vec<Image>, Vec<u16>)> {
    spec.validate()?;
    let labels: Vec<u16> = (0..spec.len()).map(|i| (i / spec.per_class) as u16).collect();
    let images = par::map_indexed(spec.len(), |i| render(spec, i / spec.per_class, i % spec.per_class));
    Ok((images, labels))
}

pub const LABEL_FILE: &str = "labels.txt";

/// Writes `images/NNNNN.ppm` plus `labels.txt` with one `file class` line
/// per image.
pub fn write_dataset(dir: &Path, images: &[Image], labels: &[u16]) -> Result<()> {
    ensure!(images.len() == labels.len(), "images and labels differ in length");
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut index = String::new();
    for (i, (img, l)) in images.iter().zip(labels).enumerate() {
        let name = format!("images/{i:05}.ppm");
        img.write_ppm(&dir.join(&name))?;
        index.push_str(&format!("{name} {l}\n"));
    }
    write_atomic(&dir.join(LABEL_FILE), index.as_bytes())
}

pub fn gen_dataset(spec: &DatasetSpec, dir: &Path) -> Result<(Vec<Image>, Vec<u16>)> {
    let (images, labels) = generate(spec)?;
    write_dataset(dir, &images, &labels)?;
    Ok((images, labels))
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<Image>, Vec<u16>)> {
    let path = dir.join(LABEL_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        let (Some(file), Some(label), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Validation(format!("{}:{}: expected `file class`", path.display(), n + 1)));
        };
        let label: u16 = label
            .parse()
            .map_err(|_| Error::Validation(format!("{}:{}: bad class `{label}`", path.display(), n + 1)))?;
        images.push(Image::load(&dir.join(file))?);
        labels.push(label);
    }
    Ok((images, labels))
}

/// Loads every `.ppm` / `.png` file in `dir` in name order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Image::load(p)).collect()
}
