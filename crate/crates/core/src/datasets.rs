//! ToyShapes-DA: a synthetic source/target pair with a controllable
//! photometric domain gap, plus ingestion of prepared directories.
//!
//! Directory layout: `root/images/<id>.png`, `root/labels/<id>.png` and a
//! UTF-8 `root/meta` file with one class name per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DenseLabelMap, Domain, SegImage};
use crate::error::{io_err, Error, Result};
use crate::pngio::{read_image_png, read_label_png, write_image_png, write_label_png};

pub const TOYSHAPES_CLASSES: [&str; 4] = ["background", "circle", "triangle", "rectangle"];

/// Photometric shift applied to source-style renders to produce the target
/// domain. All-zero means no shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGapSpec {
    /// Hue rotation in turns.
    pub hue_shift: f64,
    pub noise_sigma: f64,
    pub texture_strength: f64,
    /// Gaussian blur sigma in pixels.
    pub blur_radius: f64,
}

impl Default for DomainGapSpec {
    fn default() -> Self {
        Self { hue_shift: 0.12, noise_sigma: 0.05, texture_strength: 0.2, blur_radius: 0.8 }
    }
}

impl DomainGapSpec {
    pub fn none() -> Self {
        Self { hue_shift: 0.0, noise_sigma: 0.0, texture_strength: 0.0, blur_radius: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.hue_shift, self.noise_sigma, self.texture_strength, self.blur_radius];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!("domain gap must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub image: SegImage,
    pub label: Option<DenseLabelMap>,
}

/// An ordered list of images with optional dense labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    class_names: Vec<String>,
    items: Vec<DatasetItem>,
}

impl DatasetSplit {
    pub fn new(class_names: Vec<String>, items: Vec<DatasetItem>) -> Result<Self> {
        for item in &items {
            if let Some(label) = &item.label {
                if (label.height(), label.width()) != (item.image.height(), item.image.width()) {
                    return Err(Error::Dataset(format!(
                        "label for {} is {}x{}, image is {}x{}",
                        item.image.id(),
                        label.height(),
                        label.width(),
                        item.image.height(),
                        item.image.width()
                    )));
                }
                label
                    .validate(class_names.len())
                    .map_err(|e| Error::Dataset(format!("{}: {e}", item.image.id())))?;
            }
        }
        Ok(Self { class_names, items })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
    pub fn len(&self) -> usize {
        self.items.len()
    }
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    /// Images only; this is what unlabeled-domain trainers receive.
    pub fn images(&self) -> Vec<SegImage> {
        self.items.iter().map(|i| i.image.clone()).collect()
    }

    /// `(image, label)` pairs; fails if any item is unlabeled.
    pub fn labeled(&self) -> Result<Vec<(SegImage, DenseLabelMap)>> {
        self.items
            .iter()
            .map(|i| match &i.label {
                Some(l) => Ok((i.image.clone(), l.clone())),
                None => Err(Error::Dataset(format!("{} has no label", i.image.id()))),
            })
            .collect()
    }

    pub fn ground_truth(&self) -> BTreeMap<String, DenseLabelMap> {
        self.items
            .iter()
            .filter_map(|i| i.label.clone().map(|l| (i.image.id().to_string(), l)))
            .collect()
    }

    /// Fraction of labeled pixels per class.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0u64; self.num_classes()];
        let mut total = 0u64;
        for item in &self.items {
            if let Some(l) = &item.label {
                for &v in l.as_slice() {
                    if let Some(c) = counts.get_mut(usize::from(v)) {
                        *c += 1;
                        total += 1;
                    }
                }
            }
        }
        counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyShapesConfig {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub gap: DomainGapSpec,
}

impl Default for ToyShapesConfig {
    fn default() -> Self {
        Self { seed: 0, n_source: 200, n_target: 200, n_val: 50, height: 64, width: 64, gap: DomainGapSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyShapes {
    pub source: DatasetSplit,
    /// Target-train; labels exist only for the simulated oracle and evaluation.
    pub target_train: DatasetSplit,
    pub target_val: DatasetSplit,
}

fn mix_seed(seed: u64, split: u64, index: u64) -> u64 {
    // splitmix64 over the packed inputs
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_toyshapes(cfg: &ToyShapesConfig) -> Result<ToyShapes> {
    if cfg.n_source == 0 || cfg.n_target == 0 || cfg.n_val == 0 {
        return Err(Error::InvalidArgument("split counts must be at least 1".into()));
    }
    if cfg.height < 32 || cfg.width < 32 {
        return Err(Error::InvalidArgument(format!(
            "image size {}x{} too small to place shapes (minimum 32x32)",
            cfg.height, cfg.width
        )));
    }
    cfg.gap.validate()?;
    let names: Vec<String> = TOYSHAPES_CLASSES.iter().map(|s| s.to_string()).collect();
    let make = |tag: u64, prefix: &str, n: usize, domain: Domain| -> Result<DatasetSplit> {
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, tag, i as u64));
            let (mut pixels, label) = render_scene(&mut rng, cfg.height, cfg.width)?;
            if domain == Domain::Target {
                apply_gap(&mut pixels, cfg.height, cfg.width, &cfg.gap, &mut rng);
            }
            quantize(&mut pixels);
            let image = SegImage::new(format!("{prefix}_{i:05}"), cfg.height, cfg.width, pixels, domain)?;
            items.push(DatasetItem { image, label: Some(label) });
        }
        DatasetSplit::new(names.clone(), items)
    };
    Ok(ToyShapes {
        source: make(1, "src", cfg.n_source, Domain::Source)?,
        target_train: make(2, "tgt", cfg.n_target, Domain::Target)?,
        target_val: make(3, "val", cfg.n_val, Domain::Target)?,
    })
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
    Rectangle { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn class(&self) -> u8 {
        match self {
            Shape::Circle { .. } => 1,
            Shape::Triangle { .. } => 2,
            Shape::Rectangle { .. } => 3,
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Rectangle { x0, y0, x1, y1 } => px >= x0 && px <= x1 && py >= y0 && py <= y1,
            Shape::Triangle { pts } => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let d0 = cross(pts[0], pts[1]);
                let d1 = cross(pts[1], pts[2]);
                let d2 = cross(pts[2], pts[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

fn random_shape<R: Rng>(rng: &mut R, class: u8, height: usize, width: usize) -> Shape {
    let scale = height.min(width) as f64 / 64.0;
    let r = rng.random_range(7.0..15.0) * scale;
    let cx = rng.random_range(r..width as f64 - r);
    let cy = rng.random_range(r..height as f64 - r);
    match class {
        1 => Shape::Circle { cx, cy, r },
        2 => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let pts = std::array::from_fn(|k| {
                let a = theta + k as f64 * std::f64::consts::TAU / 3.0;
                (cx + r * a.cos(), cy + r * a.sin())
            });
            Shape::Triangle { pts }
        }
        _ => {
            let hw = rng.random_range(0.6 * r..r);
            let hh = rng.random_range(0.6 * r..r);
            Shape::Rectangle { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
        }
    }
}

const CLASS_HUES: [f64; 4] = [0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0];

fn render_scene<R: Rng>(rng: &mut R, height: usize, width: usize) -> Result<(Vec<f64>, DenseLabelMap)> {
    let mut labels = DenseLabelMap::filled(height, width, 0);
    let mut occupied = vec![false; height * width];
    let n_shapes = rng.random_range(1..=3);
    let mut placed: Vec<(Shape, [f64; 3])> = Vec::new();
    for _ in 0..n_shapes {
        let class = rng.random_range(1..=3u8);
        let mut accepted = None;
        for _attempt in 0..50 {
            let shape = random_shape(rng, class, height, width);
            let mut cells = Vec::new();
            let mut clash = false;
            'scan: for y in 0..height {
                for x in 0..width {
                    if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        // one-pixel clearance from earlier shapes
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height
                                    && occupied[ny as usize * width + nx as usize]
                                {
                                    clash = true;
                                    break 'scan;
                                }
                            }
                        }
                        cells.push(y * width + x);
                    }
                }
            }
            if !clash && !cells.is_empty() {
                accepted = Some((shape, cells));
                break;
            }
        }
        match accepted {
            Some((shape, cells)) => {
                for &c in &cells {
                    occupied[c] = true;
                    labels.set(c % width, c / width, shape.class());
                }
                let hue = (CLASS_HUES[usize::from(class)] + rng.random_range(-0.05..0.05)).rem_euclid(1.0);
                let sat = rng.random_range(0.55..0.9);
                let val = rng.random_range(0.55..0.95);
                placed.push((shape, hsv_to_rgb(hue, sat, val)));
            }
            None if placed.is_empty() => {
                return Err(Error::Dataset(format!("could not place any shape in a {height}x{width} image")));
            }
            None => {}
        }
    }

    let base = rng.random_range(0.35..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos() * 0.08, angle.sin() * 0.08);
    let shading = Normal::new(0.0, 0.015).expect("valid sigma");
    let mut pixels = vec![0.0; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let class = labels.as_slice()[i];
            let rgb = if class == 0 {
                let ramp = gx * (x as f64 / width as f64 - 0.5) + gy * (y as f64 / height as f64 - 0.5);
                std::array::from_fn(|c| base + tint[c] + ramp)
            } else {
                let (shape, color) = placed
                    .iter()
                    .find(|(s, _)| s.class() == class && s.contains(x as f64 + 0.5, y as f64 + 0.5))
                    .expect("labelled pixel belongs to a placed shape");
                let _ = shape;
                *color
            };
            for c in 0..3 {
                pixels[i * 3 + c] = (rgb[c] + shading.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok((pixels, labels))
}

fn quantize(pixels: &mut [f64]) {
    for v in pixels {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
}

fn apply_gap<R: Rng>(pixels: &mut [f64], height: usize, width: usize, gap: &DomainGapSpec, rng: &mut R) {
    if gap.hue_shift != 0.0 {
        for px in pixels.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv([px[0], px[1], px[2]]);
            let rgb = hsv_to_rgb((h + gap.hue_shift).rem_euclid(1.0), s, v);
            px.copy_from_slice(&rgb);
        }
    }
    if gap.texture_strength != 0.0 {
        let period_a = rng.random_range(5.0..11.0);
        let period_b = rng.random_range(7.0..17.0);
        let (ta, tb) = (rng.random_range(0.0..std::f64::consts::PI), rng.random_range(0.0..std::f64::consts::PI));
        let (pa, pb) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                let a = ((xf * ta.cos() + yf * ta.sin()) * std::f64::consts::TAU / period_a + pa).sin();
                let b = ((xf * tb.cos() + yf * tb.sin()) * std::f64::consts::TAU / period_b + pb).sin();
                let t = gap.texture_strength * 0.5 * a * b;
                for c in 0..3 {
                    let v = &mut pixels[(y * width + x) * 3 + c];
                    *v = (*v + t).clamp(0.0, 1.0);
                }
            }
        }
    }
    if gap.blur_radius != 0.0 {
        gaussian_blur(pixels, height, width, gap.blur_radius);
    }
    if gap.noise_sigma != 0.0 {
        let noise = Normal::new(0.0, gap.noise_sigma).expect("valid sigma");
        for v in pixels.iter_mut() {
            *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
}

fn gaussian_blur(pixels: &mut [f64], height: usize, width: usize, sigma: f64) {
    let radius = (2.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; pixels.len()];
    let clampi = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                tmp[(y * width + x) * 3 + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * pixels[(y * width + clampi(x as i64 + k as i64 - radius, width)) * 3 + c])
                    .sum();
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                pixels[(y * width + x) * 3 + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[(clampi(y as i64 + k as i64 - radius, height) * width + x) * 3 + c])
                    .sum();
            }
        }
    }
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Writes `images/`, `labels/` (when present) and `meta` under `root`.
pub fn export_split(split: &DatasetSplit, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let images = root.join("images");
    let labels = root.join("labels");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&labels).map_err(io_err(&labels))?;
    for item in split.items() {
        write_image_png(images.join(format!("{}.png", item.image.id())), &item.image)?;
        if let Some(l) = &item.label {
            write_label_png(labels.join(format!("{}.png", item.image.id())), l)?;
        }
    }
    write_meta(root, split.class_names())
}

pub fn write_meta(root: impl AsRef<Path>, class_names: &[String]) -> Result<()> {
    let path = root.as_ref().join("meta");
    let mut text = class_names.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_meta(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = root.as_ref().join("meta");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
    if names.len() < 2 {
        return Err(Error::Dataset(format!("{} lists fewer than 2 classes", path.display())));
    }
    Ok(names)
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads a split laid out as by [`export_split`], ordered by id.
///
/// Source splits must label every image; target splits may omit labels. A
/// label without a matching image is always an error.
pub fn ingest_directory(root: impl AsRef<Path>, domain: Domain) -> Result<DatasetSplit> {
    let root = root.as_ref();
    let class_names = read_meta(root)?;
    let image_ids = png_ids(&root.join("images"))?;
    let label_ids = png_ids(&root.join("labels"))?;
    if let Some(orphan) = label_ids.iter().find(|id| image_ids.binary_search(id).is_err()) {
        return Err(Error::Dataset(format!("label {orphan} has no matching image")));
    }
    let mut items = Vec::with_capacity(image_ids.len());
    for id in &image_ids {
        let image = read_image_png(root.join("images").join(format!("{id}.png")), id, domain)?;
        let label = if label_ids.binary_search(id).is_ok() {
            Some(read_label_png(root.join("labels").join(format!("{id}.png")))?)
        } else if domain == Domain::Source {
            return Err(Error::Dataset(format!("source image {id} has no label")));
        } else {
            None
        };
        items.push(DatasetItem { image, label });
    }
    DatasetSplit::new(class_names, items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, gap: DomainGapSpec) -> ToyShapesConfig {
        ToyShapesConfig { seed, n_source: 3, n_target: 3, n_val: 2, height: 32, width: 32, gap }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toyshapes(&small(5, DomainGapSpec::default())).unwrap();
        let b = generate_toyshapes(&small(5, DomainGapSpec::default())).unwrap();
        assert_eq!(a, b);
        let c = generate_toyshapes(&small(6, DomainGapSpec::default())).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn zero_gap_target_is_source_style_render() {
        let cfg = small(2, DomainGapSpec::none());
        let ds = generate_toyshapes(&cfg).unwrap();
        // re-render the first target scene without any transform
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(2, 2, 0));
        let (mut px, label) = render_scene(&mut rng, 32, 32).unwrap();
        quantize(&mut px);
        assert_eq!(ds.target_train.items()[0].image.pixels(), px.as_slice());
        assert_eq!(ds.target_train.items()[0].label.as_ref().unwrap(), &label);
    }

    #[test]
    fn labels_are_exact_rasterizations_with_valid_classes() {
        let ds = generate_toyshapes(&small(9, DomainGapSpec::default())).unwrap();
        for item in ds.source.items() {
            let l = item.label.as_ref().unwrap();
            l.validate(4).unwrap();
            assert!(l.as_slice().iter().any(|&c| c > 0), "at least one shape");
        }
    }

    #[test]
    fn too_small_is_an_error() {
        let mut cfg = small(0, DomainGapSpec::none());
        cfg.height = 16;
        assert!(generate_toyshapes(&cfg).is_err());
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.2, 0.5, 0.9], [0.9, 0.1, 0.3], [0.4, 0.4, 0.4]] {
            let (h, s, v) = rgb_to_hsv(rgb);
            let back = hsv_to_rgb(h, s, v);
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn export_then_ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_toyshapes(&small(3, DomainGapSpec::default())).unwrap();
        export_split(&ds.source, dir.path()).unwrap();
        assert_eq!(ingest_directory(dir.path(), Domain::Source).unwrap(), ds.source);
    }

    #[test]
    fn ingest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_toyshapes(&small(3, DomainGapSpec::none())).unwrap();
        export_split(&ds.source, dir.path()).unwrap();
        // orphan label
        let orphan = dir.path().join("labels/zzz.png");
        fs::copy(dir.path().join("labels/src_00000.png"), &orphan).unwrap();
        let err = ingest_directory(dir.path(), Domain::Source).unwrap_err();
        assert!(err.to_string().contains("zzz"), "{err}");
        fs::remove_file(&orphan).unwrap();
        // missing label for a source item
        fs::remove_file(dir.path().join("labels/src_00001.png")).unwrap();
        let err = ingest_directory(dir.path(), Domain::Source).unwrap_err();
        assert!(err.to_string().contains("src_00001"), "{err}");
        assert!(ingest_directory(dir.path(), Domain::Target).unwrap().items()[1].label.is_none());
        // too few classes in meta for the labels present
        fs::write(dir.path().join("meta"), "background\ncircle\n").unwrap();
        assert!(ingest_directory(dir.path(), Domain::Target).is_err());
    }
}
