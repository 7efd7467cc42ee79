//! Confusion matrices, IoU, evaluation outputs and experiment reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acquisition::PatchGrid;
use crate::data::{DenseLabelMap, SegImage, IGNORE};
use crate::datasets::{hsv_to_rgb, DatasetSplit};
use crate::error::{io_err, Error, Result};
use crate::nn::SegNet;
use crate::pngio::{image_to_rgb8, write_rgb_png};
use crate::scalar::Scalar;

/// `counts[g * C + p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!("{classes} classes need {} counts", classes * classes)));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &DenseLabelMap, gt: &DenseLabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        gt.validate(self.classes)?;
        pred.validate(self.classes)?;
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            if g == IGNORE {
                continue;
            }
            if p == IGNORE {
                return Err(Error::InvalidArgument("prediction contains IGNORE".into()));
            }
            self.counts[usize::from(g) * self.classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` when the class is absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes.
    pub miou: f64,
    /// Mean over all classes, undefined counted as 0.
    pub miou_all_zero_convention: f64,
}

pub fn iou(cm: &ConfusionMatrix) -> IouReport {
    let c = cm.classes();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fp: u64 = (0..c).filter(|&g| g != k).map(|g| cm.get(g, k)).sum();
            let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.get(k, p)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    let zero = per_class.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / c.max(1) as f64;
    IouReport { per_class, miou, miou_all_zero_convention: zero }
}

/// Mean IoU over a subset of classes (undefined classes excluded).
pub fn miou_subset(report: &IouReport, classes: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = classes.iter().filter_map(|&c| report.per_class.get(c).copied().flatten()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn evaluate<T: Scalar>(net: &SegNet<T>, split: &DatasetSplit) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(split.num_classes());
    for item in split.items() {
        let gt = item
            .label
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("{} has no ground truth", item.image.id())))?;
        cm.accumulate(&net.predict(&item.image)?.argmax(), gt)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub miou: f64,
    pub miou_all_zero_convention: f64,
    pub per_class: Vec<ClassIou>,
}

impl EvalSummary {
    pub fn new(report: &IouReport, class_names: &[String]) -> Self {
        Self {
            miou: report.miou,
            miou_all_zero_convention: report.miou_all_zero_convention,
            per_class: class_names
                .iter()
                .zip(&report.per_class)
                .map(|(n, v)| ClassIou { class: n.clone(), iou: *v })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }
}

/// Writes `iou.csv` (`class,iou,defined`) and `summary.json`.
pub fn write_eval(out_dir: impl AsRef<Path>, summary: &EvalSummary) -> Result<()> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut csv = String::from("class,iou,defined\n");
    for c in &summary.per_class {
        let _ = writeln!(csv, "{},{:.6},{}", c.class, c.iou.unwrap_or(0.0), c.iou.is_some());
    }
    let csv_path = out_dir.join("iou.csv");
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    let json_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary).map_err(|source| Error::Json { path: json_path.clone(), source })?;
    std::fs::write(&json_path, text + "\n").map_err(io_err(&json_path))
}

/// One row of the strategy table.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmRow {
    pub arm: String,
    pub summary: EvalSummary,
}

/// Plain-text and CSV tables with one row per arm.
pub fn render_table(rows: &[ArmRow]) -> (String, String) {
    let classes: Vec<String> = rows.first().map(|r| r.summary.per_class.iter().map(|c| c.class.clone()).collect()).unwrap_or_default();
    let mut csv = String::from("arm");
    for c in &classes {
        let _ = write!(csv, ",{c}");
    }
    csv.push_str(",miou,miou_all_zero_convention\n");
    let mut text = format!("{:<16}", "arm");
    for c in &classes {
        let _ = write!(text, " {:>10}", truncate(c, 10));
    }
    let _ = writeln!(text, " {:>8}", "mIoU");
    for row in rows {
        let _ = write!(csv, "{}", row.arm);
        let _ = write!(text, "{:<16}", truncate(&row.arm, 16));
        for c in &row.summary.per_class {
            match c.iou {
                Some(v) => {
                    let _ = write!(csv, ",{v:.6}");
                    let _ = write!(text, " {:>10.1}", v * 100.0);
                }
                None => {
                    csv.push(',');
                    let _ = write!(text, " {:>10}", "-");
                }
            }
        }
        let _ = writeln!(csv, ",{:.6},{:.6}", row.summary.miou, row.summary.miou_all_zero_convention);
        let _ = writeln!(text, " {:>8.1}", row.summary.miou * 100.0);
    }
    (text, csv)
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Fixed palette: black background, then evenly spaced hues.
pub fn class_palette(classes: usize) -> Vec<[u8; 3]> {
    (0..classes)
        .map(|c| {
            if c == 0 {
                [0, 0, 0]
            } else {
                let rgb = hsv_to_rgb((c - 1) as f64 / (classes - 1).max(1) as f64, 0.85, 0.95);
                rgb.map(|v| (v * 255.0).round() as u8)
            }
        })
        .collect()
}

pub fn colorize(labels: &DenseLabelMap, palette: &[[u8; 3]]) -> Vec<u8> {
    labels
        .as_slice()
        .iter()
        .flat_map(|&c| palette.get(usize::from(c)).copied().unwrap_or([128, 128, 128]))
        .collect()
}

/// Draws one-pixel white rectangles at the extents of `patches`.
pub fn draw_patch_outlines(rgb: &mut [u8], width: usize, grid: &PatchGrid, patches: &[usize]) {
    for &p in patches {
        let e = grid.extent(p);
        for x in e.x0..e.x1 {
            for y in [e.y0, e.y1 - 1] {
                rgb[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&[255, 255, 255]);
            }
        }
        for y in e.y0..e.y1 {
            for x in [e.x0, e.x1 - 1] {
                rgb[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&[255, 255, 255]);
            }
        }
    }
}

/// Side-by-side panel: input (with optional patch outlines), then one
/// colorized label map per column. Returns `(width, height, rgb)`.
pub fn render_panel(
    image: &SegImage,
    columns: &[&DenseLabelMap],
    palette: &[[u8; 3]],
    outline: Option<(&PatchGrid, &[usize])>,
) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = (image.height(), image.width());
    let gap = 2;
    let mut tiles = vec![image_to_rgb8(image)];
    if let Some((grid, patches)) = outline {
        if (grid.height(), grid.width()) != (h, w) {
            return Err(Error::Shape("overlay grid does not match the image".into()));
        }
        draw_patch_outlines(&mut tiles[0], w, grid, patches);
    }
    for c in columns {
        if (c.height(), c.width()) != (h, w) {
            return Err(Error::Shape("panel column does not match the image".into()));
        }
        tiles.push(colorize(c, palette));
    }
    let total_w = tiles.len() * w + (tiles.len() - 1) * gap;
    let mut out = vec![255u8; total_w * h * 3];
    for (t, tile) in tiles.iter().enumerate() {
        let x_off = t * (w + gap);
        for y in 0..h {
            let dst = (y * total_w + x_off) * 3;
            out[dst..dst + w * 3].copy_from_slice(&tile[y * w * 3..(y + 1) * w * 3]);
        }
    }
    Ok((total_w, h, out))
}

pub fn write_panel(path: impl AsRef<Path>, panel: &(usize, usize, Vec<u8>)) -> Result<()> {
    write_rgb_png(path, panel.0, panel.1, &panel.2)
}
