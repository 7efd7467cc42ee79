//! Shared containers: images, label maps, probability and entropy maps.
//!
//! Every array is stored H-major: `(row, column, channel)`. Point coordinates
//! are always `(x, y)` = `(column, row)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Tolerance for the per-pixel probability sum.
pub const PROB_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// An RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegImage {
    id: String,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    domain: Domain,
}

impl SegImage {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        domain: Domain,
    ) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::Shape(format!("image must be at least 8x8, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} pixel values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {} at flat index {bad} outside [0,1]",
                pixels[bad]
            )));
        }
        Ok(Self { id: id.into(), height, width, pixels, domain })
    }

    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn domain(&self) -> Domain {
        self.domain
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Per-pixel class indices in `[0, C)` or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseLabelMap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl DenseLabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                classes.len()
            )));
        }
        Ok(Self { height, width, classes })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, classes: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn as_slice(&self) -> &[u8] {
        &self.classes
    }
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.classes[y * self.width + x] = value;
    }

    /// Fails on the first non-IGNORE entry `>= num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, &v) in self.classes.iter().enumerate() {
            if v != IGNORE && usize::from(v) >= num_classes {
                return Err(Error::ClassOutOfRange {
                    x: i % self.width,
                    y: i / self.width,
                    value: v,
                    classes: num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn counted_pixels(&self) -> usize {
        self.classes.iter().filter(|&&v| v != IGNORE).count()
    }
}

/// One-hot encoding `H x W x C`; IGNORE pixels become all-zero vectors.
pub fn one_hot(labels: &DenseLabelMap, num_classes: usize) -> Result<Vec<u8>> {
    labels.validate(num_classes)?;
    let mut out = vec![0u8; labels.classes.len() * num_classes];
    for (i, &v) in labels.classes.iter().enumerate() {
        if v != IGNORE {
            out[i * num_classes + usize::from(v)] = 1;
        }
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel categorical distribution over `C` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T> {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<T>,
}

impl<T: Scalar> ProbMap<T> {
    /// Validates the simplex constraint at every pixel; never renormalizes.
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<T>) -> Result<Self> {
        if classes < 1 || probs.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "prob map {height}x{width}x{classes} needs {} entries, got {}",
                height * width * classes,
                probs.len()
            )));
        }
        for (pix, chunk) in probs.chunks_exact(classes).enumerate() {
            let mut sum = 0.0;
            for &p in chunk {
                let p = p.as_f64();
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidProbMap(format!(
                        "entry {p} at pixel (x={}, y={}) outside [0,1]",
                        pix % width,
                        pix / width
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::InvalidProbMap(format!(
                    "pixel (x={}, y={}) sums to {sum}",
                    pix % width,
                    pix / width
                )));
            }
        }
        Ok(Self { height, width, classes, probs })
    }

    pub(crate) fn from_trusted(height: usize, width: usize, classes: usize, probs: Vec<T>) -> Self {
        debug_assert_eq!(probs.len(), height * width * classes);
        Self { height, width, classes, probs }
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        let p = T::one() / T::of(classes as f64);
        Self { height, width, classes, probs: vec![p; height * width * classes] }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn as_slice(&self) -> &[T] {
        &self.probs
    }
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.classes;
        &self.probs[i..i + self.classes]
    }

    /// Hard labels; ties broken by the lowest class index.
    pub fn argmax(&self) -> DenseLabelMap {
        let classes = self
            .probs
            .chunks_exact(self.classes)
            .map(|px| argmax(px) as u8)
            .collect();
        DenseLabelMap { height: self.height, width: self.width, classes }
    }

    pub fn cast<U: Scalar>(&self) -> ProbMap<U> {
        ProbMap {
            height: self.height,
            width: self.width,
            classes: self.classes,
            probs: self.probs.iter().map(|p| U::of(p.as_f64())).collect(),
        }
    }
}

/// Elementwise `-p ln p` of a [`ProbMap`], in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap<T> {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<T>,
}

impl<T: Scalar> EntropyMap<T> {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<T>) -> Result<Self> {
        if classes < 1 || values.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "entropy map {height}x{width}x{classes} needs {} entries, got {}",
                height * width * classes,
                values.len()
            )));
        }
        let cap = (-1.0f64).exp() + 1e-9;
        if let Some(bad) = values.iter().position(|v| {
            let v = v.as_f64();
            !v.is_finite() || !(0.0..=cap).contains(&v)
        }) {
            return Err(Error::InvalidArgument(format!(
                "entropy entry {} at flat index {bad} outside [0, 1/e]",
                values[bad]
            )));
        }
        Ok(Self { height, width, classes, values })
    }

    pub(crate) fn from_trusted(height: usize, width: usize, classes: usize, values: Vec<T>) -> Self {
        Self { height, width, classes, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn as_slice(&self) -> &[T] {
        &self.values
    }
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.values[(y * self.width + x) * self.classes + c]
    }

    /// Channel-summed entropy per pixel, `H x W`.
    pub fn pixel_entropy(&self) -> Vec<T> {
        self.values
            .chunks_exact(self.classes)
            .map(|px| px.iter().fold(T::zero(), |a, &b| a + b))
            .collect()
    }

    /// Per-pixel entropy divided by `ln C`, for display only.
    pub fn normalized_pixel_entropy(&self) -> Vec<f64> {
        let norm = (self.classes as f64).ln().max(f64::MIN_POSITIVE);
        self.pixel_entropy().into_iter().map(|e| e.as_f64() / norm).collect()
    }
}

/// Where a weak label came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Provenance {
    None = 0,
    Oracle = 1,
    Pseudo = 2,
}

impl Provenance {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::None),
            1 => Some(Self::Oracle),
            2 => Some(Self::Pseudo),
            _ => None,
        }
    }
}

/// Merged stage-2 target: oracle points, pseudo labels and IGNORE holes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeakLabelMap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
    provenance: Vec<Provenance>,
}

impl WeakLabelMap {
    pub fn new(
        height: usize,
        width: usize,
        classes: Vec<u8>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if classes.len() != height * width || provenance.len() != height * width {
            return Err(Error::Shape(format!(
                "weak label map {height}x{width} needs {} entries",
                height * width
            )));
        }
        let map = Self { height, width, classes, provenance };
        map.check_provenance()?;
        Ok(map)
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            classes: vec![IGNORE; height * width],
            provenance: vec![Provenance::None; height * width],
        }
    }

    fn check_provenance(&self) -> Result<()> {
        for (i, (&c, &p)) in self.classes.iter().zip(&self.provenance).enumerate() {
            if (p == Provenance::None) != (c == IGNORE) {
                return Err(Error::InvalidArgument(format!(
                    "pixel (x={}, y={}) has class {c} with provenance {p:?}",
                    i % self.width,
                    i / self.width
                )));
            }
        }
        Ok(())
    }

    /// Checks the provenance invariant and the class range.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.check_provenance()?;
        self.labels().validate(num_classes)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> &[u8] {
        &self.classes
    }
    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }
    pub fn get(&self, x: usize, y: usize) -> (u8, Provenance) {
        let i = y * self.width + x;
        (self.classes[i], self.provenance[i])
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8, provenance: Provenance) {
        let i = y * self.width + x;
        if provenance == Provenance::None {
            self.classes[i] = IGNORE;
        } else {
            self.classes[i] = class;
        }
        self.provenance[i] = provenance;
    }

    pub fn labels(&self) -> DenseLabelMap {
        DenseLabelMap { height: self.height, width: self.width, classes: self.classes.clone() }
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == provenance).count()
    }
}
