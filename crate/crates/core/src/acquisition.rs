//! Patch scoring, top-K selection, point sampling and weak-label merging.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DenseLabelMap, EntropyMap, ProbMap, Provenance, WeakLabelMap, IGNORE};
use crate::error::{io_err, Error, Result};
use crate::scalar::Scalar;
use crate::uda::derive_seed;

/// Regular tiling of an `height x width` map into `grid_m` columns and
/// `grid_n` rows of equal patches. Patch indices are row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    #[serde(rename = "m")]
    pub grid_m: usize,
    #[serde(rename = "n")]
    pub grid_n: usize,
    #[serde(rename = "ph")]
    pub patch_h: usize,
    #[serde(rename = "pw")]
    pub patch_w: usize,
}

/// Pixel extent of a patch, half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchExtent {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PatchExtent {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, grid_m: usize, grid_n: usize) -> Result<Self> {
        if grid_m == 0 || grid_n == 0 || !width.is_multiple_of(grid_m) || !height.is_multiple_of(grid_n) {
            return Err(Error::Acquisition(format!(
                "a {grid_m}x{grid_n} grid does not tile a {height}x{width} map exactly"
            )));
        }
        Ok(Self { grid_m, grid_n, patch_h: height / grid_n, patch_w: width / grid_m })
    }

    pub fn height(&self) -> usize {
        self.grid_n * self.patch_h
    }
    pub fn width(&self) -> usize {
        self.grid_m * self.patch_w
    }
    pub fn count(&self) -> usize {
        self.grid_m * self.grid_n
    }
    pub fn patch_area(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn extent(&self, index: usize) -> PatchExtent {
        let (row, col) = (index / self.grid_m, index % self.grid_m);
        PatchExtent {
            x0: col * self.patch_w,
            y0: row * self.patch_h,
            x1: (col + 1) * self.patch_w,
            y1: (row + 1) * self.patch_h,
        }
    }

    pub fn index_of(&self, x: usize, y: usize) -> usize {
        (y / self.patch_h) * self.grid_m + x / self.patch_w
    }

    fn check_tiles(&self, height: usize, width: usize) -> Result<()> {
        if (self.height(), self.width()) != (height, width) || self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::Acquisition(format!(
                "grid covers {}x{} but the map is {height}x{width}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub patch_index: usize,
    /// Mean per-element entropy in nats.
    pub score: f64,
}

fn patch_totals<T: Scalar>(e: &EntropyMap<T>, grid: &PatchGrid) -> Result<Vec<f64>> {
    grid.check_tiles(e.height(), e.width())?;
    let c = e.classes();
    let mut sums = vec![0.0; grid.count()];
    for y in 0..e.height() {
        for x in 0..e.width() {
            let base = (y * e.width() + x) * c;
            let s: f64 = e.as_slice()[base..base + c].iter().map(|v| v.as_f64()).sum();
            sums[grid.index_of(x, y)] += s;
        }
    }
    Ok(sums)
}

/// Raw entropy sum per patch.
pub fn patch_sums<T: Scalar>(e: &EntropyMap<T>, grid: &PatchGrid) -> Result<Vec<PatchScore>> {
    Ok(patch_totals(e, grid)?
        .into_iter()
        .enumerate()
        .map(|(patch_index, score)| PatchScore { patch_index, score })
        .collect())
}

/// Mean entropy per patch, `sum / (patch_h * patch_w * C)`, in patch order.
pub fn score_patches<T: Scalar>(e: &EntropyMap<T>, grid: &PatchGrid) -> Result<Vec<PatchScore>> {
    let denom = (grid.patch_area() * e.classes()) as f64;
    Ok(patch_totals(e, grid)?
        .into_iter()
        .enumerate()
        .map(|(patch_index, sum)| PatchScore { patch_index, score: sum / denom })
        .collect())
}

/// The `k` highest scores; equal scores prefer the lower patch index.
pub fn select_top_k(scores: &[PatchScore], k: usize) -> Result<BTreeSet<usize>> {
    if k > scores.len() {
        return Err(Error::Acquisition(format!("K={k} exceeds the {} available patches", scores.len())));
    }
    if let Some(bad) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Acquisition(format!("patch {} has non-finite score", bad.patch_index)));
    }
    let mut order: Vec<&PatchScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.patch_index.cmp(&b.patch_index)));
    Ok(order.iter().take(k).map(|s| s.patch_index).collect())
}

fn image_seed(seed: u64, image_id: &str, stream: u64) -> u64 {
    let digest = Sha256::digest(image_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    derive_seed(seed ^ u64::from_le_bytes(head), stream)
}

/// `k` patches chosen uniformly without replacement, seeded per image.
pub fn select_random(num_patches: usize, k: usize, seed: u64, image_id: &str) -> Result<BTreeSet<usize>> {
    if k > num_patches {
        return Err(Error::Acquisition(format!("K={k} exceeds the {num_patches} available patches")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, image_id, 11));
    Ok(sample(&mut rng, num_patches, k).into_iter().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Active,
    Random,
    Full,
    None,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Active => "active",
            Strategy::Random => "random",
            Strategy::Full => "full",
            Strategy::None => "none",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(Strategy::Active),
            "random" => Ok(Strategy::Random),
            "full" => Ok(Strategy::Full),
            "none" => Ok(Strategy::None),
            other => Err(Error::Config(format!("unknown strategy {other:?} (active|random|full|none)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub points_per_patch: usize,
    pub seed: u64,
    /// Patches per row and per column.
    pub grid_m: usize,
    pub grid_n: usize,
    /// Pseudo labels fill whole non-selected patches (`true`) or only
    /// sampled points in them (`false`).
    pub pseudo_dense: bool,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Active, k: 10, points_per_patch: 5, seed: 0, grid_m: 8, grid_n: 8, pseudo_dense: true }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self, grid: &PatchGrid) -> Result<()> {
        if self.points_per_patch == 0 {
            return Err(Error::Acquisition("points_per_patch must be at least 1".into()));
        }
        if self.points_per_patch > grid.patch_area() {
            return Err(Error::Acquisition(format!(
                "{} points do not fit in a {}x{} patch",
                self.points_per_patch, grid.patch_h, grid.patch_w
            )));
        }
        if self.k > grid.count() {
            return Err(Error::Acquisition(format!("K={} exceeds the {} patches", self.k, grid.count())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestStatus {
    Pending,
    Answered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub image_id: String,
    pub x: usize,
    pub y: usize,
    pub patch_index: usize,
    pub status: RequestStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<u8>,
    /// Mean entropy of the containing patch; used for serving order.
    #[serde(default)]
    pub score: f64,
}

/// Content-addressed id: the first 16 hex digits of
/// `sha256(image_id \0 patch_index \0 ordinal)`.
pub fn request_id(image_id: &str, patch_index: usize, ordinal: usize) -> String {
    let mut h = Sha256::new();
    h.update(image_id.as_bytes());
    h.update([0]);
    h.update(patch_index.to_string().as_bytes());
    h.update([0]);
    h.update(ordinal.to_string().as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn sample_in_patches(
    image_id: &str,
    patches: &BTreeSet<usize>,
    grid: &PatchGrid,
    points_per_patch: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<(usize, usize, usize, usize)>> {
    if points_per_patch == 0 || points_per_patch > grid.patch_area() {
        return Err(Error::Acquisition(format!(
            "cannot place {points_per_patch} distinct points in a {}x{} patch",
            grid.patch_h, grid.patch_w
        )));
    }
    if let Some(bad) = patches.iter().find(|&&p| p >= grid.count()) {
        return Err(Error::Acquisition(format!("patch index {bad} outside a {}-patch grid", grid.count())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, image_id, stream));
    let mut out = Vec::with_capacity(patches.len() * points_per_patch);
    for &patch in patches {
        let ext = grid.extent(patch);
        let mut offsets = sample(&mut rng, grid.patch_area(), points_per_patch).into_vec();
        offsets.sort_unstable();
        for (ordinal, off) in offsets.into_iter().enumerate() {
            out.push((patch, ordinal, ext.x0 + off % grid.patch_w, ext.y0 + off / grid.patch_w));
        }
    }
    Ok(out)
}

/// Distinct uniform-random points in every selected patch.
pub fn sample_points(
    image_id: &str,
    selected: &BTreeSet<usize>,
    grid: &PatchGrid,
    points_per_patch: usize,
    seed: u64,
) -> Result<Vec<AnnotationRequest>> {
    Ok(sample_in_patches(image_id, selected, grid, points_per_patch, seed, 12)?
        .into_iter()
        .map(|(patch_index, ordinal, x, y)| AnnotationRequest {
            request_id: request_id(image_id, patch_index, ordinal),
            image_id: image_id.to_string(),
            x,
            y,
            patch_index,
            status: RequestStatus::Pending,
            answer: None,
            score: 0.0,
        })
        .collect())
}

/// How pixels outside the selected patches are filled.
#[derive(Clone, Debug, PartialEq)]
pub enum PseudoFill<'a> {
    Dense,
    /// Only at sampled points, as many per patch as for oracle queries.
    Points { image_id: &'a str, points_per_patch: usize, seed: u64 },
}

/// Builds the stage-2 target: pseudo labels (argmax of `p_t`) outside the
/// selected patches, oracle answers at the queried points, IGNORE elsewhere
/// inside selected patches.
pub fn merge_labels<T: Scalar>(
    p_t: &ProbMap<T>,
    grid: &PatchGrid,
    selected: &BTreeSet<usize>,
    answered: &[AnnotationRequest],
    fill: PseudoFill<'_>,
) -> Result<WeakLabelMap> {
    grid.check_tiles(p_t.height(), p_t.width())?;
    let (h, w) = (p_t.height(), p_t.width());
    let pseudo = p_t.argmax();
    let mut out = WeakLabelMap::empty(h, w);
    match fill {
        PseudoFill::Dense => {
            for y in 0..h {
                for x in 0..w {
                    if !selected.contains(&grid.index_of(x, y)) {
                        out.set(x, y, pseudo.get(x, y), Provenance::Pseudo);
                    }
                }
            }
        }
        PseudoFill::Points { image_id, points_per_patch, seed } => {
            let others: BTreeSet<usize> = (0..grid.count()).filter(|p| !selected.contains(p)).collect();
            for (_, _, x, y) in sample_in_patches(image_id, &others, grid, points_per_patch, seed, 13)? {
                out.set(x, y, pseudo.get(x, y), Provenance::Pseudo);
            }
        }
    }
    for req in answered {
        if req.x >= w || req.y >= h {
            return Err(Error::Acquisition(format!("request {} at ({}, {}) is out of bounds", req.request_id, req.x, req.y)));
        }
        let patch = grid.index_of(req.x, req.y);
        if !selected.contains(&patch) || patch != req.patch_index {
            return Err(Error::Acquisition(format!(
                "request {} at ({}, {}) is not inside selected patch {}",
                req.request_id, req.x, req.y, req.patch_index
            )));
        }
        let class = match (req.status, req.answer) {
            (RequestStatus::Answered, Some(c)) => c,
            _ => return Err(Error::Acquisition(format!("request {} is unanswered", req.request_id))),
        };
        if usize::from(class) >= p_t.classes() {
            return Err(Error::ClassOutOfRange { x: req.x, y: req.y, value: class, classes: p_t.classes() });
        }
        out.set(req.x, req.y, class, Provenance::Oracle);
    }
    Ok(out)
}

/// Answers every request with the ground-truth class at its point.
pub fn simulated_oracle(requests: &[AnnotationRequest], truth: &DenseLabelMap) -> Result<Vec<AnnotationRequest>> {
    requests
        .iter()
        .map(|r| {
            if r.x >= truth.width() || r.y >= truth.height() {
                return Err(Error::Acquisition(format!(
                    "point ({}, {}) outside {}x{} ground truth",
                    r.x,
                    r.y,
                    truth.height(),
                    truth.width()
                )));
            }
            let class = truth.get(r.x, r.y);
            if class == IGNORE {
                return Err(Error::Acquisition(format!("ground truth is IGNORE at ({}, {})", r.x, r.y)));
            }
            Ok(AnnotationRequest { status: RequestStatus::Answered, answer: Some(class), ..r.clone() })
        })
        .collect()
}

/// Per-image annotation manifest as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationManifest {
    pub image_id: String,
    pub grid: PatchGrid,
    pub strategy: Strategy,
    #[serde(rename = "K")]
    pub k: usize,
    /// Selected patch indices, ascending.
    #[serde(default)]
    pub selected: Vec<usize>,
    pub points: Vec<AnnotationRequest>,
}

impl AnnotationManifest {
    pub fn selected_set(&self) -> BTreeSet<usize> {
        self.selected.iter().copied().collect()
    }

    pub fn pending(&self) -> impl Iterator<Item = &AnnotationRequest> {
        self.points.iter().filter(|p| p.status == RequestStatus::Pending)
    }

    /// Points carry their image id only in memory; on disk it is implied.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("{}.json", self.image_id));
        let mut stored = self.clone();
        for p in &mut stored.points {
            p.image_id.clear();
        }
        let text = serde_json::to_string_pretty(&stored).map_err(|source| Error::Json { path: path.clone(), source })?;
        std::fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        for p in &mut m.points {
            p.image_id = m.image_id.clone();
        }
        Ok(m)
    }

    /// Loads every `*.json` manifest in `dir`, ordered by image id.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Self>> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("json") {
                paths.push(path);
            }
        }
        let mut out = paths.iter().map(Self::load).collect::<Result<Vec<_>>>()?;
        out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(out)
    }
}

/// Selects patches for one image under `cfg` and samples its requests.
///
/// `full` selects every patch and queries every pixel; `none` selects
/// nothing. Random and active share everything after the selection.
pub fn acquire_image<T: Scalar>(image_id: &str, e: &EntropyMap<T>, cfg: &AcquisitionConfig) -> Result<AnnotationManifest> {
    let grid = PatchGrid::new(e.height(), e.width(), cfg.grid_m, cfg.grid_n)?;
    cfg.validate(&grid)?;
    let scores = score_patches(e, &grid)?;
    let (selected, per_patch) = match cfg.strategy {
        Strategy::Active => (select_top_k(&scores, cfg.k)?, cfg.points_per_patch),
        Strategy::Random => (select_random(grid.count(), cfg.k, cfg.seed, image_id)?, cfg.points_per_patch),
        Strategy::Full => ((0..grid.count()).collect(), grid.patch_area()),
        Strategy::None => (BTreeSet::new(), cfg.points_per_patch),
    };
    build_manifest(image_id, &grid, cfg.strategy, cfg.k, &selected, &scores, per_patch, cfg.seed)
}

/// Shared tail of every strategy: sample points in `selected` and attach
/// patch scores.
#[allow(clippy::too_many_arguments)]
pub fn build_manifest(
    image_id: &str,
    grid: &PatchGrid,
    strategy: Strategy,
    k: usize,
    selected: &BTreeSet<usize>,
    scores: &[PatchScore],
    points_per_patch: usize,
    seed: u64,
) -> Result<AnnotationManifest> {
    let mut points = sample_points(image_id, selected, grid, points_per_patch, seed)?;
    for p in &mut points {
        p.score = scores.get(p.patch_index).map_or(0.0, |s| s.score);
    }
    Ok(AnnotationManifest {
        image_id: image_id.to_string(),
        grid: *grid,
        strategy,
        k,
        selected: selected.iter().copied().collect(),
        points,
    })
}

/// Weak labels for a manifest whose requests have all been answered.
pub fn merge_manifest<T: Scalar>(
    p_t: &ProbMap<T>,
    manifest: &AnnotationManifest,
    cfg: &AcquisitionConfig,
) -> Result<WeakLabelMap> {
    let fill = if cfg.pseudo_dense {
        PseudoFill::Dense
    } else {
        PseudoFill::Points { image_id: &manifest.image_id, points_per_patch: cfg.points_per_patch, seed: cfg.seed }
    };
    merge_labels(p_t, &manifest.grid, &manifest.selected_set(), &manifest.points, fill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uda::entropy_map;

    fn grid4() -> PatchGrid {
        PatchGrid::new(4, 4, 2, 2).unwrap()
    }

    #[test]
    fn grid_must_tile() {
        assert!(PatchGrid::new(64, 64, 8, 8).is_ok());
        assert!(PatchGrid::new(64, 64, 7, 8).is_err());
        let g = PatchGrid::new(64, 32, 4, 8).unwrap();
        assert_eq!((g.patch_h, g.patch_w, g.count()), (8, 8, 32));
        assert_eq!(g.extent(5), PatchExtent { x0: 8, y0: 8, x1: 16, y1: 16 });
        assert_eq!(g.index_of(9, 9), 5);
    }

    #[test]
    fn uniform_map_scores_ln4_over_4() {
        let e = entropy_map(&ProbMap::<f64>::uniform(16, 16, 4));
        let scores = score_patches(&e, &PatchGrid::new(16, 16, 2, 2).unwrap()).unwrap();
        for s in scores {
            assert!((s.score - 0.346574).abs() < 1e-6);
        }
    }

    #[test]
    fn hand_built_patch_scores() {
        // one class channel; value = pixel index / 100
        let values: Vec<f64> = (0..16).map(|i| i as f64 / 100.0).collect();
        let e = EntropyMap::new(4, 4, 1, values).unwrap();
        let scores = score_patches(&e, &grid4()).unwrap();
        // patch 0 = pixels {0,1,4,5}; patch 3 = {10,11,14,15}
        assert!((scores[0].score - (0.0 + 0.01 + 0.04 + 0.05) / 4.0).abs() < 1e-15);
        assert!((scores[3].score - (0.10 + 0.11 + 0.14 + 0.15) / 4.0).abs() < 1e-15);
        assert!(score_patches(&e, &PatchGrid::new(8, 8, 2, 2).unwrap()).is_err());
    }

    fn ps(v: &[f64]) -> Vec<PatchScore> {
        v.iter().enumerate().map(|(patch_index, &score)| PatchScore { patch_index, score }).collect()
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(select_top_k(&ps(&[0.1, 0.9, 0.5]), 1).unwrap(), BTreeSet::from([1]));
        assert!(select_top_k(&ps(&[0.1, 0.9, 0.5]), 0).unwrap().is_empty());
        assert_eq!(select_top_k(&ps(&[0.5, 0.5, 0.1]), 1).unwrap(), BTreeSet::from([0]));
        assert!(select_top_k(&ps(&[0.5]), 2).is_err());
    }

    #[test]
    fn sampling_is_contained_distinct_and_reproducible() {
        let g = PatchGrid::new(64, 64, 4, 4).unwrap();
        let sel = BTreeSet::from([5]);
        let a = sample_points("img", &sel, &g, 5, 7).unwrap();
        assert_eq!(a, sample_points("img", &sel, &g, 5, 7).unwrap());
        let ext = g.extent(5);
        let pos: BTreeSet<(usize, usize)> = a.iter().map(|r| (r.x, r.y)).collect();
        assert_eq!(pos.len(), 5);
        assert!(a.iter().all(|r| ext.contains(r.x, r.y)));
        assert!(sample_points("img", &BTreeSet::new(), &g, 5, 7).unwrap().is_empty());
        assert!(sample_points("img", &sel, &g, 257, 7).is_err());
    }

    #[test]
    fn fifty_point_budget_has_unique_ids() {
        let g = PatchGrid::new(64, 64, 8, 8).unwrap();
        let sel: BTreeSet<usize> = (0..10).map(|i| i * 6).collect();
        let reqs = sample_points("img", &sel, &g, 5, 1).unwrap();
        assert_eq!(reqs.len(), 50);
        let ids: BTreeSet<&str> = reqs.iter().map(|r| r.request_id.as_str()).collect();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn merge_two_patch_case_by_hand() {
        // 4x8 map, 2 patches side by side (4x4 each)
        let g = PatchGrid::new(4, 8, 2, 1).unwrap();
        let mut probs = Vec::new();
        for _y in 0..4 {
            for x in 0..8 {
                probs.extend(if x < 4 { [0.8, 0.2] } else { [0.3, 0.7] });
            }
        }
        let p = ProbMap::new(4, 8, 2, probs).unwrap();
        let req = AnnotationRequest {
            request_id: "r".into(),
            image_id: "i".into(),
            x: 6,
            y: 2,
            patch_index: 1,
            status: RequestStatus::Answered,
            answer: Some(0),
            score: 0.0,
        };
        let m = merge_labels(&p, &g, &BTreeSet::from([1]), &[req], PseudoFill::Dense).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                let expect = if x < 4 {
                    (0, Provenance::Pseudo)
                } else if (x, y) == (6, 2) {
                    (0, Provenance::Oracle)
                } else {
                    (IGNORE, Provenance::None)
                };
                assert_eq!(m.get(x, y), expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn merge_rejects_bad_requests() {
        let g = grid4();
        let p = ProbMap::<f64>::uniform(4, 4, 2);
        let mut r = AnnotationRequest {
            request_id: "r".into(),
            image_id: "i".into(),
            x: 0,
            y: 0,
            patch_index: 0,
            status: RequestStatus::Pending,
            answer: None,
            score: 0.0,
        };
        let sel = BTreeSet::from([0]);
        assert!(merge_labels(&p, &g, &sel, &[r.clone()], PseudoFill::Dense).is_err());
        r.status = RequestStatus::Answered;
        r.answer = Some(1);
        assert!(merge_labels(&p, &g, &BTreeSet::from([3]), &[r.clone()], PseudoFill::Dense).is_err());
        r.answer = Some(2);
        assert!(merge_labels(&p, &g, &sel, &[r], PseudoFill::Dense).is_err());
    }

    #[test]
    fn point_only_pseudo_fill() {
        let g = PatchGrid::new(8, 8, 2, 2).unwrap();
        let p = ProbMap::<f64>::uniform(8, 8, 3);
        let fill = PseudoFill::Points { image_id: "a", points_per_patch: 2, seed: 0 };
        let m = merge_labels(&p, &g, &BTreeSet::from([0]), &[], fill).unwrap();
        assert_eq!(m.count(Provenance::Pseudo), 6);
        assert_eq!(m.count(Provenance::Oracle), 0);
    }

    #[test]
    fn oracle_answers_from_truth() {
        let mut truth = DenseLabelMap::filled(8, 8, 0);
        truth.set(3, 4, 1);
        let reqs = sample_points("t", &BTreeSet::from([0, 1, 2, 3]), &PatchGrid::new(8, 8, 2, 2).unwrap(), 16, 0).unwrap();
        let ans = simulated_oracle(&reqs, &truth).unwrap();
        assert_eq!(ans.len(), 64);
        for a in &ans {
            assert_eq!(a.answer, Some(truth.get(a.x, a.y)));
            assert_eq!(a.status, RequestStatus::Answered);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = entropy_map(&ProbMap::<f64>::uniform(16, 16, 4));
        let cfg = AcquisitionConfig { grid_m: 4, grid_n: 4, k: 3, points_per_patch: 2, ..Default::default() };
        let m = acquire_image("im", &e, &cfg).unwrap();
        assert_eq!(m.points.len(), 6);
        m.save(dir.path()).unwrap();
        let back = AnnotationManifest::load(dir.path().join("im.json")).unwrap();
        assert_eq!(back, m);
        let text = std::fs::read_to_string(dir.path().join("im.json")).unwrap();
        assert!(text.contains("\"K\": 3") && text.contains("\"pw\": 4"));
    }

    #[test]
    fn strategy_parsing() {
        for s in [Strategy::Active, Strategy::Random, Strategy::Full, Strategy::None] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("greedy".parse::<Strategy>().is_err());
    }
}
