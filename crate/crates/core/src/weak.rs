//! Stage 2: retraining on dense source labels plus merged weak target
//! labels, with a fresh discriminator aligning output entropy maps.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{load_map, save_map};
use crate::data::{DenseLabelMap, ProbMap, SegImage, WeakLabelMap};
use crate::datasets::DatasetSplit;
use crate::error::{Error, Result};
use crate::nn::{softmax, Discriminator, Objective, SegNet};
use crate::scalar::Scalar;
use crate::uda::losses::{cross_entropy, DomainConvention};
use crate::uda::{derive_seed, fool_logit_grad, run_adversarial, TargetTerm, TrainOutcome, UdaConfig};

const STAGE_TWO: u64 = 0x5354_4147_4532;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakDaConfig {
    pub base: UdaConfig,
    pub target_label_dir: Option<PathBuf>,
    pub oracle_weight: f64,
    pub pseudo_weight: f64,
}

impl Default for WeakDaConfig {
    fn default() -> Self {
        Self { base: UdaConfig::default(), target_label_dir: None, oracle_weight: 1.0, pseudo_weight: 1.0 }
    }
}

impl WeakDaConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        for (name, v) in [("oracle_weight", self.oracle_weight), ("pseudo_weight", self.pseudo_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Source cross-entropy plus target weak cross-entropy, each normalized by
/// its own count of labeled pixels.
pub fn weak_seg_loss<T: Scalar>(
    p_s: &ProbMap<T>,
    y_s: &DenseLabelMap,
    p_t: &ProbMap<T>,
    y_t: &WeakLabelMap,
) -> Result<T> {
    let src = crate::uda::seg_loss(p_s, y_s)?;
    if (p_t.height(), p_t.width()) != (y_t.height(), y_t.width()) {
        return Err(Error::Shape(format!(
            "target prediction is {}x{}, weak labels are {}x{}",
            p_t.height(),
            p_t.width(),
            y_t.height(),
            y_t.width()
        )));
    }
    y_t.validate(p_t.classes())?;
    Ok(src + cross_entropy(p_t, y_t.classes(), None, T::one()).0)
}

/// Trains a freshly initialized generator and discriminator. `weak[i]`
/// labels `target[i]`.
pub fn train_weak_da<T: Scalar>(
    source: &DatasetSplit,
    target: &[SegImage],
    weak: &[WeakLabelMap],
    cfg: &WeakDaConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if weak.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "{} target images but {} weak label maps",
            target.len(),
            weak.len()
        )));
    }
    for (img, w) in target.iter().zip(weak) {
        if (w.height(), w.width()) != (img.height(), img.width()) {
            return Err(Error::Shape(format!("weak labels for {} do not match the image size", img.id())));
        }
        w.validate(source.num_classes())?;
    }
    let labeled = source.labeled()?;
    let term = TargetTerm { labels: weak, oracle_weight: cfg.oracle_weight, pseudo_weight: cfg.pseudo_weight };
    run_adversarial(
        &labeled,
        Some(target),
        Some(term),
        source.num_classes(),
        &cfg.base,
        derive_seed(cfg.base.seed, STAGE_TWO),
        log,
    )
}

pub fn weak_label_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.weak.padm"))
}

pub fn save_weak_labels(dir: impl AsRef<Path>, image_id: &str, map: &WeakLabelMap) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    save_map(weak_label_path(dir, image_id), map)
}

/// Loads one weak map per image, failing on the first missing id.
pub fn load_weak_labels(dir: impl AsRef<Path>, images: &[SegImage]) -> Result<Vec<WeakLabelMap>> {
    let dir = dir.as_ref();
    images
        .iter()
        .map(|img| {
            let path = weak_label_path(dir, img.id());
            if !path.exists() {
                return Err(Error::Dataset(format!("missing weak labels for {}", img.id())));
            }
            load_map(path)
        })
        .collect()
}

/// The stage-2 generator objective, `weak_seg_loss + lambda * fool`, over
/// one source and one target image.
pub struct WeakObjective {
    pub net: SegNet<f64>,
    pub disc: Discriminator<f64>,
    pub source: (SegImage, DenseLabelMap),
    pub target: (SegImage, WeakLabelMap),
    pub lambda_adv: f64,
    pub convention: DomainConvention,
}

impl WeakObjective {
    fn eval(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        if params.len() != self.net.num_params() {
            return Err(Error::Shape(format!("expected {} parameters", self.net.num_params())));
        }
        let mut grads = vec![0.0; params.len()];
        let fs = self.net.forward_with(params, &SegNet::image_tensor(&self.source.0));
        let ps = softmax(&fs.logits);
        let (ls, ds) = cross_entropy(&ps, self.source.1.as_slice(), None, 1.0);
        self.net.backward_with(params, &fs, &ds, None, &mut grads);

        let ft = self.net.forward_with(params, &SegNet::image_tensor(&self.target.0));
        let pt = softmax(&ft.logits);
        let (lt, mut dt) = cross_entropy(&pt, self.target.1.classes(), None, 1.0);
        let mut total = ls + lt;
        if self.lambda_adv != 0.0 {
            let (fool, d_fool, _) = fool_logit_grad(&self.disc, &pt, self.lambda_adv, self.convention);
            total += self.lambda_adv * fool;
            dt.add_assign(&d_fool);
        }
        self.net.backward_with(params, &ft, &dt, None, &mut grads);
        Ok((total, grads))
    }
}

impl Objective for WeakObjective {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }
    fn value(&self, params: &[f64]) -> Result<f64> {
        self.eval(params).map(|(v, _)| v)
    }
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.eval(params)
    }
}
