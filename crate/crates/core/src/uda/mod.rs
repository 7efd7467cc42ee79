//! Entropy-map adversarial domain adaptation (stage 1) and the training loop
//! it shares with the weakly supervised stage 2.

pub mod losses;
pub mod objectives;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{load_map, save_map};
use crate::data::{DenseLabelMap, EntropyMap, ProbMap, Provenance, SegImage, WeakLabelMap, IGNORE};
use crate::datasets::DatasetSplit;
use crate::error::{io_err, Error, Result};
use crate::nn::{poly_lr, softmax, softmax_backward, Adam, Discriminator, DiscriminatorSpec, SegNet, SegNetSpec, Sgd, Tensor};
use crate::scalar::Scalar;

pub use losses::{
    adv_losses, adv_losses_for, bce_with_logits, cross_entropy, entropy_backward, entropy_map, seg_loss,
    AdvLosses, DomainConvention, LOG_EPS,
};

/// Optimization settings shared by both adversarial stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdaConfig {
    pub iterations: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub lr_g: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_d: f64,
    pub lambda_adv: f64,
    pub seed: u64,
    /// Generator base width.
    pub width: usize,
    pub disc_width: usize,
    pub poly_power: f64,
    /// Adds the 1/4-resolution auxiliary classifier with its own loss term.
    pub aux_head: bool,
    pub aux_weight: f64,
}

impl Default for UdaConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_source: 1,
            batch_target: 1,
            lr_g: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_d: 1e-4,
            lambda_adv: 0.001,
            seed: 0,
            width: 8,
            disc_width: 8,
            poly_power: 0.9,
            aux_head: false,
            aux_weight: 0.1,
        }
    }
}

impl UdaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iterations", self.iterations as f64),
            ("batch_source", self.batch_source as f64),
            ("batch_target", self.batch_target as f64),
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("width", self.width as f64),
            ("disc_width", self.disc_width as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_adv", self.lambda_adv),
            ("poly_power", self.poly_power),
            ("aux_weight", self.aux_weight),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn segnet_spec(&self, classes: usize, seed: u64) -> SegNetSpec {
        SegNetSpec { classes, width: self.width, seed, aux_head: self.aux_head }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub seg_loss: f64,
    pub adv_d: f64,
    pub adv_g: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_target: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub generator: SegNet<T>,
    pub discriminator: Discriminator<T>,
    pub log: Vec<LogEntry>,
}

/// Per-pixel labels and weights for a supervised target term.
pub(crate) struct TargetTerm<'a> {
    pub labels: &'a [WeakLabelMap],
    pub oracle_weight: f64,
    pub pseudo_weight: f64,
}

pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_G: u64 = 1;
const STREAM_D: u64 = 2;
const STREAM_SRC: u64 = 3;
const STREAM_TGT: u64 = 4;

fn check_finite(v: f64, what: &str, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what.into(), iteration })
    }
}

/// Nearest-neighbour downsampling of labels to the auxiliary head resolution.
pub(crate) fn downsample_labels(labels: &[u8], height: usize, width: usize, factor: usize) -> Vec<u8> {
    let (h, w) = (height / factor, width / factor);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(labels[(y * factor + factor / 2) * width + x * factor + factor / 2]);
        }
    }
    out
}

/// Weights per pixel for a weak label map, or `None` when all are 1.
pub(crate) fn provenance_weights<T: Scalar>(map: &WeakLabelMap, oracle: f64, pseudo: f64) -> Option<Vec<T>> {
    if oracle == 1.0 && pseudo == 1.0 {
        return None;
    }
    Some(
        map.provenance()
            .iter()
            .map(|p| match p {
                Provenance::Oracle => T::of(oracle),
                Provenance::Pseudo => T::of(pseudo),
                Provenance::None => T::zero(),
            })
            .collect(),
    )
}

/// Gradient of `scale * fool_loss` with respect to the generator logits,
/// where the fooling loss pushes D towards "source" on this entropy map.
pub(crate) fn fool_logit_grad<T: Scalar>(
    disc: &Discriminator<T>,
    p: &ProbMap<T>,
    scale: T,
    convention: DomainConvention,
) -> (T, Tensor<T>, crate::nn::DiscForward<T>) {
    let e = entropy_map(p);
    let fwd = disc.forward(&Discriminator::entropy_tensor(&e));
    let (value, d_dlogits) = bce_with_logits(&fwd.logits, convention.source_is_one(), scale);
    let d_e = disc.backward(&fwd, &d_dlogits, None);
    let d_p = entropy_backward(p, &d_e.to_hwc());
    (value, softmax_backward(p, &d_p), fwd)
}

/// The alternating generator/discriminator loop.
///
/// `target` of `None` trains on source alone. With a target and
/// `lambda_adv == 0` the generator update is untouched by target images,
/// so the generator matches the source-only run exactly.
pub(crate) fn run_adversarial<T: Scalar>(
    source: &[(SegImage, DenseLabelMap)],
    target: Option<&[SegImage]>,
    target_term: Option<TargetTerm<'_>>,
    classes: usize,
    cfg: &UdaConfig,
    stage_seed: u64,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::InvalidArgument("source split is empty".into()));
    }
    if let Some(t) = target {
        if t.is_empty() {
            return Err(Error::InvalidArgument("target split is empty".into()));
        }
        if let Some(term) = &target_term {
            if term.labels.len() != t.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} weak label maps for {} target images",
                    term.labels.len(),
                    t.len()
                )));
            }
        }
    }
    let mut gen = SegNet::<T>::new(cfg.segnet_spec(classes, derive_seed(stage_seed, STREAM_G)))?;
    let mut disc = Discriminator::<T>::new(DiscriminatorSpec {
        classes,
        width: cfg.disc_width,
        seed: derive_seed(stage_seed, STREAM_D),
    })?;
    for (img, lbl) in source {
        gen.check_input(img.height(), img.width())?;
        if (lbl.height(), lbl.width()) != (img.height(), img.width()) {
            return Err(Error::Shape(format!("label size mismatch for {}", img.id())));
        }
        lbl.validate(classes)?;
    }
    for img in target.unwrap_or(&[]) {
        gen.check_input(img.height(), img.width())?;
    }

    let mut src_rng = ChaCha8Rng::seed_from_u64(derive_seed(stage_seed, STREAM_SRC));
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(derive_seed(stage_seed, STREAM_TGT));
    let mut opt_g = Sgd::<T>::new(gen.num_params(), cfg.momentum, cfg.weight_decay);
    let mut opt_d = Adam::<T>::new(disc.params().len(), 0.9, 0.99);
    let convention = DomainConvention::SourceIsOne;
    let inv_bs = T::one() / T::of(cfg.batch_source as f64);
    let inv_bt = T::one() / T::of(cfg.batch_target as f64);
    let lambda = T::of(cfg.lambda_adv);
    let aux_scale = T::of(cfg.aux_weight) * inv_bs;
    let mut log = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let lr_g = poly_lr(cfg.lr_g, it, cfg.iterations, cfg.poly_power);
        let lr_d = poly_lr(cfg.lr_d, it, cfg.iterations, cfg.poly_power);
        let mut grads = vec![T::zero(); gen.num_params()];

        // generator step: source supervision
        let mut seg_total = 0.0;
        let mut src_entropy = Vec::with_capacity(cfg.batch_source);
        for _ in 0..cfg.batch_source {
            let (img, lbl) = &source[src_rng.random_range(0..source.len())];
            let fwd = gen.forward(&SegNet::image_tensor(img));
            let p = softmax(&fwd.logits);
            let (loss, d_logits) = cross_entropy(&p, lbl.as_slice(), None, inv_bs);
            seg_total += loss.as_f64();
            let d_aux = fwd.aux_logits.as_ref().map(|aux| {
                let small = downsample_labels(lbl.as_slice(), img.height(), img.width(), 4);
                cross_entropy(&softmax(aux), &small, None, aux_scale).1
            });
            gen.backward(&fwd, &d_logits, d_aux.as_ref(), &mut grads);
            if target.is_some() {
                src_entropy.push(entropy_map(&p));
            }
        }
        let seg_loss = check_finite(seg_total / cfg.batch_source as f64, "seg_loss", it)?;

        // generator step: target terms
        let mut tgt_cache = Vec::new();
        let mut fool_total = 0.0;
        let mut tgt_seg_total = 0.0;
        if let Some(target) = target {
            for _ in 0..cfg.batch_target {
                let idx = tgt_rng.random_range(0..target.len());
                let img = &target[idx];
                let fwd = gen.forward(&SegNet::image_tensor(img));
                let p = softmax(&fwd.logits);
                let mut d_logits: Option<Tensor<T>> = None;
                if let Some(term) = &target_term {
                    let weak = &term.labels[idx];
                    let weights = provenance_weights::<T>(weak, term.oracle_weight, term.pseudo_weight);
                    let (loss, d) = cross_entropy(&p, weak.classes(), weights.as_deref(), inv_bt);
                    tgt_seg_total += loss.as_f64();
                    d_logits = Some(d);
                }
                let (fool, d_fool, dfwd) = fool_logit_grad(&disc, &p, lambda * inv_bt, convention);
                fool_total += fool.as_f64();
                if cfg.lambda_adv > 0.0 {
                    match &mut d_logits {
                        Some(d) => d.add_assign(&d_fool),
                        None => d_logits = Some(d_fool),
                    }
                }
                if let Some(d) = d_logits {
                    gen.backward(&fwd, &d, None, &mut grads);
                }
                tgt_cache.push(dfwd);
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: "generator gradient".into(), iteration: it });
        }
        opt_g.step(gen.params_mut(), &grads, lr_g);

        // discriminator step on detached maps; target forwards reuse the
        // pre-update discriminator evaluated above
        let mut adv_d = 0.0;
        if target.is_some() {
            let mut d_grads = vec![T::zero(); disc.params().len()];
            let src_label = convention.source_is_one();
            let mut loss_s = T::zero();
            for e in &src_entropy {
                let fwd = disc.forward(&Discriminator::entropy_tensor(e));
                let (l, d) = bce_with_logits(&fwd.logits, src_label, inv_bs);
                loss_s += l * inv_bs;
                disc.backward(&fwd, &d, Some(&mut d_grads));
            }
            let mut loss_t = T::zero();
            for fwd in &tgt_cache {
                let (l, d) = bce_with_logits(&fwd.logits, !src_label, inv_bt);
                loss_t += l * inv_bt;
                disc.backward(fwd, &d, Some(&mut d_grads));
            }
            adv_d = check_finite((loss_s + loss_t).as_f64(), "adv_d", it)?;
            if d_grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { what: "discriminator gradient".into(), iteration: it });
            }
            opt_d.step(disc.params_mut(), &d_grads, lr_d);
        }

        let entry = LogEntry {
            iter: it,
            seg_loss,
            adv_d,
            adv_g: check_finite(fool_total / cfg.batch_target as f64, "adv_g", it)?,
            seg_target: match target_term {
                Some(_) => Some(check_finite(tgt_seg_total / cfg.batch_target as f64, "seg_target", it)?),
                None => None,
            },
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(sink, "{line}").map_err(io_err("training log"))?;
        }
        log.push(entry);
    }
    Ok(TrainOutcome { generator: gen, discriminator: disc, log })
}

/// Stage-1 training: labeled source, unlabeled target images.
pub fn train_uda<T: Scalar>(
    source: &DatasetSplit,
    target: &[SegImage],
    cfg: &UdaConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    let labeled = source.labeled()?;
    run_adversarial(&labeled, Some(target), None, source.num_classes(), cfg, cfg.seed, log)
}

/// Supervised training on source only, with the stage-1 seeding.
pub fn train_source_only<T: Scalar>(
    source: &DatasetSplit,
    cfg: &UdaConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    let labeled = source.labeled()?;
    run_adversarial(&labeled, None, None, source.num_classes(), cfg, cfg.seed, log)
}

/// Paths of one exported target map pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportedMaps {
    pub image_id: String,
    pub prob_path: PathBuf,
    pub entropy_path: PathBuf,
}

pub fn prob_map_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.prob.padm"))
}

pub fn entropy_map_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.entropy.padm"))
}

/// Predicts every target image and writes `<id>.prob.padm` and
/// `<id>.entropy.padm`. Entropy is computed from the stored double
/// precision probabilities so reloading and recomputing is bit-exact.
pub fn export_target_maps<T: Scalar>(
    gen: &SegNet<T>,
    target: &[SegImage],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ExportedMaps>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut out = Vec::with_capacity(target.len());
    for img in target {
        let p: ProbMap<f64> = gen.predict(img)?.cast();
        let e = entropy_map(&p);
        let prob_path = prob_map_path(out_dir, img.id());
        let entropy_path = entropy_map_path(out_dir, img.id());
        save_map(&prob_path, &p)?;
        save_map(&entropy_path, &e)?;
        out.push(ExportedMaps { image_id: img.id().to_string(), prob_path, entropy_path });
    }
    Ok(out)
}

pub fn load_target_maps(dir: impl AsRef<Path>, image_id: &str) -> Result<(ProbMap<f64>, EntropyMap<f64>)> {
    let dir = dir.as_ref();
    Ok((load_map(prob_map_path(dir, image_id))?, load_map(entropy_map_path(dir, image_id))?))
}

/// Fraction of discriminator locations classified correctly (threshold 0.5)
/// over both domains' entropy maps.
pub fn discriminator_accuracy<T: Scalar>(
    gen: &SegNet<T>,
    disc: &Discriminator<T>,
    source: &[SegImage],
    target: &[SegImage],
    convention: DomainConvention,
) -> Result<f64> {
    let half = T::of(0.5);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (images, is_source) in [(source, true), (target, false)] {
        for img in images {
            let e = entropy_map(&gen.predict(img)?);
            for p in disc.forward(&Discriminator::entropy_tensor(&e)).probs() {
                let says_one = p > half;
                let truth_one = is_source == convention.source_is_one();
                correct += usize::from(says_one == truth_one);
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no images to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Dense labels from a hard map, everything marked as pseudo.
pub fn weak_from_dense(labels: &DenseLabelMap, provenance: Provenance) -> Result<WeakLabelMap> {
    let prov = labels
        .as_slice()
        .iter()
        .map(|&c| if c == IGNORE { Provenance::None } else { provenance })
        .collect();
    WeakLabelMap::new(labels.height(), labels.width(), labels.as_slice().to_vec(), prov)
}
