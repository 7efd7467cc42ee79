//! Command implementations behind the `pointadapt` binary.
//!
//! Dataset roots written by [`generate`] hold three splits, each in the
//! [`export_split`] layout:
//!
//! ```text
//! <root>/source/        images/, labels/, meta
//! <root>/target_train/  images/, labels/, meta   (labels used only by oracles and eval)
//! <root>/target_val/    images/, labels/, meta
//! ```

pub mod session;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pointadapt::acquisition::{acquire_image, merge_manifest, simulated_oracle, AcquisitionConfig, AnnotationManifest};
use pointadapt::config::{load_flat, KeyValue};
use pointadapt::container::load_map;
use pointadapt::data::{Domain, EntropyMap, ProbMap, SegImage};
use pointadapt::datasets::{export_split, generate_toyshapes, ingest_directory, DatasetSplit, ToyShapesConfig};
use pointadapt::eval::{evaluate, iou, write_eval, EvalSummary};
use pointadapt::nn::{load_segnet, read_manifest, save_discriminator, save_segnet, SegNet};
use pointadapt::pipeline::{render_report, ReportFiles};
use pointadapt::uda::{export_target_maps, train_uda, UdaConfig};
use pointadapt::weak::{load_weak_labels, save_weak_labels, train_weak_da, WeakDaConfig};
use pointadapt::Scalar;

pub use session::{wait_for_completion, HumanSession, Timeout};

pub const SOURCE_DIR: &str = "source";
pub const TARGET_TRAIN_DIR: &str = "target_train";
pub const TARGET_VAL_DIR: &str = "target_val";
const ENTROPY_SUFFIX: &str = ".entropy.padm";

/// Generates ToyShapes-DA (defaults unless `config` is given) under `out`.
pub fn generate(config: Option<&Path>, out: &Path) -> Result<ToyShapesConfig> {
    let cfg = match config {
        Some(p) => load_flat::<ToyShapesConfig>(p)?,
        None => ToyShapesConfig::default(),
    };
    let ds = generate_toyshapes(&cfg)?;
    export_split(&ds.source, out.join(SOURCE_DIR))?;
    export_split(&ds.target_train, out.join(TARGET_TRAIN_DIR))?;
    export_split(&ds.target_val, out.join(TARGET_VAL_DIR))?;
    std::fs::write(out.join("toyshapes.cfg"), cfg.to_kv())?;
    Ok(cfg)
}

fn training_data(data: &Path) -> Result<(DatasetSplit, Vec<SegImage>)> {
    let source = ingest_directory(data.join(SOURCE_DIR), Domain::Source)
        .with_context(|| format!("reading {}", data.join(SOURCE_DIR).display()))?;
    let target = ingest_directory(data.join(TARGET_TRAIN_DIR), Domain::Target)
        .with_context(|| format!("reading {}", data.join(TARGET_TRAIN_DIR).display()))?;
    if source.class_names() != target.class_names() {
        bail!("source and target class lists differ");
    }
    Ok((source, target.images()))
}

fn log_writer(out: &Path) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(out)?;
    let path = out.join("train_log.jsonl");
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

/// Stage 1. Writes `generator.json`, `discriminator.json` (+ `.padm`),
/// `train_log.jsonl` and the resolved `uda.cfg` to `out`.
pub fn train_uda_cmd(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg: UdaConfig = load_flat(config)?;
    let (source, target) = training_data(data)?;
    let mut log = log_writer(out)?;
    let trained = train_uda::<f32>(&source, &target, &cfg, Some(&mut log))?;
    drop(log);
    std::fs::write(out.join("uda.cfg"), cfg.to_kv())?;
    save_segnet(out.join("generator.json"), &trained.generator, cfg.iterations)?;
    save_discriminator(out.join("discriminator.json"), &trained.discriminator, cfg.iterations)?;
    Ok(())
}

/// Stage 2 on weak labels read from `weak_labels` (one `<id>.weak.padm` per
/// target image).
pub fn train_weak_da_cmd(config: &Path, data: &Path, weak_labels: &Path, out: &Path) -> Result<()> {
    let mut cfg: WeakDaConfig = load_flat(config)?;
    cfg.target_label_dir = Some(weak_labels.to_path_buf());
    let (source, target) = training_data(data)?;
    let weak = load_weak_labels(weak_labels, &target)?;
    let mut log = log_writer(out)?;
    let trained = train_weak_da::<f32>(&source, &target, &weak, &cfg, Some(&mut log))?;
    drop(log);
    std::fs::write(out.join("stage2.cfg"), cfg.to_kv())?;
    save_segnet(out.join("generator.json"), &trained.generator, cfg.base.iterations)?;
    save_discriminator(out.join("discriminator.json"), &trained.discriminator, cfg.base.iterations)?;
    Ok(())
}

/// Checkpoints keep the precision they were trained in.
enum AnyNet {
    F32(SegNet<f32>),
    F64(SegNet<f64>),
}

fn load_any(ckpt: &Path) -> Result<AnyNet> {
    let (manifest, _) = read_manifest(ckpt)?;
    Ok(match manifest.scalar.as_str() {
        "f64" => AnyNet::F64(load_segnet(ckpt)?.0),
        _ => AnyNet::F32(load_segnet(ckpt)?.0),
    })
}

fn export_with<T: Scalar>(net: &SegNet<T>, images: &[SegImage], out: &Path) -> Result<usize> {
    Ok(export_target_maps(net, images, out)?.len())
}

/// Writes `<id>.prob.padm` and `<id>.entropy.padm` for every image of the
/// split at `data`. Returns the number of images.
pub fn export_maps(ckpt: &Path, data: &Path, out: &Path) -> Result<usize> {
    let images = ingest_directory(data, Domain::Target)?.images();
    match load_any(ckpt)? {
        AnyNet::F32(n) => export_with(&n, &images, out),
        AnyNet::F64(n) => export_with(&n, &images, out),
    }
}

fn entropy_ids(maps: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(maps).with_context(|| format!("reading {}", maps.display()))? {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(ENTROPY_SUFFIX)) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

/// One manifest per entropy map in `maps`. Returns the manifests written.
pub fn acquire(maps: &Path, cfg: &AcquisitionConfig, out: &Path) -> Result<Vec<AnnotationManifest>> {
    let ids = entropy_ids(maps)?;
    if ids.is_empty() {
        bail!("no *{ENTROPY_SUFFIX} files in {}", maps.display());
    }
    let mut manifests = Vec::with_capacity(ids.len());
    for id in &ids {
        let e: EntropyMap<f64> = load_map(maps.join(format!("{id}{ENTROPY_SUFFIX}")))?;
        let m = acquire_image(id, &e, cfg)?;
        m.save(out)?;
        manifests.push(m);
    }
    Ok(manifests)
}

/// Answers every request in `manifests` from the labels of the split at
/// `truth` and writes the answered manifests to `out`.
pub fn oracle(manifests: &Path, truth: &Path, out: &Path) -> Result<usize> {
    let gt = ingest_directory(truth, Domain::Target)?.ground_truth();
    let mut answered = 0;
    for mut m in AnnotationManifest::load_dir(manifests)? {
        let labels = gt.get(&m.image_id).with_context(|| format!("no ground truth for {}", m.image_id))?;
        m.points = simulated_oracle(&m.points, labels)?;
        answered += m.points.len();
        m.save(out)?;
    }
    Ok(answered)
}

/// Weak labels from answered manifests plus the stage-1 probability maps.
pub fn merge(maps: &Path, manifests: &Path, cfg: &AcquisitionConfig, out: &Path) -> Result<usize> {
    let all = AnnotationManifest::load_dir(manifests)?;
    for m in &all {
        let p: ProbMap<f64> = load_map(pointadapt::uda::prob_map_path(maps, &m.image_id))?;
        let weak = merge_manifest(&p, m, cfg).with_context(|| format!("merging {}", m.image_id))?;
        save_weak_labels(out, &m.image_id, &weak)?;
    }
    Ok(all.len())
}

/// Writes `iou.csv` and `summary.json` for the labeled split at `data`.
pub fn eval(ckpt: &Path, data: &Path, out: &Path) -> Result<EvalSummary> {
    let split = ingest_directory(data, Domain::Target)?;
    let cm = match load_any(ckpt)? {
        AnyNet::F32(n) => evaluate(&n, &split)?,
        AnyNet::F64(n) => evaluate(&n, &split)?,
    };
    let summary = EvalSummary::new(&iou(&cm), split.class_names());
    write_eval(out, &summary)?;
    Ok(summary)
}

pub fn report(results: &Path, out: &Path) -> Result<ReportFiles> {
    Ok(render_report(results, out)?)
}

/// Default location of a plan's report.
pub fn report_dir(output: &Path) -> PathBuf {
    output.join("report")
}
