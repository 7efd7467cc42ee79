//! Multi-seed, multi-arm experiment plans.
//!
//! Results tree under `output`:
//!
//! ```text
//! plan.json                      resolved plan
//! results.json                   per-seed/per-arm mIoU, medians, means
//! seed_<s>/stage1/               generator.json/.padm, discriminator.json/.padm,
//!                                train_log.jsonl, uda.cfg, eval/
//! seed_<s>/maps/                 <id>.prob.padm, <id>.entropy.padm
//! seed_<s>/arms/<arm>/           acquisition.cfg, stage2.cfg, manifests/ (not for `full`),
//!                                weak/, generator.json/.padm, discriminator.json/.padm,
//!                                train_log.jsonl, eval/
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::{acquire_image, merge_manifest, simulated_oracle, AcquisitionConfig, AnnotationManifest, Strategy};
use crate::config::{parse_value, Document, KeyValue};
use crate::container::load_map;
use crate::data::{Domain, ProbMap, Provenance, WeakLabelMap};
use crate::datasets::{generate_toyshapes, ingest_directory, DatasetSplit, ToyShapesConfig};
use crate::error::{io_err, Error, Result};
use crate::eval::{class_palette, evaluate, iou, render_panel, render_table, write_eval, write_panel, ArmRow, ClassIou, EvalSummary};
use crate::nn::{load_segnet, save_discriminator, save_segnet};
use crate::uda::{entropy_map_path, export_target_maps, prob_map_path, train_uda, weak_from_dense, UdaConfig};
use crate::weak::{save_weak_labels, train_weak_da, WeakDaConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub acquisition: AcquisitionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub dataset: ToyShapesConfig,
    /// Prepared `source/`, `target_train/` and `target_val/` directories;
    /// when set, `dataset` is ignored.
    pub data_dir: Option<PathBuf>,
    pub uda: UdaConfig,
    pub weak: WeakDaConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    /// Validation images rendered as qualitative panels.
    pub panels: usize,
}

impl ExperimentPlan {
    /// Root keys: `seeds`, `output`, `data_dir`, `panels`. Sections:
    /// `[dataset]`, `[uda]`, `[weak]`, `[acquisition]` (shared arm
    /// defaults) and one `[arm NAME]` per arm.
    pub fn from_document(doc: &Document, base_dir: &Path) -> Result<Self> {
        let mut plan = ExperimentPlan {
            dataset: ToyShapesConfig::default(),
            data_dir: None,
            uda: UdaConfig::default(),
            weak: WeakDaConfig::default(),
            arms: Vec::new(),
            seeds: vec![0],
            output: base_dir.join("results"),
            panels: 4,
        };
        for e in &doc.root.entries {
            match e.key.as_str() {
                "seeds" => {
                    plan.seeds = e
                        .value
                        .split(',')
                        .map(|s| s.trim().parse::<u64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Config(format!("line {}: seeds must be a comma list of integers", e.line)))?;
                }
                "output" => plan.output = base_dir.join(&e.value),
                "data_dir" => plan.data_dir = Some(base_dir.join(&e.value)),
                "panels" => plan.panels = parse_value(e)?,
                _ => return Err(Error::Config(format!("line {}: unknown plan key {:?}", e.line, e.key))),
            }
        }
        let mut shared_acq = AcquisitionConfig::default();
        for s in &doc.sections {
            match s.kind.as_str() {
                "dataset" => plan.dataset.apply(s)?,
                "uda" => plan.uda.apply(s)?,
                "weak" => plan.weak.apply(s)?,
                "acquisition" => shared_acq.apply(s)?,
                "arm" => {}
                other => return Err(Error::Config(format!("line {}: unknown section [{other}]", s.line))),
            }
        }
        for s in doc.sections_of("arm") {
            let name = s
                .name
                .clone()
                .ok_or_else(|| Error::Config(format!("line {}: [arm] needs a name", s.line)))?;
            if plan.arms.iter().any(|a| a.name == name) {
                return Err(Error::Config(format!("line {}: duplicate arm {name:?}", s.line)));
            }
            if name.contains(['/', '\\']) || name == "." || name == ".." {
                return Err(Error::Config(format!("line {}: arm name {name:?} is not a directory name", s.line)));
            }
            let mut acq = shared_acq.clone();
            acq.apply(s)?;
            plan.arms.push(Arm { name, acquisition: acq });
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let doc = Document::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_document(&doc, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one seed".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("plan needs at least one [arm NAME] section".into()));
        }
        let unique: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.uda.validate()?;
        self.weak.validate()
    }

    /// Stage-2 settings for a seed; identical for every arm of that seed.
    pub fn stage2_config(&self, seed: u64) -> WeakDaConfig {
        let mut cfg = self.weak.clone();
        cfg.base.seed = seed;
        cfg
    }

    pub fn stage1_config(&self, seed: u64) -> UdaConfig {
        UdaConfig { seed, ..self.uda.clone() }
    }

    pub fn acquisition_config(&self, arm: &Arm, seed: u64) -> AcquisitionConfig {
        AcquisitionConfig { seed, ..arm.acquisition.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct PlanData {
    pub source: DatasetSplit,
    pub target_train: DatasetSplit,
    pub target_val: DatasetSplit,
}

pub fn load_plan_data(plan: &ExperimentPlan) -> Result<PlanData> {
    match &plan.data_dir {
        Some(dir) => Ok(PlanData {
            source: ingest_directory(dir.join("source"), Domain::Source)?,
            target_train: ingest_directory(dir.join("target_train"), Domain::Target)?,
            target_val: ingest_directory(dir.join("target_val"), Domain::Target)?,
        }),
        None => {
            let ds = generate_toyshapes(&plan.dataset)?;
            Ok(PlanData { source: ds.source, target_train: ds.target_train, target_val: ds.target_val })
        }
    }
}

/// What an oracle is asked to do for one arm of one seed.
pub struct OracleJob<'a> {
    pub seed: u64,
    pub arm: &'a str,
    pub arm_dir: &'a Path,
    /// Manifests as written to `arm_dir/manifests`.
    pub manifests: Vec<AnnotationManifest>,
    pub target: &'a DatasetSplit,
}

/// Source of answers for annotation requests.
pub trait OracleDriver {
    /// Returns the manifests with every request answered.
    fn answer(&mut self, job: OracleJob<'_>) -> Result<Vec<AnnotationManifest>>;
}

/// Answers from the target ground truth held in memory.
pub struct SimulatedOracle;

impl OracleDriver for SimulatedOracle {
    fn answer(&mut self, job: OracleJob<'_>) -> Result<Vec<AnnotationManifest>> {
        let truth = job.target.ground_truth();
        job.manifests
            .into_iter()
            .map(|mut m| {
                let gt = truth
                    .get(&m.image_id)
                    .ok_or_else(|| Error::Dataset(format!("no ground truth for {}", m.image_id)))?;
                m.points = simulated_oracle(&m.points, gt)?;
                Ok(m)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub arm: String,
    pub miou: Option<f64>,
    pub miou_all_zero_convention: Option<f64>,
    pub oracle_points: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub seed: u64,
    pub miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub completed: usize,
    pub median: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResults {
    pub seeds: Vec<u64>,
    pub arms: Vec<String>,
    pub stage1: Vec<Stage1Record>,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<ArmSummary>,
}

impl PlanResults {
    pub fn miou(&self, seed: u64, arm: &str) -> Option<f64> {
        self.runs.iter().find(|r| r.seed == seed && r.arm == arm).and_then(|r| r.miou)
    }

    pub fn arm_summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn summarize(arms: &[String], runs: &[RunRecord]) -> Vec<ArmSummary> {
    arms.iter()
        .map(|arm| {
            let vals: Vec<f64> = runs.iter().filter(|r| &r.arm == arm).filter_map(|r| r.miou).collect();
            ArmSummary {
                arm: arm.clone(),
                completed: vals.len(),
                median: median(&vals),
                mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
            }
        })
        .collect()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

pub fn seed_dir(output: &Path, seed: u64) -> PathBuf {
    output.join(format!("seed_{seed}"))
}

pub fn arm_dir(output: &Path, seed: u64, arm: &str) -> PathBuf {
    seed_dir(output, seed).join("arms").join(arm)
}

/// Runs stage 1 for one seed and exports the target maps.
pub fn run_stage1(plan: &ExperimentPlan, data: &PlanData, seed: u64) -> Result<f64> {
    let dir = seed_dir(&plan.output, seed).join("stage1");
    create_dir(&dir)?;
    let cfg = plan.stage1_config(seed);
    write_text(&dir.join("uda.cfg"), &cfg.to_kv())?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let out = train_uda::<f32>(&data.source, &data.target_train.images(), &cfg, Some(&mut log))?;
    drop(log);
    save_segnet(dir.join("generator.json"), &out.generator, cfg.iterations)?;
    save_discriminator(dir.join("discriminator.json"), &out.discriminator, cfg.iterations)?;
    export_target_maps(&out.generator, &data.target_train.images(), seed_dir(&plan.output, seed).join("maps"))?;
    let summary = EvalSummary::new(&iou(&evaluate(&out.generator, &data.target_val)?), data.target_val.class_names());
    write_eval(dir.join("eval"), &summary)?;
    Ok(summary.miou)
}

/// Acquisition, oracle, merge, stage 2 and evaluation for one arm.
pub fn run_arm(
    plan: &ExperimentPlan,
    data: &PlanData,
    seed: u64,
    arm: &Arm,
    oracle: &mut dyn OracleDriver,
) -> Result<(EvalSummary, usize)> {
    let dir = arm_dir(&plan.output, seed, &arm.name);
    create_dir(&dir)?;
    let maps_dir = seed_dir(&plan.output, seed).join("maps");
    let acq = plan.acquisition_config(arm, seed);
    write_text(&dir.join("acquisition.cfg"), &acq.to_kv())?;
    let target = &data.target_train;

    let weak: Vec<WeakLabelMap> = if acq.strategy == Strategy::Full {
        // every pixel of every patch answered by the oracle
        target
            .items()
            .iter()
            .map(|item| {
                let gt = item
                    .label
                    .as_ref()
                    .ok_or_else(|| Error::Dataset(format!("full labeling needs ground truth for {}", item.image.id())))?;
                weak_from_dense(gt, Provenance::Oracle)
            })
            .collect::<Result<_>>()?
    } else {
        let mut manifests = Vec::with_capacity(target.len());
        for img in target.images() {
            let e = load_map::<crate::data::EntropyMap<f64>>(entropy_map_path(&maps_dir, img.id()))?;
            manifests.push(acquire_image(img.id(), &e, &acq)?);
        }
        let manifest_dir = dir.join("manifests");
        for m in &manifests {
            m.save(&manifest_dir)?;
        }
        let answered = if manifests.iter().all(|m| m.points.is_empty()) {
            manifests
        } else {
            let job = OracleJob { seed, arm: &arm.name, arm_dir: &dir, manifests, target };
            oracle.answer(job)?
        };
        let by_id: BTreeMap<&str, &AnnotationManifest> = answered.iter().map(|m| (m.image_id.as_str(), m)).collect();
        target
            .images()
            .iter()
            .map(|img| {
                let m = by_id
                    .get(img.id())
                    .ok_or_else(|| Error::Acquisition(format!("oracle returned no manifest for {}", img.id())))?;
                let p: ProbMap<f64> = load_map(prob_map_path(&maps_dir, img.id()))?;
                merge_manifest(&p, m, &acq)
            })
            .collect::<Result<_>>()?
    };
    let oracle_points: usize = weak.iter().map(|w| w.count(Provenance::Oracle)).sum();
    let weak_dir = dir.join("weak");
    for (img, w) in target.images().iter().zip(&weak) {
        save_weak_labels(&weak_dir, img.id(), w)?;
    }

    let cfg = plan.stage2_config(seed);
    write_text(&dir.join("stage2.cfg"), &cfg.to_kv())?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let out = train_weak_da::<f32>(&data.source, &target.images(), &weak, &cfg, Some(&mut log))?;
    drop(log);
    save_segnet(dir.join("generator.json"), &out.generator, cfg.base.iterations)?;
    save_discriminator(dir.join("discriminator.json"), &out.discriminator, cfg.base.iterations)?;
    let summary = EvalSummary::new(&iou(&evaluate(&out.generator, &data.target_val)?), data.target_val.class_names());
    write_eval(dir.join("eval"), &summary)?;
    Ok((summary, oracle_points))
}

/// Runs every seed and arm. Stage-1 or arm failures are recorded and the
/// remaining work continues.
pub fn run_plan(
    plan: &ExperimentPlan,
    oracle: &mut dyn OracleDriver,
    progress: &mut dyn FnMut(&str),
) -> Result<PlanResults> {
    plan.validate()?;
    create_dir(&plan.output)?;
    write_json(&plan.output.join("plan.json"), plan)?;
    let data = load_plan_data(plan)?;
    let arms: Vec<String> = plan.arms.iter().map(|a| a.name.clone()).collect();
    let mut stage1 = Vec::new();
    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        progress(&format!("seed {seed}: stage 1"));
        match run_stage1(plan, &data, seed) {
            Ok(m) => stage1.push(Stage1Record { seed, miou: Some(m), error: None }),
            Err(e) => {
                progress(&format!("seed {seed}: stage 1 failed: {e}"));
                stage1.push(Stage1Record { seed, miou: None, error: Some(e.to_string()) });
                for arm in &arms {
                    runs.push(RunRecord {
                        seed,
                        arm: arm.clone(),
                        miou: None,
                        miou_all_zero_convention: None,
                        oracle_points: 0,
                        error: Some("stage 1 failed".into()),
                    });
                }
                continue;
            }
        }
        for arm in &plan.arms {
            progress(&format!("seed {seed}: arm {}", arm.name));
            let rec = match run_arm(plan, &data, seed, arm, oracle) {
                Ok((s, n)) => RunRecord {
                    seed,
                    arm: arm.name.clone(),
                    miou: Some(s.miou),
                    miou_all_zero_convention: Some(s.miou_all_zero_convention),
                    oracle_points: n,
                    error: None,
                },
                Err(e) => {
                    progress(&format!("seed {seed}: arm {} failed: {e}", arm.name));
                    RunRecord {
                        seed,
                        arm: arm.name.clone(),
                        miou: None,
                        miou_all_zero_convention: None,
                        oracle_points: 0,
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(rec);
        }
    }
    let results = PlanResults { seeds: plan.seeds.clone(), summary: summarize(&arms, &runs), arms, stage1, runs };
    write_json(&plan.output.join("results.json"), &results)?;
    Ok(results)
}

/// Outputs of [`render_report`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub table_txt: PathBuf,
    pub table_csv: PathBuf,
    pub panels: Vec<PathBuf>,
    /// `seed/arm` runs with no evaluation output.
    pub missing: Vec<String>,
}

fn mean_summary(summaries: &[EvalSummary]) -> Option<EvalSummary> {
    let first = summaries.first()?;
    let n = summaries.len() as f64;
    let per_class = first
        .per_class
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let vals: Vec<f64> = summaries.iter().filter_map(|s| s.per_class.get(k).and_then(|c| c.iou)).collect();
            ClassIou { class: c.class.clone(), iou: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64) }
        })
        .collect();
    Some(EvalSummary {
        miou: summaries.iter().map(|s| s.miou).sum::<f64>() / n,
        miou_all_zero_convention: summaries.iter().map(|s| s.miou_all_zero_convention).sum::<f64>() / n,
        per_class,
    })
}

/// Table (one row per arm, seed-averaged) and qualitative panels from a
/// finished results tree. Missing runs are listed, not fatal.
pub fn render_report(output: &Path, out_dir: &Path) -> Result<ReportFiles> {
    let plan: ExperimentPlan = {
        let path = output.join("plan.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?
    };
    create_dir(out_dir)?;
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for arm in &plan.arms {
        let mut sums = Vec::new();
        for &seed in &plan.seeds {
            match EvalSummary::load(arm_dir(output, seed, &arm.name).join("eval/summary.json")) {
                Ok(s) => sums.push(s),
                Err(_) => missing.push(format!("seed_{seed}/{}", arm.name)),
            }
        }
        if let Some(summary) = mean_summary(&sums) {
            rows.push(ArmRow { arm: arm.name.clone(), summary });
        }
    }
    let (text, csv) = render_table(&rows);
    let table_txt = out_dir.join("table.txt");
    let table_csv = out_dir.join("table.csv");
    write_text(&table_txt, &text)?;
    write_text(&table_csv, &csv)?;

    let mut panels = Vec::new();
    let seed = plan.seeds[0];
    let find = |s: Strategy| plan.arms.iter().find(|a| a.acquisition.strategy == s);
    if let (Some(random), Some(active)) = (find(Strategy::Random), find(Strategy::Active)) {
        let load = |a: &Arm| load_segnet::<f32>(arm_dir(output, seed, &a.name).join("generator.json"));
        if let (Ok((g_random, _)), Ok((g_active, _))) = (load(random), load(active)) {
            let data = load_plan_data(&plan)?;
            let palette = class_palette(data.target_val.num_classes());
            let panel_dir = out_dir.join("panels");
            create_dir(&panel_dir)?;
            for item in data.target_val.items().iter().take(plan.panels) {
                let Some(gt) = &item.label else { continue };
                let pr = g_random.predict(&item.image)?.argmax();
                let pa = g_active.predict(&item.image)?.argmax();
                let panel = render_panel(&item.image, &[&pr, &pa, gt], &palette, None)?;
                let path = panel_dir.join(format!("{}.png", item.image.id()));
                write_panel(&path, &panel)?;
                panels.push(path);
            }
            // selected patches on training images, active then random
            for item in data.target_train.items().iter().take(plan.panels) {
                let Some(gt) = &item.label else { continue };
                for a in [active, random] {
                    let mpath = arm_dir(output, seed, &a.name).join("manifests").join(format!("{}.json", item.image.id()));
                    let Ok(m) = AnnotationManifest::load(&mpath) else { continue };
                    let panel = render_panel(&item.image, &[gt], &palette, Some((&m.grid, &m.selected)))?;
                    let path = panel_dir.join(format!("{}_{}.png", item.image.id(), a.name));
                    write_panel(&path, &panel)?;
                    panels.push(path);
                }
            }
        }
    }
    Ok(ReportFiles { table_txt, table_csv, panels, missing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn plan_parsing() {
        let text = "seeds = 0, 1\noutput = out\n[uda]\niterations = 3\n[acquisition]\nK = 4\n[arm a]\nstrategy = active\n[arm r]\nstrategy = random\nK = 2\n";
        let plan = ExperimentPlan::from_document(&Document::parse(text).unwrap(), Path::new("/tmp/x")).unwrap();
        assert_eq!(plan.seeds, vec![0, 1]);
        assert_eq!(plan.output, PathBuf::from("/tmp/x/out"));
        assert_eq!(plan.uda.iterations, 3);
        assert_eq!(plan.arms[0].acquisition.k, 4);
        assert_eq!(plan.arms[1].acquisition.k, 2);
        assert_eq!(plan.stage2_config(1), plan.stage2_config(1));
        for bad in ["[arm]\n", "[arm a]\n[arm a]\n", "seeds = 1,1\n[arm a]\n", "bogus = 1\n[arm a]\n", "[zzz]\n[arm a]\n", ""] {
            assert!(ExperimentPlan::from_document(&Document::parse(bad).unwrap(), Path::new(".")).is_err(), "{bad:?}");
        }
    }
}
