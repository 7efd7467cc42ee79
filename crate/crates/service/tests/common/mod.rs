#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use pointadapt::acquisition::{acquire_image, AcquisitionConfig, AnnotationManifest, Strategy};
use pointadapt::data::{DenseLabelMap, ProbMap};
use pointadapt::datasets::{generate_toyshapes, ToyShapesConfig};
use pointadapt::uda::entropy_map;
use pointadapt_service::prepare_data_dir;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifests: Vec<AnnotationManifest>,
    pub truth: BTreeMap<String, DenseLabelMap>,
}

fn fake_probs(h: usize, w: usize, c: usize, salt: usize) -> ProbMap<f64> {
    let mut v = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let raw: Vec<f64> = (0..c).map(|k| 1.0 + ((x * 31 + y * 17 + k * 7 + salt * 5) % 11) as f64).collect();
            let s: f64 = raw.iter().sum();
            v.extend(raw.iter().map(|r| r / s));
        }
    }
    ProbMap::new(h, w, c, v).unwrap()
}

/// Five 64x64 target images, K=2 patches with 5 points each: 50 requests.
pub fn fixture(with_truth: bool) -> Fixture {
    let data = generate_toyshapes(&ToyShapesConfig { n_source: 1, n_target: 5, n_val: 1, ..Default::default() }).unwrap();
    let cfg = AcquisitionConfig { strategy: Strategy::Active, k: 2, points_per_patch: 5, ..Default::default() };
    let images = data.target_train.images();
    let manifests: Vec<_> = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let e = entropy_map(&fake_probs(img.height(), img.width(), 4, i));
            acquire_image(img.id(), &e, &cfg).unwrap()
        })
        .collect();
    let truth = data.target_train.ground_truth();
    let dir = tempfile::tempdir().unwrap();
    prepare_data_dir(dir.path(), &manifests, &images, with_truth.then_some(&truth), data.target_train.class_names())
        .unwrap();
    Fixture { dir, manifests, truth }
}

pub fn log_lines(dir: &Path) -> Vec<String> {
    match std::fs::read_to_string(dir.join(pointadapt_service::EVENTS_FILE)) {
        Ok(t) => t.lines().map(str::to_string).collect(),
        Err(_) => Vec::new(),
    }
}

pub fn truth_class(fx: &Fixture, image_id: &str, x: usize, y: usize) -> u64 {
    u64::from(fx.truth[image_id].get(x, y))
}
