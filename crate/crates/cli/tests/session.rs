mod common;

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use common::tiny_plan;
use pointadapt::acquisition::{acquire_image, AcquisitionConfig, Strategy};
use pointadapt::data::ProbMap;
use pointadapt::datasets::{generate_toyshapes, ToyShapesConfig};
use pointadapt::pipeline::{run_plan, ExperimentPlan, OracleDriver, OracleJob, SimulatedOracle};
use pointadapt::uda::entropy_map;
use pointadapt_cli::HumanSession;
use serde_json::json;

fn local() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

#[test]
fn service_session_matches_simulated_path() {
    let arms = [("active", "strategy = active"), ("none", "strategy = none")];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let direct = ExperimentPlan::load(tiny_plan(a.path(), "2", &arms)).unwrap();
    let served = ExperimentPlan::load(tiny_plan(b.path(), "2", &arms)).unwrap();

    let ra = run_plan(&direct, &mut SimulatedOracle, &mut |_| {}).unwrap();
    let mut session = HumanSession::new(local(), Duration::from_secs(60));
    session.allow_sim_oracle = true;
    session.poll_interval = Duration::from_millis(20);
    session.on_ready = Box::new(|url| {
        let url = url.to_string();
        std::thread::spawn(move || {
            let resp = reqwest::blocking::Client::new().post(format!("{url}/v1/oracle/run")).send().unwrap();
            assert!(resp.status().is_success());
        });
    });
    let rb = run_plan(&served, &mut session, &mut |_| {}).unwrap();
    assert_eq!(ra, rb);
    for f in [
        "seed_2/arms/active/weak/tgt_00001.weak.padm",
        "seed_2/arms/active/generator.padm",
        "seed_2/arms/active/eval/summary.json",
    ] {
        assert_eq!(std::fs::read(direct.output.join(f)).unwrap(), std::fs::read(served.output.join(f)).unwrap(), "{f}");
    }
    assert!(served.output.join("seed_2/arms/active/service/events.jsonl").exists());
    assert!(!served.output.join("seed_2/arms/none/service").exists());
}

fn job_inputs(strategy: Strategy) -> (pointadapt::datasets::DatasetSplit, Vec<pointadapt::acquisition::AnnotationManifest>) {
    let ds = generate_toyshapes(&ToyShapesConfig { n_source: 1, n_target: 5, n_val: 1, ..Default::default() }).unwrap();
    let cfg = AcquisitionConfig { strategy, k: 2, points_per_patch: 5, ..Default::default() };
    let manifests = ds
        .target_train
        .images()
        .iter()
        .map(|img| acquire_image(img.id(), &entropy_map(&ProbMap::<f64>::uniform(64, 64, 4)), &cfg).unwrap())
        .collect();
    (ds.target_train, manifests)
}

#[test]
fn timeout_reports_pending_ids() {
    let (target, manifests) = job_inputs(Strategy::Active);
    let ids: Vec<String> = manifests.iter().flat_map(|m| &m.points).map(|p| p.request_id.clone()).collect();
    assert_eq!(ids.len(), 50);
    let dir = tempfile::tempdir().unwrap();
    let mut session = HumanSession::new(local(), Duration::from_millis(1500));
    session.poll_interval = Duration::from_millis(20);
    let to_answer = ids[..40].to_vec();
    session.on_ready = Box::new(move |url| {
        let client = reqwest::blocking::Client::new();
        for id in &to_answer {
            let resp = client
                .post(format!("{url}/v1/tasks/{id}/label"))
                .json(&json!({ "class_id": 0, "annotator": "t" }))
                .send()
                .unwrap();
            assert!(resp.status().is_success());
        }
    });
    let job = OracleJob { seed: 0, arm: "active", arm_dir: dir.path(), manifests, target: &target };
    let err = session.answer(job).unwrap_err().to_string();
    assert!(err.contains("40/50 answered"), "{err}");
    assert!(err.contains("10 pending"), "{err}");
    let listed: Vec<&str> = err.rsplit(": ").next().unwrap().split(", ").collect();
    assert_eq!(listed.len(), 10);
    let mut expected = ids[40..].to_vec();
    expected.sort();
    assert_eq!(listed, expected);
    // no ground truth is written for a human session
    assert!(!dir.path().join("service/labels").exists());
}

#[test]
fn empty_arm_does_not_block() {
    let (target, manifests) = job_inputs(Strategy::None);
    let dir = tempfile::tempdir().unwrap();
    let mut session = HumanSession::new(local(), Duration::ZERO);
    session.on_ready = Box::new(|_| panic!("no service expected"));
    let start = Instant::now();
    let job = OracleJob { seed: 0, arm: "none", arm_dir: dir.path(), manifests: manifests.clone(), target: &target };
    assert_eq!(session.answer(job).unwrap(), manifests);
    assert!(start.elapsed() < Duration::from_secs(1));
}
