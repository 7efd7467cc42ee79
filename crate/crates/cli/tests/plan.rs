mod common;

use common::{listing, tiny_plan};
use pointadapt::pipeline::{run_plan, ExperimentPlan, SimulatedOracle};

const ARMS: &[(&str, &str)] =
    &[("none", "strategy = none"), ("random", "strategy = random"), ("active", "strategy = active"), ("full", "strategy = full")];

#[test]
fn results_tree_layout_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan::load(tiny_plan(dir.path(), "0", ARMS)).unwrap();
    run_plan(&plan, &mut SimulatedOracle, &mut |_| {}).unwrap();
    pointadapt_cli::report(&plan.output, &pointadapt_cli::report_dir(&plan.output)).unwrap();
    let got = listing(&plan.output);
    let golden = include_str!("golden_tree.txt").lines().map(str::to_string).collect::<Vec<_>>();
    assert_eq!(got, golden, "results tree changed:\n{}", got.join("\n"));
}

#[test]
fn rerun_gives_identical_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let arms = &ARMS[1..3];
    let pa = ExperimentPlan::load(tiny_plan(a.path(), "3, 4", arms)).unwrap();
    let pb = ExperimentPlan::load(tiny_plan(b.path(), "3, 4", arms)).unwrap();
    let ra = run_plan(&pa, &mut SimulatedOracle, &mut |_| {}).unwrap();
    let rb = run_plan(&pb, &mut SimulatedOracle, &mut |_| {}).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.runs.len(), 4);
    assert_eq!(ra.summary.len(), 2);
    assert_eq!(
        std::fs::read(pa.output.join("results.json")).unwrap(),
        std::fs::read(pb.output.join("results.json")).unwrap()
    );
    for f in ["seed_3/arms/active/generator.padm", "seed_4/arms/random/weak/tgt_00002.weak.padm"] {
        assert_eq!(std::fs::read(pa.output.join(f)).unwrap(), std::fs::read(pb.output.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn stage_two_settings_match_across_arms() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan::load(tiny_plan(dir.path(), "1", ARMS)).unwrap();
    let results = run_plan(&plan, &mut SimulatedOracle, &mut |_| {}).unwrap();
    let arms = plan.output.join("seed_1/arms");
    let reference = std::fs::read(arms.join("none/stage2.cfg")).unwrap();
    for (name, _) in ARMS {
        assert_eq!(std::fs::read(arms.join(name).join("stage2.cfg")).unwrap(), reference, "{name}");
    }
    // budget parity: K * points_per_patch per image
    for arm in ["random", "active"] {
        let r = results.runs.iter().find(|r| r.arm == arm).unwrap();
        assert_eq!(r.oracle_points, 3 * 2 * 3);
    }
    let full = results.runs.iter().find(|r| r.arm == "full").unwrap();
    assert_eq!(full.oracle_points, 3 * 32 * 32);
    assert_eq!(results.runs.iter().find(|r| r.arm == "none").unwrap().oracle_points, 0);
}
