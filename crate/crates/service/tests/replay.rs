mod common;

use common::{fixture, log_lines};
use pointadapt_service::{AnnotationService, LabelEvent, QueueState, ServiceError, SubmitOutcome, EVENTS_FILE};

fn event(id: &str, class: u64) -> LabelEvent {
    LabelEvent { request_id: id.into(), class_id: class, annotator: "a".into(), timestamp: "2026-01-01T00:00:00Z".into() }
}

#[test]
fn replay_is_deterministic() {
    let fx = fixture(false);
    let log = fx.dir.path().join(EVENTS_FILE);
    let mut s = QueueState::new(fx.manifests.clone(), 4).unwrap();
    for (i, p) in fx.manifests.iter().flat_map(|m| &m.points).enumerate().step_by(3) {
        assert_eq!(s.submit(event(&p.request_id, (i % 4) as u64), &log).unwrap(), SubmitOutcome::Accepted);
    }
    let a = QueueState::replay(fx.manifests.clone(), 4, &log).unwrap();
    let b = QueueState::replay(fx.manifests.clone(), 4, &log).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, s);
    assert_eq!(a.answered_count(), 17);
}

#[test]
fn first_write_wins() {
    let fx = fixture(false);
    let log = fx.dir.path().join(EVENTS_FILE);
    let id = &fx.manifests[1].points[4].request_id;
    let mut s = QueueState::new(fx.manifests.clone(), 4).unwrap();
    s.submit(event(id, 3), &log).unwrap();
    assert_eq!(s.submit(event(id, 3), &log).unwrap(), SubmitOutcome::Duplicate);
    let err = s.submit(event(id, 0), &log).unwrap_err();
    assert!(matches!(err, ServiceError::Conflict { existing: 3, submitted: 0, .. }), "{err}");
    assert_eq!(log_lines(fx.dir.path()).len(), 1);
    assert_eq!(s.answered()[id].class_id, 3);
}

#[test]
fn corrupt_line_aborts_with_its_number() {
    let fx = fixture(false);
    let log = fx.dir.path().join(EVENTS_FILE);
    let good = serde_json::to_string(&event(&fx.manifests[0].points[0].request_id, 1)).unwrap();
    std::fs::write(&log, format!("{good}\n{{\"request_id\": \"trunc\n")).unwrap();
    match QueueState::replay(fx.manifests.clone(), 4, &log) {
        Err(ServiceError::CorruptLog { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a corrupt-log error, got {other:?}"),
    }

    let unknown = serde_json::to_string(&event("0000000000000000", 1)).unwrap();
    std::fs::write(&log, format!("{good}\n\n{unknown}\n")).unwrap();
    match QueueState::replay(fx.manifests.clone(), 4, &log) {
        Err(ServiceError::CorruptLog { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a corrupt-log error, got {other:?}"),
    }
    assert!(AnnotationService::open(fx.dir.path(), false).is_err());
}

#[test]
fn duplicate_request_ids_are_rejected() {
    let fx = fixture(false);
    let mut manifests = fx.manifests.clone();
    manifests.push(manifests[0].clone());
    assert!(matches!(QueueState::new(manifests, 4), Err(ServiceError::DuplicateRequest(_))));
}

#[test]
fn batch_is_all_or_nothing() {
    let fx = fixture(false);
    let log = fx.dir.path().join(EVENTS_FILE);
    let ids: Vec<&String> = fx.manifests.iter().flat_map(|m| &m.points).map(|p| &p.request_id).collect();
    let mut s = QueueState::new(fx.manifests.clone(), 4).unwrap();
    let bad = vec![event(ids[0], 1), event(ids[1], 9)];
    assert!(s.submit_batch(bad, &log).is_err());
    assert_eq!(s.answered_count(), 0);
    assert!(log_lines(fx.dir.path()).is_empty());
    assert_eq!(s.submit_batch(vec![event(ids[0], 1), event(ids[1], 2), event(ids[0], 1)], &log).unwrap(), 2);
    assert_eq!(log_lines(fx.dir.path()).len(), 2);
}

#[test]
fn oracle_without_truth_fails_cleanly() {
    let fx = fixture(false);
    let svc = AnnotationService::open(fx.dir.path(), true).unwrap();
    assert!(matches!(svc.run_oracle(), Err(ServiceError::MissingTruth(_))));
    assert_eq!(svc.progress().answered, 0);
}
