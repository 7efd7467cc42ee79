mod common;

use std::net::SocketAddr;

use common::{fixture, log_lines, truth_class, Fixture};
use pointadapt::acquisition::{simulated_oracle, RequestStatus};
use pointadapt_service::{spawn, Progress, RunningService, TaskView};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::json;

fn start(fx: &Fixture, allow_oracle: bool) -> RunningService {
    spawn(fx.dir.path(), SocketAddr::from(([127, 0, 0, 1], 0)), allow_oracle).unwrap()
}

fn next(client: &Client, svc: &RunningService) -> Option<TaskView> {
    let resp = client.get(format!("{}/v1/tasks/next", svc.url())).send().unwrap();
    match resp.status() {
        StatusCode::OK => Some(resp.json().unwrap()),
        StatusCode::NO_CONTENT => None,
        s => panic!("unexpected status {s}"),
    }
}

fn label(client: &Client, svc: &RunningService, id: &str, class: u64) -> reqwest::blocking::Response {
    client
        .post(format!("{}/v1/tasks/{id}/label", svc.url()))
        .json(&json!({ "class_id": class, "annotator": "tester" }))
        .send()
        .unwrap()
}

fn progress(client: &Client, svc: &RunningService) -> Progress {
    client.get(format!("{}/v1/progress", svc.url())).send().unwrap().json().unwrap()
}

#[test]
fn full_session_answers_every_request_once() {
    let fx = fixture(true);
    let svc = start(&fx, false);
    let client = Client::new();
    assert_eq!(progress(&client, &svc), Progress { answered: 0, pending: 50, total: 50 });

    let mut served = std::collections::BTreeSet::new();
    let mut last_score = f64::INFINITY;
    while let Some(task) = next(&client, &svc) {
        assert!(served.insert(task.request_id.clone()), "request {} served twice", task.request_id);
        let req = fx
            .manifests
            .iter()
            .flat_map(|m| &m.points)
            .find(|p| p.request_id == task.request_id)
            .unwrap();
        assert!(req.score <= last_score, "served out of score order");
        last_score = req.score;
        assert_eq!((task.point.x, task.point.y), (req.x, req.y));
        assert_eq!(task.image_png_url, format!("/v1/images/{}.png", task.image_id));
        assert_eq!(task.classes.len(), 4);
        let class = truth_class(&fx, &task.image_id, task.point.x, task.point.y);
        assert_eq!(label(&client, &svc, &task.request_id, class).status(), StatusCode::OK);
    }
    assert_eq!(served.len(), 50);
    assert_eq!(progress(&client, &svc), Progress { answered: 50, pending: 0, total: 50 });
    assert_eq!(log_lines(fx.dir.path()).len(), 50);

    let out = tempfile::tempdir().unwrap();
    let exported = svc.service.export_answers(out.path()).unwrap();
    for (got, input) in exported.iter().zip(&fx.manifests) {
        let expected = simulated_oracle(&input.points, &fx.truth[&input.image_id]).unwrap();
        assert_eq!(got.points, expected);
    }
}

#[test]
fn next_does_not_consume() {
    let fx = fixture(false);
    let svc = start(&fx, false);
    let client = Client::new();
    let a = next(&client, &svc).unwrap();
    let b = next(&client, &svc).unwrap();
    assert_eq!(a, b);
    assert_eq!(progress(&client, &svc).answered, 0);

    // highest score, ties broken by the smaller id
    let best = fx
        .manifests
        .iter()
        .flat_map(|m| &m.points)
        .min_by(|p, q| q.score.total_cmp(&p.score).then(p.request_id.cmp(&q.request_id)))
        .unwrap();
    assert_eq!(a.request_id, best.request_id);
}

#[test]
fn duplicate_is_idempotent_and_conflict_is_rejected() {
    let fx = fixture(false);
    let svc = start(&fx, false);
    let client = Client::new();
    let id = fx.manifests[0].points[0].request_id.clone();

    assert_eq!(label(&client, &svc, &id, 2).status(), StatusCode::OK);
    assert_eq!(label(&client, &svc, &id, 2).status(), StatusCode::OK);
    assert_eq!(log_lines(fx.dir.path()).len(), 1);

    let resp = label(&client, &svc, &id, 1);
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["existing_class_id"], 2);
    assert_eq!(log_lines(fx.dir.path()).len(), 1);
    assert_eq!(progress(&client, &svc).answered, 1);
}

#[test]
fn bad_requests_map_to_statuses() {
    let fx = fixture(false);
    let svc = start(&fx, false);
    let client = Client::new();
    let id = fx.manifests[0].points[0].request_id.clone();

    assert_eq!(label(&client, &svc, "ffffffffffffffff", 0).status(), StatusCode::NOT_FOUND);
    assert_eq!(label(&client, &svc, &id, 4).status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(label(&client, &svc, &id, 255).status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert!(log_lines(fx.dir.path()).is_empty());

    let img = client.get(format!("{}/v1/images/{}.png", svc.url(), fx.manifests[0].image_id)).send().unwrap();
    assert_eq!(img.status(), StatusCode::OK);
    assert_eq!(&img.bytes().unwrap()[..4], b"\x89PNG");
    let missing = client.get(format!("{}/v1/images/nope.png", svc.url())).send().unwrap();
    assert_eq!(missing.status(), StatusCode::NOT_FOUND);
}

#[test]
fn oracle_endpoint_is_gated() {
    let fx = fixture(true);
    let client = Client::new();
    {
        let svc = start(&fx, false);
        let resp = client.post(format!("{}/v1/oracle/run", svc.url())).send().unwrap();
        assert_eq!(resp.status(), StatusCode::FORBIDDEN);
        assert_eq!(progress(&client, &svc).answered, 0);
    }
    let svc = start(&fx, true);
    let resp = client.post(format!("{}/v1/oracle/run", svc.url())).send().unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["answered"], 50);
    assert!(next(&client, &svc).is_none());

    for (got, input) in svc.service.answered_manifests().iter().zip(&fx.manifests) {
        assert!(got.points.iter().all(|p| p.status == RequestStatus::Answered));
        assert_eq!(got.points, simulated_oracle(&input.points, &fx.truth[&input.image_id]).unwrap());
    }
}

#[test]
fn restart_resumes_from_the_log() {
    let fx = fixture(false);
    let client = Client::new();
    let ids: Vec<String> = fx.manifests.iter().flat_map(|m| &m.points).map(|p| p.request_id.clone()).collect();
    let before = {
        let svc = start(&fx, false);
        for id in &ids[..17] {
            assert_eq!(label(&client, &svc, id, 1).status(), StatusCode::OK);
        }
        svc.service.snapshot()
    };
    let svc = start(&fx, false);
    assert_eq!(svc.service.snapshot(), before);
    assert_eq!(progress(&client, &svc), Progress { answered: 17, pending: 33, total: 50 });
    assert_eq!(label(&client, &svc, &ids[3], 2).status(), StatusCode::CONFLICT);
}

#[test]
fn concurrent_duplicates_keep_one_answer() {
    let fx = fixture(false);
    let svc = start(&fx, false);
    let url = svc.url();
    let id = fx.manifests[2].points[1].request_id.clone();
    let handles: Vec<_> = (0..8u64)
        .map(|i| {
            let (url, id) = (url.clone(), id.clone());
            std::thread::spawn(move || {
                let class = 1 + i % 2;
                let status = Client::new()
                    .post(format!("{url}/v1/tasks/{id}/label"))
                    .json(&json!({ "class_id": class, "annotator": format!("a{i}") }))
                    .send()
                    .unwrap()
                    .status();
                (class, status)
            })
        })
        .collect();
    let outcomes: Vec<(u64, StatusCode)> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let lines = log_lines(fx.dir.path());
    assert_eq!(lines.len(), 1);
    let winner = svc.service.snapshot().answered()[&id].class_id;
    for (class, status) in outcomes {
        let expected = if class == winner { StatusCode::OK } else { StatusCode::CONFLICT };
        assert_eq!(status, expected);
    }
}
