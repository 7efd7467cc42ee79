//! Human-in-the-loop oracle: serve an arm's requests and wait for answers.

use std::net::SocketAddr;
use std::time::{Duration, Instant};

use pointadapt::acquisition::AnnotationManifest;
use pointadapt::pipeline::{OracleDriver, OracleJob};
use pointadapt::Error;
use pointadapt_service::{prepare_data_dir, spawn, Progress};

/// Spawns the annotation service for every arm that has requests and blocks
/// until `/v1/progress` reports nothing pending.
pub struct HumanSession {
    pub addr: SocketAddr,
    /// Also writes ground truth next to the service data so that
    /// `POST /v1/oracle/run` can answer; off for real annotators.
    pub allow_sim_oracle: bool,
    pub timeout: Duration,
    pub poll_interval: Duration,
    /// Called with the base URL once the service is listening.
    pub on_ready: Box<dyn FnMut(&str)>,
}

impl HumanSession {
    pub fn new(addr: SocketAddr, timeout: Duration) -> Self {
        Self {
            addr,
            allow_sim_oracle: false,
            timeout,
            poll_interval: Duration::from_millis(500),
            on_ready: Box::new(|url| eprintln!("annotation service ready at {url}")),
        }
    }
}

/// Why a session ended without every request answered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timeout {
    pub answered: usize,
    pub total: usize,
    pub pending_ids: Vec<String>,
}

impl std::fmt::Display for Timeout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "timed out with {}/{} answered; {} pending: {}",
            self.answered,
            self.total,
            self.pending_ids.len(),
            self.pending_ids.join(", ")
        )
    }
}

/// Polls `GET {url}/v1/progress` until `pending == 0` or `timeout` elapses.
pub fn wait_for_completion(url: &str, timeout: Duration, poll: Duration) -> Result<Progress, Progress> {
    let client = reqwest::blocking::Client::new();
    let start = Instant::now();
    let mut last = Progress { answered: 0, pending: usize::MAX, total: 0 };
    loop {
        if let Ok(resp) = client.get(format!("{url}/v1/progress")).send() {
            if let Ok(p) = resp.json::<Progress>() {
                last = p;
                if p.pending == 0 {
                    return Ok(p);
                }
            }
        }
        if start.elapsed() >= timeout {
            return Err(last);
        }
        std::thread::sleep(poll.min(timeout.saturating_sub(start.elapsed())));
    }
}

impl OracleDriver for HumanSession {
    fn answer(&mut self, job: OracleJob<'_>) -> pointadapt::Result<Vec<AnnotationManifest>> {
        if job.manifests.iter().all(|m| m.points.is_empty()) {
            return Ok(job.manifests);
        }
        let dir = job.arm_dir.join("service");
        let truth = job.target.ground_truth();
        prepare_data_dir(
            &dir,
            &job.manifests,
            &job.target.images(),
            self.allow_sim_oracle.then_some(&truth),
            job.target.class_names(),
        )
        .map_err(|e| Error::Oracle(e.to_string()))?;
        let running = spawn(&dir, self.addr, self.allow_sim_oracle).map_err(|e| Error::Oracle(e.to_string()))?;
        (self.on_ready)(&running.url());
        let outcome = wait_for_completion(&running.url(), self.timeout, self.poll_interval);
        let state = running.service.snapshot();
        let manifests = running.service.answered_manifests();
        running.stop();
        match outcome {
            Ok(_) => Ok(manifests),
            Err(_) => Err(Error::Oracle(
                Timeout { answered: state.answered_count(), total: state.total(), pending_ids: state.pending_ids() }
                    .to_string(),
            )),
        }
    }
}
