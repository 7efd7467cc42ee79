//! Queue state as a fold over the label event log.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use pointadapt::acquisition::{AnnotationManifest, RequestStatus};
use serde::{Deserialize, Serialize};

use crate::{io_err, Result, ServiceError};

/// One accepted label, as stored in `events.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub request_id: String,
    pub class_id: u64,
    pub annotator: String,
    /// RFC 3339 / ISO-8601.
    pub timestamp: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubmitOutcome {
    Accepted,
    /// Same class as the existing answer; nothing was written.
    Duplicate,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct RequestEntry {
    pub request_id: String,
    pub image_id: String,
    pub x: usize,
    pub y: usize,
    pub patch_index: usize,
    pub score: f64,
    manifest: usize,
    point: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueueState {
    manifests: Vec<AnnotationManifest>,
    requests: BTreeMap<String, RequestEntry>,
    answered: BTreeMap<String, LabelEvent>,
    images: BTreeSet<String>,
    classes: usize,
}

impl QueueState {
    pub fn new(manifests: Vec<AnnotationManifest>, classes: usize) -> Result<Self> {
        let mut requests = BTreeMap::new();
        for (mi, m) in manifests.iter().enumerate() {
            for (pi, p) in m.points.iter().enumerate() {
                let entry = RequestEntry {
                    request_id: p.request_id.clone(),
                    image_id: m.image_id.clone(),
                    x: p.x,
                    y: p.y,
                    patch_index: p.patch_index,
                    score: p.score,
                    manifest: mi,
                    point: pi,
                };
                if requests.insert(p.request_id.clone(), entry).is_some() {
                    return Err(ServiceError::DuplicateRequest(p.request_id.clone()));
                }
            }
        }
        let images = manifests.iter().map(|m| m.image_id.clone()).collect();
        Ok(Self { manifests, requests, answered: BTreeMap::new(), images, classes })
    }

    /// Rebuilds state from the log; a malformed or inconsistent line aborts
    /// with its 1-based line number.
    pub fn replay(manifests: Vec<AnnotationManifest>, classes: usize, log: &Path) -> Result<Self> {
        let mut state = Self::new(manifests, classes)?;
        if !log.exists() {
            return Ok(state);
        }
        let text = std::fs::read_to_string(log).map_err(io_err(log))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |reason: String| ServiceError::CorruptLog { line: i + 1, reason };
            let event: LabelEvent = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            match state.check(&event) {
                Ok(SubmitOutcome::Accepted) => {
                    state.answered.insert(event.request_id.clone(), event);
                }
                Ok(SubmitOutcome::Duplicate) => {}
                Err(e) => return Err(corrupt(e.to_string())),
            }
        }
        Ok(state)
    }

    fn check(&self, event: &LabelEvent) -> Result<SubmitOutcome> {
        if !self.requests.contains_key(&event.request_id) {
            return Err(ServiceError::UnknownRequest(event.request_id.clone()));
        }
        if event.class_id >= self.classes as u64 {
            return Err(ServiceError::ClassOutOfRange { class_id: event.class_id, classes: self.classes });
        }
        match self.answered.get(&event.request_id) {
            None => Ok(SubmitOutcome::Accepted),
            Some(prev) if prev.class_id == event.class_id => Ok(SubmitOutcome::Duplicate),
            Some(prev) => Err(ServiceError::Conflict {
                request_id: event.request_id.clone(),
                existing: prev.class_id as u8,
                submitted: event.class_id.min(255) as u8,
            }),
        }
    }

    fn append(log: &Path, events: &[&LabelEvent]) -> Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let mut buf = String::new();
        for e in events {
            buf.push_str(&serde_json::to_string(e).expect("event serializes"));
            buf.push('\n');
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(log).map_err(io_err(log))?;
        f.write_all(buf.as_bytes()).map_err(io_err(log))?;
        f.sync_data().map_err(io_err(log))
    }

    /// First write wins: accepted events are appended to `log` before the
    /// in-memory state changes.
    pub fn submit(&mut self, event: LabelEvent, log: &Path) -> Result<SubmitOutcome> {
        let outcome = self.check(&event)?;
        if outcome == SubmitOutcome::Accepted {
            Self::append(log, &[&event])?;
            self.answered.insert(event.request_id.clone(), event);
        }
        Ok(outcome)
    }

    /// All-or-nothing version of [`Self::submit`] with one log write.
    pub fn submit_batch(&mut self, events: Vec<LabelEvent>, log: &Path) -> Result<usize> {
        let mut fresh = Vec::new();
        let mut seen = BTreeMap::new();
        for e in &events {
            if self.check(e)? == SubmitOutcome::Accepted {
                match seen.insert(e.request_id.clone(), e.class_id) {
                    Some(c) if c != e.class_id => {
                        return Err(ServiceError::Conflict {
                            request_id: e.request_id.clone(),
                            existing: c as u8,
                            submitted: e.class_id as u8,
                        })
                    }
                    Some(_) => {}
                    None => fresh.push(e),
                }
            }
        }
        Self::append(log, &fresh)?;
        let n = fresh.len();
        let ids: BTreeSet<String> = fresh.iter().map(|e| e.request_id.clone()).collect();
        for e in events {
            if ids.contains(&e.request_id) && !self.answered.contains_key(&e.request_id) {
                self.answered.insert(e.request_id.clone(), e);
            }
        }
        Ok(n)
    }

    pub fn total(&self) -> usize {
        self.requests.len()
    }

    pub fn answered_count(&self) -> usize {
        self.answered.len()
    }

    pub fn answered(&self) -> &BTreeMap<String, LabelEvent> {
        &self.answered
    }

    pub(crate) fn has_image(&self, image_id: &str) -> bool {
        self.images.contains(image_id)
    }

    pub(crate) fn next_pending(&self) -> Option<&RequestEntry> {
        let mut best: Option<&RequestEntry> = None;
        for r in self.requests.values() {
            if self.answered.contains_key(&r.request_id) {
                continue;
            }
            if best.is_none_or(|b| r.score > b.score) {
                best = Some(r);
            }
        }
        best
    }

    pub(crate) fn pending_requests(&self) -> Vec<RequestEntry> {
        self.requests.values().filter(|r| !self.answered.contains_key(&r.request_id)).cloned().collect()
    }

    /// Pending request ids, ascending.
    pub fn pending_ids(&self) -> Vec<String> {
        self.pending_requests().into_iter().map(|r| r.request_id).collect()
    }

    pub fn answered_manifests(&self) -> Vec<AnnotationManifest> {
        let mut out = self.manifests.clone();
        for (id, ev) in &self.answered {
            let r = &self.requests[id];
            let p = &mut out[r.manifest].points[r.point];
            p.status = RequestStatus::Answered;
            p.answer = Some(ev.class_id as u8);
        }
        out
    }
}
