//! HTTP generation service. Requests are queued and drained by one worker
//! thread that owns the model.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, Weak};
use std::thread::JoinHandle;

use anyhow::{anyhow, Context};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use spctrl_core::backbone::Model;
use spctrl_core::pose::SkeletonSpec;
use spctrl_core::sampler::{KeypointAttention, SampleOutput, SampleRequest, Sampler, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug)]
struct Job {
    status: JobStatus,
    png: Option<Vec<u8>>,
    output: Option<SampleOutput>,
    error: Option<String>,
}

#[derive(Debug, Default)]
struct JobTable {
    next_id: u64,
    jobs: BTreeMap<u64, Job>,
}

impl JobTable {
    /// Moves a job forward; backward or repeated transitions are ignored.
    fn advance(&mut self, id: u64, to: JobStatus) -> Option<&mut Job> {
        let job = self.jobs.get_mut(&id)?;
        let ok = matches!(
            (job.status, to),
            (JobStatus::Queued, JobStatus::Running) | (JobStatus::Running, JobStatus::Done | JobStatus::Failed)
        );
        if !ok {
            return None;
        }
        job.status = to;
        Some(job)
    }
}

/// What the service knows about the loaded checkpoint.
#[derive(Debug, Clone)]
pub struct ModelInfo {
    pub checkpoint_hash: String,
    pub skeleton: SkeletonSpec,
    pub image_size: usize,
    pub timesteps: usize,
}

struct Shared {
    info: ModelInfo,
    jobs: Mutex<JobTable>,
    queue: mpsc::Sender<(u64, SampleRequest)>,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Shared>,
}

impl AppState {
    pub fn info(&self) -> &ModelInfo {
        &self.shared.info
    }

    /// Jobs not yet finished.
    pub fn queue_depth(&self) -> usize {
        let jobs = self.shared.jobs.lock().expect("job table poisoned");
        jobs.jobs.values().filter(|j| !j.status.is_terminal()).count()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let jobs = self.shared.jobs.lock().expect("job table poisoned");
        let terminal = jobs.jobs.values().filter(|j| j.status.is_terminal()).count();
        (jobs.jobs.len(), jobs.jobs.len() - terminal, terminal)
    }

    fn submit(&self, req: SampleRequest) -> anyhow::Result<u64> {
        let mut jobs = self.shared.jobs.lock().expect("job table poisoned");
        let id = jobs.next_id;
        jobs.next_id += 1;
        jobs.jobs.insert(
            id,
            Job {
                status: JobStatus::Queued,
                png: None,
                output: None,
                error: None,
            },
        );
        // Sending under the lock keeps ids and queue order aligned.
        if self.shared.queue.send((id, req)).is_err() {
            jobs.jobs.remove(&id);
            return Err(anyhow!("generation worker has stopped"));
        }
        Ok(id)
    }
}

/// Loads the model on a dedicated worker thread and starts draining the
/// queue. Returns once the model is ready.
pub fn spawn_worker<F>(load: F, sampler: SamplerConfig) -> anyhow::Result<(AppState, JoinHandle<()>)>
where
    F: FnOnce() -> anyhow::Result<Model> + Send + 'static,
{
    let (tx, rx) = mpsc::channel::<(u64, SampleRequest)>();
    let (ready_tx, ready_rx) = mpsc::channel::<anyhow::Result<ModelInfo>>();
    let (state_tx, state_rx) = mpsc::channel::<Weak<Shared>>();
    let handle = std::thread::Builder::new()
        .name("generation-worker".into())
        .spawn(move || {
            let model = match load().and_then(|m| {
                Sampler::new(&m, sampler.clone())?;
                Ok(m)
            }) {
                Ok(m) => m,
                Err(e) => {
                    let _ = ready_tx.send(Err(e));
                    return;
                }
            };
            let info = ModelInfo {
                checkpoint_hash: model.checkpoint_hash(),
                skeleton: model.skeleton().clone(),
                image_size: model.config().image_size,
                timesteps: model.schedule().len(),
            };
            if ready_tx.send(Ok(info)).is_err() {
                return;
            }
            // A weak handle lets the queue close once every client handle is gone.
            let Ok(shared) = state_rx.recv() else { return };
            let sampler = Sampler::new(&model, sampler).expect("checked at startup");
            while let Ok((id, req)) = rx.recv() {
                let Some(shared) = shared.upgrade() else { return };
                run_job(&AppState { shared }, &sampler, id, &req);
            }
        })
        .context("spawning generation worker")?;
    let info = ready_rx
        .recv()
        .map_err(|_| anyhow!("generation worker exited during startup"))??;
    let state = AppState {
        shared: Arc::new(Shared {
            info,
            jobs: Mutex::new(JobTable::default()),
            queue: tx,
        }),
    };
    state_tx
        .send(Arc::downgrade(&state.shared))
        .map_err(|_| anyhow!("generation worker exited during startup"))?;
    Ok((state, handle))
}

fn run_job(state: &AppState, sampler: &Sampler<'_>, id: u64, req: &SampleRequest) {
    {
        let mut jobs = state.shared.jobs.lock().expect("job table poisoned");
        if jobs.advance(id, JobStatus::Running).is_none() {
            return;
        }
    }
    let result = catch_unwind(AssertUnwindSafe(|| {
        let out = sampler.sample(req)?;
        let png = out.png()?;
        Ok::<_, spctrl_core::Error>((out, png))
    }));
    let outcome = match result {
        Ok(Ok(done)) => Ok(done),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "worker panicked".into())),
    };
    finish(state, id, outcome);
}

fn finish(state: &AppState, id: u64, outcome: std::result::Result<(SampleOutput, Vec<u8>), String>) {
    let mut jobs = state.shared.jobs.lock().expect("job table poisoned");
    match outcome {
        Ok((out, png)) => {
            if let Some(job) = jobs.advance(id, JobStatus::Done) {
                job.png = Some(png);
                job.output = Some(out);
            }
        }
        Err(e) => {
            if let Some(job) = jobs.advance(id, JobStatus::Failed) {
                job.error = Some(e);
            }
        }
    }
}

fn reject(status: StatusCode, reason: &str, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({"reason": reason, "error": message.to_string()}))).into_response()
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Response {
    let req: SampleRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return reject(StatusCode::BAD_REQUEST, "malformed_request", e),
    };
    let info = state.info();
    if let Err(e) = req
        .validate(info.timesteps)
        .and_then(|_| req.pose_set.validate(&info.skeleton))
    {
        return reject(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e);
    }
    match state.submit(req) {
        Ok(id) => (StatusCode::ACCEPTED, Json(json!({"job_id": id.to_string()}))).into_response(),
        Err(e) => reject(StatusCode::SERVICE_UNAVAILABLE, "worker_unavailable", e),
    }
}

#[derive(Debug, Deserialize)]
struct JobQuery {
    /// Report the maps of the sampling step nearest this timestep.
    timestep: Option<usize>,
}

#[derive(Debug, Serialize)]
struct JobView<'a> {
    job_id: String,
    status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_png_base64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention: Option<&'a [KeypointAttention]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_timestep: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

async fn job(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<JobQuery>) -> Response {
    let not_found = || reject(StatusCode::NOT_FOUND, "unknown_job", format!("no job {id}"));
    let Ok(n) = id.parse::<u64>() else { return not_found() };
    let jobs = state.shared.jobs.lock().expect("job table poisoned");
    let Some(job) = jobs.jobs.get(&n) else { return not_found() };
    let (attention, attention_timestep) = match (&job.output, q.timestep) {
        (Some(out), Some(t)) => match out.attention_at(t) {
            Some((step_t, maps)) => (Some(maps), Some(step_t)),
            None => (None, None),
        },
        (Some(out), None) => (out.attention.as_deref(), None),
        (None, _) => (None, None),
    };
    let view = JobView {
        job_id: id.clone(),
        status: job.status,
        image_png_base64: job.png.as_ref().map(|b| base64::engine::general_purpose::STANDARD.encode(b)),
        attention,
        attention_timestep,
        error: job.error.clone(),
    };
    Json(view).into_response()
}

/// Skeleton JSON plus the image size clients should map coordinates to.
pub fn skeleton_document(info: &ModelInfo) -> serde_json::Value {
    let mut doc: serde_json::Value = serde_json::from_str(&info.skeleton.to_json()).expect("skeleton serializes");
    doc["x-image-size"] = json!([info.image_size, info.image_size]);
    doc
}

async fn skeleton(State(state): State<AppState>) -> Response {
    Json(skeleton_document(state.info())).into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    Json(json!({
        "checkpoint_hash": state.info().checkpoint_hash,
        "queue_depth": state.queue_depth(),
    }))
    .into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/jobs/{id}", get(job))
        .route("/skeleton", get(skeleton))
        .route("/health", get(health))
        .with_state(state)
}

/// Binds `port` on all interfaces and serves until the process exits.
pub async fn serve(state: AppState, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
        .await
        .with_context(|| format!("binding port {port}"))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn detached_state() -> (AppState, mpsc::Receiver<(u64, SampleRequest)>) {
        let (tx, rx) = mpsc::channel();
        let state = AppState {
            shared: Arc::new(Shared {
                info: ModelInfo {
                    checkpoint_hash: "h".into(),
                    skeleton: SkeletonSpec::ap10k(),
                    image_size: 32,
                    timesteps: 1000,
                },
                jobs: Mutex::new(JobTable::default()),
                queue: tx,
            }),
        };
        (state, rx)
    }

    fn request() -> SampleRequest {
        let pose = spctrl_core::pose::PoseSet::new((32, 32), vec![]);
        SampleRequest::new(pose, "a dog", 0)
    }

    #[test]
    fn failed_job_keeps_message_and_lifecycle_is_monotone() {
        let (state, _rx) = detached_state();
        let id = state.submit(request()).unwrap();
        assert_eq!(state.counts(), (1, 1, 0));
        // Finishing a job that never ran is ignored.
        finish(&state, id, Err("early".into()));
        assert_eq!(state.shared.jobs.lock().unwrap().jobs[&id].status, JobStatus::Queued);
        state.shared.jobs.lock().unwrap().advance(id, JobStatus::Running).unwrap();
        finish(&state, id, Err("sampler exploded".into()));
        {
            let jobs = state.shared.jobs.lock().unwrap();
            assert_eq!(jobs.jobs[&id].status, JobStatus::Failed);
            assert_eq!(jobs.jobs[&id].error.as_deref(), Some("sampler exploded"));
        }
        let mut jobs = state.shared.jobs.lock().unwrap();
        assert!(jobs.advance(id, JobStatus::Running).is_none());
        assert!(jobs.advance(id, JobStatus::Done).is_none());
        drop(jobs);
        assert_eq!(state.counts(), (1, 0, 1));
        assert_eq!(state.queue_depth(), 0);
    }

    #[test]
    fn submit_fails_when_worker_is_gone() {
        let (state, rx) = detached_state();
        drop(rx);
        assert!(state.submit(request()).is_err());
    }
}
