// SPDX-License-Identifier: MIT OR Apache-2.0

//! Local HTTP service. Request and response bodies are JSON; bulk arrays use
//! the trace array encoding as `application/octet-stream`; frames are PNG.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use anyhow::Context;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use agentlens::agent::Policy;
use agentlens::analysis::{attention_map, max_attention_map, top_attended_frames};
use agentlens::intervention::{
    ablate_and_eval, compute_steering_vector, impact_metrics, sweep_frame, AblationMode, HeadMeans,
    InterventionSpec, SteerSite, SteeringRecipe,
};
use agentlens::trace::{export_trajectory, load_trace, save_trace, Recorder, RecordingPlan, Trace};
use agentlens::vision::{
    feature_viz, receptive_field, receptive_field_table, saliency, OptimizationConfig, SaliencyMethod,
    SaliencyTarget,
};
use agentlens::world::{build_scenario, generate_world, ObsFrame, ScenarioSpec, FRAME_SIZE};

use crate::commands::model_config;
use crate::output::rgb_png;
use crate::Model;

/// Overrides the configured data directory.
pub const DATA_ENV: &str = "AGENTLENS_DATA";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    /// Checkpoint served by the lab; a seeded fresh policy when absent.
    pub policy: Option<PathBuf>,
    pub model: Model,
    pub init_seed: u64,
    /// Threads for request handling and for analyses.
    pub workers: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            data_dir: "agentlens-data".into(),
            policy: None,
            model: Model::Default,
            init_seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

impl LabConfig {
    pub fn from_file(path: &FsPath) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).map_err(|e| crate::commands::UsageError(format!("lab config: {e}")).into())
    }

    pub fn validate(&self) -> anyhow::Result<SocketAddr> {
        let addr: SocketAddr = self
            .listen
            .parse()
            .map_err(|_| crate::commands::UsageError(format!("invalid listen address '{}'", self.listen)))?;
        std::fs::create_dir_all(self.traces_dir())
            .with_context(|| format!("data directory {} is not writable", self.data_dir.display()))?;
        let probe = self.data_dir.join(".write-probe");
        std::fs::write(&probe, b"")
            .with_context(|| format!("data directory {} is not writable", self.data_dir.display()))?;
        let _ = std::fs::remove_file(probe);
        Ok(addr)
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.data_dir.join("traces")
    }
}

struct Session {
    recorder: Recorder,
    completed: bool,
}

/// Shared service state.
pub struct Lab {
    pub config: LabConfig,
    pub policy: Arc<Policy>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    traces: RwLock<HashMap<String, Arc<Trace>>>,
    next_id: AtomicU64,
}

impl Lab {
    pub fn new(config: LabConfig) -> anyhow::Result<Self> {
        let policy = match &config.policy {
            Some(p) => Policy::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => Policy::new(model_config(config.model), config.init_seed)?,
        };
        Ok(Self::with_policy(config, policy))
    }

    pub fn with_policy(config: LabConfig, policy: Policy) -> Self {
        Self {
            config,
            policy: Arc::new(policy),
            sessions: RwLock::new(HashMap::new()),
            traces: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session '{id}'")))
    }

    /// Completed traces are immutable and cached; live sessions are snapshotted.
    fn trace(&self, id: &str) -> Result<Arc<Trace>, ApiError> {
        if let Some(t) = self.traces.read().unwrap().get(id) {
            return Ok(t.clone());
        }
        if let Some(s) = self.sessions.read().unwrap().get(id).cloned() {
            let s = s.lock().unwrap();
            if !s.completed {
                return Ok(Arc::new(s.recorder.snapshot()));
            }
        }
        if !valid_id(id) {
            return Err(ApiError::not_found(format!("no trace '{id}'")));
        }
        let dir = self.config.traces_dir().join(id);
        if !dir.is_dir() {
            return Err(ApiError::not_found(format!("no trace '{id}'")));
        }
        let t = Arc::new(load_trace(&dir)?);
        self.traces.write().unwrap().insert(id.to_string(), t.clone());
        Ok(t)
    }

    fn check_policy(&self, trace: &Trace) -> Result<(), ApiError> {
        if trace.manifest.policy_digest != self.policy.digest() {
            return Err(ApiError(
                StatusCode::CONFLICT,
                format!("trace was recorded by policy {}, the lab serves {}", trace.manifest.policy_digest, self.policy.digest()),
            ));
        }
        Ok(())
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Error response: status plus `{ "error": message }`.
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl ApiError {
    fn not_found(msg: String) -> Self {
        Self(StatusCode::NOT_FOUND, msg)
    }

    fn bad(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl From<agentlens::Error> for ApiError {
    fn from(e: agentlens::Error) -> Self {
        use agentlens::Error as E;
        let status = match &e {
            E::Usage(_) | E::Config(_) | E::Shape(_) | E::NumericDomain(_) | E::Json(_) => StatusCode::BAD_REQUEST,
            E::MissingData(_) | E::Data(_) => StatusCode::UNPROCESSABLE_ENTITY,
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn octet(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response()
}

pub fn router(lab: Arc<Lab>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/model/rf", get(model_rf))
        .route("/sessions", post(create_session))
        .route("/sessions/:id/step", post(step_session))
        .route("/sessions/:id/rollout", post(rollout_session))
        .route("/sessions/:id/interventions", post(set_interventions))
        .route("/traces", get(list_traces))
        .route("/traces/:id", get(get_trace))
        .route("/traces/:id/manifest", get(get_manifest))
        .route("/traces/:id/arrays/:name", get(get_array))
        .route("/traces/:id/frames/:file", get(get_frame))
        .route("/traces/:id/attention", get(get_attention))
        .route("/traces/:id/max-attention", get(get_max_attention))
        .route("/traces/:id/top-frames", get(get_top_frames))
        .route("/traces/:id/trajectory", get(get_trajectory))
        .route("/traces/:id/sweep", post(post_sweep))
        .route("/traces/:id/whatif", post(post_whatif))
        .route("/analysis/saliency", post(post_saliency))
        .route("/analysis/featviz", post(post_featviz))
        .route("/steering/vector", post(post_steering_vector))
        .with_state(lab)
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn model(State(lab): State<Arc<Lab>>) -> Json<Value> {
    Json(json!({
        "config": lab.policy.config,
        "digest": lab.policy.digest(),
        "parameters": lab.policy.param_count(),
    }))
}

async fn model_rf(State(lab): State<Arc<Lab>>) -> ApiResult<Json<Value>> {
    let stack = &lab.policy.config.conv;
    let fields = (0..stack.len())
        .map(|l| receptive_field(stack, l))
        .collect::<agentlens::Result<Vec<_>>>()?;
    Ok(Json(json!({ "table": receptive_field_table(stack), "fields": fields })))
}

#[derive(Deserialize)]
struct CreateSession {
    /// Preset name.
    scenario: Option<String>,
    /// Full scenario spec; takes precedence over `scenario`.
    spec: Option<ScenarioSpec>,
    /// Procedural world seed; takes precedence over both.
    procedural: Option<u64>,
    #[serde(default = "default_size")]
    size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    store_outputs: bool,
    #[serde(default)]
    interventions: Vec<InterventionSpec>,
}

fn default_size() -> usize {
    32
}

async fn create_session(State(lab): State<Arc<Lab>>, Json(req): Json<CreateSession>) -> ApiResult<Json<Value>> {
    let (world, label) = if let Some(s) = req.procedural {
        (generate_world(s, (req.size, req.size))?, format!("procedural:{s}"))
    } else if let Some(spec) = &req.spec {
        (build_scenario(spec)?, spec.name.clone())
    } else {
        let name = req.scenario.clone().unwrap_or_else(|| "villager_tree".into());
        (build_scenario(&ScenarioSpec::preset(&name, req.seed)?)?, name)
    };
    let plan = RecordingPlan {
        store_outputs: req.store_outputs,
        store_mlp: true,
        frame_stride: 1,
        scenario: label.clone(),
    };
    let recorder = Recorder::new(world, &lab.policy, plan, req.seed, req.interventions)?;
    let id = format!("s{}", lab.next_id.fetch_add(1, Ordering::SeqCst));
    lab.sessions.write().unwrap().insert(
        id.clone(),
        Arc::new(Mutex::new(Session {
            recorder,
            completed: false,
        })),
    );
    Ok(Json(json!({ "id": id, "scenario": label, "seed": req.seed, "frames": 0 })))
}

#[derive(Deserialize)]
struct StepRequest {
    #[serde(default = "one")]
    n: usize,
    interventions: Option<Vec<InterventionSpec>>,
}

fn one() -> usize {
    1
}

fn last_frame_summary(tr: &Trace) -> Value {
    match tr.len() {
        0 => Value::Null,
        n => {
            let t = n - 1;
            json!({
                "t": t,
                "probabilities": tr.distribution(t).flat_probs(),
                "action": tr.actions[t].indices(),
                "position": tr.positions[t],
                "events": tr.events_at(t).collect::<Vec<_>>(),
            })
        }
    }
}

async fn step_session(State(lab): State<Arc<Lab>>, Path(id): Path<String>, Json(req): Json<StepRequest>) -> ApiResult<Json<Value>> {
    let s = lab.session(&id)?;
    let policy = lab.policy.clone();
    blocking(move || {
        let mut s = s.lock().unwrap();
        if s.completed {
            return Err(ApiError(StatusCode::CONFLICT, format!("session '{id}' has completed")));
        }
        if let Some(specs) = req.interventions {
            s.recorder.set_interventions(&policy, specs)?;
        }
        let mut stepped = 0;
        for _ in 0..req.n {
            if !s.recorder.step(&policy)? {
                break;
            }
            stepped += 1;
        }
        Ok(Json(json!({
            "id": id,
            "stepped": stepped,
            "frames": s.recorder.frames_recorded(),
            "done": s.recorder.done(),
            "last": last_frame_summary(s.recorder.trace()),
        })))
    })
    .await
}

#[derive(Deserialize)]
struct RolloutRequest {
    max_steps: usize,
}

async fn rollout_session(State(lab): State<Arc<Lab>>, Path(id): Path<String>, Json(req): Json<RolloutRequest>) -> ApiResult<Json<Value>> {
    let s = lab.session(&id)?;
    let lab2 = lab.clone();
    blocking(move || {
        let mut s = s.lock().unwrap();
        if s.completed {
            return Err(ApiError(StatusCode::CONFLICT, format!("session '{id}' has completed")));
        }
        s.recorder.run(&lab2.policy, req.max_steps)?;
        let trace = s.recorder.snapshot();
        save_trace(&trace, &lab2.config.traces_dir().join(&id))?;
        let frames = trace.len();
        lab2.traces.write().unwrap().insert(id.clone(), Arc::new(trace));
        s.completed = true;
        Ok(Json(json!({ "id": id, "trace": id, "frames": frames })))
    })
    .await
}

#[derive(Deserialize)]
struct InterventionsRequest {
    interventions: Vec<InterventionSpec>,
}

async fn set_interventions(
    State(lab): State<Arc<Lab>>,
    Path(id): Path<String>,
    Json(req): Json<InterventionsRequest>,
) -> ApiResult<Json<Value>> {
    let s = lab.session(&id)?;
    let policy = lab.policy.clone();
    blocking(move || {
        let mut s = s.lock().unwrap();
        if s.completed {
            return Err(ApiError(StatusCode::CONFLICT, format!("session '{id}' has completed")));
        }
        s.recorder.set_interventions(&policy, req.interventions)?;
        Ok(Json(json!({ "id": id, "interventions": s.recorder.interventions() })))
    })
    .await
}

async fn list_traces(State(lab): State<Arc<Lab>>) -> ApiResult<Json<Value>> {
    let mut out = Vec::new();
    for (id, s) in lab.sessions.read().unwrap().iter() {
        let s = s.lock().unwrap();
        if !s.completed {
            out.push(json!({ "id": id, "frames": s.recorder.frames_recorded(), "live": true }));
        }
    }
    if let Ok(rd) = std::fs::read_dir(lab.config.traces_dir()) {
        for e in rd.flatten() {
            let id = e.file_name().to_string_lossy().to_string();
            if let Ok(m) = agentlens::trace::load_manifest(&e.path()) {
                out.push(json!({ "id": id, "frames": m.frames, "scenario": m.scenario, "live": false }));
            }
        }
    }
    out.sort_by(|a, b| a["id"].as_str().cmp(&b["id"].as_str()));
    Ok(Json(Value::Array(out)))
}

async fn get_trace(State(lab): State<Arc<Lab>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let tr = lab.trace(&id)?;
    let probs: Vec<Vec<f32>> = (0..tr.len()).map(|t| tr.distribution(t).flat_probs()).collect();
    let actions: Vec<[usize; 4]> = tr.actions.iter().map(|a| a.indices()).collect();
    Ok(Json(json!({
        "id": id,
        "manifest": tr.manifest,
        "probabilities": probs,
        "actions": actions,
        "positions": tr.positions,
    })))
}

async fn get_manifest(State(lab): State<Arc<Lab>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let tr = lab.trace(&id)?;
    Ok(Json(serde_json::to_value(&tr.manifest).map_err(agentlens::Error::from)?))
}

async fn get_array(State(lab): State<Arc<Lab>>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let tr = lab.trace(&id)?;
    let file = format!("{}.bin", name.trim_end_matches(".bin"));
    let bytes = blocking(move || {
        tr.to_files()?
            .into_iter()
            .find(|(f, _)| *f == file)
            .map(|(_, b)| b)
            .ok_or_else(|| ApiError::not_found(format!("no array '{name}'")))
    })
    .await?;
    Ok(octet(bytes))
}

async fn get_frame(State(lab): State<Arc<Lab>>, Path((id, file)): Path<(String, String)>) -> ApiResult<Response> {
    let t: usize = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError::not_found(format!("no frame '{file}'")))?;
    let tr = lab.trace(&id)?;
    let f: ObsFrame = tr
        .frame(t)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("frame {t} is not stored")))?;
    let png = rgb_png(FRAME_SIZE, FRAME_SIZE, &f.pixels).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
struct AttentionQuery {
    layer: usize,
    head: usize,
    t0: Option<usize>,
    t1: Option<usize>,
}

async fn get_attention(State(lab): State<Arc<Lab>>, Path(id): Path<String>, Query(q): Query<AttentionQuery>) -> ApiResult<Response> {
    let tr = lab.trace(&id)?;
    let m = attention_map(&tr, q.layer, q.head)?;
    let t1 = q.t1.unwrap_or(m.rows).min(m.rows);
    let t0 = q.t0.unwrap_or(0);
    if t0 > t1 {
        return Err(ApiError::bad(format!("empty range {t0}..{t1}")));
    }
    Ok(octet(m.rows_range(t0, t1).to_ndarray().to_bytes()))
}

async fn get_max_attention(State(lab): State<Arc<Lab>>, Path(id): Path<String>) -> ApiResult<Response> {
    let tr = lab.trace(&id)?;
    Ok(octet(max_attention_map(&tr).to_ndarray().to_bytes()))
}

#[derive(Deserialize)]
struct TopQuery {
    t: usize,
}

async fn get_top_frames(State(lab): State<Arc<Lab>>, Path(id): Path<String>, Query(q): Query<TopQuery>) -> ApiResult<Json<Value>> {
    let tr = lab.trace(&id)?;
    Ok(Json(json!(top_attended_frames(&tr, q.t)?)))
}

async fn get_trajectory(State(lab): State<Arc<Lab>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let tr = lab.trace(&id)?;
    Ok(Json(json!(export_trajectory(&tr))))
}

#[derive(Deserialize)]
struct SweepRequest {
    frame: usize,
    #[serde(default)]
    mode: Option<AblationMode>,
}

async fn post_sweep(State(lab): State<Arc<Lab>>, Path(id): Path<String>, Json(req): Json<SweepRequest>) -> ApiResult<Json<Value>> {
    let tr = lab.trace(&id)?;
    lab.check_policy(&tr)?;
    let policy = lab.policy.clone();
    blocking(move || {
        let mode = req.mode.unwrap_or(AblationMode::Zero);
        let means = match mode {
            AblationMode::Mean => Some(HeadMeans::from_trace(&tr)?),
            AblationMode::Zero => None,
        };
        let r = sweep_frame(&policy, &tr, req.frame, mode, means.as_ref())?;
        let heat: Vec<Vec<f32>> = (0..r.layers).map(|l| r.attack_heatmap(l)).collect();
        Ok(Json(json!({
            "result": r,
            "targets": r.target_count(),
            "max_abs_dp_attack": r.max_attack_impact(),
            "attack_heatmaps": heat,
            "dp": r.dp,
            "dlogp": r.dlogp,
        })))
    })
    .await
}

#[derive(Deserialize)]
struct WhatIfRequest {
    frame: usize,
    intervention: InterventionSpec,
}

async fn post_whatif(State(lab): State<Arc<Lab>>, Path(id): Path<String>, Json(req): Json<WhatIfRequest>) -> ApiResult<Json<Value>> {
    let tr = lab.trace(&id)?;
    lab.check_policy(&tr)?;
    let policy = lab.policy.clone();
    blocking(move || {
        let (base, modified) = ablate_and_eval(&policy, &tr, req.frame, &req.intervention)?;
        let impact = impact_metrics(&base, &modified)?;
        Ok(Json(json!({
            "baseline": base.flat_probs(),
            "modified": modified.flat_probs(),
            "impact": impact,
        })))
    })
    .await
}

#[derive(Deserialize)]
struct SaliencyRequest {
    trace: String,
    frame: usize,
    target: SaliencyTarget,
    #[serde(default)]
    method: Option<SaliencyMethod>,
}

async fn post_saliency(State(lab): State<Arc<Lab>>, Json(req): Json<SaliencyRequest>) -> ApiResult<Json<Value>> {
    let tr = lab.trace(&req.trace)?;
    lab.check_policy(&tr)?;
    let policy = lab.policy.clone();
    blocking(move || {
        let m = saliency(&policy, tr.all_frames()?, req.frame, req.target, req.method.unwrap_or(SaliencyMethod::Gradient))?;
        Ok(Json(json!(m)))
    })
    .await
}

#[derive(Deserialize)]
struct FeatvizRequest {
    layer: usize,
    channel: usize,
    #[serde(default)]
    config: Option<OptimizationConfig>,
}

async fn post_featviz(State(lab): State<Arc<Lab>>, Json(req): Json<FeatvizRequest>) -> ApiResult<Json<Value>> {
    let policy = lab.policy.clone();
    blocking(move || {
        let fv = feature_viz(&policy, req.layer, req.channel, &req.config.unwrap_or_default())?;
        Ok(Json(json!(fv)))
    })
    .await
}

#[derive(Deserialize)]
struct FrameSet {
    trace: String,
    frames: Vec<usize>,
}

#[derive(Deserialize)]
struct SteeringRequest {
    positive: Option<FrameSet>,
    negative: Option<FrameSet>,
    #[serde(default)]
    recipe: Option<SteeringRecipe>,
}

async fn post_steering_vector(State(lab): State<Arc<Lab>>, Json(req): Json<SteeringRequest>) -> ApiResult<Json<Value>> {
    let collect = |set: &FrameSet| -> ApiResult<Vec<ObsFrame>> {
        let tr = lab.trace(&set.trace)?;
        set.frames
            .iter()
            .map(|&t| tr.frame(t).cloned().ok_or_else(|| ApiError::bad(format!("frame {t} is not stored in '{}'", set.trace))))
            .collect()
    };
    let explicit = match (&req.positive, &req.negative) {
        (Some(p), Some(n)) => Some((collect(p)?, collect(n)?)),
        (None, None) => None,
        _ => return Err(ApiError::bad("give both positive and negative frames, or neither")),
    };
    let policy = lab.policy.clone();
    blocking(move || {
        let (pos, neg) = match explicit {
            Some(pn) => pn,
            None => req.recipe.unwrap_or_default().frames()?,
        };
        let v = compute_steering_vector(&policy, &pos, &neg, SteerSite::Block0Mlp)?;
        Ok(Json(json!({ "site": SteerSite::Block0Mlp, "vector": v, "positives": pos.len(), "negatives": neg.len() })))
    })
    .await
}

/// Binds, then serves until interrupted.
pub fn serve_blocking(cfg: LabConfig) -> anyhow::Result<()> {
    let addr = cfg.validate()?;
    let workers = cfg.workers.max(1);
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(workers)
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let lab = Arc::new(Lab::new(cfg)?);
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))?;
        eprintln!("agentlens serving on http://{}", listener.local_addr()?);
        axum::serve(listener, router(lab))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
