//! HTTP routes.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pim_core::encode::{drive_encoder, EncodeJob};
use pim_core::media::{load_y4m, save_pgm};
use pim_core::{ImportanceMap, VideoSequence};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::brush::{Coverage, Stroke};
use crate::error::{Result, ServiceError};
use crate::session::{self, check_name, session_id, PreviewConfig, Session, SessionState, Side, Verdict};
use crate::store::Store;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Holds `<video_id>.y4m` files.
    pub videos_dir: PathBuf,
    pub store_dir: PathBuf,
    pub preview: PreviewConfig,
    /// External encoder run on every preview when set.
    pub encoder_template: Option<String>,
    pub work_dir: PathBuf,
    /// Seeds the A/B shuffle; entropy from the OS when unset.
    pub shuffle_seed: Option<u64>,
}

impl ServiceConfig {
    pub fn new(videos_dir: impl Into<PathBuf>, store_dir: impl Into<PathBuf>) -> Self {
        let store_dir = store_dir.into();
        Self {
            videos_dir: videos_dir.into(),
            work_dir: store_dir.join("work"),
            store_dir,
            preview: PreviewConfig::default(),
            encoder_template: None,
            shuffle_seed: None,
        }
    }
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

struct Inner {
    cfg: ServiceConfig,
    store: Store,
    videos: RwLock<HashMap<String, Arc<VideoSequence>>>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    rng: Mutex<StdRng>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Result<Self> {
        let store = Store::open(&cfg.store_dir)?;
        let rng = match cfg.shuffle_seed {
            Some(seed) => StdRng::seed_from_u64(seed),
            None => StdRng::from_entropy(),
        };
        Ok(Self(Arc::new(Inner {
            cfg,
            store,
            videos: RwLock::default(),
            sessions: Mutex::default(),
            rng: Mutex::new(rng),
        })))
    }

    fn video(&self, id: &str) -> Result<Arc<VideoSequence>> {
        check_name("video id", id)?;
        if let Some(v) = self.0.videos.read().expect("video cache poisoned").get(id) {
            return Ok(v.clone());
        }
        let path = self.0.cfg.videos_dir.join(format!("{id}.y4m"));
        let file = std::fs::File::open(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ServiceError::NotFound(format!("video {id}")),
            _ => e.into(),
        })?;
        let video = Arc::new(load_y4m(BufReader::new(file))?);
        self.0.videos.write().expect("video cache poisoned").insert(id.into(), video.clone());
        Ok(video)
    }

    /// Looks a session up in memory, then in the store.
    fn session(&self, id: &str) -> Result<Option<SessionHandle>> {
        let mut sessions = self.0.sessions.lock().expect("session table poisoned");
        if let Some(s) = sessions.get(id) {
            return Ok(Some(s.clone()));
        }
        let Some(record) = self.0.store.load(id)? else { return Ok(None) };
        let video = self.video(&record.video_id)?;
        let handle = Arc::new(tokio::sync::Mutex::new(Session::restore(record, &video)?));
        sessions.insert(id.into(), handle.clone());
        Ok(Some(handle))
    }

    fn existing(&self, id: &str) -> Result<SessionHandle> {
        self.session(id)?.ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    fn create(&self, annotator: &str, video_id: &str) -> Result<(SessionHandle, bool)> {
        check_name("annotator", annotator)?;
        let video = self.video(video_id)?;
        let id = session_id(annotator, video_id);
        if let Some(s) = self.session(&id)? {
            return Ok((s, false));
        }
        let s = Session::new(annotator, video_id, &video)?;
        self.0.store.save(&s.record)?;
        let handle = Arc::new(tokio::sync::Mutex::new(s));
        let mut sessions = self.0.sessions.lock().expect("session table poisoned");
        Ok((sessions.entry(id).or_insert(handle).clone(), true))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/maps/{n}", get(get_map))
        .route("/sessions/{id}/strokes", post(post_stroke))
        .route("/sessions/{id}/preview", post(post_preview))
        .route("/sessions/{id}/comparison", post(post_comparison))
        .route("/videos/{id}/frame/{n}", get(get_frame))
        .route("/resume/{annotator}/{video}", get(resume))
        .with_state(state)
}

pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> Result<()> {
    let app = router(AppState::new(cfg)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub annotator: String,
    pub video: String,
}

#[derive(Debug, Serialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub annotator: String,
    pub video_id: String,
    pub state: SessionState,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub strokes: usize,
    pub verdicts: Vec<Verdict>,
    pub coverage: Vec<Coverage>,
    pub resume_url: String,
}

fn summary(s: &Session) -> SessionSummary {
    let r = &s.record;
    SessionSummary {
        session_id: r.session_id.clone(),
        annotator: r.annotator.clone(),
        video_id: r.video_id.clone(),
        state: r.state,
        frames: s.maps().len(),
        width: s.maps()[0].width(),
        height: s.maps()[0].height(),
        strokes: r.strokes.len(),
        verdicts: r.verdicts.clone(),
        coverage: s.coverage(),
        resume_url: format!("/resume/{}/{}", r.annotator, r.video_id),
    }
}

fn pgm(map: &ImportanceMap) -> Result<Response> {
    let mut bytes = Vec::new();
    save_pgm(map, &mut bytes)?;
    Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], bytes).into_response())
}

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateSession>) -> Result<Response> {
    let (handle, created) = app.create(&req.annotator, &req.video)?;
    let body = summary(&*handle.lock().await);
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(body)).into_response())
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionSummary>> {
    let handle = app.existing(&id)?;
    let s = handle.lock().await;
    Ok(Json(summary(&s)))
}

async fn resume(State(app): State<AppState>, Path((annotator, video)): Path<(String, String)>) -> Result<Json<SessionSummary>> {
    check_name("annotator", &annotator)?;
    check_name("video id", &video)?;
    let handle = app
        .session(&session_id(&annotator, &video))?
        .ok_or_else(|| ServiceError::NotFound(format!("no session for {annotator} on {video}")))?;
    let s = handle.lock().await;
    Ok(Json(summary(&s)))
}

async fn get_map(State(app): State<AppState>, Path((id, n)): Path<(String, usize)>) -> Result<Response> {
    let handle = app.existing(&id)?;
    let s = handle.lock().await;
    let map = s.maps().get(n).ok_or_else(|| ServiceError::NotFound(format!("frame {n}")))?;
    pgm(map)
}

async fn get_frame(State(app): State<AppState>, Path((id, n)): Path<(String, usize)>) -> Result<Response> {
    let video = app.video(&id)?;
    let frame = video.frames().get(n).ok_or_else(|| ServiceError::NotFound(format!("frame {n} of {id}")))?;
    pgm(&ImportanceMap::new(frame.width(), frame.height(), frame.luma().to_vec())?)
}

#[derive(Debug, Serialize)]
pub struct StrokeResponse {
    pub applied: bool,
    pub state: SessionState,
    pub strokes: usize,
    /// Coverage of the stroke's first frame.
    pub coverage: Coverage,
}

async fn post_stroke(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(stroke): Json<Stroke>,
) -> Result<Json<StrokeResponse>> {
    let handle = app.existing(&id)?;
    let mut s = handle.lock().await;
    let frame = stroke.frame;
    let applied = s.apply(stroke)?;
    if applied {
        app.0.store.save(&s.record)?;
    }
    Ok(Json(StrokeResponse {
        applied,
        state: s.record.state,
        strokes: s.record.strokes.len(),
        coverage: frame_coverage(&s, frame),
    }))
}

fn frame_coverage(s: &Session, frame: usize) -> Coverage {
    s.coverage().get(frame).copied().unwrap_or(Coverage { painted: 0.0, fine: 0.0 })
}

async fn post_preview(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<session::Preview>> {
    let handle = app.existing(&id)?;
    let s = handle.lock().await;
    if s.record.state == SessionState::Comparing {
        return Err(ServiceError::Conflict("session is comparing; submit a choice first".into()));
    }
    let video = app.video(&s.record.video_id)?;
    let maps = s.maps().to_vec();
    let cfg = app.0.cfg.clone();
    let work = cfg.work_dir.join(&s.record.session_id);
    // Holding the session lock keeps previews of one session in order; other
    // sessions proceed on the blocking pool.
    let preview = tokio::task::spawn_blocking(move || -> Result<session::Preview> {
        let mut p = session::preview(&maps, &video, &cfg.preview)?;
        if let (Some(template), Some(sidecar)) = (&cfg.encoder_template, &p.sidecar) {
            let job = EncodeJob {
                video: (*video).clone(),
                dqp: sidecar.clone(),
                target_bitrate_kbps: cfg.preview.target_bitrate_kbps,
                qp_base: cfg.preview.qp_base,
                command_template: Some(template.clone()),
            };
            p.encoded = Some(drive_encoder(&job, &work)?);
        }
        Ok(p)
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(preview))
}

#[derive(Debug, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum ComparisonRequest {
    /// Issue a shuffle key and put the session into the comparing state.
    Start,
    Choose { choice: Side, shuffle_key: String },
}

#[derive(Debug, Serialize)]
pub struct ComparisonResponse {
    pub state: SessionState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffle_key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

async fn post_comparison(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ComparisonRequest>,
) -> Result<Json<ComparisonResponse>> {
    let handle = app.existing(&id)?;
    let mut s = handle.lock().await;
    let response = match req {
        ComparisonRequest::Start => {
            let (key, side) = {
                let mut rng = app.0.rng.lock().expect("rng poisoned");
                let key: [u8; 16] = rng.gen();
                (hex::encode(key), if rng.gen::<bool>() { Side::A } else { Side::B })
            };
            s.start_comparison(key.clone(), side)?;
            ComparisonResponse { state: s.record.state, shuffle_key: Some(key), verdict: None }
        }
        ComparisonRequest::Choose { choice, shuffle_key } => {
            let verdict = s.submit(choice, &shuffle_key)?;
            ComparisonResponse { state: s.record.state, shuffle_key: None, verdict: Some(verdict) }
        }
    };
    app.0.store.save(&s.record)?;
    Ok(Json(response))
}

