//! Screening service: symptom sessions, per-site uploads, assessment, and
//! export of stored recordings as a provisional-label manifest.
//!
//! Routes:
//!
//! - `POST /sessions` `{symptoms[], other?}` → `{session_id}`
//! - `POST /sessions/{id}/recordings?site=RUL` (WAV body) → `{recording_ref, quality_flags[]}`
//! - `POST /sessions/{id}/assess` → [`AssessmentResult`]
//! - `GET /sessions/{id}` → [`Session`]
//! - `GET /export/manifest[?session=ID]` → manifest text
//! - `GET /health`

pub mod config;
pub mod error;
pub mod inference;
pub mod session;
pub mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex};

use auscult::datasets::{Manifest, ManifestEntry};
use auscult::signal::wav::decode_wav_bytes;
use auscult::signal::{DeviceDomain, RawLabel, Site};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use config::{ServiceConfig, SiteAggregation};
pub use error::{Result, ServiceError};
pub use inference::Classifier;
pub use session::{AssessmentResult, QualityFlag, Recommendation, RecordingRef, Session, SessionStatus, Symptom};
pub use store::{MemoryStore, RedbStore, Store};

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    cfg: ServiceConfig,
    store: Arc<dyn Store>,
    classifier: Option<Arc<Classifier>>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig, store: Arc<dyn Store>, classifier: Option<Classifier>) -> Self {
        Self {
            inner: Arc::new(Inner {
                cfg,
                store,
                classifier: classifier.map(Arc::new),
                locks: Mutex::new(HashMap::new()),
            }),
        }
    }

    /// Opens the on-disk store and, if configured, the checkpoint.
    pub fn from_config(cfg: ServiceConfig) -> Result<Self> {
        let store = Arc::new(RedbStore::open(&cfg.storage_dir)?);
        let classifier = match &cfg.checkpoint {
            Some(p) => Some(Classifier::load(p, cfg.preprocess, cfg.clip_s, cfg.hop_s)?),
            None => {
                warn!("no checkpoint configured; assessments will be refused");
                None
            }
        };
        Ok(Self::new(cfg, store, classifier))
    }

    fn session_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.inner
            .locks
            .lock()
            .expect("lock table poisoned")
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    fn load_session(&self, id: &str) -> Result<Session> {
        self.inner
            .store
            .get_session(id)?
            .ok_or_else(|| ServiceError::NotFound(format!("session `{id}`")))
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.inner.cfg.max_upload_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/recordings", post(upload_recording))
        .route("/sessions/{id}/assess", post(assess))
        .route("/export/manifest", get(export_manifest))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds `cfg.bind` and serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<()> {
    let bind = cfg.bind.clone();
    let state = AppState::from_config(cfg)?;
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::ServiceUnavailable(format!("worker failed: {e}")))?
}

#[derive(Serialize)]
struct Health {
    model_loaded: bool,
    model_version: Option<String>,
}

async fn health(State(st): State<AppState>) -> Json<Health> {
    let c = st.inner.classifier.as_ref();
    Json(Health {
        model_loaded: c.is_some(),
        model_version: c.map(|c| c.version().to_string()),
    })
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CreateSession {
    symptoms: BTreeSet<Symptom>,
    other: Option<String>,
}

#[derive(Serialize)]
struct Created {
    session_id: String,
}

async fn create_session(State(st): State<AppState>, Json(req): Json<CreateSession>) -> Result<impl IntoResponse> {
    let other = req.other.filter(|s| !s.trim().is_empty());
    let session = Session::new(req.symptoms, other);
    let id = session.session_id.clone();
    let store = st.inner.store.clone();
    blocking(move || store.put_session(&session)).await?;
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<Session>> {
    let s = st.clone();
    Ok(Json(blocking(move || s.load_session(&id)).await?))
}

#[derive(Deserialize)]
struct SiteQuery {
    site: String,
}

#[derive(Serialize)]
struct Uploaded {
    recording_ref: String,
    site: Site,
    duration_s: f64,
    quality_flags: Vec<QualityFlag>,
}

fn clipped_fraction(samples: &[f64]) -> f64 {
    // 16-bit full scale decodes to 32767/32768, so allow a small margin.
    let n = samples.iter().filter(|s| s.abs() >= 1.0 - 1e-3).count();
    n as f64 / samples.len().max(1) as f64
}

async fn upload_recording(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SiteQuery>,
    body: Bytes,
) -> Result<Json<Uploaded>> {
    let site: Site = q
        .site
        .parse()
        .ok()
        .filter(|s| *s != Site::Unknown)
        .ok_or_else(|| ServiceError::InvalidRequest(format!("site must be one of RUL, LUL, RLL, LLL, got `{}`", q.site)))?;
    let lock = st.session_lock(&id);
    let _guard = lock.lock().await;
    let st2 = st.clone();
    blocking(move || {
        let mut session = st2.load_session(&id)?;
        if session.status != SessionStatus::Open {
            return Err(ServiceError::PreconditionFailed("session has already been assessed".into()));
        }
        let cfg = &st2.inner.cfg;
        let pcm = decode_wav_bytes(&body).map_err(|e| ServiceError::BadAudio(e.to_string()))?;
        if pcm.samples.is_empty() || pcm.sample_rate_hz == 0 {
            return Err(ServiceError::BadAudio("no samples".into()));
        }
        if pcm.samples.iter().any(|s| !s.is_finite()) {
            return Err(ServiceError::BadAudio("non-finite samples".into()));
        }
        let duration_s = pcm.samples.len() as f64 / pcm.sample_rate_hz as f64;
        if duration_s < cfg.min_duration_s {
            return Err(ServiceError::TooShort {
                duration_s,
                min_s: cfg.min_duration_s,
            });
        }
        let mut quality_flags = Vec::new();
        if clipped_fraction(&pcm.samples) > cfg.clipping_fraction {
            quality_flags.push(QualityFlag::Clipping);
        }
        let hash = st2.inner.store.put_blob(&body)?;
        session.attach(RecordingRef {
            recording_ref: hash.clone(),
            site,
            sample_rate_hz: pcm.sample_rate_hz,
            duration_s,
            quality_flags: quality_flags.clone(),
            uploaded_at: session::now_ms(),
        });
        st2.inner.store.put_session(&session)?;
        Ok(Json(Uploaded {
            recording_ref: hash,
            site,
            duration_s,
            quality_flags,
        }))
    })
    .await
}

async fn assess(State(st): State<AppState>, Path(id): Path<String>) -> Result<Json<AssessmentResult>> {
    let lock = st.session_lock(&id);
    let _guard = lock.lock().await;
    let st2 = st.clone();
    blocking(move || {
        let mut session = st2.load_session(&id)?;
        if let Some(done) = session.result.clone() {
            return Ok(Json(done));
        }
        if session.recordings.is_empty() {
            return Err(ServiceError::PreconditionFailed("session has no recordings".into()));
        }
        let classifier = st2
            .inner
            .classifier
            .clone()
            .ok_or_else(|| ServiceError::ServiceUnavailable("no model loaded".into()))?;
        let mut sites = BTreeMap::new();
        for (site, rec) in &session.recordings {
            let bytes = st2
                .inner
                .store
                .get_blob(&rec.recording_ref)?
                .ok_or_else(|| ServiceError::ServiceUnavailable(format!("blob {} missing", rec.recording_ref)))?;
            let pcm = decode_wav_bytes(&bytes).map_err(|e| ServiceError::BadAudio(e.to_string()))?;
            let probs = classifier.clip_probabilities(pcm.samples, pcm.sample_rate_hz)?;
            sites.insert(*site, (rec.recording_ref.clone(), probs));
        }
        let cfg = &st2.inner.cfg;
        let result = AssessmentResult::decide(&id, sites, cfg.threshold, cfg.aggregation, classifier.version());
        session.result = Some(result.clone());
        session.status = SessionStatus::Assessed;
        st2.inner.store.put_session(&session)?;
        Ok(Json(result))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
pub struct ExportFilter {
    /// Restrict to one session.
    pub session: Option<String>,
}

/// Manifest of every assessed recording, labeled provisionally with its site verdict.
///
/// Unassessed sessions have no verdict to carry and are left out. Identical
/// audio uploaded twice shares one blob and appears once.
pub fn export_corpus(store: &dyn Store, filter: &ExportFilter) -> Result<Manifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for s in store.sessions()? {
        if filter.session.as_ref().is_some_and(|id| *id != s.session_id) {
            continue;
        }
        let Some(result) = &s.result else { continue };
        for (site, rec) in &s.recordings {
            if !seen.insert(rec.recording_ref.clone()) {
                continue;
            }
            let mut e = ManifestEntry::new(
                store.blob_location(&rec.recording_ref),
                DeviceDomain::Smartphone,
                *site,
                RawLabel::Unlabeled,
                s.session_id.clone(),
                rec.sample_rate_hz,
            );
            e.verified = false;
            e.provisional_label = result.sites.get(site).map(|r| r.verdict);
            entries.push(e);
        }
    }
    Manifest::new(entries, "service export; labels are unverified model verdicts")
        .map_err(|e| ServiceError::ServiceUnavailable(e.to_string()))
}

async fn export_manifest(State(st): State<AppState>, Query(filter): Query<ExportFilter>) -> Result<impl IntoResponse> {
    let store = st.inner.store.clone();
    let m = blocking(move || export_corpus(store.as_ref(), &filter)).await?;
    Ok(([(header::CONTENT_TYPE, "text/tab-separated-values; charset=utf-8")], m.to_text()))
}
