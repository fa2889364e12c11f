use std::path::Path;
use std::sync::{Arc, OnceLock};

use auscult::datasets::{synth_generate, BinaryLabel, ClassCounts, Manifest, SynthesisSpec};
use auscult::features::FeatureConfig;
use auscult::model::checkpoint::Checkpoint;
use auscult::model::{MixStyleConfig, ModelConfig};
use auscult::signal::wav::encode_wav_bytes;
use auscult::signal::{DeviceDomain, RawLabel, Site};
use auscult::training::{load_domain, train_fold, ExperimentConfig, Sample, TrainConfig};
use auscult_service::{
    router, AppState, AssessmentResult, Classifier, MemoryStore, RedbStore, ServiceConfig, Session, SessionStatus,
};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const SITES: [Site; 4] = Site::RECORDING_ORDER;

fn experiment_config() -> ExperimentConfig {
    ExperimentConfig {
        features: FeatureConfig::compact(),
        ..ExperimentConfig::default()
    }
}

/// Small phone-domain model trained once per test binary on normal vs wheeze clips.
fn checkpoint() -> &'static Checkpoint {
    static CK: OnceLock<Checkpoint> = OnceLock::new();
    CK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let none = ClassCounts::default();
        let spec = SynthesisSpec::default().with_counts(
            none,
            ClassCounts {
                normal: 48,
                wheeze: 48,
                ..none
            },
        );
        let corpus = synth_generate(&spec, dir.path()).unwrap();
        let cfg = experiment_config();
        let data = load_domain(&corpus.smartphone, &cfg, None).unwrap();
        let samples: Vec<&Sample> = data.samples.iter().collect();
        let model = ModelConfig {
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            mixstyle: MixStyleConfig::disabled(),
            ..ModelConfig::for_features(&cfg.features, cfg.clip_samples()).unwrap()
        };
        let train = TrainConfig {
            epochs: 15,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_epochs: 1,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        train_fold(&samples, &cfg.features, &model, &train).unwrap().checkpoint
    })
}

fn classifier() -> Classifier {
    let cfg = ServiceConfig::default();
    Classifier::new(checkpoint().clone(), cfg.preprocess, cfg.clip_s, cfg.hop_s).unwrap()
}

/// Ten-second phone recordings: four normal, four wheeze.
fn session_audio() -> &'static (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    static AUDIO: OnceLock<(Vec<Vec<u8>>, Vec<Vec<u8>>)> = OnceLock::new();
    AUDIO.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let none = ClassCounts::default();
        let mut spec = SynthesisSpec::default().with_counts(
            none,
            ClassCounts {
                normal: 4,
                wheeze: 4,
                ..none
            },
        );
        spec.seed = 991;
        spec.clip_s = 10.0;
        let corpus = synth_generate(&spec, dir.path()).unwrap();
        let m = &corpus.smartphone;
        let pick = |label: RawLabel| -> Vec<Vec<u8>> {
            m.entries
                .iter()
                .filter(|e| e.raw_label == label)
                .map(|e| std::fs::read(m.resolve(e)).unwrap())
                .collect()
        };
        (pick(RawLabel::Normal), pick(RawLabel::Wheeze))
    })
}

fn app_with(store: Arc<dyn auscult_service::Store>, classifier: Option<Classifier>) -> Router {
    router(AppState::new(ServiceConfig::default(), store, classifier))
}

fn app() -> Router {
    app_with(Arc::new(MemoryStore::default()), Some(classifier()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Body) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = if method == "POST" && uri == "/sessions" {
        req.header("content-type", "application/json")
    } else {
        req
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Body) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn create(app: &Router, body: Value) -> String {
    let (s, v) = call_json(app, "POST", "/sessions", Body::from(body.to_string())).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn upload(app: &Router, id: &str, site: Site, bytes: Vec<u8>) -> (StatusCode, Value) {
    call_json(app, "POST", &format!("/sessions/{id}/recordings?site={site}"), Body::from(bytes)).await
}

async fn assess(app: &Router, id: &str) -> AssessmentResult {
    let (s, b) = call(app, "POST", &format!("/sessions/{id}/assess"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    serde_json::from_slice(&b).unwrap()
}

async fn full_session(app: &Router, files: &[Vec<u8>]) -> (String, AssessmentResult) {
    let id = create(app, json!({ "symptoms": ["cough"] })).await;
    for (site, bytes) in SITES.iter().zip(files) {
        let (s, v) = upload(app, &id, *site, bytes.clone()).await;
        assert_eq!(s, StatusCode::OK, "{v}");
    }
    let r = assess(app, &id).await;
    (id, r)
}

fn tone(seconds: f64, amplitude: f64) -> Vec<u8> {
    let rate = 48_000;
    let n = (seconds * rate as f64) as usize;
    let x: Vec<f64> = (0..n)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * 300.0 * i as f64 / rate as f64).sin())
        .collect();
    encode_wav_bytes(&x, rate).unwrap()
}

#[tokio::test]
async fn session_round_trip_assess_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(RedbStore::open(dir.path()).unwrap());
    let app = app_with(store, Some(classifier()));
    let (_, wheeze) = session_audio();

    let id = create(&app, json!({ "symptoms": ["cough", "fever"], "other": "since Monday" })).await;
    let (s, v) = call_json(&app, "GET", &format!("/sessions/{id}"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["symptoms"], json!(["fever", "cough"]));
    assert_eq!(v["status"], "open");

    for (site, bytes) in SITES.iter().zip(wheeze) {
        let (s, v) = upload(&app, &id, *site, bytes.clone()).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["recording_ref"].as_str().unwrap().len(), 64);
        assert_eq!(v["quality_flags"], json!([]));
    }
    let first = assess(&app, &id).await;
    assert_eq!(first.sites.len(), 4);
    for r in first.sites.values() {
        assert!((0.0..=1.0).contains(&r.p_abnormal));
        // 10 s at 3 s clips, 3 s hop.
        assert_eq!(r.clip_verdicts.len(), 3);
        assert!(r.clip_verdicts.iter().all(|c| (0.0..=1.0).contains(&c.p_abnormal)));
    }
    let any = first.sites.values().any(|r| r.p_abnormal >= 0.5);
    assert_eq!(first.overall_verdict == BinaryLabel::Abnormal, any);
    let v = serde_json::to_value(&first).unwrap();
    assert!(["no_action", "consult_physician"].contains(&v["recommendation"].as_str().unwrap()));

    // Idempotent: the stored result comes back unchanged, timestamp included.
    let again = assess(&app, &id).await;
    assert_eq!(again, first);
    let (_, v) = call_json(&app, "GET", &format!("/sessions/{id}"), Body::empty()).await;
    let session: Session = serde_json::from_value(v).unwrap();
    assert_eq!(session.status, SessionStatus::Assessed);
    assert_eq!(session.result.as_ref(), Some(&first));

    let (s, v) = upload(&app, &id, Site::Rul, wheeze[0].clone()).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "precondition_failed");

    // Export round-trips through the dataset loader.
    let (s, text) = call(&app, "GET", "/export/manifest", Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(text).unwrap();
    let path = dir.path().join("export.tsv");
    std::fs::write(&path, &text).unwrap();
    let m = Manifest::load(&path).unwrap();
    assert_eq!(m.len(), 4);
    for e in &m.entries {
        assert_eq!(e.device_domain, DeviceDomain::Smartphone);
        assert!(!e.verified);
        assert_eq!(e.patient_id, id);
        assert_eq!(e.provisional_label, Some(first.sites[&e.site].verdict));
    }
    let data = load_domain(&m, &experiment_config(), None).unwrap();
    assert_eq!(data.samples.len(), 4);
}

#[tokio::test]
async fn wheeze_session_scores_above_matched_normal_session() {
    let app = app();
    let (normal, wheeze) = session_audio();
    let (_, n) = full_session(&app, normal).await;
    let (_, w) = full_session(&app, wheeze).await;
    let mean = |r: &AssessmentResult| r.sites.values().map(|s| s.p_abnormal).sum::<f64>() / 4.0;
    let max = |r: &AssessmentResult| r.sites.values().map(|s| s.p_abnormal).fold(0.0, f64::max);
    assert!(mean(&w) > mean(&n), "wheeze {} vs normal {}", mean(&w), mean(&n));
    assert!(max(&w) > max(&n));
    for site in SITES {
        assert!(w.sites[&site].p_abnormal > n.sites[&site].p_abnormal, "{site}");
    }
}

#[tokio::test]
async fn upload_validation() {
    let app = app();
    let id = create(&app, json!({})).await;

    let (s, v) = upload(&app, &id, Site::Rul, tone(3.0, 0.5)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "too_short");

    let (s, v) = upload(&app, &id, Site::Rul, b"not a wav file".to_vec()).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "bad_audio");

    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/recordings?site=chest"), Body::from(tone(10.0, 0.5))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_request");

    let (s, v) = upload(&app, "no-such-session", Site::Rul, tone(10.0, 0.5)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_found");

    // Clipped audio is accepted but flagged.
    let (s, v) = upload(&app, &id, Site::Lll, tone(10.0, 1.5)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["quality_flags"], json!(["clipping"]));
}

#[tokio::test]
async fn reupload_supersedes_and_keeps_both_blobs() {
    let store = Arc::new(MemoryStore::default());
    let app = app_with(store.clone(), None);
    let id = create(&app, json!({})).await;
    let (a, b) = (tone(9.0, 0.4), tone(9.0, 0.3));
    let (_, va) = upload(&app, &id, Site::Rul, a.clone()).await;
    let (_, vb) = upload(&app, &id, Site::Rul, b.clone()).await;
    let (_, v) = call_json(&app, "GET", &format!("/sessions/{id}"), Body::empty()).await;
    let s: Session = serde_json::from_value(v).unwrap();
    assert_eq!(s.recordings.len(), 1);
    assert_eq!(s.recordings[&Site::Rul].recording_ref, vb["recording_ref"]);
    assert_eq!(s.superseded.len(), 1);
    assert_eq!(s.superseded[0].recording.recording_ref, va["recording_ref"]);
    use auscult_service::Store;
    // Stored verbatim: the bytes hash back to their reference.
    for (bytes, v) in [(a, va), (b, vb)] {
        let got = store.get_blob(v["recording_ref"].as_str().unwrap()).unwrap().unwrap();
        assert_eq!(got, bytes);
    }
}

#[tokio::test]
async fn assess_preconditions() {
    let app = app_with(Arc::new(MemoryStore::default()), None);
    let id = create(&app, json!({})).await;
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/assess"), Body::empty()).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "precondition_failed");

    upload(&app, &id, Site::Rul, tone(10.0, 0.4)).await;
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/assess"), Body::empty()).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"], "service_unavailable");

    let (s, _) = call_json(&app, "POST", "/sessions/missing/assess", Body::empty()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn session_creation_rules() {
    let app = app_with(Arc::new(MemoryStore::default()), None);
    let a = create(&app, json!({ "symptoms": [] })).await;
    let b = create(&app, json!({})).await;
    assert_ne!(a, b);
    let (s, _) = call_json(&app, "POST", "/sessions", Body::from(r#"{"symptoms":["headache"]}"#)).await;
    assert!(s.is_client_error());
    let (s, v) = call_json(&app, "GET", "/health", Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["model_loaded"], false);
}

#[tokio::test]
async fn empty_store_exports_an_empty_manifest() {
    let app = app_with(Arc::new(MemoryStore::default()), None);
    create(&app, json!({})).await;
    let (s, text) = call(&app, "GET", "/export/manifest", Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    let m = Manifest::parse(&String::from_utf8(text).unwrap(), Path::new("export.tsv")).unwrap();
    assert!(m.is_empty());
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        storage_dir: dir.path().to_path_buf(),
        ..ServiceConfig::default()
    };
    let id = {
        let app = router(AppState::from_config(cfg.clone()).unwrap());
        let id = create(&app, json!({ "symptoms": ["sputum"] })).await;
        upload(&app, &id, Site::Lul, tone(8.5, 0.2)).await;
        id
    };
    let app = router(AppState::from_config(cfg).unwrap());
    let (s, v) = call_json(&app, "GET", &format!("/sessions/{id}"), Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["symptoms"], json!(["sputum"]));
    assert!(v["recordings"]["LUL"].is_object());
}
