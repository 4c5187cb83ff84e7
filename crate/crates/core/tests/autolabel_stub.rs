//! Auto-labeling against a local chat-completion stub.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use image::{Rgb, RgbImage};
use qground_core::dataset::{load_manifest, DatasetManifest, Provenance, QualityTriplet, Source};
use qground_core::som::pipeline::{autolabel_manifest, generate_quality_text, ItemStatus};
use qground_core::som::{LlmClient, LlmEndpointConfig, LlmError, QUALITY_TEXT_PROMPT};
use qground_core::{Dims, DistortionClass, RegionMask};
use serde_json::{json, Value};

const GOLDEN: &str = r#"[
    {"2": "blur", "gpt4v iqa": "The scenery here is quite blurry, detail is lost."},
    {"3": "low light", "gpt4v iqa": "This area is dark and lacks adequate lighting."},
    {"4": "low light", "gpt4v iqa": "The image appears dark due to weak lighting."},
    {"5": "no distortion", "gpt4v iqa": "The main subject, the boat, appears relatively clear with no significant distortion."}
]"#;

#[derive(Default)]
struct Stub {
    script: Mutex<VecDeque<(u16, String)>>,
    seen: Mutex<Vec<Value>>,
}

async fn chat(State(stub): State<Arc<Stub>>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    stub.seen.lock().unwrap().push(body);
    let (status, content) = stub.script.lock().unwrap().pop_front().unwrap_or((500, "script exhausted".into()));
    let body = json!({"choices": [{"message": {"role": "assistant", "content": content}}]});
    (StatusCode::from_u16(status).unwrap(), Json(body))
}

/// Serve the scripted replies in order on a background thread; returns the
/// base URL.
fn serve(script: Vec<(u16, &str)>) -> (String, Arc<Stub>) {
    let stub = Arc::new(Stub::default());
    stub.script.lock().unwrap().extend(script.into_iter().map(|(s, c)| (s, c.to_string())));
    let state = stub.clone();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new().route("/v1/chat/completions", post(chat)).with_state(state);
            axum::serve(listener, app).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    (format!("http://{addr}/v1"), stub)
}

fn config(base: &str, token_env: &str) -> LlmEndpointConfig {
    std::env::set_var(token_env, "test-token");
    let mut c = LlmEndpointConfig::new(base, "stub-model");
    c.token_env = token_env.into();
    c.initial_backoff_ms = 1;
    c.max_backoff_ms = 5;
    c.max_retries = 2;
    c
}

/// Five horizontal strips of decreasing area, so mark k is strip k-1.
fn strips(d: Dims) -> Vec<RegionMask> {
    (0..5u32).map(|i| RegionMask::rect(d, 0, i * 6, 30 - i * 4, 6)).collect()
}

fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let d = Dims::new(30, 30).unwrap();
    RgbImage::from_pixel(30, 30, Rgb([90, 120, 150])).save(dir.join("x.png")).unwrap();
    let item = QualityTriplet {
        item_id: "x".into(),
        image: "x.png".into(),
        source: Source::Spaq,
        quality_text: "The background is blurry and the lower part is dark.".into(),
        mos: None,
        annotations: vec![],
    };
    let manifest = dir.join("manifest.jsonl");
    DatasetManifest::new(dir, vec![item]).save(&manifest).unwrap();
    let regions = dir.join("regions");
    fs::create_dir(&regions).unwrap();
    fs::write(regions.join("x.json"), serde_json::to_string(&strips(d)).unwrap()).unwrap();
    (manifest, regions)
}

#[test]
fn fail_fail_succeed_writes_one_annotation() {
    let (base, stub) = serve(vec![(200, "Sorry, I can't tell."), (200, "[{\"1\": }"), (200, GOLDEN)]);
    let dir = tempfile::tempdir().unwrap();
    let (manifest, regions) = fixture(dir.path());
    let client = LlmClient::from_config(config(&base, "QGROUND_STUB_TOKEN_A")).unwrap();
    let report = autolabel_manifest(&manifest, &regions, &client).unwrap();
    assert_eq!((report.added, report.failed, report.written), (1, 0, true));
    assert!(matches!(report.items[0].status, ItemStatus::Labeled { regions: 3, empty: false, calls: 3 }));
    assert_eq!(stub.seen.lock().unwrap().len(), 3);

    let m = load_manifest(&manifest).unwrap();
    assert_eq!(m.annotation_count(), 1);
    let a = &m.items[0].annotations[0];
    assert_eq!(a.provenance, Provenance::Lmm);
    assert_eq!(a.annotator_id, "stub-model");
    assert_eq!(a.meta["overlap_resolution"], "smaller-first");
    let d = Dims::new(30, 30).unwrap();
    let s = strips(d);
    let got: Vec<_> = a.regions.iter().map(|r| (r.class, r.mask.clone())).collect();
    assert_eq!(
        got,
        vec![
            (DistortionClass::Blur, s[1].clone()),
            (DistortionClass::LowLight, s[2].clone()),
            (DistortionClass::LowLight, s[3].clone()),
        ]
    );

    // A rerun recognises the item as done and sends nothing.
    let again = autolabel_manifest(&manifest, &regions, &client).unwrap();
    assert_eq!(again.items[0].status, ItemStatus::AlreadyLabeled);
    assert_eq!(stub.seen.lock().unwrap().len(), 3);
}

#[test]
fn request_carries_prompts_and_overlay() {
    let (base, stub) = serve(vec![(200, GOLDEN)]);
    let dir = tempfile::tempdir().unwrap();
    let (manifest, regions) = fixture(dir.path());
    let client = LlmClient::from_config(config(&base, "QGROUND_STUB_TOKEN_B")).unwrap();
    autolabel_manifest(&manifest, &regions, &client).unwrap();
    let seen = stub.seen.lock().unwrap();
    let body = &seen[0];
    assert_eq!(body["model"], "stub-model");
    let sys = body["messages"][0]["content"].as_str().unwrap();
    assert!(sys.starts_with("You are a helpful assistant to help me evaluate the quality of the image."));
    let user = &body["messages"][1]["content"];
    assert_eq!(
        user[0]["text"],
        "The overall quality reference is: The background is blurry and the lower part is dark.. Please help to identify the distortions of each region within the following types [blur, jitter, overexposure, low light, noise, no distortion]."
    );
    assert!(user[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
}

#[test]
fn parse_budget_exhausted_leaves_manifest_untouched() {
    let (base, _stub) = serve(vec![(200, "no"), (200, "no"), (200, "no"), (200, GOLDEN)]);
    let dir = tempfile::tempdir().unwrap();
    let (manifest, regions) = fixture(dir.path());
    let before = fs::read(&manifest).unwrap();
    let client = LlmClient::from_config(config(&base, "QGROUND_STUB_TOKEN_C")).unwrap();
    let report = autolabel_manifest(&manifest, &regions, &client).unwrap();
    assert_eq!((report.added, report.failed, report.written), (0, 1, false));
    assert!(matches!(&report.items[0].status, ItemStatus::Failed { error } if error.contains("gave up after 3")));
    assert_eq!(fs::read(&manifest).unwrap(), before);
}

#[test]
fn server_errors_retry_but_auth_errors_do_not() {
    let (base, stub) = serve(vec![(503, ""), (500, ""), (200, GOLDEN)]);
    let dir = tempfile::tempdir().unwrap();
    let (manifest, regions) = fixture(dir.path());
    let client = LlmClient::from_config(config(&base, "QGROUND_STUB_TOKEN_D")).unwrap();
    assert_eq!(autolabel_manifest(&manifest, &regions, &client).unwrap().added, 1);
    assert_eq!(stub.seen.lock().unwrap().len(), 3);

    let (base, stub) = serve(vec![(401, ""), (200, GOLDEN)]);
    let dir = tempfile::tempdir().unwrap();
    let (manifest, regions) = fixture(dir.path());
    let client = LlmClient::from_config(config(&base, "QGROUND_STUB_TOKEN_E")).unwrap();
    let report = autolabel_manifest(&manifest, &regions, &client).unwrap();
    assert!(matches!(&report.items[0].status, ItemStatus::Failed { error } if error.contains("credentials")));
    assert_eq!(stub.seen.lock().unwrap().len(), 1);
}

#[test]
fn unset_token_fails_before_any_request() {
    let (base, stub) = serve(vec![(200, GOLDEN)]);
    let mut c = LlmEndpointConfig::new(base, "m");
    c.token_env = "QGROUND_STUB_TOKEN_NEVER_SET".into();
    assert!(matches!(LlmClient::from_config(c), Err(LlmError::AuthConfig(_))));
    assert!(stub.seen.lock().unwrap().is_empty());
}

#[test]
fn quality_text_from_stub() {
    let (base, stub) = serve(vec![(200, "The image is blurry."), (200, "")]);
    let client = LlmClient::from_config(config(&base, "QGROUND_STUB_TOKEN_F")).unwrap();
    let img = RgbImage::from_pixel(8, 8, Rgb([1, 2, 3]));
    let t = generate_quality_text(&img, &client).unwrap();
    assert_eq!(t.text, "The image is blurry.");
    assert_eq!(t.model, "stub-model");
    assert!(chrono::DateTime::parse_from_rfc3339(&t.timestamp).is_ok());
    assert_eq!(stub.seen.lock().unwrap()[0]["messages"][0]["content"][0]["text"], QUALITY_TEXT_PROMPT);

    let other = RgbImage::from_pixel(8, 8, Rgb([9, 9, 9]));
    assert!(generate_quality_text(&other, &client).is_err());
}
