#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use qground_cli::service::{router, AppState, ServiceOptions};
use qground_core::dataset::{DatasetManifest, QualityTriplet, Source};
use qground_core::{Dims, RegionMask};
use serde_json::Value;
use ureq::Agent;

pub const SIDE: u32 = 32;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest: PathBuf,
    pub regions: PathBuf,
}

/// Proposals per item: a 20×20 square, a 6×6 square nested in it, and a
/// full-height strip on the right.
pub fn proposals() -> Vec<RegionMask> {
    let d = Dims::new(SIDE, SIDE).unwrap();
    vec![
        RegionMask::rect(d, 0, 0, 20, 20),
        RegionMask::rect(d, 4, 4, 6, 6),
        RegionMask::rect(d, 24, 0, 8, SIDE),
    ]
}

pub fn fixture(items: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let regions = dir.path().join("regions");
    fs::create_dir(&regions).unwrap();
    let props = serde_json::to_string(&proposals()).unwrap();
    let mut list = Vec::new();
    for k in 0..items {
        let id = format!("i{k}");
        RgbImage::from_pixel(SIDE, SIDE, Rgb([100, 110, 120])).save(dir.path().join(format!("{id}.png"))).unwrap();
        fs::write(regions.join(format!("{id}.json")), &props).unwrap();
        list.push(QualityTriplet {
            item_id: id.clone(),
            image: format!("{id}.png"),
            source: Source::Koniq10k,
            quality_text: format!("Item {k} has a blurry upper left corner."),
            mos: Some(3.5),
            annotations: vec![],
        });
    }
    let manifest = dir.path().join("manifest.jsonl");
    DatasetManifest::new(dir.path(), list).save(&manifest).unwrap();
    Fixture { dir, manifest, regions }
}

/// Serve on an ephemeral port from a background runtime.
pub fn start(f: &Fixture) -> (String, Arc<AppState>) {
    let state = AppState::open(&ServiceOptions::new(&f.manifest, &f.regions)).unwrap();
    let app = router(state.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (format!("http://{}", rx.recv().unwrap()), state)
}

pub fn agent() -> Agent {
    Agent::config_builder().http_status_as_error(false).build().into()
}

pub fn post(a: &Agent, url: &str, body: Value) -> (u16, Value) {
    let mut r = a.post(url).send_json(&body).unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap_or(Value::Null))
}

pub fn get(a: &Agent, url: &str) -> (u16, Value) {
    let mut r = a.get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap_or(Value::Null))
}
