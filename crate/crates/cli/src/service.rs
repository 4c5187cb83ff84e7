//! HTTP API behind the annotation workbench.
//!
//! Reads are served from an in-memory snapshot of the manifest. Submissions
//! go through one writer thread, which batches whatever is queued, saves the
//! manifest atomically and only then publishes the new snapshot.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex, RwLock};
use std::thread;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qground_core::dataset::{load_manifest, Annotation, DatasetManifest, ManifestError, Provenance, QualityTriplet, Region, Source};
use qground_core::som::pipeline::{load_proposals, proposals_path};
use qground_core::{Dims, DistortionClass, RegionMask};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;

pub const DEFAULT_BLOCK: u32 = 8;
const DEFAULT_PAGE: usize = 50;
const MAX_PAGE: usize = 500;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("regions directory {0} does not exist")]
    Regions(PathBuf),
    #[error("block size must be positive")]
    Block,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub manifest_path: PathBuf,
    pub regions_dir: PathBuf,
    /// Edge length of the square blocks used by `adjust`.
    pub block: u32,
}

impl ServiceOptions {
    pub fn new(manifest_path: impl Into<PathBuf>, regions_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest_path: manifest_path.into(),
            regions_dir: regions_dir.into(),
            block: DEFAULT_BLOCK,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Open,
    Submitted,
}

/// A candidate picked into the working annotation, possibly edited.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub region: usize,
    /// Index of the proposal this selection started from.
    pub proposal: usize,
    pub adjusted: bool,
    pub class: Option<DistortionClass>,
    pub mask: RegionMask,
}

#[derive(Debug, Clone)]
struct Session {
    id: String,
    item_id: String,
    annotator_id: String,
    quality_text: String,
    dims: Dims,
    candidates: Vec<RegionMask>,
    selections: Vec<Selection>,
    state: SessionState,
    submitting: bool,
    annotation_id: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub item_id: String,
    pub annotator_id: String,
    pub quality_text: String,
    pub state: SessionState,
    pub height: u32,
    pub width: u32,
    pub candidates: Vec<RegionMask>,
    pub selections: Vec<Selection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotation_id: Option<String>,
}

impl Session {
    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id.clone(),
            item_id: self.item_id.clone(),
            annotator_id: self.annotator_id.clone(),
            quality_text: self.quality_text.clone(),
            state: self.state,
            height: self.dims.height(),
            width: self.dims.width(),
            candidates: self.candidates.clone(),
            selections: self.selections.clone(),
            annotation_id: self.annotation_id.clone(),
        }
    }

    fn ensure_open(&self) -> Result<(), ApiError> {
        if self.state == SessionState::Submitted || self.submitting {
            return Err(ApiError::Conflict(format!("session {} is already submitted", self.id)));
        }
        Ok(())
    }

    fn selection_mut(&mut self, region: usize) -> Result<&mut Selection, ApiError> {
        self.selections
            .get_mut(region)
            .ok_or_else(|| ApiError::NotFound(format!("no selection {region} in session")))
    }

    fn annotation(&self, annotation_id: &str) -> Annotation {
        let labeled: Vec<&Selection> = self.selections.iter().filter(|s| s.class.is_some()).collect();
        let lineage: Vec<_> = labeled
            .iter()
            .map(|s| serde_json::json!({ "proposal": s.proposal, "adjusted": s.adjusted }))
            .collect();
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("session".to_string(), self.id.clone());
        meta.insert("lineage".to_string(), serde_json::Value::Array(lineage).to_string());
        Annotation {
            annotation_id: annotation_id.to_string(),
            provenance: Provenance::Human,
            annotator_id: self.annotator_id.clone(),
            reference_text_id: self.item_id.clone(),
            regions: labeled
                .iter()
                .map(|s| Region::new(s.class.expect("filtered"), s.mask.clone()))
                .collect(),
            meta,
        }
    }
}

#[derive(Default)]
struct Sessions {
    by_id: HashMap<String, Session>,
    /// (item_id, annotator_id) -> open session id
    open: HashMap<(String, String), String>,
}

struct WriteJob {
    item_id: String,
    annotation: Annotation,
    reply: oneshot::Sender<Result<(), String>>,
}

pub struct AppState {
    manifest_path: PathBuf,
    regions_dir: PathBuf,
    block: u32,
    snapshot: Arc<RwLock<Arc<DatasetManifest>>>,
    sessions: Mutex<Sessions>,
    writer: Mutex<mpsc::Sender<WriteJob>>,
}

impl AppState {
    /// Load the manifest and start the writer thread.
    pub fn open(opts: &ServiceOptions) -> Result<Arc<Self>, ServiceError> {
        if opts.block == 0 {
            return Err(ServiceError::Block);
        }
        if !opts.regions_dir.is_dir() {
            return Err(ServiceError::Regions(opts.regions_dir.clone()));
        }
        let manifest = load_manifest(&opts.manifest_path)?;
        let snapshot = Arc::new(RwLock::new(Arc::new(manifest)));
        let (tx, rx) = mpsc::channel();
        let path = opts.manifest_path.clone();
        let shared = snapshot.clone();
        thread::Builder::new()
            .name("manifest-writer".into())
            .spawn(move || writer_loop(&path, &shared, rx))?;
        Ok(Arc::new(Self {
            manifest_path: opts.manifest_path.clone(),
            regions_dir: opts.regions_dir.clone(),
            block: opts.block,
            snapshot,
            sessions: Mutex::new(Sessions::default()),
            writer: Mutex::new(tx),
        }))
    }

    pub fn manifest(&self) -> Arc<DatasetManifest> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest_path
    }
}

fn writer_loop(path: &Path, snapshot: &RwLock<Arc<DatasetManifest>>, rx: mpsc::Receiver<WriteJob>) {
    while let Ok(first) = rx.recv() {
        let mut batch = vec![first];
        batch.extend(rx.try_iter());
        let mut next = (**snapshot.read().expect("snapshot lock")).clone();
        let mut accepted = Vec::new();
        for job in batch {
            match next.get_mut(&job.item_id) {
                Some(item) => {
                    item.annotations.push(job.annotation);
                    accepted.push(job.reply);
                }
                None => {
                    let _ = job.reply.send(Err(format!("item {:?} disappeared", job.item_id)));
                }
            }
        }
        if accepted.is_empty() {
            continue;
        }
        match next.save(path) {
            Ok(()) => {
                tracing::info!(annotations = accepted.len(), "manifest saved");
                *snapshot.write().expect("snapshot lock") = Arc::new(next);
                for reply in accepted {
                    let _ = reply.send(Ok(()));
                }
            }
            Err(e) => {
                tracing::error!(error = %e, "manifest save failed");
                for reply in accepted {
                    let _ = reply.send(Err(e.to_string()));
                }
            }
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/items", get(list_items))
        .route("/api/items/{id}", get(get_item))
        .route("/api/items/{id}/image", get(get_image))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/pick", post(pick))
        .route("/api/sessions/{id}/adjust", post(adjust))
        .route("/api/sessions/{id}/label", post(label))
        .route("/api/sessions/{id}/submit", post(submit))
        .with_state(state)
}

/// Bind and serve until the task is dropped.
pub async fn serve(opts: &ServiceOptions, bind: &str) -> Result<(), ServiceError> {
    let state = AppState::open(opts)?;
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, manifest = %opts.manifest_path.display(), "serving");
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ItemSummary {
    pub item_id: String,
    pub image: String,
    pub source: Source,
    pub quality_text: String,
    pub mos: Option<f64>,
    pub human_annotations: usize,
    pub lmm_annotations: usize,
}

impl ItemSummary {
    fn of(item: &QualityTriplet) -> Self {
        Self {
            item_id: item.item_id.clone(),
            image: item.image.clone(),
            source: item.source,
            quality_text: item.quality_text.clone(),
            mos: item.mos,
            human_annotations: item.annotations_by(Provenance::Human).count(),
            lmm_annotations: item.annotations_by(Provenance::Lmm).count(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ItemPage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<ItemSummary>,
}

#[derive(Debug, Deserialize)]
pub struct PageQuery {
    #[serde(default)]
    pub offset: usize,
    pub limit: Option<usize>,
}

async fn list_items(State(st): State<Arc<AppState>>, Query(q): Query<PageQuery>) -> Result<Json<ItemPage>, ApiError> {
    let limit = q.limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::BadRequest(format!("limit must be in 1..={MAX_PAGE}")));
    }
    let m = st.manifest();
    Ok(Json(ItemPage {
        total: m.items.len(),
        offset: q.offset,
        limit,
        items: m.items.iter().skip(q.offset).take(limit).map(ItemSummary::of).collect(),
    }))
}

#[derive(Debug, Serialize)]
pub struct ItemDetail {
    #[serde(flatten)]
    pub summary: ItemSummary,
    /// Masks are always inline RLE here, even when stored as sidecars.
    pub annotations: Vec<Annotation>,
}

fn find_item(m: &DatasetManifest, id: &str) -> Result<QualityTriplet, ApiError> {
    m.get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("no item {id:?}")))
}

async fn get_item(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<ItemDetail>, ApiError> {
    let mut item = find_item(&st.manifest(), &id)?;
    for r in item.annotations.iter_mut().flat_map(|a| a.regions.iter_mut()) {
        r.sidecar = None;
    }
    Ok(Json(ItemDetail {
        summary: ItemSummary::of(&item),
        annotations: item.annotations,
    }))
}

async fn get_image(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let m = st.manifest();
    let item = find_item(&m, &id)?;
    let path = m.root.join(&item.image);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::NotFound(format!("image {}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Debug, Deserialize)]
pub struct NewSession {
    pub item_id: String,
    pub annotator_id: String,
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    Json(req): Json<NewSession>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let annotator = req.annotator_id.trim().to_string();
    if annotator.is_empty() {
        return Err(ApiError::BadRequest("annotator_id must not be empty".into()));
    }
    let item = find_item(&st.manifest(), &req.item_id)?;
    let key = (item.item_id.clone(), annotator.clone());
    if let Some(s) = {
        let sessions = st.sessions.lock().expect("sessions lock");
        sessions.open.get(&key).and_then(|id| sessions.by_id.get(id)).map(Session::view)
    } {
        return Ok((StatusCode::OK, Json(s)));
    }

    let path = proposals_path(&st.regions_dir, &item.item_id);
    let candidates = load_proposals(&path).map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    let Some(dims) = candidates.first().map(RegionMask::dims) else {
        return Err(ApiError::Unprocessable(format!("no region proposals for item {:?}", item.item_id)));
    };
    if candidates.iter().any(|c| c.dims() != dims) || item.mask_dims().is_some_and(|d| d != dims) {
        return Err(ApiError::Unprocessable(format!("proposal dims disagree for item {:?}", item.item_id)));
    }

    let mut sessions = st.sessions.lock().expect("sessions lock");
    // Another request may have opened the same session meanwhile.
    if let Some(s) = sessions.open.get(&key).and_then(|id| sessions.by_id.get(id)) {
        return Ok((StatusCode::OK, Json(s.view())));
    }
    let session = Session {
        id: uuid::Uuid::new_v4().to_string(),
        item_id: item.item_id.clone(),
        annotator_id: annotator,
        quality_text: item.quality_text.clone(),
        dims,
        candidates,
        selections: Vec::new(),
        state: SessionState::Open,
        submitting: false,
        annotation_id: None,
    };
    let view = session.view();
    sessions.open.insert(key, session.id.clone());
    sessions.by_id.insert(session.id.clone(), session);
    Ok((StatusCode::CREATED, Json(view)))
}

fn with_session<T>(st: &AppState, id: &str, f: impl FnOnce(&mut Session) -> Result<T, ApiError>) -> Result<T, ApiError> {
    let mut sessions = st.sessions.lock().expect("sessions lock");
    let s = sessions
        .by_id
        .get_mut(id)
        .ok_or_else(|| ApiError::NotFound(format!("no session {id:?}")))?;
    f(s)
}

async fn get_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    with_session(&st, &id, |s| Ok(Json(s.view())))
}

#[derive(Debug, Deserialize)]
pub struct Click {
    pub x: i64,
    pub y: i64,
}

#[derive(Debug, Serialize)]
pub struct PickResult {
    pub selection: Option<Selection>,
}

/// Smallest candidate containing the pixel; ties go to the earlier one.
pub fn smallest_containing(candidates: &[RegionMask], x: u32, y: u32) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.get(x, y))
        .min_by_key(|(i, c)| (c.area(), *i))
        .map(|(i, _)| i)
}

async fn pick(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(click): Json<Click>,
) -> Result<Json<PickResult>, ApiError> {
    with_session(&st, &id, |s| {
        s.ensure_open()?;
        if !s.dims.contains(click.x, click.y) {
            return Err(ApiError::BadRequest(format!("click ({}, {}) is outside the {} image", click.x, click.y, s.dims)));
        }
        let Some(p) = smallest_containing(&s.candidates, click.x as u32, click.y as u32) else {
            return Ok(Json(PickResult { selection: None }));
        };
        if let Some(existing) = s.selections.iter().find(|sel| sel.proposal == p) {
            return Ok(Json(PickResult {
                selection: Some(existing.clone()),
            }));
        }
        let sel = Selection {
            region: s.selections.len(),
            proposal: p,
            adjusted: false,
            class: None,
            mask: s.candidates[p].clone(),
        };
        s.selections.push(sel.clone());
        Ok(Json(PickResult { selection: Some(sel) }))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Add,
    Remove,
}

/// A square block whose top-left pixel is `(x, y)`, clipped to the image.
#[derive(Debug, Clone, Copy, Deserialize)]
pub struct BlockEdit {
    pub op: EditOp,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Deserialize)]
pub struct AdjustRequest {
    pub region: usize,
    #[serde(default)]
    pub edits: Vec<BlockEdit>,
    pub block: Option<u32>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EditError {
    #[error("block at ({x}, {y}) starts outside the image")]
    OutOfBounds { x: u32, y: u32 },
    #[error("edits would leave the region empty")]
    Empty,
    #[error("block size must be positive")]
    Block,
}

pub fn apply_edits(mask: &RegionMask, edits: &[BlockEdit], block: u32) -> Result<RegionMask, EditError> {
    if block == 0 {
        return Err(EditError::Block);
    }
    let d = mask.dims();
    let mut out = mask.clone();
    for e in edits {
        if e.x >= d.width() || e.y >= d.height() {
            return Err(EditError::OutOfBounds { x: e.x, y: e.y });
        }
        let b = RegionMask::rect(d, e.x, e.y, block.min(d.width() - e.x), block.min(d.height() - e.y));
        match e.op {
            EditOp::Add => out.union_with(&b),
            EditOp::Remove => out.subtract(&b),
        }
        .expect("same dims");
    }
    if out.is_empty() {
        return Err(EditError::Empty);
    }
    Ok(out)
}

async fn adjust(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AdjustRequest>,
) -> Result<Json<Selection>, ApiError> {
    let block = req.block.unwrap_or(st.block);
    with_session(&st, &id, |s| {
        s.ensure_open()?;
        let sel = s.selection_mut(req.region)?;
        let mask = apply_edits(&sel.mask, &req.edits, block).map_err(|e| match e {
            EditError::Empty => ApiError::Unprocessable(e.to_string()),
            _ => ApiError::BadRequest(e.to_string()),
        })?;
        if !req.edits.is_empty() {
            sel.mask = mask;
            sel.adjusted = true;
        }
        Ok(Json(sel.clone()))
    })
}

#[derive(Debug, Deserialize)]
pub struct LabelRequest {
    pub region: usize,
    /// `null` clears the label; unlabeled selections are not submitted.
    pub class: Option<DistortionClass>,
}

async fn label(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<LabelRequest>,
) -> Result<Json<Selection>, ApiError> {
    with_session(&st, &id, |s| {
        s.ensure_open()?;
        let sel = s.selection_mut(req.region)?;
        sel.class = req.class;
        Ok(Json(sel.clone()))
    })
}

#[derive(Debug, Serialize)]
pub struct SubmitResult {
    pub annotation_id: String,
    pub regions: usize,
}

async fn submit(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SubmitResult>, ApiError> {
    let annotation_id = format!("human-{id}");
    let (item_id, annotation) = with_session(&st, &id, |s| {
        s.ensure_open()?;
        s.submitting = true;
        Ok((s.item_id.clone(), s.annotation(&annotation_id)))
    })?;
    let regions = annotation.regions.len();
    let (tx, rx) = oneshot::channel();
    let sent = st.writer.lock().expect("writer lock").send(WriteJob {
        item_id,
        annotation,
        reply: tx,
    });
    let outcome = match sent {
        Ok(()) => rx.await.unwrap_or_else(|_| Err("manifest writer stopped".into())),
        Err(_) => Err("manifest writer stopped".into()),
    };
    let mut sessions = st.sessions.lock().expect("sessions lock");
    let s = sessions.by_id.get_mut(&id).expect("session exists while submitting");
    s.submitting = false;
    match outcome {
        Ok(()) => {
            s.state = SessionState::Submitted;
            s.annotation_id = Some(annotation_id.clone());
            let key = (s.item_id.clone(), s.annotator_id.clone());
            sessions.open.remove(&key);
            Ok(Json(SubmitResult { annotation_id, regions }))
        }
        Err(e) => Err(ApiError::Internal(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d() -> Dims {
        Dims::new(16, 16).unwrap()
    }

    #[test]
    fn nested_click_prefers_smaller() {
        let outer = RegionMask::rect(d(), 0, 0, 10, 10);
        let inner = RegionMask::rect(d(), 2, 2, 3, 3);
        let cands = vec![outer, inner];
        assert_eq!(smallest_containing(&cands, 3, 3), Some(1));
        assert_eq!(smallest_containing(&cands, 8, 8), Some(0));
        assert_eq!(smallest_containing(&cands, 12, 12), None);
    }

    #[test]
    fn block_edits_follow_set_algebra() {
        let m = RegionMask::rect(d(), 0, 0, 4, 4);
        assert_eq!(apply_edits(&m, &[], 8).unwrap(), m);
        // A 4×4 block at (2, 2) overlaps the square in a 2×2 corner.
        let add = BlockEdit { op: EditOp::Add, x: 2, y: 2 };
        assert_eq!(apply_edits(&m, &[add], 4).unwrap().area(), 16 + 16 - 4);
        // Blocks are clipped at the border.
        let edge = BlockEdit { op: EditOp::Add, x: 14, y: 0 };
        assert_eq!(apply_edits(&m, &[edge], 8).unwrap().area(), 16 + 16);
        let wipe = BlockEdit { op: EditOp::Remove, x: 0, y: 0 };
        assert_eq!(apply_edits(&m, &[wipe], 8), Err(EditError::Empty));
        let out = BlockEdit { op: EditOp::Add, x: 16, y: 0 };
        assert_eq!(apply_edits(&m, &[out], 8), Err(EditError::OutOfBounds { x: 16, y: 0 }));
    }
}
