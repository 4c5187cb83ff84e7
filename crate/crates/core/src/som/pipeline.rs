//! End-to-end auto-labeling: proposals in, LLM-provenance annotations out.

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use image::{DynamicImage, ImageFormat, RgbImage};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::client::{ChatRequest, LlmClient, LlmError};
use super::compose::{compose_annotation, AnnotationStamp, ComposeOutcome};
use super::marks::{assign_marks, MarkError, MarkedRegionSet};
use super::overlay::render_marks;
use super::prompt::{build_prompts, QUALITY_TEXT_PROMPT};
use super::response::parse_response;
use crate::dataset::{load_manifest, DatasetManifest, ManifestError};
use crate::mask::{flatten_smaller_first, MaskError, RegionMask};

#[derive(Debug, Error)]
pub enum AutolabelError {
    #[error("quality text is empty")]
    EmptyQualityText,
    #[error("proposal size {proposal} does not match image {image}")]
    ImageDims { proposal: String, image: String },
    #[error(transparent)]
    Marks(#[from] MarkError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("reading proposals {path}: {reason}")]
    Proposals { path: PathBuf, reason: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone)]
pub struct AutolabelResult {
    pub outcome: ComposeOutcome,
    pub reply: String,
    /// Model calls spent, 0 when served from cache.
    pub calls: u32,
}

/// Everything sent to the model for one image.
pub struct PreparedRequest {
    pub marks: MarkedRegionSet,
    pub request: ChatRequest,
    pub proposals: usize,
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>, image::ImageError> {
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img.clone()).write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Flatten proposals smaller-first, number them, draw the marks and build
/// the labeling request. No network access.
pub fn prepare(image: &RgbImage, proposals: &[RegionMask], quality_text: &str) -> Result<PreparedRequest, AutolabelError> {
    if quality_text.trim().is_empty() {
        return Err(AutolabelError::EmptyQualityText);
    }
    if let Some(p) = proposals.first() {
        let d = p.dims();
        if d.width() != image.width() || d.height() != image.height() {
            return Err(AutolabelError::ImageDims {
                proposal: d.to_string(),
                image: format!("{}x{}", image.height(), image.width()),
            });
        }
    }
    let flat = flatten_smaller_first(proposals)?;
    let marks = assign_marks(&flat)?;
    let (overlay, _) = render_marks(image, &marks);
    let (system, user) = build_prompts(quality_text);
    Ok(PreparedRequest {
        marks,
        request: ChatRequest {
            system: Some(system),
            user,
            image_png: Some(encode_png(&overlay)?),
        },
        proposals: proposals.len(),
    })
}

pub fn autolabel(
    image: &RgbImage,
    proposals: &[RegionMask],
    quality_text: &str,
    client: &LlmClient,
    stamp: &AnnotationStamp,
) -> Result<AutolabelResult, AutolabelError> {
    let prep = prepare(image, proposals, quality_text)?;
    let parsed = client.request_parsed(&prep.request, parse_response)?;
    let mut outcome = compose_annotation(&prep.marks, &parsed.value, stamp);
    let meta = &mut outcome.annotation.meta;
    meta.insert("model".into(), client.config().model.clone());
    meta.insert("proposals".into(), prep.proposals.to_string());
    meta.insert("overlap_resolution".into(), "smaller-first".into());
    if outcome.empty {
        meta.insert("empty".into(), "true".into());
    }
    for w in &outcome.warnings {
        tracing::warn!(annotation = %stamp.annotation_id, "{w}");
    }
    Ok(AutolabelResult {
        outcome,
        reply: parsed.reply,
        calls: parsed.calls,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratedText {
    pub text: String,
    pub model: String,
    pub timestamp: String,
}

pub fn generate_quality_text(image: &RgbImage, client: &LlmClient) -> Result<GeneratedText, AutolabelError> {
    let req = ChatRequest {
        system: None,
        user: QUALITY_TEXT_PROMPT.to_string(),
        image_png: Some(encode_png(image)?),
    };
    let parsed = client.request_text(&req)?;
    Ok(GeneratedText {
        text: parsed.value,
        model: client.config().model.clone(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    })
}

/// Deterministic id for the annotation a model produces on an item, so
/// reruns recognise work already merged.
pub fn lmm_annotation_id(item_id: &str, model: &str) -> String {
    let mut h = Sha256::new();
    h.update(item_id.as_bytes());
    h.update([0]);
    h.update(model.as_bytes());
    let hex = format!("{:x}", h.finalize());
    format!("lmm-{}", &hex[..12])
}

pub fn proposals_path(regions_dir: &Path, item_id: &str) -> PathBuf {
    regions_dir.join(format!("{item_id}.json"))
}

/// Read a proposal file: a JSON array of RLE masks.
pub fn load_proposals(path: &Path) -> Result<Vec<RegionMask>, AutolabelError> {
    let err = |reason: String| AutolabelError::Proposals {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Labeled { regions: usize, empty: bool, calls: u32 },
    Planned { marks: usize },
    AlreadyLabeled,
    NoProposals,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ItemReport {
    pub item_id: String,
    pub annotation_id: String,
    pub status: ItemStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub items: Vec<ItemReport>,
    pub added: usize,
    pub failed: usize,
    /// Whether the manifest file was rewritten.
    pub written: bool,
}

struct Job {
    index: usize,
    item_id: String,
    annotation_id: String,
    image: PathBuf,
    quality_text: String,
    proposals: PathBuf,
}

fn jobs(manifest: &DatasetManifest, regions_dir: &Path, model: &str) -> (Vec<Job>, Vec<ItemReport>) {
    let mut jobs = Vec::new();
    let mut reports = Vec::new();
    for (index, item) in manifest.items.iter().enumerate() {
        let annotation_id = lmm_annotation_id(&item.item_id, model);
        let report = |status| ItemReport {
            item_id: item.item_id.clone(),
            annotation_id: annotation_id.clone(),
            status,
        };
        let proposals = proposals_path(regions_dir, &item.item_id);
        if item.annotations.iter().any(|a| a.annotation_id == annotation_id) {
            reports.push(report(ItemStatus::AlreadyLabeled));
        } else if !proposals.is_file() {
            reports.push(report(ItemStatus::NoProposals));
        } else {
            reports.push(report(ItemStatus::NoProposals));
            jobs.push(Job {
                index,
                item_id: item.item_id.clone(),
                annotation_id,
                image: manifest.root.join(&item.image),
                quality_text: item.quality_text.clone(),
                proposals,
            });
        }
    }
    (jobs, reports)
}

fn load_job(job: &Job) -> Result<(RgbImage, Vec<RegionMask>), AutolabelError> {
    let img = image::open(&job.image)?.to_rgb8();
    Ok((img, load_proposals(&job.proposals)?))
}

/// Check every item with a proposal file can be prepared, without contacting
/// the endpoint or touching the manifest.
pub fn plan_manifest(manifest_path: &Path, regions_dir: &Path, model: &str) -> Result<RunReport, AutolabelError> {
    let manifest = load_manifest(manifest_path)?;
    let (jobs, mut reports) = jobs(&manifest, regions_dir, model);
    let mut failed = 0;
    for job in &jobs {
        let status = match load_job(job).and_then(|(img, props)| prepare(&img, &props, &job.quality_text)) {
            Ok(p) => ItemStatus::Planned { marks: p.marks.len() },
            Err(e) => {
                failed += 1;
                ItemStatus::Failed { error: e.to_string() }
            }
        };
        reports[job.index].status = status;
    }
    Ok(RunReport {
        items: reports,
        added: 0,
        failed,
        written: false,
    })
}

/// Auto-label every manifest item that has a proposal file under
/// `regions_dir` and no annotation from this model yet. Requests run on up
/// to `max_concurrency` threads. The manifest is rewritten atomically once,
/// and only when every attempted item succeeded; otherwise it is left
/// untouched and the report lists the failures (cached replies make a rerun
/// cheap).
pub fn autolabel_manifest(manifest_path: &Path, regions_dir: &Path, client: &LlmClient) -> Result<RunReport, AutolabelError> {
    let mut manifest = load_manifest(manifest_path)?;
    let model = client.config().model.clone();
    let (jobs, mut reports) = jobs(&manifest, regions_dir, &model);
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(jobs.len()));
    let workers = client.config().max_concurrency.min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(k) else { break };
                let stamp = AnnotationStamp {
                    annotation_id: job.annotation_id.clone(),
                    annotator_id: model.clone(),
                    reference_text_id: job.item_id.clone(),
                };
                let r = load_job(job).and_then(|(img, props)| autolabel(&img, &props, &job.quality_text, client, &stamp));
                if let Err(e) = &r {
                    tracing::error!(item = %job.item_id, "auto-labeling failed: {e}");
                }
                results.lock().expect("results lock").push((k, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(k, _)| *k);

    let mut added = 0;
    let mut failed = 0;
    for (k, r) in results {
        let job = &jobs[k];
        reports[job.index].status = match r {
            Ok(res) => {
                added += 1;
                let status = ItemStatus::Labeled {
                    regions: res.outcome.annotation.regions.len(),
                    empty: res.outcome.empty,
                    calls: res.calls,
                };
                manifest.items[job.index].annotations.push(res.outcome.annotation);
                status
            }
            Err(e) => {
                failed += 1;
                ItemStatus::Failed { error: e.to_string() }
            }
        };
    }
    let written = failed == 0 && added > 0;
    if written {
        manifest.save(manifest_path)?;
    }
    Ok(RunReport {
        items: reports,
        added,
        failed,
        written,
    })
}
