//! JSON-lines manifests of quality triplets, with validation, statistics and
//! seeded train/test splitting.
//!
//! Each manifest line is one item:
//!
//! ```json
//! {"item_id":"a1","image":"img/a1.jpg","source":"SPAQ","quality_text":"...",
//!  "mos":null,"annotations":[{"annotation_id":"h1","provenance":"human",
//!  "annotator_id":"ann03","reference_text_id":"a1","regions":[{"class":"blur",
//!  "mask":{"size":[H,W],"order":"row-major","counts":[...]}}]}]}
//! ```
//!
//! A region's `mask` is either an inline RLE object or a string path (relative
//! to the manifest's directory) to a sidecar file holding one RLE object.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{Dims, DistortionClass, RegionMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "KonIQ-10K")]
    Koniq10k,
    #[serde(rename = "SPAQ")]
    Spaq,
    #[serde(rename = "LIVE-FB")]
    LiveFb,
    #[serde(rename = "LIVE-itw")]
    LiveItw,
    #[serde(rename = "AGIQA-3K")]
    Agiqa3k,
    #[serde(rename = "ImageRewardDB")]
    ImageRewardDb,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Source {
    pub const ALL: [Source; 7] = [
        Source::Koniq10k,
        Source::Spaq,
        Source::LiveFb,
        Source::LiveItw,
        Source::Agiqa3k,
        Source::ImageRewardDb,
        Source::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Source::Koniq10k => "KonIQ-10K",
            Source::Spaq => "SPAQ",
            Source::LiveFb => "LIVE-FB",
            Source::LiveItw => "LIVE-itw",
            Source::Agiqa3k => "AGIQA-3K",
            Source::ImageRewardDb => "ImageRewardDB",
            Source::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Source::ALL
            .into_iter()
            .find(|src| src.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown source {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Lmm,
}

/// One class-labeled region of an annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub class: DistortionClass,
    pub mask: RegionMask,
    /// Sidecar path the mask was loaded from, relative to the manifest.
    pub sidecar: Option<String>,
}

impl Region {
    pub fn new(class: DistortionClass, mask: RegionMask) -> Self {
        Self {
            class,
            mask,
            sidecar: None,
        }
    }
}

impl Serialize for Region {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Region", 2)?;
        st.serialize_field("class", &self.class)?;
        match &self.sidecar {
            Some(path) => st.serialize_field("mask", path)?,
            None => st.serialize_field("mask", &self.mask)?,
        }
        st.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Annotation {
    pub annotation_id: String,
    pub provenance: Provenance,
    pub annotator_id: String,
    pub reference_text_id: String,
    pub regions: Vec<Region>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Annotation {
    pub fn labeled_regions(&self) -> Vec<(DistortionClass, RegionMask)> {
        self.regions.iter().map(|r| (r.class, r.mask.clone())).collect()
    }

    pub fn dims(&self) -> Option<Dims> {
        self.regions.first().map(|r| r.mask.dims())
    }
}

/// One (image, quality text, distortion segmentation) item.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityTriplet {
    pub item_id: String,
    pub image: String,
    pub source: Source,
    pub quality_text: String,
    pub mos: Option<f64>,
    pub annotations: Vec<Annotation>,
}

impl QualityTriplet {
    pub fn annotations_by(&self, provenance: Provenance) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(move |a| a.provenance == provenance)
    }

    pub fn has_human_annotation(&self) -> bool {
        self.annotations_by(Provenance::Human).next().is_some()
    }

    /// Mask grid shared by every region of the item, if any region exists.
    pub fn mask_dims(&self) -> Option<Dims> {
        self.annotations.iter().find_map(Annotation::dims)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    /// Directory that relative image and sidecar paths resolve against.
    pub root: PathBuf,
    pub items: Vec<QualityTriplet>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    Malformed(String),
    DuplicateItem(String),
    DuplicateAnnotation(String),
    DanglingMask(String),
    EmptyQualityText(String),
    DimsInconsistent { item_id: String, detail: String },
    MissingImage { item_id: String, path: String },
    ImageDimsMismatch { item_id: String, image: String, masks: String },
}

/// One invariant violation, with the 1-based manifest line it came from
/// (the 1-based item position for manifests built in memory).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub line: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: ", self.line)?;
        match &self.kind {
            ViolationKind::Malformed(e) => write!(f, "malformed item: {e}"),
            ViolationKind::DuplicateItem(id) => write!(f, "duplicate item_id {id:?}"),
            ViolationKind::DuplicateAnnotation(id) => write!(f, "duplicate annotation_id {id:?}"),
            ViolationKind::DanglingMask(p) => write!(f, "dangling mask reference {p:?}"),
            ViolationKind::EmptyQualityText(id) => write!(f, "item {id:?} has empty quality_text"),
            ViolationKind::DimsInconsistent { item_id, detail } => {
                write!(f, "item {item_id:?} has inconsistent mask dims: {detail}")
            }
            ViolationKind::MissingImage { item_id, path } => {
                write!(f, "item {item_id:?}: image {path:?} not found")
            }
            ViolationKind::ImageDimsMismatch { item_id, image, masks } => {
                write!(f, "item {item_id:?}: image is {image} but masks are {masks}")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest has {} violation(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl ManifestError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegion {
    class: DistortionClass,
    mask: serde_json::Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    annotation_id: String,
    provenance: Provenance,
    annotator_id: String,
    reference_text_id: String,
    #[serde(default)]
    regions: Vec<RawRegion>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    item_id: String,
    image: String,
    source: Source,
    quality_text: String,
    #[serde(default)]
    mos: Option<f64>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

fn resolve_region(root: &Path, raw: RawRegion) -> Result<Region, ViolationKind> {
    match raw.mask {
        serde_json::Value::String(rel) => {
            let text = fs::read_to_string(root.join(&rel))
                .map_err(|_| ViolationKind::DanglingMask(rel.clone()))?;
            let mask: RegionMask = serde_json::from_str(&text)
                .map_err(|e| ViolationKind::Malformed(format!("sidecar {rel:?}: {e}")))?;
            Ok(Region {
                class: raw.class,
                mask,
                sidecar: Some(rel),
            })
        }
        other => {
            let mask = RegionMask::deserialize(other)
                .map_err(|e| ViolationKind::Malformed(format!("mask: {e}")))?;
            Ok(Region::new(raw.class, mask))
        }
    }
}

fn resolve_item(root: &Path, raw: RawItem) -> Result<QualityTriplet, ViolationKind> {
    let mut annotations = Vec::with_capacity(raw.annotations.len());
    for a in raw.annotations {
        let regions = a
            .regions
            .into_iter()
            .map(|r| resolve_region(root, r))
            .collect::<Result<Vec<_>, _>>()?;
        annotations.push(Annotation {
            annotation_id: a.annotation_id,
            provenance: a.provenance,
            annotator_id: a.annotator_id,
            reference_text_id: a.reference_text_id,
            regions,
            meta: a.meta,
        });
    }
    Ok(QualityTriplet {
        item_id: raw.item_id,
        image: raw.image,
        source: raw.source,
        quality_text: raw.quality_text,
        mos: raw.mos,
        annotations,
    })
}

/// Structural checks that need no filesystem access beyond what loading did.
fn structural_violations(items: &[(usize, QualityTriplet)]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut item_ids = HashSet::new();
    let mut ann_ids = HashSet::new();
    for (line, item) in items {
        let line = *line;
        if !item_ids.insert(item.item_id.as_str()) {
            out.push(Violation {
                line,
                kind: ViolationKind::DuplicateItem(item.item_id.clone()),
            });
        }
        if item.quality_text.trim().is_empty() {
            out.push(Violation {
                line,
                kind: ViolationKind::EmptyQualityText(item.item_id.clone()),
            });
        }
        let mut dims: Option<Dims> = None;
        for a in &item.annotations {
            if !ann_ids.insert(a.annotation_id.as_str()) {
                out.push(Violation {
                    line,
                    kind: ViolationKind::DuplicateAnnotation(a.annotation_id.clone()),
                });
            }
            for r in &a.regions {
                match dims {
                    None => dims = Some(r.mask.dims()),
                    Some(d) if d != r.mask.dims() => {
                        out.push(Violation {
                            line,
                            kind: ViolationKind::DimsInconsistent {
                                item_id: item.item_id.clone(),
                                detail: format!(
                                    "annotation {:?} has {} but item uses {d}",
                                    a.annotation_id,
                                    r.mask.dims()
                                ),
                            },
                        });
                        break;
                    }
                    _ => {}
                }
            }
        }
    }
    out
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, items: Vec<QualityTriplet>) -> Self {
        Self {
            root: root.into(),
            items,
        }
    }

    pub fn get(&self, item_id: &str) -> Option<&QualityTriplet> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn get_mut(&mut self, item_id: &str) -> Option<&mut QualityTriplet> {
        self.items.iter_mut().find(|i| i.item_id == item_id)
    }

    pub fn annotation_count(&self) -> usize {
        self.items.iter().map(|i| i.annotations.len()).sum()
    }

    /// Structural invariants (ids, dims, non-empty text).
    pub fn check(&self) -> Vec<Violation> {
        let indexed: Vec<_> = self.items.iter().cloned().enumerate().map(|(i, it)| (i + 1, it)).collect();
        structural_violations(&indexed)
    }

    /// Full validation: structural invariants plus image existence and image
    /// dimensions matching the masks.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = self.check();
        for (i, item) in self.items.iter().enumerate() {
            let line = i + 1;
            let path = self.root.join(&item.image);
            if !path.is_file() {
                out.push(Violation {
                    line,
                    kind: ViolationKind::MissingImage {
                        item_id: item.item_id.clone(),
                        path: item.image.clone(),
                    },
                });
                continue;
            }
            if let (Some(md), Ok((w, h))) = (item.mask_dims(), image::image_dimensions(&path)) {
                if md.height() != h || md.width() != w {
                    out.push(Violation {
                        line,
                        kind: ViolationKind::ImageDimsMismatch {
                            item_id: item.item_id.clone(),
                            image: format!("{h}x{w}"),
                            masks: md.to_string(),
                        },
                    });
                }
            }
        }
        out
    }

    /// Serialize as JSON lines.
    pub fn to_jsonl(&self) -> Result<String, ManifestError> {
        let mut s = String::new();
        for item in &self.items {
            s.push_str(&serde_json::to_string(item)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Write the manifest atomically: a temp file in the target directory is
    /// renamed over `path`. Sidecar masks missing under the target root are
    /// written alongside.
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        for region in self.items.iter().flat_map(|i| &i.annotations).flat_map(|a| &a.regions) {
            if let Some(rel) = &region.sidecar {
                let target = dir.join(rel);
                if !target.exists() {
                    if let Some(parent) = target.parent() {
                        fs::create_dir_all(parent).map_err(|e| ManifestError::io(parent, e))?;
                    }
                    fs::write(&target, serde_json::to_vec(&region.mask)?)
                        .map_err(|e| ManifestError::io(&target, e))?;
                }
            }
        }
        let body = self.to_jsonl()?;
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| ManifestError::io(&dir, e))?;
        tmp.write_all(body.as_bytes()).map_err(|e| ManifestError::io(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| ManifestError::io(path, e))?;
        tmp.persist(path).map_err(|e| ManifestError::io(path, e.error))?;
        Ok(())
    }
}

/// Load and structurally check a JSON-lines manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let file = fs::File::open(path).map_err(|e| ManifestError::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut violations = Vec::new();
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ManifestError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawItem = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                violations.push(Violation {
                    line: line_no,
                    kind: ViolationKind::Malformed(e.to_string()),
                });
                continue;
            }
        };
        match resolve_item(&root, raw) {
            Ok(item) => items.push((line_no, item)),
            Err(kind) => violations.push(Violation { line: line_no, kind }),
        }
    }
    violations.extend(structural_violations(&items));
    if !violations.is_empty() {
        violations.sort_by_key(|v| v.line);
        return Err(ManifestError::Invalid(violations));
    }
    Ok(DatasetManifest {
        root,
        items: items.into_iter().map(|(_, it)| it).collect(),
    })
}

fn class_counts() -> BTreeMap<DistortionClass, u64> {
    DistortionClass::ALL.into_iter().map(|c| (c, 0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvenanceStats {
    /// Items carrying at least one annotation of this provenance.
    pub images: u64,
    pub annotations: u64,
    /// Annotations holding no region at all (pristine judgements).
    pub empty_annotations: u64,
    pub regions: BTreeMap<DistortionClass, u64>,
    /// Annotations containing at least one region of each class.
    pub annotations_with_class: BTreeMap<DistortionClass, u64>,
    pub region_pixels: BTreeMap<DistortionClass, u64>,
}

impl Default for ProvenanceStats {
    fn default() -> Self {
        Self {
            images: 0,
            annotations: 0,
            empty_annotations: 0,
            regions: class_counts(),
            annotations_with_class: class_counts(),
            region_pixels: class_counts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SourceStats {
    pub items: u64,
    pub human_images: u64,
    pub lmm_images: u64,
    pub human_annotations: u64,
    pub lmm_annotations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub items: u64,
    pub by_source: BTreeMap<Source, SourceStats>,
    pub human: ProvenanceStats,
    pub lmm: ProvenanceStats,
}

impl DatasetStats {
    pub fn provenance(&self, p: Provenance) -> &ProvenanceStats {
        match p {
            Provenance::Human => &self.human,
            Provenance::Lmm => &self.lmm,
        }
    }
}

pub fn stats(manifest: &DatasetManifest) -> DatasetStats {
    let mut out = DatasetStats {
        items: manifest.items.len() as u64,
        by_source: BTreeMap::new(),
        human: ProvenanceStats::default(),
        lmm: ProvenanceStats::default(),
    };
    for item in &manifest.items {
        let src = out.by_source.entry(item.source).or_default();
        src.items += 1;
        let mut seen = [false, false];
        for a in &item.annotations {
            let (p, slot) = match a.provenance {
                Provenance::Human => {
                    src.human_annotations += 1;
                    (&mut out.human, 0)
                }
                Provenance::Lmm => {
                    src.lmm_annotations += 1;
                    (&mut out.lmm, 1)
                }
            };
            if !seen[slot] {
                seen[slot] = true;
                p.images += 1;
            }
            p.annotations += 1;
            if a.regions.is_empty() {
                p.empty_annotations += 1;
            }
            let mut present = [false; 5];
            for r in &a.regions {
                *p.regions.get_mut(&r.class).unwrap() += 1;
                *p.region_pixels.get_mut(&r.class).unwrap() += r.mask.area();
                present[r.class.index()] = true;
            }
            for c in DistortionClass::ALL.into_iter().filter(|c| present[c.index()]) {
                *p.annotations_with_class.get_mut(&c).unwrap() += 1;
            }
        }
        if seen[0] {
            src.human_images += 1;
        }
        if seen[1] {
            src.lmm_images += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Seeded train/test assignment. Only items with at least one human
/// annotation are eligible for the test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub test_count: usize,
    pub algorithm: String,
    pub assignments: BTreeMap<String, Split>,
}

pub const SPLIT_ALGORITHM: &str = "xoshiro256++/splitmix64-seed/partial-fisher-yates";

impl SplitSpec {
    pub fn items_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(move |(_, s)| **s == split)
            .map(|(k, _)| k.as_str())
    }

    pub fn get(&self, item_id: &str) -> Option<Split> {
        self.assignments.get(item_id).copied()
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|e| ManifestError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("requested {requested} test items but only {eligible} items have human annotations")]
pub struct InsufficientItems {
    pub requested: usize,
    pub eligible: usize,
}

/// Uniform integer in `0..n` by rejection sampling, independent of any
/// library's range-sampling implementation.
fn uniform_below(rng: &mut Xoshiro256PlusPlus, n: u64) -> u64 {
    debug_assert!(n > 0);
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % n;
        }
    }
}

pub fn make_split(
    manifest: &DatasetManifest,
    seed: u64,
    test_count: usize,
) -> Result<SplitSpec, InsufficientItems> {
    let mut eligible: Vec<&str> = manifest
        .items
        .iter()
        .filter(|i| i.has_human_annotation())
        .map(|i| i.item_id.as_str())
        .collect();
    if test_count > eligible.len() {
        return Err(InsufficientItems {
            requested: test_count,
            eligible: eligible.len(),
        });
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let n = eligible.len();
    for i in 0..test_count {
        let j = i + uniform_below(&mut rng, (n - i) as u64) as usize;
        eligible.swap(i, j);
    }
    let test: HashSet<&str> = eligible[..test_count].iter().copied().collect();
    let assignments = manifest
        .items
        .iter()
        .map(|i| {
            let s = if test.contains(i.item_id.as_str()) {
                Split::Test
            } else {
                Split::Train
            };
            (i.item_id.clone(), s)
        })
        .collect();
    Ok(SplitSpec {
        seed,
        test_count,
        algorithm: SPLIT_ALGORITHM.to_string(),
        assignments,
    })
}
