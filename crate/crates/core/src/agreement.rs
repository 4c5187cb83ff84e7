//! Inter-annotator agreement: the mean, over images, of the mean pairwise
//! recall `|A ∩ B| / min(|A|, |B|)` across all unordered annotation pairs of
//! the image.
//!
//! The pair count per image is read as `M_i = C(m_i, 2)` for `m_i`
//! annotations. In per-class mode `A` and `B` are the per-class union masks
//! of the two annotations, averaged over the classes both annotations use; a
//! pair that shares no class scores 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, DatasetManifest, Provenance, Source};
use crate::mask::{DistortionClass, MaskError, RegionMask};

pub const PAIR_COUNT_CONVENTION: &str = "M_i = C(m_i, 2) unordered annotation pairs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingMode {
    #[default]
    PerClass,
    ClassAgnostic,
}

impl std::str::FromStr for PairingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-class" => Ok(Self::PerClass),
            "class-agnostic" => Ok(Self::ClassAgnostic),
            other => Err(format!("unknown pairing mode {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AgreementError {
    #[error("annotation {0:?} has no non-empty region")]
    EmptyAnnotation(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("no image has two or more eligible annotations")]
    NoEligibleImages,
}

fn has_pixels(a: &Annotation) -> bool {
    a.regions.iter().any(|r| !r.mask.is_empty())
}

fn union_of<'a>(masks: impl Iterator<Item = &'a RegionMask>) -> Result<Option<RegionMask>, MaskError> {
    let mut acc: Option<RegionMask> = None;
    for m in masks {
        match &mut acc {
            None => acc = Some(m.clone()),
            Some(u) => u.union_with(m)?,
        }
    }
    Ok(acc.filter(|m| !m.is_empty()))
}

fn class_unions(a: &Annotation) -> Result<[Option<RegionMask>; 5], MaskError> {
    let mut out: [Option<RegionMask>; 5] = Default::default();
    for c in DistortionClass::ALL {
        out[c.index()] = union_of(a.regions.iter().filter(|r| r.class == c).map(|r| &r.mask))?;
    }
    Ok(out)
}

/// Agreement between two annotations of the same image, in `[0, 1]`.
pub fn pair_recall(a: &Annotation, b: &Annotation, mode: PairingMode) -> Result<f64, AgreementError> {
    for x in [a, b] {
        if !has_pixels(x) {
            return Err(AgreementError::EmptyAnnotation(x.annotation_id.clone()));
        }
    }
    match mode {
        PairingMode::ClassAgnostic => {
            let ua = union_of(a.regions.iter().map(|r| &r.mask))?.expect("non-empty");
            let ub = union_of(b.regions.iter().map(|r| &r.mask))?.expect("non-empty");
            Ok(ua.overlap_over_smaller(&ub)?)
        }
        PairingMode::PerClass => {
            let ca = class_unions(a)?;
            let cb = class_unions(b)?;
            let mut sum = 0.0;
            let mut shared = 0usize;
            for (ma, mb) in ca.iter().zip(&cb) {
                if let (Some(ma), Some(mb)) = (ma, mb) {
                    sum += ma.overlap_over_smaller(mb)?;
                    shared += 1;
                }
            }
            if shared == 0 {
                Ok(0.0)
            } else {
                Ok(sum / shared as f64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageAgreement {
    pub item_id: String,
    pub source: Source,
    /// `m_i`, annotations entering the pairing.
    pub annotations: usize,
    /// `M_i`
    pub pairs: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceAgreement {
    pub images: usize,
    pub recall: f64,
}

/// Mean recall of the pairs an annotator takes part in, for spotting
/// annotators who drift from the rest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotatorAgreement {
    pub images: usize,
    pub pairs: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub mode: PairingMode,
    pub pair_count_convention: &'static str,
    pub provenance: Option<Provenance>,
    pub source_filter: Option<Source>,
    /// `N`, images with at least two eligible annotations.
    pub images_counted: usize,
    pub recall: f64,
    pub per_source: BTreeMap<Source, SourceAgreement>,
    /// Annotations left out because they carry no region pixels.
    pub skipped_empty_annotations: usize,
    pub per_annotator: BTreeMap<String, AnnotatorAgreement>,
    pub images: Vec<ImageAgreement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgreementOptions {
    pub source: Option<Source>,
    pub mode: PairingMode,
    /// Restrict to one provenance; `None` pairs every annotation.
    pub provenance: Option<Provenance>,
}

impl Default for AgreementOptions {
    fn default() -> Self {
        Self {
            source: None,
            mode: PairingMode::PerClass,
            provenance: Some(Provenance::Human),
        }
    }
}

/// Recall of every unordered pair `(i, j)`, `i < j`.
fn pair_recalls(anns: &[&Annotation], mode: PairingMode) -> Result<Vec<(usize, usize, f64)>, AgreementError> {
    let mut out = Vec::new();
    for i in 0..anns.len() {
        for j in (i + 1)..anns.len() {
            out.push((i, j, pair_recall(anns[i], anns[j], mode)?));
        }
    }
    Ok(out)
}

pub fn dataset_agreement(
    manifest: &DatasetManifest,
    opts: &AgreementOptions,
) -> Result<AgreementReport, AgreementError> {
    let mut skipped = 0usize;
    let mut work = Vec::new();
    for item in &manifest.items {
        if opts.source.is_some_and(|s| s != item.source) {
            continue;
        }
        let eligible: Vec<&Annotation> = item
            .annotations
            .iter()
            .filter(|a| opts.provenance.is_none_or(|p| p == a.provenance))
            .filter(|a| {
                let keep = has_pixels(a);
                if !keep {
                    skipped += 1;
                }
                keep
            })
            .collect();
        if eligible.len() >= 2 {
            work.push((item, eligible));
        }
    }
    if work.is_empty() {
        return Err(AgreementError::NoEligibleImages);
    }
    let scored: Vec<(ImageAgreement, Vec<(usize, usize, f64)>)> = work
        .par_iter()
        .map(|(item, anns)| {
            let pairs = pair_recalls(anns, opts.mode)?;
            let recall = pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64;
            let img = ImageAgreement {
                item_id: item.item_id.clone(),
                source: item.source,
                annotations: anns.len(),
                pairs: pairs.len(),
                recall,
            };
            Ok((img, pairs))
        })
        .collect::<Result<_, AgreementError>>()?;

    // Each pair counts once for both of its annotators.
    let mut per_annotator: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
    for ((_, anns), (_, pairs)) in work.iter().zip(&scored) {
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j, r) in pairs {
            for k in [i, j] {
                let e = per_annotator.entry(anns[k].annotator_id.clone()).or_default();
                if seen.insert(&anns[k].annotator_id) {
                    e.0 += 1;
                }
                e.1 += 1;
                e.2 += r;
            }
        }
    }
    let images: Vec<ImageAgreement> = scored.into_iter().map(|(img, _)| img).collect();

    let mut per_source: BTreeMap<Source, (usize, f64)> = BTreeMap::new();
    for img in &images {
        let e = per_source.entry(img.source).or_default();
        e.0 += 1;
        e.1 += img.recall;
    }
    let recall = images.iter().map(|i| i.recall).sum::<f64>() / images.len() as f64;
    Ok(AgreementReport {
        mode: opts.mode,
        pair_count_convention: PAIR_COUNT_CONVENTION,
        provenance: opts.provenance,
        source_filter: opts.source,
        images_counted: images.len(),
        recall,
        per_source: per_source
            .into_iter()
            .map(|(s, (n, sum))| (s, SourceAgreement { images: n, recall: sum / n as f64 }))
            .collect(),
        per_annotator: per_annotator
            .into_iter()
            .map(|(id, (images, pairs, sum))| {
                let recall = sum / pairs as f64;
                (id, AnnotatorAgreement { images, pairs, recall })
            })
            .collect(),
        skipped_empty_annotations: skipped,
        images,
    })
}

impl AgreementReport {
    /// Two-row text table: dataset names, then recall per dataset.
    pub fn to_table(&self) -> String {
        let mut head = String::from("Dataset");
        let mut row = String::from("Recall ");
        for (src, agg) in &self.per_source {
            let name = src.name();
            let cell = format!("{:.3}", agg.recall);
            let w = name.len().max(cell.len());
            let _ = write!(head, " | {name:>w$}");
            let _ = write!(row, " | {cell:>w$}");
        }
        format!(
            "{head}\n{row}\nall: {:.3} over {} images ({})\n",
            self.recall, self.images_counted, self.pair_count_convention
        )
    }

    pub fn annotator_table(&self) -> String {
        let w = self.per_annotator.keys().map(String::len).max().unwrap_or(0).max("annotator".len());
        let mut out = format!("{:w$}  images  pairs  recall\n", "annotator");
        for (id, a) in &self.per_annotator {
            let _ = writeln!(out, "{id:w$}  {:>6}  {:>5}  {:.3}", a.images, a.pairs, a.recall);
        }
        out
    }
}
