//! Benchmark scoring: per-class IoU and pixel accuracy with averages weighted
//! by the number of test images containing each class.
//!
//! Conventions:
//! - `IoU_c = TP/(TP+FP+FN)`, 1.0 when the denominator is 0.
//! - `Acc_c = TP/(TP+FN)`, 1.0 when class `c` has no ground-truth pixel.
//! - class weight `w_c` counts test images whose ground truth contains `c`.
//! - with several ground truths for one prediction, each comparison is
//!   weighted `1/n` so every image contributes equally.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, DatasetManifest, Provenance, QualityTriplet, Split, SplitSpec};
use crate::mask::{merge_smaller_first, DistortionClass, LabelMap, MaskError};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("nothing was scored")]
    Empty,
    #[error("{} prediction(s) missing, first: {}", .0.len(), .0[0])]
    MissingPredictions(Vec<String>),
    #[error("prediction {key}: {source}")]
    BadPrediction {
        key: String,
        #[source]
        source: MaskError,
    },
    #[error("item {0:?} listed in the split is not in the manifest")]
    UnknownItem(String),
}

/// Confusion counts of one prediction against one ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ItemCounts {
    pub tp: [u64; 5],
    pub fp: [u64; 5],
    pub fn_: [u64; 5],
    pub present: [bool; 5],
}

pub fn score_item(pred: &LabelMap, gt: &LabelMap) -> Result<ItemCounts, MaskError> {
    if pred.dims() != gt.dims() {
        return Err(MaskError::DimsMismatch {
            a: pred.dims(),
            b: gt.dims(),
        });
    }
    let mut out = ItemCounts::default();
    for (&p, &g) in pred.codes().iter().zip(gt.codes()) {
        if p == g {
            if p != 0 {
                out.tp[p as usize - 1] += 1;
            }
            continue;
        }
        if p != 0 {
            out.fp[p as usize - 1] += 1;
        }
        if g != 0 {
            out.fn_[g as usize - 1] += 1;
        }
    }
    for c in DistortionClass::ALL {
        let i = c.index();
        out.present[i] = out.tp[i] + out.fn_[i] > 0;
    }
    Ok(out)
}

/// Weighted confusion sums. Weights are 1 per comparison in per-annotation
/// mode and `1/n` in per-image-average mode, so sums are kept in `f64`
/// (exact for integer counts below 2^53).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfusionAccumulator {
    pub tp: [f64; 5],
    pub fp: [f64; 5],
    pub fn_: [f64; 5],
    pub images: [f64; 5],
    /// Scored items (images or annotations, by mode), unweighted.
    pub items: usize,
}

impl ConfusionAccumulator {
    pub fn add(&mut self, counts: &ItemCounts, weight: f64) {
        for i in 0..5 {
            self.tp[i] += weight * counts.tp[i] as f64;
            self.fp[i] += weight * counts.fp[i] as f64;
            self.fn_[i] += weight * counts.fn_[i] as f64;
            if counts.present[i] {
                self.images[i] += weight;
            }
        }
    }

    /// Add one fully weighted item.
    pub fn push(&mut self, counts: &ItemCounts) {
        self.add(counts, 1.0);
        self.items += 1;
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for i in 0..5 {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
            self.images[i] += other.images[i];
        }
        self.items += other.items;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    #[default]
    PerAnnotation,
    PerImageAverage,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-annotation" => Ok(Self::PerAnnotation),
            "per-image-average" => Ok(Self::PerImageAverage),
            other => Err(format!("unknown evaluation mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub iou: f64,
    pub acc: f64,
    /// Weight `w_c`: test images whose ground truth contains the class.
    pub images: f64,
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<EvalMode>,
    pub items: usize,
    pub per_class: BTreeMap<DistortionClass, ClassScore>,
    pub average_iou: f64,
    pub average_acc: f64,
    /// True when no scored image contained any distortion, in which case
    /// the averages fall back to an unweighted class mean.
    pub unweighted_average: bool,
    pub conventions: Vec<&'static str>,
}

const CONVENTIONS: [&str; 3] = [
    "IoU is 1.0 for a class with no predicted and no ground-truth pixels",
    "Acc is 1.0 for a class with no ground-truth pixels",
    "averages weighted by the number of test images whose ground truth contains the class",
];

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

pub fn aggregate(acc: &ConfusionAccumulator) -> Result<ScoreReport, ScoreError> {
    if acc.items == 0 {
        return Err(ScoreError::Empty);
    }
    let mut per_class = BTreeMap::new();
    let (mut wi, mut wa, mut wsum) = (0.0, 0.0, 0.0);
    let (mut ui, mut ua) = (0.0, 0.0);
    for c in DistortionClass::ALL {
        let i = c.index();
        let (tp, fp, fn_) = (acc.tp[i], acc.fp[i], acc.fn_[i]);
        let score = ClassScore {
            iou: ratio(tp, tp + fp + fn_),
            acc: ratio(tp, tp + fn_),
            images: acc.images[i],
            tp,
            fp,
            fn_,
        };
        wi += score.images * score.iou;
        wa += score.images * score.acc;
        wsum += score.images;
        ui += score.iou;
        ua += score.acc;
        per_class.insert(c, score);
    }
    let unweighted = wsum == 0.0;
    let (average_iou, average_acc) = if unweighted { (ui / 5.0, ua / 5.0) } else { (wi / wsum, wa / wsum) };
    Ok(ScoreReport {
        method: None,
        mode: None,
        items: acc.items,
        per_class,
        average_iou,
        average_acc,
        unweighted_average: unweighted,
        conventions: CONVENTIONS.to_vec(),
    })
}

impl ScoreReport {
    pub fn with_method(mut self, method: impl Into<String>) -> Self {
        self.method = Some(method.into());
        self
    }

    /// One benchmark-table row: per-class mIoU then mAcc, then averages.
    pub fn to_table(&self) -> String {
        let mut head = format!("{:<16}", "Method");
        let mut row = format!("{:<16}", self.method.as_deref().unwrap_or("run"));
        for metric in ["mIoU", "mAcc"] {
            for c in DistortionClass::ALL {
                let s = &self.per_class[&c];
                let v = if metric == "mIoU" { s.iou } else { s.acc };
                let name = format!("{} {metric}", c.label());
                let w = name.len();
                let _ = write!(head, " | {name:>w$}");
                let _ = write!(row, " | {:>w$}", format!("{v:.3}"));
            }
        }
        let _ = write!(head, " | avg mIoU | avg mAcc");
        let _ = write!(row, " | {:>8.3} | {:>8.3}", self.average_iou, self.average_acc);
        format!("{head}\n{row}\n")
    }
}

/// File name of the prediction for an item, or for one of its annotations.
pub fn prediction_key(item_id: &str, annotation_id: Option<&str>) -> String {
    match annotation_id {
        Some(a) => format!("{item_id}__{a}.png"),
        None => format!("{item_id}.png"),
    }
}

/// Ground-truth label map of one annotation, smaller-region-first merged.
pub fn ground_truth(item: &QualityTriplet, ann: &Annotation, fallback: Option<LabelMap>) -> Result<LabelMap, MaskError> {
    let dims = match item.mask_dims() {
        Some(d) => d,
        None => match fallback {
            Some(f) => f.dims(),
            None => return Err(MaskError::EmptyMask),
        },
    };
    merge_smaller_first(dims, &ann.labeled_regions())
}

fn load_prediction(dir: &Path, key: &str) -> Result<LabelMap, ScoreError> {
    LabelMap::read_png(&dir.join(key)).map_err(|source| ScoreError::BadPrediction {
        key: key.to_string(),
        source,
    })
}

fn select_items<'m>(
    manifest: &'m DatasetManifest,
    split: Option<(&SplitSpec, Split)>,
) -> Result<Vec<&'m QualityTriplet>, ScoreError> {
    match split {
        None => Ok(manifest.items.iter().collect()),
        Some((spec, which)) => spec
            .items_in(which)
            .map(|id| manifest.get(id).ok_or_else(|| ScoreError::UnknownItem(id.to_string())))
            .collect(),
    }
}

/// Score the prediction files in `pred_dir` against the human ground truth of
/// the selected items. Items without human annotations are skipped.
pub fn evaluate_run(
    manifest: &DatasetManifest,
    split: Option<(&SplitSpec, Split)>,
    pred_dir: &Path,
    mode: EvalMode,
) -> Result<ScoreReport, ScoreError> {
    let items = select_items(manifest, split)?;
    let items: Vec<_> = items.into_iter().filter(|i| i.has_human_annotation()).collect();

    let mut missing = Vec::new();
    for item in &items {
        let keys: Vec<String> = match mode {
            EvalMode::PerAnnotation => item
                .annotations_by(Provenance::Human)
                .map(|a| prediction_key(&item.item_id, Some(&a.annotation_id)))
                .collect(),
            EvalMode::PerImageAverage => vec![prediction_key(&item.item_id, None)],
        };
        missing.extend(keys.into_iter().filter(|k| !pred_dir.join(k).is_file()));
    }
    if !missing.is_empty() {
        return Err(ScoreError::MissingPredictions(missing));
    }

    let partials: Vec<ConfusionAccumulator> = items
        .par_iter()
        .map(|item| score_one(item, pred_dir, mode))
        .collect::<Result<_, _>>()?;
    // Sequential reduction keeps fractional sums independent of scheduling.
    let mut acc = ConfusionAccumulator::default();
    for p in &partials {
        acc.merge(p);
    }
    let mut report = aggregate(&acc)?;
    report.mode = Some(mode);
    Ok(report)
}

fn score_one(item: &QualityTriplet, pred_dir: &Path, mode: EvalMode) -> Result<ConfusionAccumulator, ScoreError> {
    let mut acc = ConfusionAccumulator::default();
    let gts: Vec<&Annotation> = item.annotations_by(Provenance::Human).collect();
    match mode {
        EvalMode::PerAnnotation => {
            for a in gts {
                let key = prediction_key(&item.item_id, Some(&a.annotation_id));
                let pred = load_prediction(pred_dir, &key)?;
                let gt = ground_truth(item, a, Some(pred.clone()))?;
                acc.push(&score_item(&pred, &gt).map_err(|source| ScoreError::BadPrediction { key, source })?);
            }
        }
        EvalMode::PerImageAverage => {
            let key = prediction_key(&item.item_id, None);
            let pred = load_prediction(pred_dir, &key)?;
            let w = 1.0 / gts.len() as f64;
            for a in gts {
                let gt = ground_truth(item, a, Some(pred.clone()))?;
                let counts = score_item(&pred, &gt).map_err(|source| ScoreError::BadPrediction {
                    key: key.clone(),
                    source,
                })?;
                acc.add(&counts, w);
            }
            acc.items += 1;
        }
    }
    Ok(acc)
}

/// Write ground-truth label maps as prediction files, for self-consistency
/// runs and fixtures. Returns the written paths.
pub fn export_ground_truth(
    manifest: &DatasetManifest,
    split: Option<(&SplitSpec, Split)>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ScoreError> {
    let mut written = Vec::new();
    for item in select_items(manifest, split)? {
        for a in item.annotations_by(Provenance::Human) {
            let gt = ground_truth(item, a, None)?;
            let p = out_dir.join(prediction_key(&item.item_id, Some(&a.annotation_id)));
            gt.write_png(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}
