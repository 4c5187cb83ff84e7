use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use super::marks::MarkedRegionSet;
use super::matching::match_label;
use super::response::AutoLabelResponse;
use crate::dataset::{Annotation, Provenance, Region};

/// Identity fields stamped onto a composed annotation.
#[derive(Debug, Clone)]
pub struct AnnotationStamp {
    pub annotation_id: String,
    pub annotator_id: String,
    pub reference_text_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComposeOutcome {
    pub annotation: Annotation,
    pub warnings: Vec<String>,
    /// Marks labeled "no distortion" or not mentioned in the reply.
    pub dropped_marks: Vec<u32>,
    /// True when no region survived.
    pub empty: bool,
}

/// Turn a labeled reply into an LLM-provenance annotation. Entries naming a
/// mark that does not exist are ignored with a warning; when a mark is named
/// twice the first entry wins.
pub fn compose_annotation(marks: &MarkedRegionSet, response: &AutoLabelResponse, stamp: &AnnotationStamp) -> ComposeOutcome {
    let mut warnings = Vec::new();
    let mut labels: BTreeMap<u32, &str> = BTreeMap::new();
    for e in &response.entries {
        if marks.get(e.mark).is_none() {
            warnings.push(format!("reply references unknown mark {}", e.mark));
            continue;
        }
        if labels.contains_key(&e.mark) {
            warnings.push(format!("mark {} labeled more than once; keeping the first", e.mark));
            continue;
        }
        labels.insert(e.mark, e.raw_label.as_str());
    }

    let mut regions = Vec::new();
    let mut dropped = Vec::new();
    let mut kept = HashSet::new();
    for r in &marks.regions {
        let Some(raw) = labels.get(&r.mark) else {
            dropped.push(r.mark);
            continue;
        };
        let m = match_label(raw);
        if m.distance > 0 {
            warnings.push(format!("mark {}: {raw:?} matched to {:?} at distance {}", r.mark, m.canonical, m.distance));
        }
        match m.class {
            Some(class) => {
                kept.insert(r.mark);
                regions.push(Region::new(class, r.mask.clone()));
            }
            None => dropped.push(r.mark),
        }
    }

    let empty = regions.is_empty();
    let mut meta = BTreeMap::new();
    meta.insert("marks".to_string(), marks.len().to_string());
    ComposeOutcome {
        annotation: Annotation {
            annotation_id: stamp.annotation_id.clone(),
            provenance: Provenance::Lmm,
            annotator_id: stamp.annotator_id.clone(),
            reference_text_id: stamp.reference_text_id.clone(),
            regions,
            meta,
        },
        warnings,
        dropped_marks: dropped,
        empty,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Dims, DistortionClass, RegionMask};
    use crate::som::marks::assign_marks;
    use crate::som::response::{parse_response, AutoLabelEntry};

    fn stamp() -> AnnotationStamp {
        AnnotationStamp {
            annotation_id: "a".into(),
            annotator_id: "model".into(),
            reference_text_id: "i".into(),
        }
    }

    /// Five disjoint strips with distinct areas, so marks follow strip order.
    fn five_marks() -> MarkedRegionSet {
        let d = Dims::new(20, 20).unwrap();
        let regions: Vec<_> = (0..5u32).map(|i| RegionMask::rect(d, 0, i * 4, 20 - i * 3, 4)).collect();
        assign_marks(&regions).unwrap()
    }

    #[test]
    fn golden_reply_drops_no_distortion() {
        let marks = five_marks();
        let reply = parse_response(crate::som::response::tests::GOLDEN_REPLY).unwrap();
        let out = compose_annotation(&marks, &reply, &stamp());
        let classes: Vec<_> = out.annotation.regions.iter().map(|r| r.class).collect();
        assert_eq!(classes, vec![DistortionClass::Blur, DistortionClass::LowLight, DistortionClass::LowLight]);
        assert_eq!(out.annotation.regions[0].mask, marks.get(2).unwrap().mask);
        assert_eq!(out.dropped_marks, vec![1, 5]);
        assert_eq!(out.annotation.provenance, Provenance::Lmm);
        assert!(!out.empty);
    }

    #[test]
    fn all_no_distortion_is_flagged_empty() {
        let marks = five_marks();
        let entries = (1..=5)
            .map(|mark| AutoLabelEntry {
                mark,
                raw_label: "no distortion".into(),
                message: String::new(),
            })
            .collect();
        let out = compose_annotation(&marks, &AutoLabelResponse { entries }, &stamp());
        assert!(out.empty);
        assert!(out.annotation.regions.is_empty());
    }

    #[test]
    fn unknown_and_repeated_marks() {
        let marks = five_marks();
        let reply = parse_response(r#"[{"9": "blur"}, {"1": "noise"}, {"1": "blur"}]"#).unwrap();
        let out = compose_annotation(&marks, &reply, &stamp());
        assert_eq!(out.annotation.regions.len(), 1);
        assert_eq!(out.annotation.regions[0].class, DistortionClass::Noise);
        assert_eq!(out.warnings.len(), 2);
        assert!(out.warnings[0].contains("unknown mark 9"));
    }
}
