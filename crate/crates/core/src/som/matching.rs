use serde::Serialize;

use super::prompt::CANDIDATE_TYPES;
use crate::mask::DistortionClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LabelMatch {
    /// `None` for "no distortion".
    pub class: Option<DistortionClass>,
    pub canonical: &'static str,
    pub distance: usize,
}

fn class_of(canonical: &str) -> Option<DistortionClass> {
    match canonical {
        "blur" => Some(DistortionClass::Blur),
        "jitter" => Some(DistortionClass::Jitter),
        "overexposure" => Some(DistortionClass::Overexposure),
        "low light" => Some(DistortionClass::LowLight),
        "noise" => Some(DistortionClass::Noise),
        _ => None,
    }
}

/// Closest candidate type by case-folded Levenshtein distance; ties go to
/// the earlier candidate in prompt order.
pub fn match_label(raw_label: &str) -> LabelMatch {
    let folded = raw_label.trim().to_lowercase();
    let mut best: Option<(usize, &'static str)> = None;
    for cand in CANDIDATE_TYPES {
        let d = strsim::levenshtein(&folded, cand);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, cand));
        }
    }
    let (distance, canonical) = best.expect("non-empty candidate list");
    LabelMatch {
        class: class_of(canonical),
        canonical,
        distance,
    }
}

pub fn match_distortion(raw_label: &str) -> Option<DistortionClass> {
    match_label(raw_label).class
}
