//! Parametric regional distortions for building ground-truth triplets.
//!
//! These are verification fixtures, not a model of real degradations. Each
//! kind has a simple closed form, applied only inside its region:
//!
//! | kind         | effect at severity `s`                                   |
//! |--------------|----------------------------------------------------------|
//! | blur         | Gaussian, σ = 3s px, clamp-to-edge sampling              |
//! | noise        | additive N(0, (64s)²) per channel, seeded                |
//! | overexposure | scale by 1 + 2s, clip at 255                             |
//! | low light    | scale by 1 − 0.85s                                       |
//! | jitter       | box blur of length 1 + 2·round(6s) along a seeded axis   |

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Annotation, Provenance, QualityTriplet, Region, Source};
use crate::mask::{Dims, DistortionClass, RegionMask};

pub const SYNTH_ANNOTATOR: &str = "synth";
/// Ground-truth annotation ids are `synth-gt-<item_id>`.
pub const SYNTH_ANNOTATION_PREFIX: &str = "synth-gt-";

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("severity {0} outside [0, 1]")]
    Severity(f64),
    #[error("spec region is empty")]
    EmptyRegion,
    #[error("region {region} does not match image {image}")]
    DimsMismatch { region: Dims, image: String },
    #[error("specs {0} and {1} overlap")]
    Overlap(usize, usize),
    #[error("cannot place {requested} disjoint regions (at most {max})")]
    TooManyRegions { requested: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionClass,
    pub region: RegionMask,
    pub severity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DistortionSpec {
    fn check(&self, img: &RgbImage) -> Result<(), SynthError> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(SynthError::Severity(self.severity));
        }
        if self.region.is_empty() {
            return Err(SynthError::EmptyRegion);
        }
        let d = self.region.dims();
        if d.width() != img.width() || d.height() != img.height() {
            return Err(SynthError::DimsMismatch {
                region: d,
                image: format!("{}x{}", img.height(), img.width()),
            });
        }
        Ok(())
    }
}

pub fn flat_image(width: u32, height: u32, value: u8) -> RgbImage {
    RgbImage::from_pixel(width, height, Rgb([value; 3]))
}

/// Smooth gradients plus a coarse checker, so every kind has something to
/// act on.
pub fn pattern_image(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let phase: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    RgbImage::from_fn(width, height, |x, y| {
        let u = x as f64 / width.max(1) as f64;
        let v = y as f64 / height.max(1) as f64;
        let checker = if (x / 8 + y / 8) % 2 == 0 { 30.0 } else { -30.0 };
        let ch = |k: usize| {
            let base = 70.0 + 90.0 * ((u + v) * 0.5 + phase[k]).fract();
            (base + checker).round().clamp(0.0, 255.0) as u8
        };
        Rgb([ch(0), ch(1), ch(2)])
    })
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn sample(img: &RgbImage, x: i64, y: i64) -> &Rgb<u8> {
    let cx = x.clamp(0, img.width() as i64 - 1) as u32;
    let cy = y.clamp(0, img.height() as i64 - 1) as u32;
    img.get_pixel(cx, cy)
}

/// Weighted sum of samples at `(x + k·dx, y + k·dy)` for `k` in `-r..=r`.
fn convolve_at(img: &RgbImage, x: u32, y: u32, (dx, dy): (i64, i64), weights: &[f64]) -> [f64; 3] {
    let r = (weights.len() / 2) as i64;
    let mut acc = [0.0; 3];
    for (i, w) in weights.iter().enumerate() {
        let k = i as i64 - r;
        let p = sample(img, x as i64 + k * dx, y as i64 + k * dy);
        for c in 0..3 {
            acc[c] += w * p[c] as f64;
        }
    }
    acc
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filter evaluated over the whole image (so region edges sample
/// real neighbours), written back inside `region` only.
fn filter_region(img: &RgbImage, region: &RegionMask, passes: &[((i64, i64), Vec<f64>)]) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut planes: Vec<[f64; 3]> = img.pixels().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect();
    for (dir, weights) in passes {
        let r = (weights.len() / 2) as i64;
        let prev = planes.clone();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = [0.0; 3];
                for (i, wt) in weights.iter().enumerate() {
                    let k = i as i64 - r;
                    let sx = (x + k * dir.0).clamp(0, w as i64 - 1);
                    let sy = (y + k * dir.1).clamp(0, h as i64 - 1);
                    let p = prev[(sy * w as i64 + sx) as usize];
                    for c in 0..3 {
                        acc[c] += wt * p[c];
                    }
                }
                planes[(y * w as i64 + x) as usize] = acc;
            }
        }
    }
    let mut out = img.clone();
    for (x, y) in region.pixels() {
        let p = planes[(y * w + x) as usize];
        out.put_pixel(x, y, Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])]));
    }
    out
}

const JITTER_AXES: [(i64, i64); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];

/// Apply one distortion. Pixels outside the region are copied unchanged and
/// severity 0 is the identity for every kind.
pub fn apply(img: &RgbImage, spec: &DistortionSpec) -> Result<RgbImage, SynthError> {
    spec.check(img)?;
    let s = spec.severity;
    if s == 0.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    match spec.kind {
        DistortionClass::Blur => {
            let k = gaussian_kernel(3.0 * s);
            return Ok(filter_region(img, &spec.region, &[((1, 0), k.clone()), ((0, 1), k)]));
        }
        DistortionClass::Jitter => {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
            let axis = *JITTER_AXES.choose(&mut rng).expect("non-empty");
            let len = 1 + 2 * (6.0 * s).round() as usize;
            let k = vec![1.0 / len as f64; len];
            for (x, y) in spec.region.pixels() {
                let v = convolve_at(img, x, y, axis, &k);
                out.put_pixel(x, y, Rgb([to_u8(v[0]), to_u8(v[1]), to_u8(v[2])]));
            }
        }
        DistortionClass::Noise => {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
            let n = Normal::new(0.0, 64.0 * s).expect("finite std");
            for (x, y) in spec.region.pixels() {
                let p = out.get_pixel_mut(x, y);
                for c in 0..3 {
                    p[c] = to_u8(p[c] as f64 + n.sample(&mut rng));
                }
            }
        }
        DistortionClass::Overexposure | DistortionClass::LowLight => {
            let gain = if spec.kind == DistortionClass::Overexposure { 1.0 + 2.0 * s } else { 1.0 - 0.85 * s };
            for (x, y) in spec.region.pixels() {
                let p = out.get_pixel_mut(x, y);
                for c in 0..3 {
                    p[c] = to_u8(p[c] as f64 * gain);
                }
            }
        }
    }
    Ok(out)
}

/// Sentence templates for synthetic quality descriptions. `{where}` is
/// replaced by a location phrase and `{how}` by a severity adverb. Each
/// kind's templates must name the kind exactly once and no other kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTemplates {
    pub per_kind: BTreeMap<DistortionClass, Vec<String>>,
    pub pristine: Vec<String>,
    pub closing: Vec<String>,
}

impl Default for TextTemplates {
    fn default() -> Self {
        let t = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let mut per_kind = BTreeMap::new();
        per_kind.insert(
            DistortionClass::Blur,
            t(&["The {where} is {how} blurry, with fine detail lost.", "Details in the {where} suffer from {how} strong blur."]),
        );
        per_kind.insert(
            DistortionClass::Noise,
            t(&["Visible noise covers the {where}, {how} grainy.", "The {where} is {how} noisy."]),
        );
        per_kind.insert(
            DistortionClass::Overexposure,
            t(&["The {where} is {how} overexposed and washed out.", "Highlights in the {where} are {how} overexposed."]),
        );
        per_kind.insert(
            DistortionClass::LowLight,
            t(&["The {where} sits in {how} low light and is hard to make out.", "Because of {how} low light the {where} is dark."]),
        );
        per_kind.insert(
            DistortionClass::Jitter,
            t(&["Camera jitter {how} smears the {where}.", "The {where} shows {how} visible jitter."]),
        );
        Self {
            per_kind,
            pristine: t(&["The image is clear and well exposed throughout.", "The picture looks clean, with sharp detail everywhere."]),
            closing: t(&["Overall the quality is reduced.", "These flaws lower the overall quality."]),
        }
    }
}

/// Word stem identifying each kind in a description.
pub fn kind_keyword(kind: DistortionClass) -> &'static str {
    match kind {
        DistortionClass::Blur => "blur",
        DistortionClass::Noise => "nois",
        DistortionClass::Overexposure => "overexpos",
        DistortionClass::LowLight => "low light",
        DistortionClass::Jitter => "jitter",
    }
}

fn location_phrase(masks: &[&RegionMask]) -> String {
    if masks.len() > 1 {
        return "several areas".into();
    }
    let m = masks[0];
    let d = m.dims();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (x, y) in m.pixels() {
        sx += x as f64;
        sy += y as f64;
        n += 1.0;
    }
    let (cx, cy) = (sx / n / d.width() as f64, sy / n / d.height() as f64);
    let band = |v: f64, lo: &'static str, mid: &'static str, hi: &'static str| {
        if v < 1.0 / 3.0 {
            lo
        } else if v < 2.0 / 3.0 {
            mid
        } else {
            hi
        }
    };
    let vert = band(cy, "top", "middle", "bottom");
    let horiz = band(cx, "left", "centre", "right");
    match (vert, horiz) {
        ("middle", "centre") => "centre of the image".into(),
        (v, h) => format!("{v} {h} area"),
    }
}

fn adverb(severity: f64) -> &'static str {
    if severity < 0.34 {
        "slightly"
    } else if severity < 0.67 {
        "noticeably"
    } else {
        "severely"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTriplet {
    pub image: RgbImage,
    /// Carries exactly one annotation: the perfect ground truth.
    pub triplet: QualityTriplet,
}

impl SynthTriplet {
    pub fn annotation(&self) -> &Annotation {
        &self.triplet.annotations[0]
    }
}

/// Apply disjoint specs to `base` and describe them. The annotation's
/// regions equal the spec masks exactly.
pub fn synth_triplet(
    item_id: &str,
    image_path: &str,
    base: &RgbImage,
    specs: &[DistortionSpec],
    templates: &TextTemplates,
    seed: u64,
) -> Result<SynthTriplet, SynthError> {
    for (i, a) in specs.iter().enumerate() {
        a.check(base)?;
        for (j, b) in specs.iter().enumerate().skip(i + 1) {
            if a.region.intersection_area(&b.region).unwrap_or(0) > 0 {
                return Err(SynthError::Overlap(i, j));
            }
        }
    }
    let mut img = base.clone();
    for s in specs {
        img = apply(&img, s)?;
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut by_kind: BTreeMap<DistortionClass, Vec<&DistortionSpec>> = BTreeMap::new();
    for s in specs.iter().filter(|s| s.severity > 0.0) {
        by_kind.entry(s.kind).or_default().push(s);
    }
    let mut sentences = Vec::new();
    if by_kind.is_empty() {
        sentences.push(templates.pristine.choose(&mut rng).cloned().unwrap_or_default());
    } else {
        for (kind, group) in &by_kind {
            let options = templates.per_kind.get(kind).map(Vec::as_slice).unwrap_or(&[]);
            let template = options.choose(&mut rng).cloned().unwrap_or_else(|| format!("The {{where}} shows {}.", kind.label()));
            let masks: Vec<&RegionMask> = group.iter().map(|s| &s.region).collect();
            let worst = group.iter().map(|s| s.severity).fold(0.0, f64::max);
            sentences.push(template.replace("{where}", &location_phrase(&masks)).replace("{how}", adverb(worst)));
        }
        if let Some(c) = templates.closing.choose(&mut rng) {
            sentences.push(c.clone());
        }
    }

    let annotation = Annotation {
        annotation_id: format!("{SYNTH_ANNOTATION_PREFIX}{item_id}"),
        provenance: Provenance::Human,
        annotator_id: SYNTH_ANNOTATOR.into(),
        reference_text_id: item_id.into(),
        regions: specs.iter().map(|s| Region::new(s.kind, s.region.clone())).collect(),
        meta: BTreeMap::from([("generator".to_string(), "synth".to_string()), ("seed".to_string(), seed.to_string())]),
    };
    Ok(SynthTriplet {
        image: img,
        triplet: QualityTriplet {
            item_id: item_id.into(),
            image: image_path.into(),
            source: Source::Synthetic,
            quality_text: sentences.join(" "),
            mos: None,
            annotations: vec![annotation],
        },
    })
}

/// `count` disjoint rectangular specs, one per cell of a 3×3 grid, with
/// random kind, size, severity in [0.4, 1] and per-spec seed.
pub fn random_specs(dims: Dims, count: usize, seed: u64) -> Result<Vec<DistortionSpec>, SynthError> {
    const GRID: u32 = 3;
    let max = (GRID * GRID) as usize;
    if count > max || dims.width() < GRID || dims.height() < GRID {
        return Err(SynthError::TooManyRegions { requested: count, max });
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut cells: Vec<u32> = (0..GRID * GRID).collect();
    let (cw, ch) = (dims.width() / GRID, dims.height() / GRID);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let cell = cells.swap_remove(rng.random_range(0..cells.len()));
        let (gx, gy) = (cell % GRID, cell / GRID);
        let w = rng.random_range(cw.div_ceil(2)..=cw);
        let h = rng.random_range(ch.div_ceil(2)..=ch);
        let x = gx * cw + rng.random_range(0..=cw - w);
        let y = gy * ch + rng.random_range(0..=ch - h);
        out.push(DistortionSpec {
            kind: *DistortionClass::ALL.choose(&mut rng).expect("non-empty"),
            region: RegionMask::rect(dims, x, y, w, h),
            severity: rng.random_range(0.4..=1.0),
            seed: rng.random(),
        });
    }
    Ok(out)
}
