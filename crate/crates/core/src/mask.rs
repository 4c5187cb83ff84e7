//! Region masks, label maps and the pixel-set algebra every other module
//! builds on.
//!
//! Masks are stored as dense row-major bitmaps. The storage and wire form is
//! COCO-style uncompressed RLE: alternating run lengths in row-major order,
//! starting with a background run (which may be zero).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("invalid dimensions {height}x{width}: both must be at least 1")]
    InvalidDims { height: u32, width: u32 },
    #[error("bitmap has {got} pixels, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("run lengths sum to {got}, expected {expected} pixels")]
    RunSumMismatch { expected: u64, got: u64 },
    #[error("dimension mismatch: {a} vs {b}")]
    DimsMismatch { a: Dims, b: Dims },
    #[error("mask is empty")]
    EmptyMask,
    #[error("unsupported pixel order {0:?}, only \"row-major\" is accepted")]
    UnsupportedOrder(String),
    #[error("unknown class code {0}")]
    UnknownClassCode(u8),
    #[error("unknown distortion class {0:?}")]
    UnknownClassName(String),
    #[error("label map image: {0}")]
    Image(String),
}

/// Height and width of a mask grid in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(u32, u32)", into = "(u32, u32)")]
pub struct Dims {
    height: u32,
    width: u32,
}

impl Dims {
    pub fn new(height: u32, width: u32) -> Result<Self, MaskError> {
        if height == 0 || width == 0 {
            return Err(MaskError::InvalidDims { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height as usize * self.width as usize
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }

    fn ensure_same(self, other: Dims) -> Result<(), MaskError> {
        if self == other {
            Ok(())
        } else {
            Err(MaskError::DimsMismatch { a: self, b: other })
        }
    }
}

impl TryFrom<(u32, u32)> for Dims {
    type Error = MaskError;

    fn try_from((h, w): (u32, u32)) -> Result<Self, Self::Error> {
        Dims::new(h, w)
    }
}

impl From<Dims> for (u32, u32) {
    fn from(d: Dims) -> Self {
        (d.height, d.width)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// The five annotated distortion types. Code 0 is reserved for background.
///
/// Declaration order follows the benchmark table's column order and is the
/// order used everywhere classes are listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistortionClass {
    Jitter = 1,
    Noise = 2,
    Overexposure = 3,
    Blur = 4,
    LowLight = 5,
}

impl DistortionClass {
    pub const ALL: [DistortionClass; 5] = [
        DistortionClass::Jitter,
        DistortionClass::Noise,
        DistortionClass::Overexposure,
        DistortionClass::Blur,
        DistortionClass::LowLight,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, MaskError> {
        match code {
            1 => Ok(Self::Jitter),
            2 => Ok(Self::Noise),
            3 => Ok(Self::Overexposure),
            4 => Ok(Self::Blur),
            5 => Ok(Self::LowLight),
            other => Err(MaskError::UnknownClassCode(other)),
        }
    }

    /// Machine name used in manifests and reports.
    pub fn name(self) -> &'static str {
        match self {
            Self::Jitter => "jitter",
            Self::Noise => "noise",
            Self::Overexposure => "overexposure",
            Self::Blur => "blur",
            Self::LowLight => "low_light",
        }
    }

    /// Human-readable name, as it appears in prompts.
    pub fn label(self) -> &'static str {
        match self {
            Self::LowLight => "low light",
            other => other.name(),
        }
    }

    /// Zero-based position in [`DistortionClass::ALL`].
    pub fn index(self) -> usize {
        self.code() as usize - 1
    }
}

impl fmt::Display for DistortionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionClass {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Self::ALL
            .into_iter()
            .find(|c| c.name() == norm)
            .ok_or_else(|| MaskError::UnknownClassName(s.to_string()))
    }
}

impl Serialize for DistortionClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for DistortionClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One binary region of an image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RegionMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl fmt::Debug for RegionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegionMask")
            .field("dims", &self.dims)
            .field("counts", &self.runs())
            .finish()
    }
}

/// Encode a row-major bitmap.
pub fn rle_encode(bitmap: &[bool], dims: Dims) -> Result<RegionMask, MaskError> {
    RegionMask::from_bitmap(dims, bitmap.to_vec())
}

/// Decode a mask back into its row-major bitmap.
pub fn rle_decode(mask: &RegionMask) -> Vec<bool> {
    mask.bits.clone()
}

impl RegionMask {
    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![false; dims.pixel_count()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            bits: vec![true; dims.pixel_count()],
        }
    }

    pub fn from_bitmap(dims: Dims, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != dims.pixel_count() {
            return Err(MaskError::LengthMismatch {
                expected: dims.pixel_count(),
                got: bits.len(),
            });
        }
        Ok(Self { dims, bits })
    }

    /// Axis-aligned rectangle `[x, x+w) × [y, y+h)`, clipped to the grid.
    pub fn rect(dims: Dims, x: u32, y: u32, w: u32, h: u32) -> Self {
        let mut m = Self::empty(dims);
        let x1 = x.saturating_add(w).min(dims.width);
        let y1 = y.saturating_add(h).min(dims.height);
        for yy in y.min(dims.height)..y1 {
            for xx in x.min(dims.width)..x1 {
                m.bits[dims.index(xx, yy)] = true;
            }
        }
        m
    }

    /// Build a mask from uncompressed RLE counts.
    pub fn from_runs(dims: Dims, runs: &[u32]) -> Result<Self, MaskError> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != dims.pixel_count() as u64 {
            return Err(MaskError::RunSumMismatch {
                expected: dims.pixel_count() as u64,
                got: total,
            });
        }
        let mut bits = Vec::with_capacity(dims.pixel_count());
        let mut value = false;
        for &run in runs {
            bits.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        Ok(Self { dims, bits })
    }

    /// Uncompressed RLE counts, background first.
    pub fn runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(len);
                len = 0;
                current = b;
            }
            len += 1;
        }
        runs.push(len);
        runs
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.dims.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.dims.index(x, y);
        self.bits[i] = value;
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection_area(&self, other: &RegionMask) -> Result<u64, MaskError> {
        self.dims.ensure_same(other.dims)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count() as u64)
    }

    pub fn union_area(&self, other: &RegionMask) -> Result<u64, MaskError> {
        self.dims.ensure_same(other.dims)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a || **b)
            .count() as u64)
    }

    /// Intersection over union. Two empty masks score 1.0.
    pub fn iou(&self, other: &RegionMask) -> Result<f64, MaskError> {
        let inter = self.intersection_area(other)?;
        let union = self.union_area(other)?;
        if union == 0 {
            return Ok(1.0);
        }
        Ok(inter as f64 / union as f64)
    }

    /// Intersection area divided by the smaller of the two areas.
    pub fn overlap_over_smaller(&self, other: &RegionMask) -> Result<f64, MaskError> {
        let inter = self.intersection_area(other)?;
        let smaller = self.area().min(other.area());
        if smaller == 0 {
            return Err(MaskError::EmptyMask);
        }
        Ok(inter as f64 / smaller as f64)
    }

    pub fn union_with(&mut self, other: &RegionMask) -> Result<(), MaskError> {
        self.dims.ensure_same(other.dims)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn subtract(&mut self, other: &RegionMask) -> Result<(), MaskError> {
        self.dims.ensure_same(other.dims)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !*b;
        }
        Ok(())
    }

    /// Iterator over `(x, y)` of foreground pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.dims.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| ((i as u32) % w, (i as u32) / w))
    }
}

#[derive(Serialize, Deserialize)]
struct RleJson {
    size: (u32, u32),
    #[serde(default = "row_major")]
    order: String,
    counts: Vec<u32>,
}

fn row_major() -> String {
    "row-major".to_string()
}

impl Serialize for RegionMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RleJson {
            size: self.dims.into(),
            order: row_major(),
            counts: self.runs(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegionMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RleJson::deserialize(d)?;
        if raw.order != "row-major" {
            return Err(serde::de::Error::custom(MaskError::UnsupportedOrder(
                raw.order,
            )));
        }
        let dims = Dims::try_from(raw.size).map_err(serde::de::Error::custom)?;
        RegionMask::from_runs(dims, &raw.counts).map_err(serde::de::Error::custom)
    }
}

/// Per-pixel distortion class map; 0 is background, 1..=5 are
/// [`DistortionClass`] codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    codes: Vec<u8>,
}

impl LabelMap {
    pub fn background(dims: Dims) -> Self {
        Self {
            dims,
            codes: vec![0; dims.pixel_count()],
        }
    }

    pub fn from_codes(dims: Dims, codes: Vec<u8>) -> Result<Self, MaskError> {
        if codes.len() != dims.pixel_count() {
            return Err(MaskError::LengthMismatch {
                expected: dims.pixel_count(),
                got: codes.len(),
            });
        }
        if let Some(&bad) = codes.iter().find(|&&c| c > 5) {
            return Err(MaskError::UnknownClassCode(bad));
        }
        Ok(Self { dims, codes })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn get(&self, x: u32, y: u32) -> Option<DistortionClass> {
        DistortionClass::from_code(self.codes[self.dims.index(x, y)]).ok()
    }

    /// Paint every foreground pixel of `mask` with `class`.
    pub fn paint(&mut self, class: DistortionClass, mask: &RegionMask) -> Result<(), MaskError> {
        self.dims.ensure_same(mask.dims)?;
        for (c, &b) in self.codes.iter_mut().zip(mask.bits()) {
            if b {
                *c = class.code();
            }
        }
        Ok(())
    }

    /// Binary mask of pixels carrying `class`.
    pub fn class_mask(&self, class: DistortionClass) -> RegionMask {
        let code = class.code();
        RegionMask {
            dims: self.dims,
            bits: self.codes.iter().map(|&c| c == code).collect(),
        }
    }

    pub fn contains_class(&self, class: DistortionClass) -> bool {
        self.codes.contains(&class.code())
    }

    /// Pixel counts indexed by class code (index 0 is background).
    pub fn class_histogram(&self) -> [u64; 6] {
        let mut h = [0u64; 6];
        for &c in &self.codes {
            h[c as usize] += 1;
        }
        h
    }

    /// Read an 8-bit single-channel PNG whose pixel values are class codes.
    pub fn read_png(path: &Path) -> Result<Self, MaskError> {
        let img = image::open(path).map_err(|e| MaskError::Image(format!("{}: {e}", path.display())))?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            // Paletted PNGs are expanded by the decoder; only the luma index is normative.
            image::DynamicImage::ImageLumaA8(_) | image::DynamicImage::ImageRgb8(_) | image::DynamicImage::ImageRgba8(_) => {
                img.to_luma8()
            }
            other => {
                return Err(MaskError::Image(format!(
                    "{}: expected 8-bit single-channel PNG, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let dims = Dims::new(gray.height(), gray.width())?;
        Self::from_codes(dims, gray.into_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<(), MaskError> {
        let img = image::GrayImage::from_raw(self.dims.width, self.dims.height, self.codes.clone())
            .expect("buffer length matches dims");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| MaskError::Image(format!("{}: {e}", path.display())))
    }
}

/// Flatten class-labeled regions into a label map, giving each pixel the class
/// of the smallest-area region covering it.
///
/// Ties on area go to the lower class code, then to the earlier input.
pub fn merge_smaller_first(
    dims: Dims,
    regions: &[(DistortionClass, RegionMask)],
) -> Result<LabelMap, MaskError> {
    for (_, m) in regions {
        dims.ensure_same(m.dims)?;
    }
    let mut order: Vec<(u64, u8, usize)> = regions
        .iter()
        .enumerate()
        .map(|(i, (c, m))| (m.area(), c.code(), i))
        .collect();
    order.sort_unstable();
    let mut map = LabelMap::background(dims);
    // Paint largest first so higher-priority regions overwrite.
    for &(_, _, i) in order.iter().rev() {
        let (class, mask) = &regions[i];
        map.paint(*class, mask)?;
    }
    Ok(map)
}

/// Resolve overlapping proposals into disjoint regions using the same
/// smaller-first priority; regions left empty are dropped.
pub fn flatten_smaller_first(regions: &[RegionMask]) -> Result<Vec<RegionMask>, MaskError> {
    let Some(first) = regions.first() else {
        return Ok(Vec::new());
    };
    let dims = first.dims;
    for m in regions {
        dims.ensure_same(m.dims)?;
    }
    let mut order: Vec<(u64, usize)> = regions.iter().enumerate().map(|(i, m)| (m.area(), i)).collect();
    order.sort_unstable();
    let mut taken = RegionMask::empty(dims);
    let mut out = vec![None; regions.len()];
    for &(_, i) in &order {
        let mut m = regions[i].clone();
        m.subtract(&taken)?;
        taken.union_with(&m)?;
        if !m.is_empty() {
            out[i] = Some(m);
        }
    }
    Ok(out.into_iter().flatten().collect())
}
