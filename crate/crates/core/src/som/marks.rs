use serde::Serialize;
use thiserror::Error;

use crate::mask::{Dims, MaskError, RegionMask};

#[derive(Debug, Error, PartialEq)]
pub enum MarkError {
    #[error("no regions to mark")]
    NoRegions,
    #[error("region {0} is empty")]
    EmptyRegion(usize),
    #[error("regions {0} and {1} overlap; flatten proposals first")]
    Overlap(usize, usize),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkedRegion {
    pub mark: u32,
    pub mask: RegionMask,
    /// `(x, y)` of the numeral overlay; always a foreground pixel.
    pub anchor: (u32, u32),
}

/// Regions numbered `1..=n` in decreasing-area order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkedRegionSet {
    pub regions: Vec<MarkedRegion>,
}

impl MarkedRegionSet {
    pub fn get(&self, mark: u32) -> Option<&MarkedRegion> {
        mark.checked_sub(1).and_then(|i| self.regions.get(i as usize))
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Number non-overlapping regions by decreasing area (ties keep input order)
/// and anchor each at its pole of inaccessibility.
pub fn assign_marks(regions: &[RegionMask]) -> Result<MarkedRegionSet, MarkError> {
    if regions.is_empty() {
        return Err(MarkError::NoRegions);
    }
    if let Some(i) = regions.iter().position(RegionMask::is_empty) {
        return Err(MarkError::EmptyRegion(i));
    }
    let dims = regions[0].dims();
    let mut owner: Vec<Option<usize>> = vec![None; dims.pixel_count()];
    for (i, r) in regions.iter().enumerate() {
        if r.dims() != dims {
            return Err(MaskError::DimsMismatch { a: dims, b: r.dims() }.into());
        }
        for (k, &b) in r.bits().iter().enumerate() {
            if b {
                if let Some(j) = owner[k] {
                    return Err(MarkError::Overlap(j, i));
                }
                owner[k] = Some(i);
            }
        }
    }
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(regions[i].area()));
    let regions = order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| MarkedRegion {
            mark: rank as u32 + 1,
            mask: regions[i].clone(),
            anchor: pole_of_inaccessibility(&regions[i]),
        })
        .collect();
    Ok(MarkedRegionSet { regions })
}

/// Foreground pixel with the largest Euclidean distance to the nearest
/// background pixel, treating everything outside the grid as background.
/// Ties resolve to the first pixel in row-major order.
pub fn pole_of_inaccessibility(mask: &RegionMask) -> (u32, u32) {
    let dist = distance_to_background(mask);
    let w = mask.dims().width();
    let mut best = (0usize, -1.0f64);
    for (k, &d) in dist.iter().enumerate() {
        if mask.bits()[k] && d > best.1 {
            best = (k, d);
        }
    }
    ((best.0 as u32) % w, (best.0 as u32) / w)
}

/// Squared Euclidean distance transform (Felzenszwalb & Huttenlocher) on the
/// grid padded by one background pixel on every side.
fn distance_to_background(mask: &RegionMask) -> Vec<f64> {
    let dims = mask.dims();
    let (h, w) = (dims.height() as usize + 2, dims.width() as usize + 2);
    // Larger than any in-grid squared distance, small enough to stay exact.
    let inf = (h * h + w * w) as f64;
    let mut grid = vec![0.0f64; h * w];
    for y in 0..dims.height() {
        for x in 0..dims.width() {
            if mask.get(x, y) {
                grid[(y as usize + 1) * w + x as usize + 1] = inf;
            }
        }
    }
    let mut buf = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        let col = edt_1d(&buf[..h]);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    for y in 0..h {
        let row = edt_1d(&grid[y * w..(y + 1) * w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    let inner = Dims::new(dims.height(), dims.width()).expect("valid dims");
    let mut out = Vec::with_capacity(inner.pixel_count());
    for y in 0..dims.height() as usize {
        for x in 0..dims.width() as usize {
            out.push(grid[(y + 1) * w + x + 1]);
        }
    }
    out
}

fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let parabola = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = parabola(q, v[k]);
        // z[0] is -inf, so this never underflows k.
        while s <= z[k] {
            k -= 1;
            s = parabola(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut d = vec![0.0; n];
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as f64 - p as f64).powi(2) + f[p];
    }
    d
}
