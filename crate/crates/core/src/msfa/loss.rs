//! Segmentation and text losses with analytic gradients.
//!
//! Mask predictions are `C × H × W` per-pixel probabilities, one channel per
//! distortion class.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::MsfaError;
use crate::mask::{DistortionClass, LabelMap};

pub const DICE_EPS: f64 = 1e-6;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub txt: f64,
    pub seg: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            txt: 1.0,
            seg: 1.0,
            bce: 2.0,
            dice: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), MsfaError> {
        for v in [self.txt, self.seg, self.bce, self.dice] {
            if !v.is_finite() {
                return Err(MsfaError::NonFinite("loss weights"));
            }
            if v < 0.0 {
                return Err(MsfaError::Shape(format!("negative loss weight {v}")));
            }
        }
        Ok(())
    }
}

/// Five-channel one-hot encoding of a label map (background is all-zero).
pub fn one_hot(map: &LabelMap) -> Array3<f64> {
    let d = map.dims();
    let (h, w) = (d.height() as usize, d.width() as usize);
    let mut out = Array3::zeros((DistortionClass::ALL.len(), h, w));
    for (k, &code) in map.codes().iter().enumerate() {
        if code > 0 {
            out[[code as usize - 1, k / w, k % w]] = 1.0;
        }
    }
    out
}

fn check_pair(pred: ArrayView3<f64>, gt: ArrayView3<f64>) -> Result<(), MsfaError> {
    if pred.dim() != gt.dim() {
        return Err(MsfaError::Shape(format!("prediction {:?} vs target {:?}", pred.dim(), gt.dim())));
    }
    if pred.is_empty() {
        return Err(MsfaError::Empty("pixel"));
    }
    for (what, a) in [("prediction", pred), ("target", gt)] {
        for &v in a.iter() {
            if !v.is_finite() {
                return Err(MsfaError::NonFinite(what));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(MsfaError::OutOfRange { what, value: v });
            }
        }
    }
    Ok(())
}

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` per channel, averaged over channels.
pub fn dice_loss(pred: ArrayView3<f64>, gt: ArrayView3<f64>) -> Result<f64, MsfaError> {
    check_pair(pred, gt)?;
    let c = pred.len_of(Axis(0));
    let mut total = 0.0;
    for (p, g) in pred.axis_iter(Axis(0)).zip(gt.axis_iter(Axis(0))) {
        let num = 2.0 * (&p * &g).sum() + DICE_EPS;
        let den = p.sum() + g.sum() + DICE_EPS;
        total += 1.0 - num / den;
    }
    Ok(total / c as f64)
}

pub fn dice_grad(pred: ArrayView3<f64>, gt: ArrayView3<f64>) -> Result<Array3<f64>, MsfaError> {
    check_pair(pred, gt)?;
    let c = pred.len_of(Axis(0)) as f64;
    let mut out = Array3::zeros(pred.dim());
    for ((p, g), mut o) in pred.axis_iter(Axis(0)).zip(gt.axis_iter(Axis(0))).zip(out.axis_iter_mut(Axis(0))) {
        let num = 2.0 * (&p * &g).sum() + DICE_EPS;
        let den = p.sum() + g.sum() + DICE_EPS;
        ndarray::Zip::from(&mut o).and(&g).for_each(|o, &gi| {
            *o = -(2.0 * gi * den - num) / (den * den) / c;
        });
    }
    Ok(out)
}

fn bce_prob(p: f64, clamp: Option<f64>) -> Result<f64, MsfaError> {
    match clamp {
        Some(eps) => Ok(p.clamp(eps, 1.0 - eps)),
        None if p <= 0.0 || p >= 1.0 => Err(MsfaError::Unclamped),
        None => Ok(p),
    }
}

/// Mean per-pixel binary cross-entropy. With `clamp = Some(ε)` predictions
/// are clipped to `[ε, 1 − ε]`; with `None` an exact 0 or 1 is an error.
pub fn bce_loss(pred: ArrayView3<f64>, gt: ArrayView3<f64>, clamp: Option<f64>) -> Result<f64, MsfaError> {
    check_pair(pred, gt)?;
    let mut sum = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let p = bce_prob(p, clamp)?;
        sum -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
    }
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`bce_loss`]; zero where the clamp is active.
pub fn bce_grad(pred: ArrayView3<f64>, gt: ArrayView3<f64>, clamp: Option<f64>) -> Result<Array3<f64>, MsfaError> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let mut out = Array3::zeros(pred.dim());
    for ((o, &p), &g) in out.iter_mut().zip(pred.iter()).zip(gt.iter()) {
        let q = bce_prob(p, clamp)?;
        *o = if q != p { 0.0 } else { (p - g) / (p * (1.0 - p)) / n };
    }
    Ok(out)
}

pub fn seg_loss(pred: ArrayView3<f64>, gt: ArrayView3<f64>, w: &LossWeights) -> Result<f64, MsfaError> {
    w.validate()?;
    Ok(w.bce * bce_loss(pred, gt, Some(BCE_CLAMP))? + w.dice * dice_loss(pred, gt)?)
}

pub fn total_loss(txt_ce: f64, seg: f64, w: &LossWeights) -> Result<f64, MsfaError> {
    w.validate()?;
    if !txt_ce.is_finite() || !seg.is_finite() {
        return Err(MsfaError::NonFinite("loss component"));
    }
    Ok(w.txt * txt_ce + w.seg * seg)
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn check_ce(logits: ArrayView2<f64>, targets: &[usize]) -> Result<(), MsfaError> {
    if logits.nrows() != targets.len() {
        return Err(MsfaError::Misaligned {
            logits: logits.nrows(),
            targets: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(MsfaError::Empty("target token"));
    }
    let vocab = logits.ncols();
    if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(MsfaError::TargetOutOfVocab { target: t, vocab });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MsfaError::NonFinite("logits"));
    }
    Ok(())
}

/// Mean negative log-softmax of each row's target id.
pub fn ce_loss(logits: ArrayView2<f64>, targets: &[usize]) -> Result<f64, MsfaError> {
    check_ce(logits, targets)?;
    let sum: f64 = logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| -log_softmax_row(row)[t])
        .sum();
    Ok(sum / targets.len() as f64)
}

pub fn ce_grad(logits: ArrayView2<f64>, targets: &[usize]) -> Result<Array2<f64>, MsfaError> {
    check_ce(logits, targets)?;
    let n = targets.len() as f64;
    let mut out = Array2::zeros(logits.dim());
    for ((row, &t), mut o) in logits.rows().into_iter().zip(targets).zip(out.rows_mut()) {
        for (j, (o, lp)) in o.iter_mut().zip(log_softmax_row(row)).enumerate() {
            *o = (lp.exp() - if j == t { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok(out)
}

/// Next-token loss: row `i` of `logits` predicts `tokens[i + 1]`. `logits`
/// has one row per token; the last row has no target and is ignored.
pub fn shifted_ce_loss(logits: ArrayView2<f64>, tokens: &[usize]) -> Result<f64, MsfaError> {
    if logits.nrows() != tokens.len() || tokens.len() < 2 {
        return Err(MsfaError::Misaligned {
            logits: logits.nrows(),
            targets: tokens.len().saturating_sub(1),
        });
    }
    ce_loss(logits.slice(ndarray::s![..-1, ..]), &tokens[1..])
}
