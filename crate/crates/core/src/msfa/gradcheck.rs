//! Central finite-difference checks of the analytic gradients.

use ndarray::{Array2, Array3, Dimension};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use super::abstractor::{msfa_backward, msfa_forward, AbstractorParams, Activation, PoolMode};
use super::loss::{bce_grad, bce_loss, ce_grad, ce_loss, dice_grad, dice_loss, BCE_CLAMP};
use super::{FeaturePyramid, MsfaError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-4,
            abs_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub wrt: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum GradCase {
    /// `Σ upstream ⊙ (x W)` with respect to `W`.
    Linear { x: Array2<f64>, w: Array2<f64>, upstream: Array2<f64> },
    /// `Σ upstream ⊙ msfa(pyramid)` with respect to every parameter and scale.
    Msfa {
        pyramid: FeaturePyramid,
        params: AbstractorParams,
        upstream: Array2<f64>,
    },
    Dice { pred: Array3<f64>, gt: Array3<f64> },
    Bce { pred: Array3<f64>, gt: Array3<f64>, clamp: Option<f64> },
    Ce { logits: Array2<f64>, targets: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFixture {
    Linear,
    Msfa(Activation),
    Dice,
    Bce,
    Ce,
}

fn normal(shape: (usize, usize), std: f64, rng: &mut Xoshiro256PlusPlus) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || n.sample(rng))
}

impl GradCase {
    /// Small seeded fixture: at most 16 feature tokens per scale.
    pub fn fixture(kind: GradFixture, seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        match kind {
            GradFixture::Linear => GradCase::Linear {
                x: normal((5, 4), 1.0, &mut rng),
                w: normal((4, 3), 1.0, &mut rng),
                upstream: normal((5, 3), 1.0, &mut rng),
            },
            GradFixture::Msfa(act) => {
                let scales = (0..2).map(|_| normal((16, 8), 1.0, &mut rng)).collect();
                let params = AbstractorParams::random(8, 6, 4, 2, act, rng.random()).expect("valid shapes");
                GradCase::Msfa {
                    pyramid: FeaturePyramid::from_scales(scales).expect("valid pyramid"),
                    params,
                    upstream: normal((4, 4), 1.0, &mut rng),
                }
            }
            GradFixture::Dice | GradFixture::Bce => {
                let pred = Array3::from_shape_simple_fn((2, 3, 3), || rng.random_range(0.05..0.95));
                let gt = Array3::from_shape_simple_fn((2, 3, 3), || if rng.random_bool(0.4) { 1.0 } else { 0.0 });
                if kind == GradFixture::Dice {
                    GradCase::Dice { pred, gt }
                } else {
                    GradCase::Bce {
                        pred,
                        gt,
                        clamp: Some(BCE_CLAMP),
                    }
                }
            }
            GradFixture::Ce => {
                let logits = normal((6, 7), 2.0, &mut rng);
                let targets = (0..6).map(|_| rng.random_range(0..7)).collect();
                GradCase::Ce { logits, targets }
            }
        }
    }
}

fn compare<D: Dimension>(
    wrt: &str,
    x: &ndarray::Array<f64, D>,
    analytic: &ndarray::Array<f64, D>,
    cfg: &GradCheckConfig,
    f: impl Fn(&ndarray::Array<f64, D>) -> Result<f64, MsfaError>,
) -> Result<GradReport, MsfaError> {
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = x.as_slice_memory_order().expect("standard layout")[i];
        probe.as_slice_memory_order_mut().expect("standard layout")[i] = orig + cfg.step;
        let up = f(&probe)?;
        probe.as_slice_memory_order_mut().expect("standard layout")[i] = orig - cfg.step;
        let down = f(&probe)?;
        probe.as_slice_memory_order_mut().expect("standard layout")[i] = orig;
        let num = (up - down) / (2.0 * cfg.step);
        let err = (a - num).abs() / a.abs().max(num.abs()).max(cfg.abs_floor);
        worst = worst.max(err);
    }
    Ok(GradReport {
        wrt: wrt.to_string(),
        checked: analytic.len(),
        max_rel_error: worst,
        passed: worst <= cfg.rel_tol,
    })
}

fn ensure_interior(pred: &Array3<f64>, lo: f64, hi: f64, step: f64) -> Result<(), MsfaError> {
    match pred.iter().find(|&&p| p - step <= lo || p + step >= hi) {
        Some(p) => Err(MsfaError::NonDifferentiable(format!("prediction {p} within one step of {lo} or {hi}"))),
        None => Ok(()),
    }
}

pub fn grad_check(case: &GradCase, cfg: &GradCheckConfig) -> Result<Vec<GradReport>, MsfaError> {
    match case {
        GradCase::Linear { x, w, upstream } => {
            let analytic = x.t().dot(upstream);
            let f = |w: &Array2<f64>| Ok((x.dot(w) * upstream).sum());
            Ok(vec![compare("w", w, &analytic, cfg, f)?])
        }
        GradCase::Msfa { pyramid, params, upstream } => {
            let fwd = msfa_forward(pyramid, params, PoolMode::DeskScale)?;
            let near_kink = |z: &&f64| params.activation == Activation::Relu && z.abs() < cfg.step;
            if let Some(z) = fwd.pre_activation().iter().find(near_kink) {
                return Err(MsfaError::NonDifferentiable(format!("pre-activation {z} within one step of the ReLU kink")));
            }
            let g = msfa_backward(pyramid, params, &fwd, upstream)?;
            let loss = |p: &AbstractorParams, pyr: &FeaturePyramid| -> Result<f64, MsfaError> {
                Ok((msfa_forward(pyr, p, PoolMode::DeskScale)?.output * upstream).sum())
            };
            type Slot = fn(&mut AbstractorParams) -> &mut Array2<f64>;
            let slots: [(&str, Slot, &Array2<f64>); 6] = [
                ("wq", |p| &mut p.wq, &g.wq),
                ("wk", |p| &mut p.wk, &g.wk),
                ("wv", |p| &mut p.wv, &g.wv),
                ("wo", |p| &mut p.wo, &g.wo),
                ("w1", |p| &mut p.w1, &g.w1),
                ("w2", |p| &mut p.w2, &g.w2),
            ];
            let mut out = Vec::new();
            for (name, slot, analytic) in slots {
                let x = slot(&mut params.clone()).clone();
                out.push(compare(name, &x, analytic, cfg, |m| {
                    let mut p = params.clone();
                    *slot(&mut p) = m.clone();
                    loss(&p, pyramid)
                })?);
            }
            for (i, analytic) in g.scales.iter().enumerate() {
                let x = &pyramid.scales()[i];
                out.push(compare(&format!("scale{i}"), x, analytic, cfg, |m| {
                    let mut scales = pyramid.scales().to_vec();
                    scales[i] = m.clone();
                    loss(params, &FeaturePyramid::new(scales, pyramid.layers().to_vec())?)
                })?);
            }
            Ok(out)
        }
        GradCase::Dice { pred, gt } => {
            ensure_interior(pred, 0.0, 1.0, cfg.step)?;
            let analytic = dice_grad(pred.view(), gt.view())?;
            Ok(vec![compare("pred", pred, &analytic, cfg, |p| dice_loss(p.view(), gt.view()))?])
        }
        GradCase::Bce { pred, gt, clamp } => {
            let eps = clamp.unwrap_or(0.0);
            ensure_interior(pred, eps, 1.0 - eps, cfg.step)?;
            let analytic = bce_grad(pred.view(), gt.view(), *clamp)?;
            Ok(vec![compare("pred", pred, &analytic, cfg, |p| bce_loss(p.view(), gt.view(), *clamp))?])
        }
        GradCase::Ce { logits, targets } => {
            let analytic = ce_grad(logits.view(), targets)?;
            Ok(vec![compare("logits", logits, &analytic, cfg, |l| ce_loss(l.view(), targets))?])
        }
    }
}
