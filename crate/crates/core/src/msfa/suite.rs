//! The invariant and gradient suite behind `qground msfa-check`.

use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use super::abstractor::{msfa_forward, pool_query, AbstractorParams, Activation, PoolMode};
use super::gradcheck::{grad_check, GradCase, GradCheckConfig, GradFixture};
use super::loss::{bce_loss, ce_loss, dice_loss, seg_loss, total_loss, LossWeights, BCE_CLAMP, DICE_EPS};
use super::{FeaturePyramid, MsfaError, QUERY_TOKENS};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &str, r: Result<String, String>) -> CheckResult {
    match r {
        Ok(detail) => CheckResult {
            name: name.to_string(),
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail,
        },
    }
}

fn err(e: MsfaError) -> String {
    e.to_string()
}

fn features(p: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_simple_fn((p, d), || n.sample(&mut rng))
}

/// Output tokens and attention simplex at full resolution.
fn full_scale(scales: usize) -> Result<String, String> {
    let d = 16;
    let params = AbstractorParams::with_default_heads(d, 32, d, 11).map_err(err)?;
    let pyr = FeaturePyramid::from_scales((0..scales).map(|i| features(1024, d, 100 + i as u64)).collect()).map_err(err)?;
    let out = msfa_forward(&pyr, &params, PoolMode::Strict).map_err(err)?;
    if out.output.nrows() != QUERY_TOKENS {
        return Err(format!("{} output tokens", out.output.nrows()));
    }
    let mut worst = 0.0f64;
    for a in &out.attention {
        if a.ncols() != scales * 1024 {
            return Err(format!("attention over {} keys", a.ncols()));
        }
        if a.iter().any(|&v| v < 0.0) {
            return Err("negative attention weight".into());
        }
        for row in a.rows() {
            worst = worst.max((row.sum() - 1.0).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("attention row sum off by {worst:e}"));
    }
    Ok(format!("{} tokens, max |row sum - 1| = {worst:.1e}", out.output.nrows()))
}

fn duplicate_scale() -> Result<String, String> {
    let params = AbstractorParams::random(16, 24, 16, 4, Activation::Gelu, 3).map_err(err)?;
    let f = features(64, 16, 4);
    let one = msfa_forward(&FeaturePyramid::from_scales(vec![f.clone()]).map_err(err)?, &params, PoolMode::DeskScale).map_err(err)?;
    let two = msfa_forward(&FeaturePyramid::from_scales(vec![f.clone(), f]).map_err(err)?, &params, PoolMode::DeskScale).map_err(err)?;
    let diff = one.output.iter().zip(two.output.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if diff > 1e-12 {
        return Err(format!("outputs differ by {diff:e}"));
    }
    Ok(format!("max difference {diff:.1e}"))
}

fn pooling() -> Result<String, String> {
    let c = Array2::from_elem((1024, 4), 0.75);
    let q = pool_query(c.view(), PoolMode::Strict).map_err(err)?;
    if q.dim() != (QUERY_TOKENS, 4) || q.iter().any(|&v| v != 0.75) {
        return Err("constant features did not pool to constants".into());
    }
    let grid = Array2::from_shape_fn((16, 1), |(i, _)| i as f64);
    let q = pool_query(grid.view(), PoolMode::DeskScale).map_err(err)?;
    if q.column(0).to_vec() != [2.5, 4.5, 10.5, 12.5] {
        return Err(format!("block means {:?}", q.column(0).to_vec()));
    }
    Ok("1024 -> 256, block means exact".into())
}

fn gradients(kind: GradFixture, cfg: &GradCheckConfig) -> Result<String, String> {
    let reports = grad_check(&GradCase::fixture(kind, 17), cfg).map_err(err)?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    match reports.iter().find(|r| !r.passed) {
        Some(r) => Err(format!("wrt {}: relative error {:.2e}", r.wrt, r.max_rel_error)),
        None => Ok(format!("{} tensors, max relative error {worst:.2e}", reports.len())),
    }
}

fn ce_uniform() -> Result<String, String> {
    for vocab in [2usize, 4, 1000, 32000] {
        let logits = Array2::from_elem((3, vocab), 0.3);
        let v = ce_loss(logits.view(), &[0, vocab / 2, vocab - 1]).map_err(err)?;
        let e = (v - (vocab as f64).ln()).abs();
        if e > 1e-9 {
            return Err(format!("vocab {vocab}: off by {e:e}"));
        }
    }
    Ok("ln(vocab) for vocab in {2, 4, 1000, 32000}".into())
}

/// Hand-evaluated BCE/DICE fixtures combined with the default weights.
fn loss_defaults() -> Result<String, String> {
    let w = LossWeights::default();
    if (w.txt, w.seg, w.bce, w.dice) != (1.0, 1.0, 2.0, 0.5) {
        return Err(format!("defaults {w:?}"));
    }
    let p = Array3::from_shape_vec((1, 1, 2), vec![0.9, 0.2]).expect("shape");
    let g = Array3::from_shape_vec((1, 1, 2), vec![1.0, 0.0]).expect("shape");
    let bce = (-(0.9f64.ln()) - 0.8f64.ln()) / 2.0;
    let dice = 1.0 - (2.0 * 0.9 + DICE_EPS) / (1.1 + 1.0 + DICE_EPS);
    let seg = seg_loss(p.view(), g.view(), &w).map_err(err)?;
    let total = total_loss(0.7, seg, &w).map_err(err)?;
    let want_seg = 2.0 * bce + 0.5 * dice;
    let e1 = (seg - want_seg).abs();
    let e2 = (total - (0.7 + want_seg)).abs();
    if e1 > 1e-12 || e2 > 1e-12 {
        return Err(format!("seg off by {e1:e}, total off by {e2:e}"));
    }
    let check_bce = (bce_loss(p.view(), g.view(), Some(BCE_CLAMP)).map_err(err)? - bce).abs();
    let check_dice = (dice_loss(p.view(), g.view()).map_err(err)? - dice).abs();
    if check_bce > 1e-12 || check_dice > 1e-12 {
        return Err("component mismatch".into());
    }
    Ok(format!("seg {seg:.6}, total {total:.6}"))
}

pub fn run_suite() -> Vec<CheckResult> {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    let mut out = vec![
        result("pool_query", pooling()),
        result("tokens_256_one_scale", full_scale(1)),
        result("tokens_256_two_scales", full_scale(2)),
        result("tokens_256_three_scales", full_scale(3)),
        result("duplicate_scale_invariance", duplicate_scale()),
        result("grad_linear", gradients(GradFixture::Linear, &cfg)),
        result("grad_msfa_gelu", gradients(GradFixture::Msfa(Activation::Gelu), &cfg)),
        result("grad_msfa_silu", gradients(GradFixture::Msfa(Activation::Silu), &cfg)),
        result("grad_dice", gradients(GradFixture::Dice, &cfg)),
        result("grad_bce", gradients(GradFixture::Bce, &cfg)),
        result("grad_ce", gradients(GradFixture::Ce, &cfg)),
        result("ce_uniform_ln_vocab", ce_uniform()),
        result("loss_defaults", loss_defaults()),
    ];
    let secs = start.elapsed().as_secs_f64();
    out.push(result(
        "suite_under_60s",
        if secs < 60.0 { Ok(format!("{secs:.2}s")) } else { Err(format!("{secs:.2}s")) },
    ));
    out
}
