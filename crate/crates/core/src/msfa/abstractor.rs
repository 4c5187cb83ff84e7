use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::{FeaturePyramid, MsfaError, DEFAULT_HEADS, QUERY_TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Tanh approximation.
    #[default]
    Gelu,
    Silu,
    Relu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x.powi(3))).tanh()),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x.powi(3))).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Silu => {
                let sg = 1.0 / (1.0 + (-x).exp());
                sg * (1.0 + x * (1.0 - sg))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "silu" | "swish" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

/// How strictly the query bank size is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolMode {
    /// The pooled bank must have exactly [`QUERY_TOKENS`] rows.
    #[default]
    Strict,
    /// Any even square grid; the bank has `P / 4` rows.
    DeskScale,
}

/// 2×2 average pooling over the square token grid of `last`.
pub fn pool_query(last: ArrayView2<f64>, mode: PoolMode) -> Result<Array2<f64>, MsfaError> {
    let (p, d) = last.dim();
    let side = (p as f64).sqrt().round() as usize;
    if side * side != p || !side.is_multiple_of(2) || side == 0 {
        return Err(MsfaError::NotPoolable { tokens: p });
    }
    let half = side / 2;
    if mode == PoolMode::Strict && half * half != QUERY_TOKENS {
        return Err(MsfaError::WrongQueryCount {
            tokens: p,
            pooled: half * half,
        });
    }
    let mut out = Array2::zeros((half * half, d));
    for py in 0..half {
        for px in 0..half {
            let mut row = out.row_mut(py * half + px);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                row += &last.row((2 * py + dy) * side + 2 * px + dx);
            }
            row /= 4.0;
        }
    }
    Ok(out)
}

/// Gradient of [`pool_query`] mapped back onto the last scale.
fn unpool(grad: &Array2<f64>, tokens: usize) -> Array2<f64> {
    let side = (tokens as f64).sqrt().round() as usize;
    let half = side / 2;
    let mut out = Array2::zeros((tokens, grad.ncols()));
    for py in 0..half {
        for px in 0..half {
            let g = grad.row(py * half + px).to_owned() / 4.0;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let mut r = out.row_mut((2 * py + dy) * side + 2 * px + dx);
                r += &g;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractorParams {
    pub heads: usize,
    /// `d_v × d_v` projections; head `h` uses columns `h·d_h..(h+1)·d_h`.
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    /// `d_v × d_ff`
    pub w1: Array2<f64>,
    /// `d_ff × d`
    pub w2: Array2<f64>,
    pub activation: Activation,
}

impl AbstractorParams {
    /// Gaussian init with std `1/√fan_in`, seeded.
    pub fn random(d_v: usize, d_ff: usize, d_out: usize, heads: usize, activation: Activation, seed: u64) -> Result<Self, MsfaError> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize| {
            let n = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("positive std");
            Array2::from_shape_simple_fn((r, c), || n.sample(&mut rng))
        };
        let p = Self {
            heads,
            wq: mat(d_v, d_v),
            wk: mat(d_v, d_v),
            wv: mat(d_v, d_v),
            wo: mat(d_v, d_v),
            w1: mat(d_v, d_ff),
            w2: mat(d_ff, d_out),
            activation,
        };
        p.validate(d_v)?;
        Ok(p)
    }

    pub fn with_default_heads(d_v: usize, d_ff: usize, d_out: usize, seed: u64) -> Result<Self, MsfaError> {
        Self::random(d_v, d_ff, d_out, DEFAULT_HEADS, Activation::default(), seed)
    }

    pub fn validate(&self, d_v: usize) -> Result<(), MsfaError> {
        if self.heads == 0 || !d_v.is_multiple_of(self.heads) {
            return Err(MsfaError::Heads { dim: d_v, heads: self.heads });
        }
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if m.dim() != (d_v, d_v) {
                return Err(MsfaError::Shape(format!("{name} is {:?}, expected ({d_v}, {d_v})", m.dim())));
            }
        }
        if self.w1.nrows() != d_v {
            return Err(MsfaError::Shape(format!("w1 has {} rows, expected {d_v}", self.w1.nrows())));
        }
        if self.w2.nrows() != self.w1.ncols() {
            return Err(MsfaError::Shape(format!("w2 has {} rows, w1 has {} columns", self.w2.nrows(), self.w1.ncols())));
        }
        let all = [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(MsfaError::NonFinite("abstractor parameters"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.wq.nrows() / self.heads
    }
}

/// Forward result plus the intermediates the backward pass needs.
#[derive(Debug, Clone)]
pub struct MsfaOutput {
    /// `T × d` abstracted tokens.
    pub output: Array2<f64>,
    /// Per head, `T × (scales·P)` row-stochastic attention.
    pub attention: Vec<Array2<f64>>,
    query: Array2<f64>,
    keys: Array2<f64>,
    qh: Vec<Array2<f64>>,
    kh: Vec<Array2<f64>>,
    vh: Vec<Array2<f64>>,
    hcat: Array2<f64>,
    v: Array2<f64>,
    z: Array2<f64>,
    y: Array2<f64>,
}

impl MsfaOutput {
    /// Pre-activation `V W1`.
    pub fn pre_activation(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn query(&self) -> &Array2<f64> {
        &self.query
    }
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    s
}

pub fn msfa_forward(pyramid: &FeaturePyramid, params: &AbstractorParams, mode: PoolMode) -> Result<MsfaOutput, MsfaError> {
    let d = pyramid.dim();
    params.validate(d)?;
    let query = pool_query(pyramid.last().view(), mode)?;
    let views: Vec<_> = pyramid.scales().iter().map(|s| s.view()).collect();
    let keys = concatenate(Axis(0), &views).expect("equal widths");
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut qh, mut kh, mut vh, mut attention) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut hcat = Array2::zeros((query.nrows(), d));
    for h in 0..params.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let q = query.dot(&params.wq.slice(cols));
        let k = keys.dot(&params.wk.slice(cols));
        let v = keys.dot(&params.wv.slice(cols));
        let a = softmax_rows(q.dot(&k.t()) * scale);
        hcat.slice_mut(cols).assign(&a.dot(&v));
        qh.push(q);
        kh.push(k);
        vh.push(v);
        attention.push(a);
    }
    let v = hcat.dot(&params.wo);
    let z = v.dot(&params.w1);
    let act = params.activation;
    let y = z.mapv(|x| act.apply(x));
    let output = y.dot(&params.w2);
    Ok(MsfaOutput {
        output,
        attention,
        query,
        keys,
        qh,
        kh,
        vh,
        hcat,
        v,
        z,
        y,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractorGrads {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    /// One per pyramid scale; the last includes the query path.
    pub scales: Vec<Array2<f64>>,
}

/// Gradients of `Σ grad_out ⊙ O` with respect to parameters and features.
pub fn msfa_backward(
    pyramid: &FeaturePyramid,
    params: &AbstractorParams,
    fwd: &MsfaOutput,
    grad_out: &Array2<f64>,
) -> Result<AbstractorGrads, MsfaError> {
    if grad_out.dim() != fwd.output.dim() {
        return Err(MsfaError::Shape(format!("upstream gradient {:?} vs output {:?}", grad_out.dim(), fwd.output.dim())));
    }
    let act = params.activation;
    let d = pyramid.dim();
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let w2 = fwd.y.t().dot(grad_out);
    let dy = grad_out.dot(&params.w2.t());
    let mut dz = dy;
    ndarray::Zip::from(&mut dz).and(&fwd.z).for_each(|g, &z| *g *= act.derivative(z));
    let w1 = fwd.v.t().dot(&dz);
    let dv = dz.dot(&params.w1.t());
    let wo = fwd.hcat.t().dot(&dv);
    let dhcat = dv.dot(&params.wo.t());

    let mut gq = Array2::zeros((d, d));
    let mut gk = Array2::zeros((d, d));
    let mut gv = Array2::zeros((d, d));
    let mut dquery = Array2::zeros(fwd.query.dim());
    let mut dkeys = Array2::zeros(fwd.keys.dim());
    for h in 0..params.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &fwd.attention[h];
        let dhh = dhcat.slice(cols);
        let da = dhh.dot(&fwd.vh[h].t());
        let dvh = a.t().dot(&dhh);
        // Softmax backward, row by row.
        let mut ds = a * &da;
        let rows = ds.sum_axis(Axis(1));
        for (mut r, (arow, &sum)) in ds.rows_mut().into_iter().zip(a.rows().into_iter().zip(rows.iter())) {
            r.scaled_add(-sum, &arow);
        }
        ds *= scale;
        let dqh = ds.dot(&fwd.kh[h]);
        let dkh = ds.t().dot(&fwd.qh[h]);
        gq.slice_mut(cols).assign(&fwd.query.t().dot(&dqh));
        gk.slice_mut(cols).assign(&fwd.keys.t().dot(&dkh));
        gv.slice_mut(cols).assign(&fwd.keys.t().dot(&dvh));
        dquery += &dqh.dot(&params.wq.slice(cols).t());
        dkeys += &dkh.dot(&params.wk.slice(cols).t());
        dkeys += &dvh.dot(&params.wv.slice(cols).t());
    }

    let p = pyramid.tokens();
    let n = pyramid.scales().len();
    let mut scales: Vec<Array2<f64>> = (0..n).map(|i| dkeys.slice(s![i * p..(i + 1) * p, ..]).to_owned()).collect();
    scales[n - 1] += &unpool(&dquery, p);
    Ok(AbstractorGrads {
        wq: gq,
        wk: gk,
        wv: gv,
        wo,
        w1,
        w2,
        scales,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_simple_fn((rows, cols), || n.sample(&mut rng))
    }

    #[test]
    fn pooling_constant_and_blocks() {
        let c = Array2::from_elem((16, 3), 2.5);
        let q = pool_query(c.view(), PoolMode::DeskScale).unwrap();
        assert_eq!(q.dim(), (4, 3));
        assert!(q.iter().all(|&v| v == 2.5));

        let grid = Array2::from_shape_fn((16, 1), |(i, _)| i as f64);
        let q = pool_query(grid.view(), PoolMode::DeskScale).unwrap();
        // 4×4 grid 0..16: blocks {0,1,4,5}, {2,3,6,7}, {8,9,12,13}, {10,11,14,15}.
        assert_eq!(q.column(0).to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn pooling_errors() {
        assert_eq!(
            pool_query(Array2::<f64>::zeros((12, 2)).view(), PoolMode::DeskScale),
            Err(MsfaError::NotPoolable { tokens: 12 })
        );
        assert_eq!(
            pool_query(Array2::<f64>::zeros((9, 2)).view(), PoolMode::DeskScale),
            Err(MsfaError::NotPoolable { tokens: 9 })
        );
        assert_eq!(
            pool_query(Array2::<f64>::zeros((16, 2)).view(), PoolMode::Strict),
            Err(MsfaError::WrongQueryCount { tokens: 16, pooled: 4 })
        );
        assert_eq!(pool_query(Array2::<f64>::zeros((1024, 2)).view(), PoolMode::Strict).unwrap().nrows(), 256);
    }

    #[test]
    fn single_head_identity_is_softmax_average() {
        let f = array![[1.0, 0.0], [0.0, 2.0], [0.5, -1.0], [3.0, 1.0]];
        let eye = Array2::eye(2);
        let p = AbstractorParams {
            heads: 1,
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye.clone(),
            w1: eye.clone(),
            w2: eye,
            activation: Activation::Identity,
        };
        let pyr = FeaturePyramid::from_scales(vec![f.clone()]).unwrap();
        let out = msfa_forward(&pyr, &p, PoolMode::DeskScale).unwrap();
        let q = [(1.0 + 0.0 + 0.5 + 3.0) / 4.0, (0.0 + 2.0 - 1.0 + 1.0) / 4.0];
        let logits: Vec<f64> = f.rows().into_iter().map(|r| (q[0] * r[0] + q[1] * r[1]) / 2f64.sqrt()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut expect = [0.0; 2];
        for (r, l) in f.rows().into_iter().zip(&logits) {
            expect[0] += l.exp() / z * r[0];
            expect[1] += l.exp() / z * r[1];
        }
        assert_abs_diff_eq!(out.output[[0, 0]], expect[0], epsilon = 1e-12);
        assert_abs_diff_eq!(out.output[[0, 1]], expect[1], epsilon = 1e-12);
    }

    #[test]
    fn zero_w1_gives_constant_rows() {
        let mut p = AbstractorParams::random(8, 6, 4, 2, Activation::Gelu, 1).unwrap();
        p.w1.fill(0.0);
        let pyr = FeaturePyramid::from_scales(vec![seeded(16, 8, 2), seeded(16, 8, 3)]).unwrap();
        let out = msfa_forward(&pyr, &p, PoolMode::DeskScale).unwrap();
        assert!(out.output.iter().all(|&v| v == 0.0)); // gelu(0) = 0
        p.activation = Activation::Silu;
        p.w1.fill(0.0);
        let out = msfa_forward(&pyr, &p, PoolMode::DeskScale).unwrap();
        for row in out.output.rows() {
            assert_eq!(row, out.output.row(0));
        }
    }

    #[test]
    fn shape_walk_three_scales() {
        let p = AbstractorParams::random(8, 16, 8, 2, Activation::Gelu, 5).unwrap();
        let pyr = FeaturePyramid::from_scales((0..3).map(|i| seeded(16, 8, 10 + i)).collect()).unwrap();
        assert_eq!(pyr.layers(), &[7, 14, 23]);
        let out = msfa_forward(&pyr, &p, PoolMode::DeskScale).unwrap();
        assert_eq!(out.output.dim(), (4, 8));
        assert_eq!(out.attention[0].dim(), (4, 48));
    }

    #[test]
    fn duplicate_scale_is_invariant() {
        let p = AbstractorParams::random(8, 12, 8, 4, Activation::Gelu, 7).unwrap();
        let f = seeded(16, 8, 8);
        let one = msfa_forward(&FeaturePyramid::from_scales(vec![f.clone()]).unwrap(), &p, PoolMode::DeskScale).unwrap();
        let two = msfa_forward(&FeaturePyramid::from_scales(vec![f.clone(), f]).unwrap(), &p, PoolMode::DeskScale).unwrap();
        for (a, b) in one.output.iter().zip(two.output.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // Each duplicated key carries half the weight.
        let a1 = &one.attention[0];
        let a2 = &two.attention[0];
        for t in 0..a1.nrows() {
            for k in 0..16 {
                assert_abs_diff_eq!(a2[[t, k]], a1[[t, k]] / 2.0, epsilon = 1e-12);
                assert_abs_diff_eq!(a2[[t, k + 16]], a1[[t, k]] / 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        assert_eq!(
            AbstractorParams::random(6, 4, 4, 4, Activation::Gelu, 0),
            Err(MsfaError::Heads { dim: 6, heads: 4 })
        );
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.2] {
            for act in [Activation::Gelu, Activation::Silu] {
                let h = 1e-5;
                let num = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert_abs_diff_eq!(num, act.derivative(x), epsilon = 1e-8);
            }
        }
    }
}
