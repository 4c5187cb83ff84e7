//! Reference numerics for the multi-scale feature abstractor and the
//! segmentation/text training losses.
//!
//! The abstractor distils a pyramid of vision features `f_i` (each `P × d_v`)
//! into a fixed number of tokens. The query bank is the last scale pooled
//! 2×2 on its `√P × √P` token grid; keys and values are all scales stacked
//! along the token axis. Then `V = MHA(Q, F, F)` and `O = σ(V W1) W2`.
//!
//! Assumptions: Q/K/V use ordinary per-head linear projections with no bias,
//! Q is not projected beyond that, and no positional term is added to F.
//!
//! Everything here is forward plus analytic gradient, checked against
//! central finite differences. There is no optimizer.

mod abstractor;
pub mod fixture;
pub mod gradcheck;
pub mod loss;
pub mod suite;

use ndarray::Array2;
use thiserror::Error;

pub use abstractor::{msfa_backward, msfa_forward, pool_query, AbstractorGrads, AbstractorParams, Activation, MsfaOutput, PoolMode};
pub use loss::{bce_loss, ce_loss, dice_loss, seg_loss, shifted_ce_loss, total_loss, LossWeights};

/// Query tokens produced at full resolution (P = 1024).
pub const QUERY_TOKENS: usize = 256;
pub const DEFAULT_LAYERS: [usize; 3] = [7, 14, 23];
pub const DEFAULT_HEADS: usize = 8;
pub const DEFAULT_SEG_TOKENS: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MsfaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{tokens} tokens cannot be pooled 2x2 on a square grid")]
    NotPoolable { tokens: usize },
    #[error("{tokens} tokens pool to {pooled}, not {QUERY_TOKENS}")]
    WrongQueryCount { tokens: usize, pooled: usize },
    #[error("dimension {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("{0} contains a non-finite value")]
    NonFinite(&'static str),
    #[error("{what} value {value} outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("prediction at exactly 0 or 1 with clamping disabled")]
    Unclamped,
    #[error("{logits} logit rows for {targets} targets")]
    Misaligned { logits: usize, targets: usize },
    #[error("target {target} outside vocabulary of {vocab}")]
    TargetOutOfVocab { target: usize, vocab: usize },
    #[error("non-differentiable point: {0}")]
    NonDifferentiable(String),
    #[error("at least one {0} required")]
    Empty(&'static str),
}

/// Multi-scale vision features, one matrix per encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    scales: Vec<Array2<f64>>,
    layers: Vec<usize>,
}

impl FeaturePyramid {
    pub fn new(scales: Vec<Array2<f64>>, layers: Vec<usize>) -> Result<Self, MsfaError> {
        let first = scales.first().ok_or(MsfaError::Empty("scale"))?;
        let shape = first.dim();
        if let Some(bad) = scales.iter().find(|s| s.dim() != shape) {
            return Err(MsfaError::Shape(format!("scale {:?} vs {:?}", bad.dim(), shape)));
        }
        if layers.len() != scales.len() {
            return Err(MsfaError::Shape(format!("{} layer indices for {} scales", layers.len(), scales.len())));
        }
        let side = (shape.0 as f64).sqrt().round() as usize;
        if side * side != shape.0 {
            return Err(MsfaError::NotPoolable { tokens: shape.0 });
        }
        if scales.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(MsfaError::NonFinite("feature pyramid"));
        }
        Ok(Self { scales, layers })
    }

    /// Layer indices default to the deepest entries of [`DEFAULT_LAYERS`]
    /// (or `0..n` past three scales).
    pub fn from_scales(scales: Vec<Array2<f64>>) -> Result<Self, MsfaError> {
        let n = scales.len();
        let layers = if n <= DEFAULT_LAYERS.len() {
            DEFAULT_LAYERS[DEFAULT_LAYERS.len() - n..].to_vec()
        } else {
            (0..n).collect()
        };
        Self::new(scales, layers)
    }

    pub fn scales(&self) -> &[Array2<f64>] {
        &self.scales
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn tokens(&self) -> usize {
        self.scales[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.scales[0].ncols()
    }

    pub fn last(&self) -> &Array2<f64> {
        self.scales.last().expect("non-empty")
    }
}

/// Learnable segmentation tokens `H_seg`, `N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTokenBank {
    tokens: Array2<f64>,
}

impl SegTokenBank {
    pub fn new(tokens: Array2<f64>) -> Result<Self, MsfaError> {
        if tokens.nrows() == 0 {
            return Err(MsfaError::Empty("segmentation token"));
        }
        Ok(Self { tokens })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            tokens: Array2::zeros((DEFAULT_SEG_TOKENS, dim)),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }
}
