//! Margin-based softmax over a (possibly partial) set of class centers.
//!
//! The loss is evaluated in two stages. [`partial_softmax_loss`] turns a block
//! of cosine similarities into the mean cross-entropy and its gradient with
//! respect to the margined logits. [`backprop_to_features_and_centers`] then
//! pushes that gradient through the margin function and the L2 normalisation
//! of both features and centers, yielding exact gradients for the raw
//! (un-normalised) parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_columns, matmul, matmul_tn, Matrix, NORM_EPS};

/// Cosines are clamped to `±(1 - ANGULAR_CLAMP)` before evaluating the
/// derivative of the angular margin, whose `1/sqrt(1 - c²)` factor is singular at ±1.
pub const ANGULAR_CLAMP: f64 = 1e-7;

/// Tolerance on cosine range checks; normalised dot products can overshoot ±1 by rounding.
const COSINE_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginKind {
    Plain,
    /// `s·(cos θ − m)` on the positive logit.
    #[serde(alias = "cosface-style")]
    AdditiveCosine,
    /// `s·cos(θ + m)` on the positive logit.
    #[serde(alias = "arcface-style")]
    AdditiveAngular,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    kind: MarginKind,
    scale: f64,
    margin: f64,
}

impl MarginConfig {
    pub fn new(kind: MarginKind, scale: f64, margin: f64) -> Result<Self> {
        if kind == MarginKind::Plain {
            return Ok(Self::plain());
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("margin scale must be > 0, got {scale}")));
        }
        if !(0.0..1.0).contains(&margin) {
            return Err(Error::Config(format!("margin must be in [0, 1), got {margin}")));
        }
        Ok(Self {
            kind,
            scale,
            margin,
        })
    }

    pub fn plain() -> Self {
        Self {
            kind: MarginKind::Plain,
            scale: 1.0,
            margin: 0.0,
        }
    }

    /// Additive cosine margin, s = 64, m = 0.4.
    pub fn cosface() -> Self {
        Self {
            kind: MarginKind::AdditiveCosine,
            scale: 64.0,
            margin: 0.4,
        }
    }

    /// Additive angular margin, s = 64, m = 0.5.
    pub fn arcface() -> Self {
        Self {
            kind: MarginKind::AdditiveAngular,
            scale: 64.0,
            margin: 0.5,
        }
    }

    pub fn default_for(kind: MarginKind) -> Self {
        match kind {
            MarginKind::Plain => Self::plain(),
            MarginKind::AdditiveCosine => Self::cosface(),
            MarginKind::AdditiveAngular => Self::arcface(),
        }
    }

    pub fn kind(&self) -> MarginKind {
        self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Margined logit for one cosine.
    pub fn logit(&self, cosine: f64, is_positive: bool) -> f64 {
        let s = self.scale;
        match (self.kind, is_positive) {
            (MarginKind::Plain, _) => cosine,
            (_, false) => s * cosine,
            (MarginKind::AdditiveCosine, true) => s * (cosine - self.margin),
            (MarginKind::AdditiveAngular, true) => {
                s * (cosine.clamp(-1.0, 1.0).acos() + self.margin).cos()
            }
        }
    }

    /// `d logit / d cosine`.
    pub fn logit_derivative(&self, cosine: f64, is_positive: bool) -> f64 {
        let s = self.scale;
        match (self.kind, is_positive) {
            (MarginKind::Plain, _) => 1.0,
            (_, false) | (MarginKind::AdditiveCosine, true) => s,
            (MarginKind::AdditiveAngular, true) => {
                let c = cosine.clamp(-1.0 + ANGULAR_CLAMP, 1.0 - ANGULAR_CLAMP);
                let (sin_m, cos_m) = self.margin.sin_cos();
                s * (cos_m + c * sin_m / (1.0 - c * c).sqrt())
            }
        }
    }
}

pub fn apply_margin(cosine: f64, is_positive: bool, cfg: &MarginConfig) -> f64 {
    cfg.logit(cosine, is_positive)
}

/// A `B × S` block of cosines between a batch and `S` buffered centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialLogits {
    similarities: Matrix,
    positive_col: Vec<Option<usize>>,
    filter_mask: Vec<bool>,
}

impl PartialLogits {
    pub fn new(similarities: Matrix, positive_col: Vec<Option<usize>>) -> Result<Self> {
        let (rows, cols) = similarities.shape();
        if positive_col.len() != rows {
            return Err(Error::Shape {
                op: "PartialLogits::new",
                left: (rows, cols),
                right: (positive_col.len(), 1),
            });
        }
        if let Some(c) = positive_col.iter().flatten().find(|c| **c >= cols) {
            return Err(Error::contract(format!(
                "positive column {c} outside buffer of width {cols}"
            )));
        }
        if let Some(v) = similarities
            .as_slice()
            .iter()
            .find(|v| !(v.abs() <= 1.0 + COSINE_SLACK))
        {
            return Err(Error::contract(format!("similarity {v} is not a cosine")));
        }
        Ok(Self {
            similarities,
            positive_col,
            filter_mask: vec![false; rows * cols],
        })
    }

    pub fn similarities(&self) -> &Matrix {
        &self.similarities
    }

    pub fn positive_col(&self) -> &[Option<usize>] {
        &self.positive_col
    }

    pub fn rows(&self) -> usize {
        self.similarities.rows()
    }

    pub fn cols(&self) -> usize {
        self.similarities.cols()
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.filter_mask[row * self.cols() + col]
    }

    pub fn masked_count(&self) -> usize {
        self.filter_mask.iter().filter(|m| **m).count()
    }

    fn is_positive(&self, row: usize, col: usize) -> bool {
        self.positive_col[row] == Some(col)
    }
}

/// Masks every negative entry whose cosine is strictly above `threshold`.
pub fn build_filter_mask(logits: &PartialLogits, threshold: f64) -> PartialLogits {
    let mut out = logits.clone();
    let cols = logits.cols();
    for r in 0..logits.rows() {
        for c in 0..cols {
            if !logits.is_positive(r, c) && logits.similarities[(r, c)] > threshold {
                out.filter_mask[r * cols + c] = true;
            }
        }
    }
    out
}

/// Loss value and its gradient with respect to the margined logits.
#[derive(Clone, Debug)]
pub struct SoftmaxGrad {
    pub loss: f64,
    /// Softmax over unmasked columns; masked entries are exactly zero.
    pub probabilities: Matrix,
    /// `(p − onehot) / B`; masked entries are exactly zero.
    pub d_logits: Matrix,
}

/// Final gradients for raw features and raw buffered centers.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub d_features: Matrix,
    pub d_centers_buffer: Matrix,
}

pub fn partial_softmax_loss(logits: &PartialLogits, cfg: &MarginConfig) -> Result<SoftmaxGrad> {
    let (rows, cols) = logits.similarities.shape();
    if rows == 0 {
        return Err(Error::contract("empty batch"));
    }
    let mut probabilities = Matrix::zeros(rows, cols);
    let mut d_logits = Matrix::zeros(rows, cols);
    let inv_b = 1.0 / rows as f64;
    let mut total = 0.0;
    for r in 0..rows {
        let pos = logits.positive_col[r]
            .ok_or_else(|| Error::contract(format!("row {r} has no positive column")))?;
        let z: Vec<Option<f64>> = (0..cols)
            .map(|c| {
                (!logits.is_masked(r, c))
                    .then(|| cfg.logit(logits.similarities[(r, c)], c == pos))
            })
            .collect();
        let max = z
            .iter()
            .flatten()
            .copied()
            .reduce(f64::max)
            .ok_or_else(|| Error::contract(format!("row {r} has every column masked")))?;
        let sum: f64 = z.iter().flatten().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - z[pos].expect("positive is never masked");
        for (c, zc) in z.iter().enumerate() {
            if let Some(zc) = zc {
                let p = (zc - lse).exp();
                probabilities[(r, c)] = p;
                d_logits[(r, c)] = (p - if c == pos { 1.0 } else { 0.0 }) * inv_b;
            }
        }
    }
    Ok(SoftmaxGrad {
        loss: total * inv_b,
        probabilities,
        d_logits,
    })
}

/// Gradient with respect to the cosine block: `d_logits` times the margin derivative.
pub fn cosine_gradient(logits: &PartialLogits, d_logits: &Matrix, cfg: &MarginConfig) -> Matrix {
    Matrix::from_fn(logits.rows(), logits.cols(), |r, c| {
        if logits.is_masked(r, c) {
            0.0
        } else {
            d_logits[(r, c)] * cfg.logit_derivative(logits.similarities[(r, c)], logits.is_positive(r, c))
        }
    })
}

/// Gradients with respect to the normalised features (`D × B`) and normalised
/// buffered centers (`D × S`).
pub fn cosine_space_grads(
    logits: &PartialLogits,
    d_logits: &Matrix,
    normalized_features: &Matrix,
    normalized_centers: &Matrix,
    cfg: &MarginConfig,
) -> Result<(Matrix, Matrix)> {
    check_shapes(logits, d_logits, normalized_features, normalized_centers)?;
    let d_cos = cosine_gradient(logits, d_logits, cfg);
    let d_feat = matmul(normalized_centers, &d_cos.transpose())?;
    let d_cent = matmul(normalized_features, &d_cos)?;
    Ok((d_feat, d_cent))
}

/// Pulls a gradient through column-wise L2 normalisation
/// `x̂ = x / max(‖x‖, eps)`.
pub fn normalization_backward(raw: &Matrix, normalized: &Matrix, d_normalized: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for c in 0..raw.cols() {
        let norm = raw.column_norm(c);
        if norm < NORM_EPS {
            for r in 0..raw.rows() {
                out[(r, c)] = d_normalized[(r, c)] / NORM_EPS;
            }
            continue;
        }
        let proj: f64 = (0..raw.rows())
            .map(|r| normalized[(r, c)] * d_normalized[(r, c)])
            .sum();
        for r in 0..raw.rows() {
            out[(r, c)] = (d_normalized[(r, c)] - normalized[(r, c)] * proj) / norm;
        }
    }
    out
}

pub fn backprop_to_features_and_centers(
    logits: &PartialLogits,
    stage: &SoftmaxGrad,
    normalized_features: &Matrix,
    normalized_centers_buffer: &Matrix,
    raw_features: &Matrix,
    raw_centers_buffer: &Matrix,
    cfg: &MarginConfig,
) -> Result<LossGrad> {
    if raw_features.shape() != normalized_features.shape() {
        return Err(Error::Shape {
            op: "backprop (features)",
            left: raw_features.shape(),
            right: normalized_features.shape(),
        });
    }
    if raw_centers_buffer.shape() != normalized_centers_buffer.shape() {
        return Err(Error::Shape {
            op: "backprop (centers)",
            left: raw_centers_buffer.shape(),
            right: normalized_centers_buffer.shape(),
        });
    }
    let (d_feat_hat, d_cent_hat) = cosine_space_grads(
        logits,
        &stage.d_logits,
        normalized_features,
        normalized_centers_buffer,
        cfg,
    )?;
    Ok(LossGrad {
        loss: stage.loss,
        d_features: normalization_backward(raw_features, normalized_features, &d_feat_hat),
        d_centers_buffer: normalization_backward(
            raw_centers_buffer,
            normalized_centers_buffer,
            &d_cent_hat,
        ),
    })
}

/// Cosine block `X̂ᵀ Ŵ` for raw features (`D × B`) and raw centers (`D × S`),
/// together with the normalised operands.
pub fn cosine_block(raw_features: &Matrix, raw_centers: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
    let xf = l2_normalize_columns(raw_features, NORM_EPS);
    let wc = l2_normalize_columns(raw_centers, NORM_EPS);
    let cos = matmul_tn(&xf, &wc)?;
    Ok((cos, xf, wc))
}

/// Loss and raw-parameter gradients in one call, for a single process that
/// holds every buffered center.
pub fn loss_and_grad(
    raw_features: &Matrix,
    raw_centers_buffer: &Matrix,
    positive_col: Vec<Option<usize>>,
    filter_threshold: Option<f64>,
    cfg: &MarginConfig,
) -> Result<LossGrad> {
    let (cos, xf, wc) = cosine_block(raw_features, raw_centers_buffer)?;
    let mut logits = PartialLogits::new(cos, positive_col)?;
    if let Some(t) = filter_threshold {
        logits = build_filter_mask(&logits, t);
    }
    let stage = partial_softmax_loss(&logits, cfg)?;
    backprop_to_features_and_centers(&logits, &stage, &xf, &wc, raw_features, raw_centers_buffer, cfg)
}

fn check_shapes(
    logits: &PartialLogits,
    d_logits: &Matrix,
    features: &Matrix,
    centers: &Matrix,
) -> Result<()> {
    let (b, s) = logits.similarities.shape();
    if d_logits.shape() != (b, s) {
        return Err(Error::Shape {
            op: "cosine_space_grads (d_logits)",
            left: (b, s),
            right: d_logits.shape(),
        });
    }
    if features.cols() != b || centers.cols() != s || features.rows() != centers.rows() {
        return Err(Error::Shape {
            op: "cosine_space_grads (features, centers)",
            left: features.shape(),
            right: centers.shape(),
        });
    }
    Ok(())
}
