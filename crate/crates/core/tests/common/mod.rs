//! Independent dense reference for the full classification layer, written
//! directly from the loss definition without touching the library's loss code.

#![allow(dead_code)]

use pfc_sim::loss::{MarginConfig, MarginKind};
use pfc_sim::numerics::Matrix;

pub struct DenseOutput {
    pub loss: f64,
    pub d_features: Matrix,
    pub d_centers: Matrix,
}

fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (v.iter().map(|x| x / n).collect(), n)
}

fn positive_logit(c: f64, m: &MarginConfig) -> (f64, f64) {
    let (s, mv) = (m.scale(), m.margin());
    match m.kind() {
        MarginKind::Plain => (c, 1.0),
        MarginKind::AdditiveCosine => (s * (c - mv), s),
        MarginKind::AdditiveAngular => {
            let theta = c.clamp(-1.0, 1.0).acos();
            let cc = c.clamp(-1.0 + 1e-7, 1.0 - 1e-7);
            (s * (theta + mv).cos(), s * (cc.acos() + mv).sin() / (1.0 - cc * cc).sqrt())
        }
    }
}

fn negative_scale(m: &MarginConfig) -> f64 {
    match m.kind() {
        MarginKind::Plain => 1.0,
        _ => m.scale(),
    }
}

/// Mean margin softmax over all `C` classes with exact gradients for raw features and centers.
pub fn dense_loss(features: &Matrix, centers: &Matrix, labels: &[usize], margin: &MarginConfig) -> DenseOutput {
    let (d, b, c) = (features.rows(), features.cols(), centers.cols());
    let xs: Vec<(Vec<f64>, f64)> = (0..b).map(|i| normalize(&features.column(i))).collect();
    let ws: Vec<(Vec<f64>, f64)> = (0..c).map(|j| normalize(&centers.column(j))).collect();
    let neg = negative_scale(margin);
    let mut loss = 0.0;
    let mut dx_hat = vec![vec![0.0; d]; b];
    let mut dw_hat = vec![vec![0.0; d]; c];
    for i in 0..b {
        let cos: Vec<f64> = ws
            .iter()
            .map(|(w, _)| w.iter().zip(&xs[i].0).map(|(a, b)| a * b).sum())
            .collect();
        let mut logits: Vec<f64> = cos.iter().map(|c| neg * c).collect();
        let (pos, dpos) = positive_logit(cos[labels[i]], margin);
        logits[labels[i]] = pos;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        loss += max + sum.ln() - pos;
        for j in 0..c {
            let p = (logits[j] - max).exp() / sum;
            let dz = (p - if j == labels[i] { 1.0 } else { 0.0 }) / b as f64;
            let dc = dz * if j == labels[i] { dpos } else { neg };
            for k in 0..d {
                dx_hat[i][k] += dc * ws[j].0[k];
                dw_hat[j][k] += dc * xs[i].0[k];
            }
        }
    }
    let project = |(u, n): &(Vec<f64>, f64), g: &[f64]| -> Vec<f64> {
        let dot: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        g.iter().zip(u).map(|(gk, uk)| (gk - uk * dot) / n).collect()
    };
    let d_features: Vec<Vec<f64>> = (0..b).map(|i| project(&xs[i], &dx_hat[i])).collect();
    let d_centers: Vec<Vec<f64>> = (0..c).map(|j| project(&ws[j], &dw_hat[j])).collect();
    DenseOutput {
        loss: loss / b as f64,
        d_features: Matrix::from_columns(d, &d_features).unwrap(),
        d_centers: Matrix::from_columns(d, &d_centers).unwrap(),
    }
}

/// Dense momentum SGD: `v ← μv + g`, `w ← w − lr(v + λw)` on every column.
pub struct DenseFc {
    pub weights: Matrix,
    pub velocity: Matrix,
}

impl DenseFc {
    pub fn new(weights: Matrix) -> Self {
        let velocity = Matrix::zeros(weights.rows(), weights.cols());
        Self { weights, velocity }
    }

    pub fn step(&mut self, grad: &Matrix, lr: f64, momentum: f64, weight_decay: f64) {
        let w = self.weights.as_mut_slice();
        let v = self.velocity.as_mut_slice();
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(grad.as_slice()) {
            *vi = momentum * *vi + gi;
            *wi -= lr * (*vi + weight_decay * *wi);
        }
    }
}

/// `‖a − b‖∞ / ‖b‖∞`.
pub fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = b.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    a.max_abs_diff(b) / scale.max(f64::MIN_POSITIVE)
}

pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
