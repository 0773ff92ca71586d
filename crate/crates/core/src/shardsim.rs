//! In-process simulation of the model-parallel classification step.
//!
//! Each of the `K` simulated workers owns a contiguous block of class
//! centers. One step runs:
//!
//! 1. all-gather of the per-worker feature blocks,
//! 2. per-shard buffer construction and partial cosine logits,
//! 3. all-reduce of the row maxima, then of the shifted exponential sums,
//! 4. all-reduce of the per-row loss terms,
//! 5. local gradients, SGD on buffered centers, and a reduce-scatter of the
//!    feature gradient back to the workers.
//!
//! Per-shard work may run on a rayon pool; every reduction folds shard
//! results in ascending shard order, so the output does not depend on the
//! number of threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{build_filter_mask, normalization_backward, MarginConfig, PartialLogits};
use crate::numerics::{domain, l2_normalize_columns, matmul, matmul_tn, Matrix, SeededRng, NORM_EPS};
use crate::sampler::{build_buffers, ShardLayout, SampleBuffer};

/// Bytes per simulated element.
pub const ELEMENT_BYTES: u64 = std::mem::size_of::<f64>() as u64;

/// Collective calls issued per step: feature gather, row-max reduce,
/// exp-sum reduce, loss reduce, feature-gradient reduce-scatter.
pub const COLLECTIVES_PER_STEP: u64 = 5;

/// A gathered mini-batch: `D × B` embeddings and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.cols() != labels.len() {
            return Err(Error::Shape {
                op: "FeatureBatch::new",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn dim(&self) -> usize {
        self.features.rows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits into `k` contiguous worker blocks; the first `B mod k` get one extra sample.
    pub fn split(&self, k: usize) -> Vec<FeatureBatch> {
        let b = self.len();
        let mut out = Vec::with_capacity(k);
        let mut start = 0;
        for w in 0..k {
            let n = b / k + usize::from(w < b % k);
            let cols: Vec<usize> = (start..start + n).collect();
            out.push(FeatureBatch {
                features: self.features.select_columns(&cols),
                labels: self.labels[start..start + n].to_vec(),
            });
            start += n;
        }
        out
    }
}

/// Byte and call counts for one step's collectives. Bytes are summed over all workers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveTrace {
    pub all_gather_bytes: u64,
    pub all_reduce_bytes: u64,
    pub gradient_exchange_bytes: u64,
    pub collective_ops: u64,
}

impl CollectiveTrace {
    pub fn total_bytes(&self) -> u64 {
        self.all_gather_bytes + self.all_reduce_bytes + self.gradient_exchange_bytes
    }

    /// All-gather bytes received by one worker, `(K−1)/K · B·D·8`.
    pub fn per_worker_all_gather_bytes(&self, num_shards: usize) -> f64 {
        self.all_gather_bytes as f64 / num_shards as f64
    }

    /// Closed form for a step over `batch` samples of dimension `dim` on `k` workers.
    pub fn expected(dim: usize, batch: usize, k: usize, element_bytes: u64) -> Self {
        let (d, b, k) = (dim as u64, batch as u64, k as u64);
        let peers = k.saturating_sub(1);
        Self {
            all_gather_bytes: peers * b * d * element_bytes,
            // ring all-reduce moves 2(K−1) copies of the payload: B maxima, B sums, one loss
            all_reduce_bytes: 2 * peers * (2 * b + 1) * element_bytes,
            gradient_exchange_bytes: peers * b * d * element_bytes,
            collective_ops: COLLECTIVES_PER_STEP,
        }
    }
}

/// Concatenates worker blocks in shard order.
pub fn all_gather_features(blocks: &[FeatureBatch]) -> Result<(FeatureBatch, CollectiveTrace)> {
    let dim = blocks
        .first()
        .map(|b| b.dim())
        .ok_or_else(|| Error::contract("all-gather over zero workers"))?;
    if let Some(bad) = blocks.iter().find(|b| b.dim() != dim) {
        return Err(Error::Shape {
            op: "all_gather_features",
            left: (dim, 0),
            right: bad.features.shape(),
        });
    }
    let features = Matrix::hstack(&blocks.iter().map(|b| b.features.clone()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = blocks.iter().flat_map(|b| b.labels.iter().copied()).collect();
    let total = labels.len() as u64;
    let bytes = blocks
        .iter()
        .map(|b| (total - b.len() as u64) * dim as u64 * ELEMENT_BYTES)
        .sum();
    let trace = CollectiveTrace {
        all_gather_bytes: bytes,
        collective_ops: 1,
        ..Default::default()
    };
    Ok((FeatureBatch::new(features, labels)?, trace))
}

/// One worker's slice of the center matrix plus its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterShard {
    shard_id: usize,
    start: usize,
    end: usize,
    weights: Matrix,
    momentum: Matrix,
}

impl CenterShard {
    pub fn new(shard_id: usize, start: usize, weights: Matrix) -> Result<Self> {
        if !weights.is_finite() {
            return Err(Error::contract(format!("shard {shard_id} has non-finite weights")));
        }
        let momentum = Matrix::zeros(weights.rows(), weights.cols());
        Self::with_momentum(shard_id, start, weights, momentum)
    }

    pub fn with_momentum(shard_id: usize, start: usize, weights: Matrix, momentum: Matrix) -> Result<Self> {
        if weights.shape() != momentum.shape() {
            return Err(Error::Shape {
                op: "CenterShard::with_momentum",
                left: weights.shape(),
                right: momentum.shape(),
            });
        }
        Ok(Self {
            shard_id,
            start,
            end: start + weights.cols(),
            weights,
            momentum,
        })
    }

    pub fn shard_id(&self) -> usize {
        self.shard_id
    }

    pub fn owned_range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn owns(&self, class: usize) -> bool {
        (self.start..self.end).contains(&class)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn momentum(&self) -> &Matrix {
        &self.momentum
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn center(&self, class: usize) -> Vec<f64> {
        self.weights.column(class - self.start)
    }

    /// Raw centers for the given global class ids, as a `D × n` matrix.
    pub fn gather(&self, classes: &[usize]) -> Matrix {
        let local: Vec<usize> = classes.iter().map(|c| c - self.start).collect();
        self.weights.select_columns(&local)
    }
}

/// Cuts a full `D × C` center matrix into shards following `layout`.
pub fn split_centers(layout: &ShardLayout, centers: &Matrix) -> Result<Vec<CenterShard>> {
    if centers.cols() != layout.num_classes() {
        return Err(Error::Shape {
            op: "split_centers",
            left: centers.shape(),
            right: (centers.rows(), layout.num_classes()),
        });
    }
    (0..layout.num_shards())
        .map(|k| {
            let range = layout.owned_range(k);
            let cols: Vec<usize> = range.clone().collect();
            CenterShard::new(k, range.start, centers.select_columns(&cols))
        })
        .collect()
}

/// Reassembles the full `D × C` center matrix.
pub fn gather_centers(shards: &[CenterShard]) -> Result<Matrix> {
    Matrix::hstack(&shards.iter().map(|s| s.weights.clone()).collect::<Vec<_>>())
}

/// Gaussian-initialised shards, `N(0, std²)` per entry, keyed by `seed`.
pub fn init_shards(layout: &ShardLayout, dim: usize, std: f64, seed: u64) -> Result<Vec<CenterShard>> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    (0..layout.num_shards())
        .map(|k| {
            let range = layout.owned_range(k);
            // one stream per class keeps the init independent of K
            let mut cols = Vec::with_capacity(range.len());
            for class in range.clone() {
                let mut rng = SeededRng::keyed(seed, domain::INIT, 0, class as u64);
                cols.push((0..dim).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>());
            }
            CenterShard::new(k, range.start, Matrix::from_columns(dim, &cols)?)
        })
        .collect()
}

/// SGD with momentum on the buffered columns of one shard:
/// `v ← μ·v + g`, `w ← w − lr·(v + λ·w)`. Other columns are not touched.
pub fn update_centers(
    mut shard: CenterShard,
    d_centers_buffer: &Matrix,
    buffer: &SampleBuffer,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<CenterShard> {
    if d_centers_buffer.cols() != buffer.len() || d_centers_buffer.rows() != shard.dim() {
        return Err(Error::Shape {
            op: "update_centers",
            left: d_centers_buffer.shape(),
            right: (shard.dim(), buffer.len()),
        });
    }
    if let Some(c) = buffer.class_indices().iter().find(|c| !shard.owns(**c)) {
        return Err(Error::contract(format!(
            "class {c} in buffer is not owned by shard {} ({:?})",
            shard.shard_id,
            shard.owned_range()
        )));
    }
    for (col, class) in buffer.class_indices().iter().enumerate() {
        let local = class - shard.start;
        for r in 0..shard.dim() {
            let v = momentum * shard.momentum[(r, local)] + d_centers_buffer[(r, col)];
            shard.momentum[(r, local)] = v;
            let w = shard.weights[(r, local)];
            shard.weights[(r, local)] = w - lr * (v + weight_decay * w);
        }
    }
    Ok(shard)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub ratio: f64,
    pub margin: MarginConfig,
    pub filter_threshold: Option<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl StepConfig {
    /// Momentum 0.9 and weight decay 5e-4.
    pub fn new(ratio: f64, margin: MarginConfig, lr: f64) -> Self {
        Self {
            ratio,
            margin,
            filter_threshold: None,
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Cheap per-step diagnostics computed from the partial logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Mean cosine between each sample and its own center.
    pub apcs: f64,
    /// Mean over samples of the largest cosine to a buffered negative center.
    pub buffered_amncs: f64,
    /// Negative entries removed by the filter.
    pub masked: usize,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub loss: f64,
    pub d_features: Matrix,
    pub shards: Vec<CenterShard>,
    pub buffers: Vec<SampleBuffer>,
    pub trace: CollectiveTrace,
    pub diagnostics: StepDiagnostics,
}

struct ShardLogits {
    logits: PartialLogits,
    margined: Matrix,
    normalized: Matrix,
    raw: Matrix,
    row_max: Vec<f64>,
}

/// One partial-FC training step over `K = shards.len()` simulated workers.
pub fn distributed_partial_step(
    shards: Vec<CenterShard>,
    batch: &FeatureBatch,
    cfg: &StepConfig,
    seed: u64,
    iteration: u64,
) -> Result<StepResult> {
    if !(cfg.lr > 0.0) {
        return Err(Error::contract(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let k = shards.len();
    let num_classes = shards.last().map_or(0, |s| s.end);
    let layout = ShardLayout::new(num_classes, k)?;
    for (i, s) in shards.iter().enumerate() {
        if s.shard_id != i || s.owned_range() != layout.owned_range(i) || s.dim() != batch.dim() {
            return Err(Error::contract(format!(
                "shard {i} does not match the {num_classes}-class, {k}-shard layout"
            )));
        }
    }
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let buffers = build_buffers(&layout, &batch.labels, cfg.ratio, seed, iteration)?;

    // every worker holds the gathered batch and normalises it identically
    let x_raw = &batch.features;
    let x_hat = l2_normalize_columns(x_raw, NORM_EPS);

    // partial cosines, margins and local row maxima
    let parts: Vec<ShardLogits> = shards
        .par_iter()
        .zip(buffers.par_iter())
        .map(|(shard, buf)| shard_logits(shard, buf, batch, &x_hat, cfg))
        .collect::<Result<_>>()?;

    let global_max: Vec<f64> = (0..b)
        .map(|i| parts.iter().map(|p| p.row_max[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let local_sums: Vec<Vec<f64>> = parts
        .par_iter()
        .map(|p| {
            (0..b)
                .map(|i| {
                    (0..p.logits.cols())
                        .filter(|c| !p.logits.is_masked(i, *c))
                        .map(|c| (p.margined[(i, c)] - global_max[i]).exp())
                        .sum()
                })
                .collect()
        })
        .collect();
    let log_denominator: Vec<f64> = (0..b)
        .map(|i| {
            let sum: f64 = local_sums.iter().map(|s| s[i]).sum();
            global_max[i] + sum.ln()
        })
        .collect();

    // the shard holding a row's positive contributes that row's loss term
    let mut loss_sum = 0.0;
    for p in &parts {
        let mut local = 0.0;
        for (i, pos) in p.logits.positive_col().iter().enumerate() {
            if let Some(c) = pos {
                local += log_denominator[i] - p.margined[(i, *c)];
            }
        }
        loss_sum += local;
    }
    let loss = loss_sum * inv_b;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure {
            iteration,
            detail: format!("loss is {loss}"),
        });
    }

    let diagnostics = step_diagnostics(&parts, b);

    // local gradients and center updates
    let outcomes: Vec<(Matrix, CenterShard)> = shards
        .into_par_iter()
        .zip(parts.into_par_iter())
        .zip(buffers.par_iter())
        .map(|((shard, part), buf)| {
            let d_cos = Matrix::from_fn(b, part.logits.cols(), |i, c| {
                if part.logits.is_masked(i, c) {
                    return 0.0;
                }
                let is_pos = part.logits.positive_col()[i] == Some(c);
                let p = (part.margined[(i, c)] - log_denominator[i]).exp();
                let d_logit = (p - if is_pos { 1.0 } else { 0.0 }) * inv_b;
                d_logit * cfg.margin.logit_derivative(part.logits.similarities()[(i, c)], is_pos)
            });
            let d_x_hat = matmul(&part.normalized, &d_cos.transpose())?;
            let d_w_hat = matmul(&x_hat, &d_cos)?;
            let d_w = normalization_backward(&part.raw, &part.normalized, &d_w_hat);
            let updated = update_centers(shard, &d_w, buf, cfg.lr, cfg.momentum, cfg.weight_decay)?;
            Ok((d_x_hat, updated))
        })
        .collect::<Result<_>>()?;

    let mut d_x_hat = Matrix::zeros(batch.dim(), b);
    let mut updated = Vec::with_capacity(k);
    for (part_grad, shard) in outcomes {
        for (acc, v) in d_x_hat.as_mut_slice().iter_mut().zip(part_grad.as_slice()) {
            *acc += v;
        }
        updated.push(shard);
    }
    let d_features = normalization_backward(x_raw, &x_hat, &d_x_hat);
    if !d_features.is_finite() {
        return Err(Error::NumericalFailure {
            iteration,
            detail: "feature gradient is not finite".into(),
        });
    }

    Ok(StepResult {
        loss,
        d_features,
        shards: updated,
        buffers,
        trace: CollectiveTrace::expected(batch.dim(), b, k, ELEMENT_BYTES),
        diagnostics,
    })
}

fn shard_logits(
    shard: &CenterShard,
    buf: &SampleBuffer,
    batch: &FeatureBatch,
    x_hat: &Matrix,
    cfg: &StepConfig,
) -> Result<ShardLogits> {
    let raw = shard.gather(buf.class_indices());
    let normalized = l2_normalize_columns(&raw, NORM_EPS);
    let cos = matmul_tn(x_hat, &normalized)?;
    let positives = buf.positives();
    let positive_col = batch
        .labels
        .iter()
        .map(|y| positives.binary_search(y).ok())
        .collect();
    let mut logits = PartialLogits::new(cos, positive_col)?;
    if let Some(t) = cfg.filter_threshold {
        logits = build_filter_mask(&logits, t);
    }
    let margined = Matrix::from_fn(logits.rows(), logits.cols(), |i, c| {
        cfg.margin
            .logit(logits.similarities()[(i, c)], logits.positive_col()[i] == Some(c))
    });
    let row_max = (0..logits.rows())
        .map(|i| {
            (0..logits.cols())
                .filter(|c| !logits.is_masked(i, *c))
                .map(|c| margined[(i, c)])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(ShardLogits {
        logits,
        margined,
        normalized,
        raw,
        row_max,
    })
}

fn step_diagnostics(parts: &[ShardLogits], b: usize) -> StepDiagnostics {
    let mut apcs = 0.0;
    let mut neg_max = vec![f64::NEG_INFINITY; b];
    let mut masked = 0;
    for p in parts {
        masked += p.logits.masked_count();
        for i in 0..b {
            let pos = p.logits.positive_col()[i];
            for c in 0..p.logits.cols() {
                let s = p.logits.similarities()[(i, c)];
                if pos == Some(c) {
                    apcs += s;
                } else {
                    neg_max[i] = neg_max[i].max(s);
                }
            }
        }
    }
    let finite: Vec<f64> = neg_max.into_iter().filter(|v| v.is_finite()).collect();
    StepDiagnostics {
        apcs: apcs / b as f64,
        buffered_amncs: if finite.is_empty() {
            0.0
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        masked,
    }
}
