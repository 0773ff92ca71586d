//! Closed-form memory, FLOP and communication accounting for the
//! classification layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{check_ratio, tolerant_ceil};
use crate::shardsim::CollectiveTrace;

/// Per-shard costs of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub width_bytes: u64,
    /// Centers stored by one shard, `D·⌈C/K⌉·width`.
    pub center_bytes: u64,
    /// Sampled logits held by one shard, `⌈C·r/K⌉·B·width`.
    pub logits_bytes: u64,
    /// Forward plus backward multiply-adds counted as 2 FLOPs, `6·D·⌈C·r/K⌉·B`.
    pub flops: u64,
    pub comm: CollectiveTrace,
}

impl CostEstimate {
    pub fn comm_bytes(&self) -> u64 {
        self.comm.total_bytes()
    }
}

/// `batch` is the global batch, gathered onto every shard.
pub fn estimate(classes: usize, dim: usize, batch: usize, shards: usize, ratio: f64, width_bytes: u64) -> Result<CostEstimate> {
    if classes == 0 || dim == 0 || batch == 0 || shards == 0 || width_bytes == 0 {
        return Err(Error::contract("cost estimate needs positive C, D, B, K and width"));
    }
    check_ratio(ratio)?;
    let owned = classes.div_ceil(shards) as u64;
    let sampled = tolerant_ceil(classes as f64 * ratio / shards as f64).max(1) as u64;
    let (d, b) = (dim as u64, batch as u64);
    Ok(CostEstimate {
        width_bytes,
        center_bytes: d * owned * width_bytes,
        logits_bytes: sampled * b * width_bytes,
        flops: 6 * d * sampled * b,
        comm: CollectiveTrace::expected(dim, batch, shards, width_bytes),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    /// `(C, K)` pairs.
    pub points: Vec<(usize, usize)>,
    pub per_shard_batch: usize,
    pub dim: usize,
    pub ratios: Vec<f64>,
    pub width_bytes: u64,
}

impl ScalingSpec {
    /// 1M to 8M classes on 8 to 64 workers, 128 samples per worker, D = 512, 16-bit logits.
    pub fn memory_preset() -> Self {
        Self {
            points: vec![(1_000_000, 8), (2_000_000, 16), (4_000_000, 32), (8_000_000, 64)],
            per_shard_batch: 128,
            dim: 512,
            ratios: vec![1.0, 0.3, 0.1],
            width_bytes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("scaling ranges must be non-empty".into()));
        }
        if self.points.iter().any(|&(c, k)| c == 0 || k == 0 || k > c) {
            return Err(Error::Config("every scaling point needs 0 < K ≤ C".into()));
        }
        if self.per_shard_batch == 0 || self.dim == 0 || self.width_bytes == 0 {
            return Err(Error::Config("batch, dim and width must be positive".into()));
        }
        self.ratios.iter().try_for_each(|r| check_ratio(*r))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub classes: usize,
    pub shards: usize,
    pub batch: usize,
    pub ratio: f64,
    pub center_bytes: u64,
    pub logits_bytes: u64,
    pub fc_logits_bytes: u64,
    pub flops: u64,
    pub comm_bytes: u64,
}

/// One row per `(C, K)` point and ratio; the global batch grows with `K`.
pub fn scaling_report(spec: &ScalingSpec) -> Result<Vec<ScalingRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &(classes, shards) in &spec.points {
        let batch = spec.per_shard_batch * shards;
        let fc = estimate(classes, spec.dim, batch, shards, 1.0, spec.width_bytes)?;
        for &ratio in &spec.ratios {
            let e = estimate(classes, spec.dim, batch, shards, ratio, spec.width_bytes)?;
            rows.push(ScalingRow {
                classes,
                shards,
                batch,
                ratio,
                center_bytes: e.center_bytes,
                logits_bytes: e.logits_bytes,
                fc_logits_bytes: fc.logits_bytes,
                flops: e.flops,
                comm_bytes: e.comm_bytes(),
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[ScalingRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
