//! Training diagnostics (APCS, AMNCS, MICS) and pairwise verification.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_columns, matmul_tn, Matrix, NORM_EPS};
use crate::shardsim::{CenterShard, FeatureBatch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSnapshot {
    pub iteration: u64,
    pub apcs: f64,
    pub amncs: f64,
    pub amncs_conflicted: Option<f64>,
    pub amncs_hard: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Amncs {
    pub overall: f64,
    /// Max over negatives that share the sample's identity.
    pub conflicted: Option<f64>,
    /// Max over negatives of other identities.
    pub hard: Option<f64>,
}

/// Per-shard cosines between normalised features and normalised owned centers.
fn shard_cosines(x_hat: &Matrix, shard: &CenterShard) -> Result<Matrix> {
    matmul_tn(x_hat, &l2_normalize_columns(shard.weights(), NORM_EPS))
}

fn check_labels(batch: &FeatureBatch, shards: &[CenterShard]) -> Result<usize> {
    let c = shards.last().map_or(0, |s| s.owned_range().end);
    if let Some(y) = batch.labels.iter().find(|y| **y >= c) {
        return Err(Error::contract(format!("label {y} out of range for {c} classes")));
    }
    Ok(c)
}

/// Mean cosine between each sample and its labelled center.
pub fn apcs(batch: &FeatureBatch, shards: &[CenterShard]) -> Result<f64> {
    check_labels(batch, shards)?;
    if batch.is_empty() {
        return Err(Error::contract("APCS of an empty batch"));
    }
    let x_hat = l2_normalize_columns(&batch.features, NORM_EPS);
    let mut total = 0.0;
    for shard in shards {
        let owned: Vec<usize> = (0..batch.len())
            .filter(|i| shard.owns(batch.labels[*i]))
            .collect();
        if owned.is_empty() {
            continue;
        }
        let w_hat = l2_normalize_columns(&shard.gather(&owned.iter().map(|i| batch.labels[*i]).collect::<Vec<_>>()), NORM_EPS);
        for (col, i) in owned.iter().enumerate() {
            total += (0..batch.dim()).map(|r| x_hat[(r, *i)] * w_hat[(r, col)]).sum::<f64>();
        }
    }
    Ok(total / batch.len() as f64)
}

/// Mean over samples of the largest cosine to any center other than the label's.
///
/// With `class_identity`, negatives are also split into conflicted ones
/// (same identity as the label's class) and hard ones (everything else).
pub fn amncs(
    batch: &FeatureBatch,
    shards: &[CenterShard],
    class_identity: Option<&[usize]>,
) -> Result<Amncs> {
    let c = check_labels(batch, shards)?;
    if c < 2 {
        return Err(Error::contract("AMNCS needs at least two classes"));
    }
    if batch.is_empty() {
        return Err(Error::contract("AMNCS of an empty batch"));
    }
    if let Some(map) = class_identity {
        if map.len() != c {
            return Err(Error::Shape {
                op: "amncs (class_identity)",
                left: (c, 1),
                right: (map.len(), 1),
            });
        }
    }
    let b = batch.len();
    let x_hat = l2_normalize_columns(&batch.features, NORM_EPS);
    let mut overall = vec![f64::NEG_INFINITY; b];
    let mut conflicted = vec![f64::NEG_INFINITY; b];
    let mut hard = vec![f64::NEG_INFINITY; b];
    // ascending shard order; max is exact so order only matters for ties
    for shard in shards {
        let cos = shard_cosines(&x_hat, shard)?;
        let start = shard.owned_range().start;
        for i in 0..b {
            let y = batch.labels[i];
            for local in 0..cos.cols() {
                let j = start + local;
                if j == y {
                    continue;
                }
                let s = cos[(i, local)];
                overall[i] = overall[i].max(s);
                if let Some(map) = class_identity {
                    let slot = if map[j] == map[y] { &mut conflicted[i] } else { &mut hard[i] };
                    *slot = slot.max(s);
                }
            }
        }
    }
    let mean_finite = |v: &[f64]| {
        let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
    };
    Ok(Amncs {
        overall: overall.iter().sum::<f64>() / b as f64,
        conflicted: class_identity.and_then(|_| mean_finite(&conflicted)),
        hard: class_identity.and_then(|_| mean_finite(&hard)),
    })
}

/// Per-class maximum cosine to any other class center.
pub fn mics(shards: &[CenterShard]) -> Result<Vec<f64>> {
    let normalized: Vec<Matrix> = shards
        .iter()
        .map(|s| l2_normalize_columns(s.weights(), NORM_EPS))
        .collect();
    let all = Matrix::hstack(&normalized)?;
    let c = all.cols();
    if c < 2 {
        return Err(Error::contract("MICS needs at least two classes"));
    }
    let gram = matmul_tn(&all, &all)?;
    Ok((0..c)
        .map(|i| {
            (0..c)
                .filter(|j| *j != i)
                .map(|j| gram[(i, j)])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

pub fn snapshot(
    iteration: u64,
    batch: &FeatureBatch,
    shards: &[CenterShard],
    class_identity: Option<&[usize]>,
) -> Result<DiagnosticsSnapshot> {
    let a = amncs(batch, shards, class_identity)?;
    Ok(DiagnosticsSnapshot {
        iteration,
        apcs: apcs(batch, shards)?,
        amncs: a.overall,
        amncs_conflicted: a.conflicted,
        amncs_hard: a.hard,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub tar: f64,
    pub far_target: f64,
    pub measured_far: f64,
    pub threshold: f64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

/// TAR at the lowest threshold whose false-accept rate stays within `far_target`.
///
/// A pair is accepted when its score is `>= threshold`. Candidate thresholds
/// are the impostor scores themselves (plus one value above the maximum).
pub fn verify_tar_at_far(
    genuine: &[f64],
    impostor: &[f64],
    far_target: f64,
) -> Result<VerificationReport> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::contract("verification needs genuine and impostor scores"));
    }
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::contract(format!("far target {far_target} outside (0, 1)")));
    }
    let n = impostor.len();
    let allowed = (far_target * n as f64 + 1e-9).floor() as usize;
    if allowed == 0 {
        return Err(Error::InfeasibleFar {
            far_target,
            required: (1.0 / far_target).ceil() as usize,
            available: n,
        });
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut threshold = sorted[0].next_up();
    let mut j = 0;
    while j < n {
        // accepting sorted[j] also accepts every tie with it
        let mut end = j;
        while end + 1 < n && sorted[end + 1] == sorted[j] {
            end += 1;
        }
        if end + 1 > allowed {
            break;
        }
        threshold = sorted[j];
        j = end + 1;
    }
    let accepted_impostors = sorted.iter().filter(|s| **s >= threshold).count();
    let accepted = genuine.iter().filter(|s| **s >= threshold).count();
    Ok(VerificationReport {
        tar: accepted as f64 / genuine.len() as f64,
        far_target,
        measured_far: accepted_impostors as f64 / n as f64,
        threshold,
        genuine_pairs: genuine.len(),
        impostor_pairs: n,
    })
}

/// Cosine scores for all pairs of columns, split by whether the identities match.
pub fn pair_scores(embeddings: &Matrix, identities: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if embeddings.cols() != identities.len() {
        return Err(Error::Shape {
            op: "pair_scores",
            left: embeddings.shape(),
            right: (identities.len(), 1),
        });
    }
    let e = l2_normalize_columns(embeddings, NORM_EPS);
    let gram = matmul_tn(&e, &e)?;
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for i in 0..identities.len() {
        for j in i + 1..identities.len() {
            if identities[i] == identities[j] {
                genuine.push(gram[(i, j)]);
            } else {
                impostor.push(gram[(i, j)]);
            }
        }
    }
    Ok((genuine, impostor))
}

/// Appends one snapshot as a JSON line.
pub fn write_snapshot_line(out: &mut impl Write, snap: &DiagnosticsSnapshot) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, snap)?;
    out.write_all(b"\n")
}
