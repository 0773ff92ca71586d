//! APCS, AMNCS and MICS on hand-made centers, plus TAR at a fixed FAR.

use pfc_sim::metrics::{amncs, apcs, mics, pair_scores, verify_tar_at_far};
use pfc_sim::numerics::Matrix;
use pfc_sim::sampler::ShardLayout;
use pfc_sim::shardsim::{split_centers, FeatureBatch};

fn main() -> pfc_sim::Result<()> {
    // classes 0 and 1 belong to the same identity and sit close together
    let centers = Matrix::from_columns(
        2,
        &[vec![1.0, 0.0], vec![0.95, 0.3], vec![0.0, 1.0], vec![-1.0, 0.1]],
    )?;
    let shards = split_centers(&ShardLayout::new(4, 2)?, &centers)?;
    let batch = FeatureBatch::new(
        Matrix::from_columns(2, &[vec![1.0, 0.1], vec![0.1, 1.0], vec![-1.0, 0.0]])?,
        vec![0, 2, 3],
    )?;
    let identity = [0, 0, 1, 2];
    let a = amncs(&batch, &shards, Some(&identity))?;
    println!("APCS {:.4}", apcs(&batch, &shards)?);
    println!("AMNCS {:.4} (conflicted {:?}, hard {:?})", a.overall, a.conflicted, a.hard);
    println!("MICS per class {:?}", mics(&shards)?.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());

    let embeddings = Matrix::from_columns(
        2,
        &[vec![1.0, 0.0], vec![0.9, 0.2], vec![0.0, 1.0], vec![0.1, 0.9], vec![-1.0, 0.0], vec![-0.8, -0.3]],
    )?;
    let (genuine, impostor) = pair_scores(&embeddings, &[0, 0, 1, 1, 2, 2])?;
    let v = verify_tar_at_far(&genuine, &impostor, 0.1)?;
    println!("TAR {:.3} at measured FAR {:.3} (threshold {:.3})", v.tar, v.measured_far, v.threshold);
    Ok(())
}
