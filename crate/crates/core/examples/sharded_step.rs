//! One simulated model-parallel step: gathered features, sampled logits on each
//! shard, a global softmax and the collective byte counts.

use pfc_sim::loss::MarginConfig;
use pfc_sim::numerics::{Matrix, SeededRng};
use pfc_sim::sampler::ShardLayout;
use pfc_sim::shardsim::{distributed_partial_step, gather_centers, init_shards, FeatureBatch, StepConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> pfc_sim::Result<()> {
    let (classes, dim, batch, k) = (2000, 32, 64, 4);
    let layout = ShardLayout::new(classes, k)?;
    let mut shards = init_shards(&layout, dim, 1.0 / (dim as f64).sqrt(), 1)?;
    let mut rng = SeededRng::new(1, 0);
    let features = Matrix::from_fn(dim, batch, |_, _| StandardNormal.sample(&mut rng));
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let data = FeatureBatch::new(features, labels)?;

    let mut cfg = StepConfig::new(0.1, MarginConfig::arcface(), 0.1);
    cfg.filter_threshold = Some(0.4);
    for iteration in 0..3 {
        let before = gather_centers(&shards)?;
        let res = distributed_partial_step(shards, &data, &cfg, 1, iteration)?;
        let after = gather_centers(&res.shards)?;
        let touched = (0..classes).filter(|&j| before.column(j) != after.column(j)).count();
        println!(
            "step {iteration}: loss {:.4}, buffers {:?}, {touched} centers moved, {} masked",
            res.loss,
            res.buffers.iter().map(|b| b.len()).collect::<Vec<_>>(),
            res.diagnostics.masked
        );
        println!("  {:?}", res.trace);
        shards = res.shards;
    }
    Ok(())
}
