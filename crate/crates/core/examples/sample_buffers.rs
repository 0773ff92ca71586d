//! Per-shard sampling buffers: batch positives first, then uniform negatives.

use pfc_sim::sampler::{build_buffers, buffer_capacity, ShardLayout};

fn main() -> pfc_sim::Result<()> {
    let layout = ShardLayout::new(40, 4)?;
    let labels = [3, 3, 17, 25, 38, 12];
    let r = 0.3;
    println!("40 classes on 4 shards, r = {r}, capacity {} per shard", buffer_capacity(&layout, r)?);
    for iteration in 0..2 {
        println!("iteration {iteration}");
        for buf in build_buffers(&layout, &labels, r, 7, iteration)? {
            println!(
                "  shard {} owns {:?}: positives {:?} negatives {:?}",
                buf.shard_id(),
                layout.owned_range(buf.shard_id()),
                buf.positives(),
                buf.negatives()
            );
        }
    }
    Ok(())
}
