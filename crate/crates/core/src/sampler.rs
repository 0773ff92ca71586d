//! Per-shard sample buffers: batch positives first, uniformly drawn negatives after.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{sample_without_replacement, SeededRng};

/// Contiguous block ownership: class `j` lives on shard `j / ⌈C/K⌉`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardLayout {
    num_classes: usize,
    num_shards: usize,
    block: usize,
}

impl ShardLayout {
    pub fn new(num_classes: usize, num_shards: usize) -> Result<Self> {
        if num_classes == 0 || num_shards == 0 {
            return Err(Error::Config(format!(
                "layout needs at least one class and one shard (C={num_classes}, K={num_shards})"
            )));
        }
        let block = num_classes.div_ceil(num_shards);
        if (num_shards - 1) * block >= num_classes {
            return Err(Error::Config(format!(
                "C={num_classes} over K={num_shards} leaves shard {} without classes",
                num_shards - 1
            )));
        }
        Ok(Self {
            num_classes,
            num_shards,
            block,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_shards(&self) -> usize {
        self.num_shards
    }

    pub fn owner(&self, class: usize) -> usize {
        class / self.block
    }

    pub fn owned_range(&self, shard: usize) -> Range<usize> {
        let start = shard * self.block;
        start..(start + self.block).min(self.num_classes)
    }

    pub fn owned_count(&self, shard: usize) -> usize {
        self.owned_range(shard).len()
    }
}

/// `⌈x⌉`, treating values within a relative 1e-9 above an integer as that integer
/// so ratios like `1024 / 600000` round-trip to 1024.
pub fn tolerant_ceil(x: f64) -> usize {
    let floor = x.floor();
    if x - floor <= 1e-9 * x.abs().max(1.0) {
        floor as usize
    } else {
        floor as usize + 1
    }
}

pub fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("sampling ratio {r} outside (0, 1]")))
    }
}

/// Buffer slots per shard, `⌈C·r / K⌉`.
///
/// When `K` does not divide `C` the trailing shard may own fewer classes than
/// this; its buffer is then capped at its owned count.
pub fn buffer_capacity(layout: &ShardLayout, r: f64) -> Result<usize> {
    check_ratio(r)?;
    let cap = tolerant_ceil(layout.num_classes as f64 * r / layout.num_shards as f64);
    Ok(cap.max(1))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleBuffer {
    shard_id: usize,
    class_indices: Vec<usize>,
    num_positives: usize,
}

impl SampleBuffer {
    pub fn shard_id(&self) -> usize {
        self.shard_id
    }

    pub fn class_indices(&self) -> &[usize] {
        &self.class_indices
    }

    pub fn num_positives(&self) -> usize {
        self.num_positives
    }

    pub fn positives(&self) -> &[usize] {
        &self.class_indices[..self.num_positives]
    }

    pub fn negatives(&self) -> &[usize] {
        &self.class_indices[self.num_positives..]
    }

    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }
}

/// Fills one shard's buffer. `positives` must be sorted, distinct and owned by `shard`.
pub fn build_shard_buffer(
    layout: &ShardLayout,
    shard: usize,
    positives: &[usize],
    capacity: usize,
    rng: &mut SeededRng,
) -> Result<SampleBuffer> {
    let owned = layout.owned_range(shard);
    let slots = capacity.min(owned.len());
    if positives.len() > slots {
        return Err(Error::BufferOverflow {
            shard,
            positives: positives.len(),
            capacity: slots,
        });
    }
    let negatives = sample_without_replacement(rng, owned, positives, slots - positives.len())?;
    let mut class_indices = Vec::with_capacity(slots);
    class_indices.extend_from_slice(positives);
    class_indices.extend(negatives);
    Ok(SampleBuffer {
        shard_id: shard,
        class_indices,
        num_positives: positives.len(),
    })
}

/// Builds all `K` buffers for one iteration. Shard `k` draws its negatives
/// from the stream keyed by `(seed, k, iteration)`.
pub fn build_buffers(
    layout: &ShardLayout,
    labels: &[usize],
    r: f64,
    seed: u64,
    iteration: u64,
) -> Result<Vec<SampleBuffer>> {
    let capacity = buffer_capacity(layout, r)?;
    let positives = positives_by_shard(layout, labels)?;
    positives
        .iter()
        .enumerate()
        .map(|(shard, pos)| {
            let mut rng = SeededRng::for_shard(seed, shard, iteration);
            build_shard_buffer(layout, shard, pos, capacity, &mut rng)
        })
        .collect()
}

/// Sorted distinct batch labels grouped by owning shard.
pub fn positives_by_shard(layout: &ShardLayout, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = vec![Vec::new(); layout.num_shards];
    for class in sorted {
        if class >= layout.num_classes {
            return Err(Error::contract(format!(
                "label {class} out of range for {} classes",
                layout.num_classes
            )));
        }
        out[layout.owner(class)].push(class);
    }
    Ok(out)
}

/// Shard and buffer column holding `label`'s center.
pub fn locate_positive(buffers: &[SampleBuffer], label: usize) -> Result<(usize, usize)> {
    for buf in buffers {
        if let Ok(col) = buf.positives().binary_search(&label) {
            return Ok((buf.shard_id, col));
        }
    }
    Err(Error::contract(format!("label {label} is not a positive in any buffer")))
}

/// Class id → (shard, column) for every positive, built once per step.
pub fn positive_index(buffers: &[SampleBuffer]) -> HashMap<usize, (usize, usize)> {
    buffers
        .iter()
        .flat_map(|b| {
            b.positives()
                .iter()
                .enumerate()
                .map(move |(col, class)| (*class, (b.shard_id, col)))
        })
        .collect()
}
