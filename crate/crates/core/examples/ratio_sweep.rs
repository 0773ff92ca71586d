//! Final inter-class similarity and positive similarity across sampling ratios.

use pfc_sim::datasynth::{generate, SynthConfig};
use pfc_sim::trainer::{train, SamplingRatio, TrainConfig};
use rayon::prelude::*;

fn main() -> pfc_sim::Result<()> {
    let ds = generate(&SynthConfig {
        num_identities: 600,
        min_per_identity: 10,
        max_per_identity: 10,
        dim: 18,
        noise: 0.45,
        seed: 0,
    })?;
    let ratios = [
        SamplingRatio::BATCH_ONLY,
        SamplingRatio::Fixed(0.1),
        SamplingRatio::Fixed(0.3),
        SamplingRatio::Fixed(1.0),
    ];
    let reports = ratios
        .par_iter()
        .map(|r| train(&ds, TrainConfig { ratio: *r, ..TrainConfig::default() }).map(|o| o.report))
        .collect::<pfc_sim::Result<Vec<_>>>()?;
    println!("{:>6} {:>9} {:>9} {:>8} {:>8}", "ratio", "MICS mean", "MICS max", "APCS", "loss");
    for (r, rep) in ratios.iter().zip(&reports) {
        println!(
            "{:>6} {:>9.4} {:>9.4} {:>8.4} {:>8.4}",
            r.label(),
            rep.mics_mean,
            rep.mics_max,
            rep.diagnostics.apcs,
            rep.mean_loss
        );
    }
    Ok(())
}
