//! Trains the toy backbone with a sampled classification layer and prints the
//! diagnostics stream and the final report.

use pfc_sim::datasynth::{generate, SynthConfig};
use pfc_sim::trainer::{train, SamplingRatio, TrainConfig};

fn main() -> pfc_sim::Result<()> {
    let ds = generate(&SynthConfig {
        num_identities: 200,
        min_per_identity: 10,
        max_per_identity: 10,
        dim: 18,
        noise: 0.45,
        seed: 0,
    })?;
    let cfg = TrainConfig {
        ratio: SamplingRatio::Fixed(0.5),
        shards: 4,
        epochs: 10,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let out = train(&ds, cfg)?;
    for s in &out.snapshots {
        println!("iteration {:>5}: APCS {:.4} AMNCS {:.4}", s.iteration, s.apcs, s.amncs);
    }
    let r = &out.report;
    println!(
        "{} steps, mean loss {:.4}, accuracy {:.4}, MICS mean {:.4} max {:.4}, TAR {:.4} at FAR {:e}",
        r.steps, r.mean_loss, r.train_accuracy, r.mics_mean, r.mics_max, r.verification.tar, r.verification.far_target
    );
    Ok(())
}
