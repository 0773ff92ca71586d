//! Stops a run halfway, restores it from checkpoint bytes and compares the
//! result with an uninterrupted run.

use pfc_sim::datasynth::{generate, SynthConfig};
use pfc_sim::trainer::{SamplingRatio, TrainConfig, Trainer};

fn main() -> pfc_sim::Result<()> {
    let ds = generate(&SynthConfig {
        num_identities: 80,
        min_per_identity: 6,
        max_per_identity: 10,
        dim: 12,
        noise: 0.5,
        seed: 4,
    })?;
    let cfg = TrainConfig {
        ratio: SamplingRatio::Fixed(0.5),
        shards: 2,
        batch_size: 16,
        epochs: 4,
        embedding_dim: 12,
        ..TrainConfig::default()
    };

    let mut straight = Trainer::new(&ds, cfg.clone())?;
    straight.run_until(u64::MAX)?;
    let expected = serde_json::to_string(&straight.final_report()?).unwrap();

    let mut first = Trainer::new(&ds, cfg.clone())?;
    let half = first.total_steps() / 2;
    first.run_until(half)?;
    let bytes = first.checkpoint_bytes();
    println!("checkpoint after {half} of {} steps: {} bytes", first.total_steps(), bytes.len());

    let mut resumed = Trainer::resume(&ds, cfg, &bytes)?;
    resumed.run_until(u64::MAX)?;
    let got = serde_json::to_string(&resumed.final_report()?).unwrap();
    println!("resumed report identical to uninterrupted run: {}", got == expected);
    Ok(())
}
