//! Logits memory, FLOPs and communication as the class count and worker count grow.

use pfc_sim::costmodel::{estimate, rows_to_csv, scaling_report, ScalingSpec};

fn main() -> pfc_sim::Result<()> {
    let fc = estimate(2_000_000, 512, 1024, 8, 1.0, 2)?;
    let pfc = estimate(2_000_000, 512, 1024, 8, 0.1, 2)?;
    println!(
        "2M classes, 8 workers, batch 1024, fp16 logits: FC {} MB, r = 0.1 {} MB per worker",
        fc.logits_bytes as f64 / 1e6,
        pfc.logits_bytes as f64 / 1e6
    );
    print!("{}", rows_to_csv(&scaling_report(&ScalingSpec::memory_preset())?)?);
    Ok(())
}
