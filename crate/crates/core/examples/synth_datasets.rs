//! Clean data and the three corruption protocols.

use pfc_sim::datasynth::{conflict_split, flip_labels, generate, longtail_condense, summarize, SynthConfig};

fn main() -> pfc_sim::Result<()> {
    let clean = generate(&SynthConfig {
        num_identities: 300,
        min_per_identity: 8,
        max_per_identity: 12,
        dim: 16,
        noise: 0.45,
        seed: 0,
    })?;
    let variants = [
        ("clean", clean.clone()),
        ("conflict", conflict_split(&clean, 100, 300, 0)?),
        ("flip", flip_labels(&clean, 0.2, 0)?),
        ("longtail", longtail_condense(&clean, 30, 2, 4, 0)?),
    ];
    for (name, ds) in variants {
        let s = summarize(&ds);
        println!(
            "{name:>8}: {} points, {} classes, {} identities, sizes {}..{}, flipped {:.3}, conflicted points {}",
            s.points, s.classes, s.identities, s.min_class_size, s.max_class_size, s.flipped_fraction, s.conflicted_points
        );
    }
    Ok(())
}
