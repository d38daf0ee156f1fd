//! Compares a randomly initialized encoder with briefly trained image-only
//! and cross-level teachers: linear probes at several label fractions and
//! cosine retrieval on the test split.
//!
//! cargo run --release --example evaluate -- [epochs]

use cmd_distill::data::gen_synthetic;
use cmd_distill::eval::{extract_features, linear_probe, retrieval_on_test, ProbeConfig, Similarity};
use cmd_distill::experiment::desk_preset;
use cmd_distill::trainer::{fit, DistillState};
use cmd_distill::Result;

fn main() -> Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(10, |v| v.parse().expect("epochs must be an integer"));
    let mut preset = desk_preset();
    preset.run.epochs = epochs;
    preset.run.warmup_epochs = preset.run.warmup_epochs.min(epochs / 10);
    let data = gen_synthetic(&preset.data)?;
    let cmd = preset.run.clone();
    let base = cmd.baseline();

    let random = DistillState::new(&cmd, 1)?.teacher;
    let image_only = fit(&data, &base, None, None)?.state.teacher;
    let full = fit(&data, &cmd, None, None)?.state.teacher;

    println!("{:<12} {:>8} {:>8} {:>8}  retrieval", "encoder", "10%", "50%", "100%");
    for (name, params, cfg) in [
        ("random", &random, &cmd),
        ("image-only", &image_only, &base),
        ("cmd", &full, &cmd),
    ] {
        let table = extract_features(&data, params, &cfg.encoder(), cfg.image_crop_px)?;
        let probe = |f: f64| linear_probe(&table, f, cfg.seed, &ProbeConfig::default());
        let (p10, p50, p100) = (probe(0.1)?, probe(0.5)?, probe(1.0)?);
        let r = retrieval_on_test(&table, Similarity::Cosine)?;
        println!("{name:<12} {p10:>8.2} {p50:>8.2} {p100:>8.2}  {r}");
    }
    Ok(())
}
