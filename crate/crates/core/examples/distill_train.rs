//! Trains the full cross-level objective on the desk preset and writes a run
//! directory (resolved config, metrics log, checkpoint).
//!
//! cargo run --release --example distill_train -- [epochs] [out_dir]

use std::path::PathBuf;

use cmd_distill::data::gen_synthetic;
use cmd_distill::experiment::{desk_preset, evaluate};
use cmd_distill::trainer::fit;
use cmd_distill::Result;

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut preset = desk_preset();
    preset.run.epochs = args
        .next()
        .map_or(10, |v| v.parse().expect("epochs must be an integer"));
    preset.run.warmup_epochs = preset.run.warmup_epochs.min(preset.run.epochs / 10);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/distill".into()));

    let data = gen_synthetic(&preset.data)?;
    let run = fit(&data, &preset.run, Some(&out), Some(&preset.resolved()))?;
    let last = run.metrics.last().expect("at least one step");
    println!(
        "{} steps, final loss {:.4} (image {:.4}, region {:.4}, student inter {:.4}, teacher inter {:.4})",
        run.metrics.len(),
        last.loss_total,
        last.loss_image,
        last.loss_region,
        last.loss_inter_student,
        last.loss_inter_teacher
    );
    println!("teacher: {}", evaluate(&data, &run.state.teacher, &preset.run)?);
    println!("run directory: {}", out.display());
    Ok(())
}
