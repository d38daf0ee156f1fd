//! Trains an image-only and a cross-level model, then measures how much of
//! each objective's input gradient lands on the class-defining glyph.
//!
//! cargo run --release --example gradient_concentration -- [epochs] [samples]

use cmd_distill::data::{gen_synthetic, Split};
use cmd_distill::diagnostics::{gradient_concentration, ConcentrationObjective, Nets};
use cmd_distill::experiment::desk_preset;
use cmd_distill::trainer::fit;
use cmd_distill::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args
        .next()
        .map_or(10, |v| v.parse().expect("epochs must be an integer"));
    let samples = args
        .next()
        .map_or(64, |v| v.parse().expect("samples must be an integer"));
    let mut preset = desk_preset();
    preset.run.epochs = epochs;
    preset.run.warmup_epochs = preset.run.warmup_epochs.min(epochs / 10);
    let data = gen_synthetic(&preset.data)?;
    let indices: Vec<usize> = data.indices(Split::Test).into_iter().take(samples).collect();

    let glyph_area = data.records[0].glyph_mask().iter().sum::<f64>() / data.records[0].pixels.len() as f64;
    println!("the glyph covers {:.1}% of each image", 100.0 * glyph_area);
    for (objective, cfg) in [
        (ConcentrationObjective::ImageOnly, preset.run.baseline()),
        (ConcentrationObjective::Cmd, preset.run.clone()),
    ] {
        let state = fit(&data, &cfg, None, None)?.state;
        let nets = Nets {
            student: &state.student,
            teacher: &state.teacher,
            center: &state.center,
        };
        let report = gradient_concentration(nets, &data, &indices, &cfg, objective, cfg.seed)?;
        println!("{}: {report}", objective.as_str());
    }
    Ok(())
}
