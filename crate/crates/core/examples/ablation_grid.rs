//! Runs the component ablation rows and the λ1 sweep at a reduced epoch
//! budget and prints one CSV row per cell.
//!
//! cargo run --release --example ablation_grid -- [epochs]

use cmd_distill::data::gen_synthetic;
use cmd_distill::experiment::{ablation_cells, desk_preset, run_cell, ABLATION_HEADER};
use cmd_distill::Result;

fn main() -> Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(5, |v| v.parse().expect("epochs must be an integer"));
    let mut preset = desk_preset();
    preset.run.epochs = epochs;
    preset.run.warmup_epochs = preset.run.warmup_epochs.min(epochs / 10);
    let data = gen_synthetic(&preset.data)?;
    println!("{ABLATION_HEADER}");
    for cell in ablation_cells(&preset.run) {
        println!("{}", run_cell(&data, &cell)?);
    }
    Ok(())
}
