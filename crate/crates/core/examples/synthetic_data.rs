//! Generates the synthetic fine-grained dataset and reports its split and
//! label balance. Pass a directory to also write it to disk.
//!
//! cargo run --release --example synthetic_data -- [out_dir]

use std::path::PathBuf;

use cmd_distill::data::{gen_synthetic, Split};
use cmd_distill::experiment::desk_preset;
use cmd_distill::Result;

fn main() -> Result<()> {
    let spec = desk_preset().data;
    let data = gen_synthetic(&spec)?;
    println!(
        "{} images of {}x{} px, {} fine classes on {} coarse backgrounds",
        data.len(),
        spec.image_px,
        spec.image_px,
        spec.n_fine_classes,
        spec.n_coarse_backgrounds
    );
    for split in [Split::Train, Split::Test] {
        let idx = data.indices(split);
        let mut fine = vec![0; spec.n_fine_classes];
        let mut coarse = vec![0; spec.n_coarse_backgrounds];
        for &i in &idx {
            fine[data.records[i].fine_label as usize] += 1;
            coarse[data.records[i].coarse_label as usize] += 1;
        }
        println!(
            "{split:?}: {} images, per fine class {fine:?}, per background {coarse:?}",
            idx.len()
        );
    }
    let r = &data.records[0];
    let inside = r.glyph_mask().iter().sum::<f64>() / 3.0;
    println!(
        "record 0: glyph {:?} covers {inside} of {} pixels",
        r.glyph,
        r.height() * r.width()
    );

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        data.write_dir(&spec, &dir)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
