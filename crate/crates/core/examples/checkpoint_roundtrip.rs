//! Saves a trained state, reloads it and checks that the bytes and the
//! resumed parameters are unchanged.

use cmd_distill::data::{gen_synthetic, SyntheticSpec};
use cmd_distill::trainer::{checkpoint_name, fit, DistillState, RunConfig};
use cmd_distill::Result;

fn main() -> Result<()> {
    let spec = SyntheticSpec {
        samples_per_class: 16,
        image_px: 16,
        glyph_px: 4,
        ..SyntheticSpec::default()
    };
    let cfg = RunConfig {
        image_crop_px: 16,
        region_crop_px: 8,
        n_region_crops: 2,
        hidden_dim: 16,
        embed_dim: 16,
        head_dim: 16,
        epochs: 2,
        batch_size: 16,
        ..RunConfig::default()
    };
    let data = gen_synthetic(&spec)?;
    let dir = std::env::temp_dir().join(format!("cmd-distill-roundtrip-{}", std::process::id()));
    let run = fit(&data, &cfg, Some(&dir), None)?;

    let path = dir.join(checkpoint_name(cfg.epochs));
    let bytes = std::fs::read(&path).map_err(|e| cmd_distill::Error::io(&path, e))?;
    let loaded = DistillState::load(&path)?;
    println!("{}: {} bytes, step {}", path.display(), bytes.len(), loaded.step);
    println!("state equal after reload: {}", loaded == run.state);
    println!("re-encoded bytes identical: {}", loaded.to_file().to_bytes()? == bytes);

    let dataset = data.to_bytes()?;
    println!(
        "dataset container: {} bytes, round trip identical: {}",
        dataset.len(),
        cmd_distill::data::Dataset::from_bytes(&dataset)?.to_bytes()? == dataset
    );
    std::fs::remove_dir_all(&dir).map_err(|e| cmd_distill::Error::io(&dir, e))?;
    Ok(())
}
