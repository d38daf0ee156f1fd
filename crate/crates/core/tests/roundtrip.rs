//! Byte-exact persistence and run determinism.

use std::fs;

use cmd_distill::checkpoint::TensorFile;
use cmd_distill::data::{gen_synthetic, Dataset, SyntheticSpec};
use cmd_distill::trainer::{checkpoint_name, fit, DistillState, RunConfig, METRICS_FILE};

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        samples_per_class: 8,
        image_px: 16,
        glyph_px: 4,
        ..SyntheticSpec::default()
    }
}

fn tiny_run() -> RunConfig {
    RunConfig {
        image_crop_px: 16,
        region_crop_px: 8,
        instance_px: 8,
        n_region_crops: 2,
        hidden_dim: 8,
        embed_dim: 8,
        head_dim: 8,
        epochs: 2,
        batch_size: 16,
        checkpoint_every: 1,
        ..RunConfig::default()
    }
}

#[test]
fn dataset_container_round_trips_byte_exactly() {
    let spec = tiny_spec();
    let data = gen_synthetic(&spec).unwrap();
    let bytes = data.to_bytes().unwrap();
    let back = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!(back, data);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    data.write_dir(&spec, dir.path()).unwrap();
    let (spec_back, data_back) = Dataset::read_dir(dir.path()).unwrap();
    assert_eq!((spec_back, data_back), (spec, data));
}

#[test]
fn checkpoint_round_trips_byte_exactly() {
    let data = gen_synthetic(&tiny_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&data, &tiny_run(), Some(dir.path()), None).unwrap();
    let path = dir.path().join(checkpoint_name(2));
    let bytes = fs::read(&path).unwrap();
    let state = DistillState::load(&path).unwrap();
    assert_eq!(state, out.state);
    assert_eq!(state.to_file().to_bytes().unwrap(), bytes);
    assert_eq!(TensorFile::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    assert!(dir.path().join(checkpoint_name(1)).exists());
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let data = gen_synthetic(&tiny_spec()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fit(&data, &tiny_run(), Some(a.path()), None).unwrap();
    fit(&data, &tiny_run(), Some(b.path()), None).unwrap();
    let ma = fs::read(a.path().join(METRICS_FILE)).unwrap();
    let mb = fs::read(b.path().join(METRICS_FILE)).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, mb);
    let ca = fs::read(a.path().join(checkpoint_name(2))).unwrap();
    let cb = fs::read(b.path().join(checkpoint_name(2))).unwrap();
    assert_eq!(ca, cb);

    let other = RunConfig { seed: 1, ..tiny_run() };
    let c = tempfile::tempdir().unwrap();
    fit(&data, &other, Some(c.path()), None).unwrap();
    assert_ne!(fs::read(c.path().join(METRICS_FILE)).unwrap(), ma);
}
