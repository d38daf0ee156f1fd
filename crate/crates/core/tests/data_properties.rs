//! Synthetic data and crop geometry invariants.

use cmd_distill::data::{gen_synthetic, sample_geometry, CropConfig, Renderer, Split, SyntheticSpec};
use cmd_distill::encoder::{instance_count, Level};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Two classes rendered with the same nuisance draw differ only inside
    /// the glyph box.
    #[test]
    fn fine_classes_differ_only_inside_the_glyph(
        a in 0usize..8, b in 0usize..8, coarse in 0usize..2,
        gx in 0usize..25, gy in 0usize..25, seed in any::<u64>(),
    ) {
        let spec = SyntheticSpec { image_px: 32, ..SyntheticSpec::default() };
        let r = Renderer::new(&spec).unwrap();
        let x = r.render(a, coarse, gx, gy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let y = r.render(b, coarse, gx, gy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mask = x.glyph_mask();
        prop_assert_eq!(mask.iter().sum::<f64>(), (8 * 8 * 3) as f64);
        for (i, &m) in mask.iter().enumerate() {
            if m == 0.0 {
                prop_assert_eq!(x.pixels.data()[i].to_bits(), y.pixels.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn crops_stay_inside_the_image(
        h in 24usize..80, n_region in 0usize..6, seed in any::<u64>(), augment in any::<bool>(),
    ) {
        let cfg = CropConfig { n_region_crops: n_region, image_crop_px: 16, region_crop_px: 8, instance_px: 8, augment, ..CropConfig::default() };
        let geo = sample_geometry(h, h, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(geo.len(), 2 + n_region);
        let image_area = (h * h) as f64;
        for g in &geo {
            prop_assert!(g.top >= 0.0 && g.left >= 0.0);
            prop_assert!(g.top + g.height <= h as f64 + 1e-9 && g.left + g.width <= h as f64 + 1e-9);
            let (lo, hi, px) = match g.level {
                Level::Image => (cfg.image_area.0, cfg.image_area.1, 16),
                Level::Region => (cfg.region_area.0, cfg.region_area.1, 8),
            };
            prop_assert_eq!(g.out_px, px);
            if augment {
                let frac = g.height * g.width / image_area;
                prop_assert!(frac >= lo - 1e-9 && frac <= hi + 1e-9, "area fraction {} outside [{}, {}]", frac, lo, hi);
            }
        }
    }
}

#[test]
fn crop_geometry_instance_counts() {
    assert_eq!(instance_count(224, 224, 32).unwrap(), 49);
    assert_eq!(instance_count(96, 96, 32).unwrap(), 9);
    assert_eq!(instance_count(56, 56, 8).unwrap(), 49);
    assert_eq!(instance_count(24, 24, 8).unwrap(), 9);
    assert!(instance_count(56, 56, 5).is_err());
}

#[test]
fn default_dataset_splits_are_balanced() {
    let spec = SyntheticSpec {
        image_px: 16,
        glyph_px: 4,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    assert_eq!(data.len(), 1600);
    let train = data.indices(Split::Train);
    let test = data.indices(Split::Test);
    assert_eq!((train.len(), test.len()), (1200, 400));
    for split in [&train, &test] {
        for fine in 0..8 {
            let n = split.iter().filter(|&&i| data.records[i].fine_label == fine).count();
            assert_eq!(n, split.len() / 8);
        }
        for coarse in 0..2 {
            let n = split
                .iter()
                .filter(|&&i| data.records[i].coarse_label == coarse)
                .count();
            assert_eq!(n, split.len() / 2);
        }
    }
}
