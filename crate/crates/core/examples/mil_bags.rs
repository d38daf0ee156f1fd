//! Crops as bags of patch instances: instance counts, the classical bag
//! label, order-independent mean pooling and the centered, tempered bag
//! distribution.

use cmd_distill::autodiff::Tensor;
use cmd_distill::encoder::instance_count;
use cmd_distill::mil::{aggregate_bag, bag_distribution, mil_bag_label};
use cmd_distill::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    for (side, patch) in [(224, 32), (96, 32), (56, 8), (24, 8)] {
        println!(
            "{side}x{side} crop, {patch}px instances: {} instances",
            instance_count(side, side, patch)?
        );
    }

    println!("bag label of [0, 0, 0] = {}", mil_bag_label(&[0, 0, 0])?);
    println!("bag label of [0, 1, 0] = {}", mil_bag_label(&[0, 1, 0])?);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rows: Vec<Vec<f64>> = (0..49)
        .map(|_| (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect())
        .collect();
    let mut shuffled = rows.clone();
    shuffled.shuffle(&mut rng);
    let a = aggregate_bag(&Tensor::from_rows(&rows)?)?;
    let b = aggregate_bag(&Tensor::from_rows(&shuffled)?)?;
    let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("bag logits {:?}", a.data());
    println!("identical bits after shuffling the instances: {same}");

    let center = [0.5, 0.0, -0.5, 0.0];
    for t in [1.0, 0.1, 0.04] {
        let p = bag_distribution(a.data(), t, Some(&center))?;
        let shown: Vec<String> = p.iter().map(|v| format!("{v:.3}")).collect();
        println!("temperature {t:<4} -> [{}]", shown.join(", "));
    }
    Ok(())
}
