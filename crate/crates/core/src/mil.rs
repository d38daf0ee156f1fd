//! Bag-of-instances semantics.
//!
//! Every crop is a bag and its patches are the instances. The bag score is
//! built as `h(mean_i f(x_i))`: the encoder plays `f`, mean pooling the
//! aggregation and the linear head followed by a tempered softmax plays `h`.
//! Pooling uses an order-independent summation, so the bag output is
//! bitwise identical under any permutation of its instances.

use std::fmt;

use crate::autodiff::{canonical_sum, softmax_t, Tape, Tensor, Var};
use crate::encoder::Level;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Net {
    Teacher,
    Student,
}

impl fmt::Display for Net {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Net::Teacher => "teacher",
            Net::Student => "student",
        })
    }
}

/// Classical MIL bag label: 0 iff every instance label is 0.
pub fn mil_bag_label(instance_labels: &[u8]) -> Result<u8> {
    if instance_labels.is_empty() {
        return Err(Error::usage("a bag needs at least one instance"));
    }
    Ok(u8::from(instance_labels.iter().any(|&y| y != 0)))
}

/// Mean of the `T x K` instance logits, one value per column.
pub fn aggregate_bag(instance_logits: &Tensor) -> Result<Tensor> {
    if instance_logits.rank() != 2 {
        return Err(Error::usage(format!(
            "instance logits must be T x K, got {:?}",
            instance_logits.shape()
        )));
    }
    let (t, k) = (instance_logits.shape()[0], instance_logits.shape()[1]);
    let mut column = vec![0.0; t];
    let out = (0..k)
        .map(|j| {
            for (i, c) in column.iter_mut().enumerate() {
                *c = instance_logits.data()[i * k + j];
            }
            canonical_sum(&mut column) / t as f64
        })
        .collect::<Vec<_>>();
    Ok(Tensor::vector(&out))
}

/// `softmax_t(bag_logits - center)`; the center is zero when absent.
pub fn bag_distribution(bag_logits: &[f64], temperature: f64, center: Option<&[f64]>) -> Result<Vec<f64>> {
    match center {
        Some(c) if c.len() != bag_logits.len() => Err(Error::shape(
            "bag_distribution",
            format!("{} logits vs {}-dim center", bag_logits.len(), c.len()),
        )),
        Some(c) => {
            let shifted: Vec<f64> = bag_logits.iter().zip(c).map(|(z, m)| z - m).collect();
            softmax_t(&shifted, temperature)
        }
        None => softmax_t(bag_logits, temperature),
    }
}

/// Outputs for one crop slot, stacked over a batch of `bags` images.
///
/// `features` and `instance_logits` hold `bags * instances` rows (bag-major);
/// `bag_logits` holds one row per bag.
#[derive(Clone, Debug)]
pub struct BagEmbedding {
    pub level: Level,
    pub augmentation_index: u8,
    pub net: Net,
    pub features: Var,
    pub instance_logits: Var,
    pub bag_logits: Var,
    pub bags: usize,
    pub instances: usize,
}

/// Mean-pools `[bags*instances, K]` rows into `[bags, K]` on the tape.
pub fn pool_instances(tape: &mut Tape, rows: Var, bags: usize, instances: usize) -> Result<Var> {
    let k = tape.value(rows).last_dim();
    let stacked = tape.reshape(rows, [bags, instances, k])?;
    tape.mean_axis(stacked, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bag_label_examples() {
        assert_eq!(mil_bag_label(&[0, 0, 0]).unwrap(), 0);
        assert_eq!(mil_bag_label(&[0, 1, 0]).unwrap(), 1);
        assert_eq!(mil_bag_label(&[1, 1, 1]).unwrap(), 1);
        assert!(matches!(mil_bag_label(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn bag_label_is_or_fold_exhaustively() {
        for t in 1..=10usize {
            for bits in 0u32..(1 << t) {
                let labels: Vec<u8> = (0..t).map(|i| ((bits >> i) & 1) as u8).collect();
                let or = labels.iter().fold(0, |a, &b| a | b);
                assert_eq!(mil_bag_label(&labels).unwrap(), or);
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let m = Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(aggregate_bag(&m).unwrap().data(), &[2.0, 2.0]);
        let swapped = Tensor::from_rows(&[vec![3.0, 1.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(aggregate_bag(&swapped).unwrap(), aggregate_bag(&m).unwrap());
        let single = Tensor::from_rows(&[vec![0.1, -7.25, 3.0]]).unwrap();
        assert_eq!(aggregate_bag(&single).unwrap().data(), single.data());
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        assert!(aggregate_bag(&Tensor::vector(&[1.0])).is_err());
    }

    #[test]
    fn distribution_examples() {
        assert_eq!(bag_distribution(&[0.0, 0.0], 1.0, None).unwrap(), vec![0.5, 0.5]);
        let p = bag_distribution(&[4.2; 5], 0.04, None).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));

        // [1,2] centered by [1,1] at tau 0.04 is softmax([0,1]/0.04)
        let p = bag_distribution(&[1.0, 2.0], 0.04, Some(&[1.0, 1.0])).unwrap();
        let e = (-25.0f64).exp();
        assert!((p[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn distribution_rejects_bad_temperature() {
        assert!(matches!(bag_distribution(&[1.0], 0.0, None), Err(Error::Config(_))));
    }

    #[test]
    fn tape_pooling_matches_aggregate_bag() {
        let rows = Tensor::from_fn([2 * 3, 4], |i| (i as f64 * 0.37).sin());
        let mut tape = Tape::new();
        let v = tape.constant(rows.clone());
        let pooled = pool_instances(&mut tape, v, 2, 3).unwrap();
        for b in 0..2 {
            let bag = Tensor::new([3, 4], rows.data()[b * 12..(b + 1) * 12].to_vec()).unwrap();
            assert_eq!(tape.value(pooled).row(b), aggregate_bag(&bag).unwrap().data());
        }
    }
}
