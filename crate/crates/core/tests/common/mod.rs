//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cmd_distill::autodiff::{Tape, Tensor};
use cmd_distill::losses::{loss_image, loss_inter, CeDirection, CropDistributions};
use rand::Rng;

/// A strictly positive random distribution over `k` outcomes.
pub fn random_distribution(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn crop(tape: &mut Tape, p: &[f64]) -> CropDistributions {
    CropDistributions::from_probabilities(tape, &Tensor::new([1, p.len()], p.to_vec()).unwrap(), None).unwrap()
}

/// `-Σ p log q` through the image-level loss with one pair and one bag.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let t = crop(&mut tape, p);
    let s = crop(&mut tape, q);
    let l = loss_image(
        &mut tape,
        &[(0, 1)],
        &[s.clone(), s],
        &[t.clone(), t],
        CeDirection::TeacherTarget,
    )
    .unwrap();
    tape.value(l).item()
}

/// `KL(p || q)` through the inter-level loss.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let a = crop(&mut tape, p);
    let b = crop(&mut tape, q);
    let l = loss_inter(&mut tape, &[a, b], &[(0, 1)]).unwrap();
    tape.value(l).item()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|v| v * v.ln()).sum::<f64>()
}

fn norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    }
}

/// Cosine argmax, lowest index on ties, zero-norm teacher rows skipped and
/// zero-norm student rows mapped to 0.
pub fn brute_force_match(s: &[Vec<f64>], t: &[Vec<f64>]) -> Vec<usize> {
    s.iter()
        .map(|q| {
            if norm(q) == 0.0 {
                return 0;
            }
            let cos: Vec<Option<f64>> = t
                .iter()
                .map(|r| {
                    let n = norm(r);
                    (n != 0.0).then(|| q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (norm(q) * n))
                })
                .collect();
            let best = cos.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            cos.iter().position(|c| *c == Some(best)).unwrap_or(0)
        })
        .collect()
}

/// Small integer entries, so exact ties are common.
pub fn integer_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-2i32..=2) as f64).collect())
        .collect()
}

/// Rank-1, Rank-5 and mAP in percent: every query ranks the rest of the
/// gallery by a stable sort on descending cosine, so equal scores keep
/// index order. A query without relevant items scores AP 0.
pub fn brute_force_retrieval(rows: &[Vec<f64>], labels: &[usize]) -> (f64, f64, f64) {
    let n = rows.len();
    let (mut r1, mut r5, mut map) = (0.0, 0.0, 0.0);
    for q in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != q).collect();
        order.sort_by(|&a, &b| {
            cosine(&rows[q], &rows[b])
                .partial_cmp(&cosine(&rows[q], &rows[a]))
                .unwrap()
        });
        let hit: Vec<bool> = order.iter().map(|&j| labels[j] == labels[q]).collect();
        r1 += hit.iter().take(1).any(|&h| h) as u8 as f64;
        r5 += hit.iter().take(5).any(|&h| h) as u8 as f64;
        let relevant = hit.iter().filter(|&&h| h).count();
        if relevant > 0 {
            let mut found = 0.0;
            let mut ap = 0.0;
            for (i, &h) in hit.iter().enumerate() {
                if h {
                    found += 1.0;
                    ap += found / (i + 1) as f64;
                }
            }
            map += ap / relevant as f64;
        }
    }
    let pct = |v: f64| 100.0 * v / n as f64;
    (pct(r1), pct(r5), pct(map))
}

/// A random gallery of 2..=20 rows with coarse integer features; every
/// tenth gallery is all-equal.
pub fn random_gallery(rng: &mut impl Rng, index: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = rng.gen_range(2..=20);
    let d = rng.gen_range(1..=6);
    let classes = rng.gen_range(1..=4);
    let rows = if index.is_multiple_of(10) {
        vec![vec![1.0; d]; n]
    } else {
        integer_rows(rng, n, d)
    };
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (rows, labels)
}
