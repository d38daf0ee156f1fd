//! Frozen-feature evaluation: linear probing and retrieval.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{center_geometry, derive_seed, Dataset, Split};
use crate::encoder::{self, EncoderConfig, ParamSet};
use crate::error::{Error, Result};
use crate::mil::pool_instances;
use crate::objective::CropBatch;
use crate::trainer::AdamW;

/// One pooled feature per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    /// `N x D`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl FeatureTable {
    pub fn rows(&self, split: Split) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Features and labels of the given rows.
    pub fn subset(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.features.last_dim();
        let data = rows
            .iter()
            .flat_map(|&i| self.features.row(i).iter().copied())
            .collect();
        Ok((
            Tensor::new([rows.len(), d], data)?,
            rows.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// Mean patch embedding of the whole image, resized to `crop_px`, with no
/// augmentation.
pub fn extract_features(
    data: &Dataset,
    params: &ParamSet,
    enc: &EncoderConfig,
    crop_px: usize,
) -> Result<FeatureTable> {
    enc.check(params)?;
    if data.is_empty() {
        return Err(Error::usage("no records to extract features from"));
    }
    let mut rows = Vec::new();
    for chunk in data.records.chunks(128) {
        let batch = CropBatch {
            images: chunk.iter().map(|r| &r.pixels).collect(),
            geometry: chunk
                .iter()
                .map(|r| vec![center_geometry(r.height(), r.width(), crop_px)])
                .collect(),
        };
        let x = batch.instances(0, enc.instance_px)?;
        let per_bag = x.rows() / chunk.len();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(x);
        let r = encoder::encode(&mut tape, &bound, enc, x, chunk.len())?;
        let pooled = pool_instances(&mut tape, r, chunk.len(), per_bag)?;
        rows.extend_from_slice(tape.value(pooled).data());
    }
    let features = Tensor::new([data.len(), enc.embed_dim], rows)?;
    if !features.is_finite() {
        return Err(Error::NonFinite("extracted features".into()));
    }
    Ok(FeatureTable {
        features,
        labels: data.fine_labels(),
        splits: data.splits(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            batch_size: 64,
        }
    }
}

/// Stratified subsample: `round(fraction * n_c)` rows of every class `c`.
pub fn stratified_sample(labels: &[usize], rows: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!(
            "label fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let classes = rows.iter().map(|&i| labels[i]).max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x7072_6f62]));
    let mut out = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::usage(format!(
                "label fraction {fraction} leaves class {c} without training examples"
            )));
        }
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Softmax regression trained on `train` rows; returns the top-1 accuracy on
/// `test` rows in percent. Features are standardized with training
/// statistics.
pub fn train_probe(
    features: &Tensor,
    labels: &[usize],
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::usage("probe needs non-empty train and test rows"));
    }
    let d = features.last_dim();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let (mut mean, mut std) = (vec![0.0; d], vec![0.0; d]);
    for &i in train {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        for ((s, m), v) in std.iter_mut().zip(&mean).zip(features.row(i)) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut()
        .for_each(|s| *s = (*s / train.len() as f64).sqrt().max(1e-8));
    let x = |i: usize| -> Vec<f64> {
        features
            .row(i)
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };

    let mut params = ParamSet(
        [
            ("w".to_string(), Tensor::zeros([d, classes])),
            ("b".to_string(), Tensor::zeros([classes])),
        ]
        .into_iter()
        .collect(),
    );
    let mut opt = AdamW::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x6c69_6e65]));
    let mut order = train.to_vec();
    let logits = |params: &ParamSet, xi: &[f64]| -> Vec<f64> {
        let w = params.0["w"].data();
        let b = params.0["b"].data();
        (0..classes)
            .map(|c| b[c] + xi.iter().enumerate().map(|(j, v)| v * w[j * classes + c]).sum::<f64>())
            .collect()
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            for &i in batch {
                let xi = x(i);
                let z = logits(&params, &xi);
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..classes {
                    let g = (e[c] / s - f64::from(u8::from(c == labels[i]))) / batch.len() as f64;
                    grads.0.get_mut("b").expect("bias").data_mut()[c] += g;
                    let gw = grads.0.get_mut("w").expect("weights").data_mut();
                    for (j, v) in xi.iter().enumerate() {
                        gw[j * classes + c] += g * v;
                    }
                }
            }
            opt.step(&mut params, &grads, cfg.learning_rate, cfg.weight_decay)?;
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let z = logits(&params, &x(i));
            argmax(&z) == labels[i]
        })
        .count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Linear probe on the table's own split: train rows subsampled to
/// `label_fraction` per class, accuracy on test rows.
pub fn linear_probe(table: &FeatureTable, label_fraction: f64, seed: u64, cfg: &ProbeConfig) -> Result<f64> {
    let train = stratified_sample(&table.labels, &table.rows(Split::Train), label_fraction, seed)?;
    train_probe(
        &table.features,
        &table.labels,
        &train,
        &table.rows(Split::Test),
        cfg,
        seed,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Similarity {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "euclidean" => Ok(Similarity::Euclidean),
            other => Err(Error::config(format!(
                "similarity must be cosine or euclidean, got {other:?}"
            ))),
        }
    }
}

/// Retrieval metrics in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalMetrics {
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
}

impl fmt::Display for RetrievalMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Rank-1 {:.2}  Rank-5 {:.2}  mAP {:.2}",
            self.rank1, self.rank5, self.map
        )
    }
}

/// Similarity of two rows; a zero-norm row has cosine 0 with everything.
pub fn similarity(a: &[f64], b: &[f64], kind: Similarity) -> f64 {
    match kind {
        Similarity::Cosine => {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return 0.0;
            }
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        }
        Similarity::Euclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
    }
}

/// Every row queries all others, ranked by decreasing similarity with ties
/// going to the lower index. A query without any same-label item scores 0 on
/// every metric.
pub fn retrieval_eval(features: &Tensor, labels: &[usize], kind: Similarity) -> Result<RetrievalMetrics> {
    let n = labels.len();
    if n < 2 || features.rank() != 2 || features.rows() != n {
        return Err(Error::usage(format!(
            "retrieval needs at least 2 labelled rows, got {n} labels for features {:?}",
            features.shape()
        )));
    }
    let (mut r1, mut r5, mut ap_sum) = (0.0, 0.0, 0.0);
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for q in 0..n {
        ranked.clear();
        // adding 0.0 folds -0.0 into 0.0 so signed zeros tie
        ranked.extend(
            (0..n)
                .filter(|&j| j != q)
                .map(|j| (similarity(features.row(q), features.row(j), kind) + 0.0, j)),
        );
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let relevant: Vec<bool> = ranked.iter().map(|&(_, j)| labels[j] == labels[q]).collect();
        if relevant.iter().take(1).any(|&r| r) {
            r1 += 1.0;
        }
        if relevant.iter().take(5).any(|&r| r) {
            r5 += 1.0;
        }
        let mut hits = 0.0;
        let mut ap = 0.0;
        for (pos, &rel) in relevant.iter().enumerate() {
            if rel {
                hits += 1.0;
                ap += hits / (pos + 1) as f64;
            }
        }
        if hits > 0.0 {
            ap_sum += ap / hits;
        }
    }
    let pct = |v: f64| 100.0 * v / n as f64;
    Ok(RetrievalMetrics {
        rank1: pct(r1),
        rank5: pct(r5),
        map: pct(ap_sum),
    })
}

/// Retrieval over the test split of a feature table.
pub fn retrieval_on_test(table: &FeatureTable, kind: Similarity) -> Result<RetrievalMetrics> {
    let (f, l) = table.subset(&table.rows(Split::Test))?;
    retrieval_eval(&f, &l, kind)
}

/// `metric,value` CSV.
pub fn metrics_table(rows: &[(&str, f64)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}
