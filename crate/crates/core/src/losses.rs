//! Distillation objectives.
//!
//! Four terms are combined into the training loss:
//!
//! * image-level cross-entropy between teacher and student bag distributions
//!   of image crops ([`loss_image`]),
//! * region-level cross-entropy between each student instance and its most
//!   similar teacher instance ([`loss_region`], matching by [`match_patches`]),
//! * mean pairwise KL divergence among the bags of one net ([`loss_inter`]),
//!   used for both the student and the teacher crops,
//! * the weighted sum `(L_I + L_R)/2 + λ₁ (L_S + L_T)` ([`loss_total`]).
//!
//! Every batched term is the mean over bags of the per-bag loss, then the
//! mean over pairs. Teacher-side distributions never carry gradient.

use std::str::FromStr;

use log::warn;

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::Level;
use crate::error::{Error, Result};
use crate::mil::BagEmbedding;

/// Which teacher crops serve as targets for the intra-level losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PairingMode {
    /// Only teacher image-level crops are targets.
    #[default]
    TeacherGlobal,
    /// Every teacher crop is a target for every other student crop.
    AllCross,
}

impl FromStr for PairingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher-global" => Ok(PairingMode::TeacherGlobal),
            "all-cross" => Ok(PairingMode::AllCross),
            other => Err(Error::config(format!(
                "pairing_mode must be teacher-global or all-cross, got {other:?}"
            ))),
        }
    }
}

impl PairingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PairingMode::TeacherGlobal => "teacher-global",
            PairingMode::AllCross => "all-cross",
        }
    }
}

/// Argument order of the intra-level cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CeDirection {
    /// `-Σ p_teacher · log p_student`.
    #[default]
    TeacherTarget,
    /// `-Σ p_student · log p_teacher`, with gradient through `p_student`.
    Literal,
}

impl FromStr for CeDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher-target" => Ok(CeDirection::TeacherTarget),
            "literal" => Ok(CeDirection::Literal),
            other => Err(Error::config(format!(
                "ce_direction must be teacher-target or literal, got {other:?}"
            ))),
        }
    }
}

impl CeDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            CeDirection::TeacherTarget => "teacher-target",
            CeDirection::Literal => "literal",
        }
    }
}

/// Level and augmentation of one crop slot. Slot `i` of the student and
/// slot `i` of the teacher hold the same crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSlot {
    pub level: Level,
    pub augmentation_index: u8,
}

/// Crop pairs, as `(student slot, teacher slot)` for `intra` and
/// `(i, j)` within one net for `student` / `teacher`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PairSet {
    pub intra: Vec<(usize, usize)>,
    pub student: Vec<(usize, usize)>,
    pub teacher: Vec<(usize, usize)>,
}

impl PairSet {
    /// Intra pairs in which both crops are image-level.
    pub fn image_pairs(&self, student: &[CropSlot], teacher: &[CropSlot]) -> Vec<(usize, usize)> {
        self.intra
            .iter()
            .copied()
            .filter(|&(s, t)| student[s].level == Level::Image && teacher[t].level == Level::Image)
            .collect()
    }
}

pub fn build_pairs(student: &[CropSlot], teacher: &[CropSlot], mode: PairingMode) -> Result<PairSet> {
    for (net, slots) in [("student", student), ("teacher", teacher)] {
        let images = slots.iter().filter(|c| c.level == Level::Image).count();
        if images < 2 {
            return Err(Error::config(format!(
                "{net} needs at least 2 image-level crops, has {images}"
            )));
        }
    }
    let intra = (0..student.len())
        .flat_map(|s| (0..teacher.len()).map(move |t| (s, t)))
        .filter(|&(s, t)| s != t)
        .filter(|&(_, t)| mode == PairingMode::AllCross || teacher[t].level == Level::Image)
        .collect();
    let ordered = |n: usize| -> Vec<(usize, usize)> {
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .collect()
    };
    Ok(PairSet {
        intra,
        student: ordered(student.len()),
        teacher: ordered(teacher.len()),
    })
}

/// Probability and log-probability views of one crop slot.
#[derive(Clone, Debug)]
pub struct CropDistributions {
    pub bags: usize,
    pub instances: usize,
    /// Patch features `[bags*instances, D]` used for instance matching.
    pub features: Var,
    pub bag_p: Var,
    pub bag_logp: Var,
    pub instance_p: Option<Var>,
    pub instance_logp: Option<Var>,
}

impl CropDistributions {
    /// Tempered (and optionally centered) distributions of a bag embedding.
    /// With `detach` the results are constants on the tape.
    pub fn from_bag(
        tape: &mut Tape,
        bag: &BagEmbedding,
        temperature: f64,
        center: Option<Var>,
        with_instances: bool,
        detach: bool,
    ) -> Result<Self> {
        let probs = |tape: &mut Tape, logits: Var| -> Result<(Var, Var)> {
            let logits = match center {
                Some(c) => tape.add_row(logits, c)?,
                None => logits,
            };
            let logits = if detach { tape.detach(logits) } else { logits };
            Ok((
                tape.softmax_t(logits, temperature)?,
                tape.log_softmax_t(logits, temperature)?,
            ))
        };
        let (bag_p, bag_logp) = probs(tape, bag.bag_logits)?;
        let (instance_p, instance_logp) = if with_instances {
            let (p, lp) = probs(tape, bag.instance_logits)?;
            (Some(p), Some(lp))
        } else {
            (None, None)
        };
        let features = if detach {
            tape.detach(bag.features)
        } else {
            bag.features
        };
        Ok(CropDistributions {
            bags: bag.bags,
            instances: bag.instances,
            features,
            bag_p,
            bag_logp,
            instance_p,
            instance_logp,
        })
    }

    /// Constant distributions from explicit probabilities, `[bags, K]` for the
    /// bags and optionally `[bags*instances, K]` per instance.
    pub fn from_probabilities(tape: &mut Tape, bag_p: &Tensor, instances: Option<(&Tensor, &Tensor)>) -> Result<Self> {
        let log_of = |t: &Tensor| Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i].ln());
        let bags = bag_p.rows();
        let (features, instance_p, instance_logp, per_bag) = match instances {
            Some((p, feats)) => {
                if p.rows() != feats.rows() || p.rows() % bags != 0 {
                    return Err(Error::shape(
                        "from_probabilities",
                        format!("{} instance rows, {} feature rows, {bags} bags", p.rows(), feats.rows()),
                    ));
                }
                let f = tape.constant(feats.clone());
                let ip = tape.constant(p.clone());
                let ilp = tape.constant(log_of(p));
                (f, Some(ip), Some(ilp), p.rows() / bags)
            }
            None => (tape.constant(Tensor::zeros([bags, 1])), None, None, 1),
        };
        Ok(CropDistributions {
            bags,
            instances: per_bag,
            features,
            bag_p: tape.constant(bag_p.clone()),
            bag_logp: tape.constant(log_of(bag_p)),
            instance_p,
            instance_logp,
        })
    }
}

/// Mean over pairs of the bag-level cross-entropy on image-level pairs.
pub fn loss_image(
    tape: &mut Tape,
    pairs: &[(usize, usize)],
    student: &[CropDistributions],
    teacher: &[CropDistributions],
    direction: CeDirection,
) -> Result<Var> {
    if pairs.is_empty() {
        warn!("image-level loss has no pairs; contributing 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    let mut bags = 0;
    for &(s, t) in pairs {
        let (sd, td) = (&student[s], &teacher[t]);
        bags = sd.bags;
        let prod = match direction {
            CeDirection::TeacherTarget => tape.mul(td.bag_p, sd.bag_logp)?,
            CeDirection::Literal => tape.mul(sd.bag_p, td.bag_logp)?,
        };
        let term = tape.sum(prod);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let total = acc.expect("non-empty pairs");
    Ok(tape.scale(total, -1.0 / (bags * pairs.len()) as f64))
}

/// For every student row, the index of the teacher row with the highest
/// cosine similarity; ties go to the lowest index. Zero-norm teacher rows are
/// never selected; a zero-norm student row maps to 0.
pub fn match_patches(r_s: &Tensor, r_t: &Tensor) -> Result<Vec<usize>> {
    if r_s.rank() != 2 || r_t.rank() != 2 || r_s.shape()[1] != r_t.shape()[1] {
        return Err(Error::shape(
            "match_patches",
            format!("{:?} vs {:?}", r_s.shape(), r_t.shape()),
        ));
    }
    let d = r_s.shape()[1];
    let (idx, degenerate) = match_rows(r_s.data(), r_t.data(), d);
    if degenerate > 0 {
        warn!("{degenerate} zero-norm query rows matched to index 0");
    }
    Ok(idx)
}

fn match_rows(student: &[f64], teacher: &[f64], d: usize) -> (Vec<usize>, usize) {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let t_norms: Vec<f64> = teacher.chunks(d).map(norm).collect();
    let mut degenerate = 0;
    let idx = student
        .chunks(d)
        .map(|q| {
            let qn = norm(q);
            if qn == 0.0 {
                degenerate += 1;
                return 0;
            }
            let mut best = (0, f64::NEG_INFINITY);
            for (j, (row, &tn)) in teacher.chunks(d).zip(&t_norms).enumerate() {
                if tn == 0.0 {
                    continue;
                }
                let dot: f64 = q.iter().zip(row).map(|(a, b)| a * b).sum();
                let cos = dot / (qn * tn);
                if cos > best.1 {
                    best = (j, cos);
                }
            }
            best.0
        })
        .collect();
    (idx, degenerate)
}

/// Instance-level cross-entropy: every student instance is distilled from
/// its best-matching teacher instance, averaged over student instances,
/// bags and pairs.
pub fn loss_region(
    tape: &mut Tape,
    pairs: &[(usize, usize)],
    student: &[CropDistributions],
    teacher: &[CropDistributions],
    direction: CeDirection,
) -> Result<Var> {
    if pairs.is_empty() {
        warn!("region-level loss has no pairs; contributing 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    let mut degenerate = 0;
    for &(s, t) in pairs {
        let (sd, td) = (&student[s], &teacher[t]);
        let missing = || Error::usage("region loss needs per-instance distributions");
        let (ts, tt, bags) = (sd.instances, td.instances, sd.bags);
        let d = tape.value(sd.features).last_dim();
        let mut index = Vec::with_capacity(bags * ts);
        {
            let fs = tape.value(sd.features).data();
            let ft = tape.value(td.features).data();
            for b in 0..bags {
                let (idx, deg) = match_rows(&fs[b * ts * d..(b + 1) * ts * d], &ft[b * tt * d..(b + 1) * tt * d], d);
                degenerate += deg;
                index.extend(idx.into_iter().map(|j| b * tt + j));
            }
        }
        let prod = match direction {
            CeDirection::TeacherTarget => {
                let target = tape.gather_rows(td.instance_p.ok_or_else(missing)?, &index)?;
                tape.mul(target, sd.instance_logp.ok_or_else(missing)?)?
            }
            CeDirection::Literal => {
                let logt = tape.gather_rows(td.instance_logp.ok_or_else(missing)?, &index)?;
                tape.mul(sd.instance_p.ok_or_else(missing)?, logt)?
            }
        };
        let sum = tape.sum(prod);
        let term = tape.scale(sum, 1.0 / (bags * ts) as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    if degenerate > 0 {
        warn!("{degenerate} zero-norm student instances matched to index 0");
    }
    let total = acc.expect("non-empty pairs");
    Ok(tape.scale(total, -1.0 / pairs.len() as f64))
}

/// Mean over ordered pairs `(i, j)` of `KL(p_i || p_j)` between bag
/// distributions of one net.
pub fn loss_inter(tape: &mut Tape, crops: &[CropDistributions], pairs: &[(usize, usize)]) -> Result<Var> {
    if pairs.is_empty() {
        warn!("inter-level loss has no pairs; contributing 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut acc: Option<Var> = None;
    for &(i, j) in pairs {
        let (a, b) = (&crops[i], &crops[j]);
        let diff = tape.sub(a.bag_logp, b.bag_logp)?;
        let prod = tape.mul(a.bag_p, diff)?;
        let term = tape.sum(prod);
        acc = Some(match acc {
            Some(x) => tape.add(x, term)?,
            None => term,
        });
    }
    let bags = crops[pairs[0].0].bags;
    let total = acc.expect("non-empty pairs");
    Ok(tape.scale(total, 1.0 / (bags * pairs.len()) as f64))
}

fn check_lambda(lambda1: f64) -> Result<()> {
    if lambda1 >= 0.0 && lambda1.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("lambda1 must be non-negative, got {lambda1}")))
    }
}

/// `(L_I + L_R)/2 + λ₁ (L_S + L_T)` on plain numbers.
pub fn loss_total(image: f64, region: f64, inter_student: f64, inter_teacher: f64, lambda1: f64) -> Result<f64> {
    check_lambda(lambda1)?;
    let parts = [image, region, inter_student, inter_teacher];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss components {parts:?}")));
    }
    Ok((image + region) / 2.0 + lambda1 * (inter_student + inter_teacher))
}

/// Tape version of [`loss_total`].
pub fn loss_total_on_tape(
    tape: &mut Tape,
    image: Var,
    region: Var,
    inter_student: Var,
    inter_teacher: Var,
    lambda1: f64,
) -> Result<Var> {
    check_lambda(lambda1)?;
    let intra = tape.add(image, region)?;
    let intra = tape.scale(intra, 0.5);
    let inter = tape.add(inter_student, inter_teacher)?;
    let inter = tape.scale(inter, lambda1);
    tape.add(intra, inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(images: usize, regions: usize) -> Vec<CropSlot> {
        (0..images)
            .map(|i| CropSlot {
                level: Level::Image,
                augmentation_index: (i % 2) as u8,
            })
            .chain((0..regions).map(|r| CropSlot {
                level: Level::Region,
                augmentation_index: (r % 2) as u8,
            }))
            .collect()
    }

    /// All ordered pairs by explicit listing, the brute-force reference.
    fn brute_force_pairs(s: &[CropSlot], t: &[CropSlot], mode: PairingMode) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, _) in s.iter().enumerate() {
            for (j, tc) in t.iter().enumerate() {
                let target_ok = match mode {
                    PairingMode::TeacherGlobal => tc.level == Level::Image,
                    PairingMode::AllCross => true,
                };
                if i != j && target_ok {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn pair_counts() {
        let s = slots(2, 0);
        let p = build_pairs(&s, &s, PairingMode::TeacherGlobal).unwrap();
        assert_eq!(p.intra, vec![(0, 1), (1, 0)]);
        assert_eq!(p.image_pairs(&s, &s).len(), 2);

        let s = slots(2, 8);
        let p = build_pairs(&s, &s, PairingMode::TeacherGlobal).unwrap();
        assert_eq!(p.intra.len(), 2 + 8 * 2);
        assert_eq!(p.intra, brute_force_pairs(&s, &s, PairingMode::TeacherGlobal));
        assert_eq!(p.student.len(), 90);
        assert_eq!(p.teacher.len(), 90);
        assert!(p.student.iter().all(|(i, j)| i != j));

        let p = build_pairs(&s, &s, PairingMode::AllCross).unwrap();
        assert_eq!(p.intra.len(), 90);
        assert_eq!(p.intra, brute_force_pairs(&s, &s, PairingMode::AllCross));
    }

    #[test]
    fn pairs_need_two_image_crops() {
        let s = slots(1, 0);
        assert!(matches!(
            build_pairs(&s, &s, PairingMode::TeacherGlobal),
            Err(Error::Config(_))
        ));
    }

    fn dist(tape: &mut Tape, rows: &[Vec<f64>]) -> CropDistributions {
        CropDistributions::from_probabilities(tape, &Tensor::from_rows(rows).unwrap(), None).unwrap()
    }

    #[test]
    fn image_loss_examples() {
        let mut tape = Tape::new();
        let student = dist(&mut tape, &[vec![1.0 - 1e-300, 1e-300]]);
        let teacher = dist(&mut tape, &[vec![1.0, 0.0]]);
        let l = loss_image(&mut tape, &[(0, 0)], &[student], &[teacher], CeDirection::TeacherTarget).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);

        let mut tape = Tape::new();
        let u = dist(&mut tape, &[vec![0.25; 4]]);
        let l = loss_image(
            &mut tape,
            &[(0, 0)],
            std::slice::from_ref(&u),
            std::slice::from_ref(&u),
            CeDirection::TeacherTarget,
        )
        .unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let s = dist(&mut tape, &[vec![0.5, 0.5]]);
        let t = dist(&mut tape, &[vec![0.7, 0.3]]);
        let l = loss_image(&mut tape, &[(0, 0)], &[s], &[t], CeDirection::TeacherTarget).unwrap();
        let want = -(0.7 * 0.5f64.ln() + 0.3 * 0.5f64.ln());
        assert!((tape.value(l).item() - want).abs() < 1e-12);
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn empty_pairs_contribute_zero() {
        let mut tape = Tape::new();
        let l = loss_image(&mut tape, &[], &[], &[], CeDirection::TeacherTarget).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = loss_region(&mut tape, &[], &[], &[], CeDirection::TeacherTarget).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = loss_inter(&mut tape, &[], &[]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn matcher_examples() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(match_patches(&eye, &eye).unwrap(), vec![0, 1, 2]);

        let q = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(match_patches(&q, &t).unwrap(), vec![0]);

        // duplicate targets tie; the lower index wins
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(match_patches(&q, &t).unwrap(), vec![1]);
    }

    #[test]
    fn matcher_zero_norm_rows() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        // the zero teacher row (cos undefined) loses even to cos = -1
        assert_eq!(match_patches(&q, &t).unwrap(), vec![1, 0]);
        assert!(match_patches(&q, &Tensor::zeros([2, 3])).is_err());
    }

    #[test]
    fn region_loss_with_uniform_teacher_is_log_k() {
        let mut tape = Tape::new();
        let s_inst = Tensor::from_rows(&[vec![0.7, 0.1, 0.1, 0.1], vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let s_feat = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let t_inst = Tensor::full([3, 4], 0.25);
        let t_feat = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let s = CropDistributions::from_probabilities(&mut tape, &Tensor::full([1, 4], 0.25), Some((&s_inst, &s_feat)))
            .unwrap();
        let t = CropDistributions::from_probabilities(&mut tape, &Tensor::full([1, 4], 0.25), Some((&t_inst, &t_feat)))
            .unwrap();
        // cross-entropy against a uniform target is the mean negative log-prob
        let want = -(s_inst.data().iter().map(|p| p.ln()).sum::<f64>()) / 4.0 / 2.0;
        let l = loss_region(&mut tape, &[(0, 0)], &[s], &[t], CeDirection::TeacherTarget).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);

        // identical uniform student gives exactly log 4
        let mut tape = Tape::new();
        let u = Tensor::full([2, 4], 0.25);
        let s =
            CropDistributions::from_probabilities(&mut tape, &Tensor::full([1, 4], 0.25), Some((&u, &s_feat))).unwrap();
        let t = CropDistributions::from_probabilities(&mut tape, &Tensor::full([1, 4], 0.25), Some((&t_inst, &t_feat)))
            .unwrap();
        let l = loss_region(&mut tape, &[(0, 0)], &[s], &[t], CeDirection::TeacherTarget).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn region_loss_two_patch_hand_case() {
        // student patch 0 ~ teacher patch 1, student patch 1 ~ teacher patch 0
        let s_feat = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.2, 1.0]]).unwrap();
        let t_feat = Tensor::from_rows(&[vec![0.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let s_inst = Tensor::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let t_inst = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.9, 0.1]]).unwrap();
        let want = -((0.9 * 0.6f64.ln() + 0.1 * 0.4f64.ln()) + (0.2 * 0.3f64.ln() + 0.8 * 0.7f64.ln())) / 2.0;

        let mut tape = Tape::new();
        let bag = Tensor::full([1, 2], 0.5);
        let s = CropDistributions::from_probabilities(&mut tape, &bag, Some((&s_inst, &s_feat))).unwrap();
        let t = CropDistributions::from_probabilities(&mut tape, &bag, Some((&t_inst, &t_feat))).unwrap();
        let l = loss_region(&mut tape, &[(0, 0)], &[s], &[t], CeDirection::TeacherTarget).unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn inter_loss_examples() {
        let mut tape = Tape::new();
        let a = dist(&mut tape, &[vec![0.5, 0.5]]);
        let b = dist(&mut tape, &[vec![0.9, 0.1]]);
        let l = loss_inter(&mut tape, &[a.clone(), b.clone()], &[(0, 1)]).unwrap();
        let kl_ab = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((tape.value(l).item() - kl_ab).abs() < 1e-12);
        assert!((tape.value(l).item() - 0.510826).abs() < 1e-6);

        let kl_ba = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let l = loss_inter(&mut tape, &[a.clone(), b], &[(0, 1), (1, 0)]).unwrap();
        assert!((tape.value(l).item() - (kl_ab + kl_ba) / 2.0).abs() < 1e-12);

        let l = loss_inter(&mut tape, &[a.clone(), a], &[(0, 1), (1, 0)]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(loss_total(2.0, 1.0, 0.5, 0.5, 0.1).unwrap(), 1.6);
        assert_eq!(loss_total(0.0, 0.0, 0.0, 0.0, 0.1).unwrap(), 0.0);
        assert!(matches!(loss_total(1.0, 1.0, 1.0, 1.0, -0.1), Err(Error::Config(_))));

        let mut tape = Tape::new();
        let v: Vec<Var> = [2.0, 1.0, 0.5, 0.5]
            .iter()
            .map(|&x| tape.constant(Tensor::scalar(x)))
            .collect();
        let l = loss_total_on_tape(&mut tape, v[0], v[1], v[2], v[3], 0.1).unwrap();
        assert_eq!(tape.value(l).item(), 1.6);
    }
}
