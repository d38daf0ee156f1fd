//! The full distillation objective on one batch, as a tape computation.
//!
//! Used by the trainer (student parameters tracked), by the gradient check
//! (same, with finite differences) and by the gradient-concentration
//! diagnostic (input pixels tracked).

use std::rc::Rc;

use crate::autodiff::{SparseMap, Tape, Tensor, Var};
use crate::data::CropGeometry;
use crate::encoder::{self, instance_count, instance_source, BoundParams, EncoderConfig, Level};
use crate::error::{Error, Result};
use crate::losses::{
    build_pairs, loss_image, loss_inter, loss_region, loss_total_on_tape, CeDirection, CropDistributions, CropSlot,
    PairingMode,
};
use crate::mil::{pool_instances, BagEmbedding, Net};

/// Which terms enter the loss and how they are computed.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Bag logits as the mean of instance logits. When off, the patch
    /// features are mean-pooled and L2-normalized into one global feature
    /// before the head.
    pub mil_aggregation: bool,
    pub region_loss: bool,
    pub inter_student: bool,
    pub inter_teacher: bool,
    pub pairing_mode: PairingMode,
    pub ce_direction: CeDirection,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    pub lambda1: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mil_aggregation: true,
            region_loss: true,
            inter_student: true,
            inter_teacher: true,
            pairing_mode: PairingMode::TeacherGlobal,
            ce_direction: CeDirection::TeacherTarget,
            student_temperature: 0.1,
            teacher_temperature: 0.04,
            lambda1: 0.1,
        }
    }
}

impl ObjectiveConfig {
    /// Image-level distillation only: no MIL pooling, no region or
    /// inter-level terms.
    pub fn image_only(&self) -> Self {
        ObjectiveConfig {
            mil_aggregation: false,
            region_loss: false,
            inter_student: false,
            inter_teacher: false,
            ..self.clone()
        }
    }
}

/// A batch of source images with the crop geometry of every image,
/// `geometry[b][slot]`.
pub struct CropBatch<'a> {
    pub images: Vec<&'a Tensor>,
    pub geometry: Vec<Vec<CropGeometry>>,
}

impl CropBatch<'_> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn slots(&self) -> Vec<CropSlot> {
        self.geometry[0]
            .iter()
            .map(|g| CropSlot {
                level: g.level,
                augmentation_index: g.augmentation_index,
            })
            .collect()
    }

    fn check(&self) -> Result<(usize, usize)> {
        let first = self.images.first().ok_or_else(|| Error::usage("empty batch"))?;
        let shape = first.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("batch", format!("expected HxWx3 images, got {shape:?}")));
        }
        if self.images.iter().any(|i| i.shape() != shape) || self.geometry.len() != self.images.len() {
            return Err(Error::shape("batch", "images must share one size and carry geometry"));
        }
        let slots = self.geometry[0].len();
        for g in &self.geometry {
            let same = g.len() == slots
                && g.iter()
                    .zip(&self.geometry[0])
                    .all(|(a, b)| a.out_px == b.out_px && a.level == b.level);
            if !same {
                return Err(Error::shape("batch", "crop slots differ between images"));
            }
        }
        Ok((shape[0], shape[1]))
    }

    /// Instance rows `[B*T, s*s*3]` of one slot, rendered directly.
    pub fn instances(&self, slot: usize, instance_px: usize) -> Result<Tensor> {
        let (h, w) = self.check()?;
        let n = self.geometry[0][slot].out_px;
        let t = instance_count(n, n, instance_px)?;
        let p = instance_px * instance_px * 3;
        let mut crop = vec![0.0; n * n * 3];
        let mut out = Vec::with_capacity(self.len() * t * p);
        for (img, geo) in self.images.iter().zip(&self.geometry) {
            geo[slot].render_into(img.data(), h, w, &mut crop);
            let (grid, row) = (n / instance_px, instance_px * 3);
            for ti in 0..t {
                let (ty, tx) = (ti / grid, ti % grid);
                for py in 0..instance_px {
                    let start = ((ty * instance_px + py) * n + tx * instance_px) * 3;
                    out.extend_from_slice(&crop[start..start + row]);
                }
            }
        }
        Tensor::new([self.len() * t, p], out)
    }

    /// Linear map from the stacked batch pixels `B*H*W*3` to the instance
    /// rows of one slot, for gradients with respect to the images.
    pub fn instance_map(&self, slot: usize, instance_px: usize) -> Result<SparseMap> {
        let (h, w) = self.check()?;
        let n = self.geometry[0][slot].out_px;
        let t = instance_count(n, n, instance_px)?;
        let p = instance_px * instance_px * 3;
        let image_len = h * w * 3;
        let mut b = SparseMap::builder(self.len() * image_len);
        let mut taps: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n * n];
        for (bi, geo) in self.geometry.iter().enumerate() {
            let g = &geo[slot];
            taps.iter_mut().for_each(Vec::clear);
            g.for_each_tap(h, w, |o, src, wt| taps[o].push((src, wt * g.jitter.contrast)));
            for i in 0..t * p {
                let flat = instance_source(n, instance_px, i / p, i % p);
                let (pix, c) = (flat / 3, flat % 3);
                let base = bi * image_len;
                b.push_row(
                    taps[pix].iter().map(|&(s, wt)| (base + s * 3 + c, wt)),
                    g.jitter.brightness,
                );
            }
        }
        b.finish([self.len() * t, p])
    }
}

/// Runs one net over every slot input (`[B*T_k, P]` each).
#[allow(clippy::too_many_arguments)]
pub fn forward_net(
    tape: &mut Tape,
    params: &BoundParams,
    enc: &EncoderConfig,
    cfg: &ObjectiveConfig,
    net: Net,
    slots: &[CropSlot],
    inputs: &[Var],
    bags: usize,
) -> Result<Vec<BagEmbedding>> {
    slots
        .iter()
        .zip(inputs)
        .map(|(slot, &x)| {
            let rows = tape.shape(x)[0];
            let instances = rows / bags;
            let r = encoder::encode(tape, params, enc, x, bags)?;
            let instance_logits = encoder::head(tape, params, r)?;
            let bag_logits = if cfg.mil_aggregation {
                pool_instances(tape, instance_logits, bags, instances)?
            } else {
                let pooled = pool_instances(tape, r, bags, instances)?;
                let pooled = tape.l2_normalize(pooled);
                encoder::head(tape, params, pooled)?
            };
            Ok(BagEmbedding {
                level: slot.level,
                augmentation_index: slot.augmentation_index,
                net,
                features: r,
                instance_logits,
                bag_logits,
                bags,
                instances,
            })
        })
        .collect()
}

/// The loss terms of one batch. Disabled terms are constant zeros.
pub struct Objective {
    pub total: Var,
    pub image: Var,
    pub region: Var,
    pub inter_student: Var,
    pub inter_teacher: Var,
    /// Batch mean of the teacher bag logits over image-level crops, the
    /// statistic the center tracks.
    pub teacher_logit_mean: Vec<f64>,
}

/// Builds the objective. `student_inputs` and `teacher_inputs` hold one
/// instance matrix per slot; the teacher inputs are detached here.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    tape: &mut Tape,
    cfg: &ObjectiveConfig,
    enc: &EncoderConfig,
    student: &BoundParams,
    teacher: &BoundParams,
    slots: &[CropSlot],
    inputs: &[Var],
    bags: usize,
    center: &[f64],
) -> Result<Objective> {
    let pairs = build_pairs(slots, slots, cfg.pairing_mode)?;
    let image_pairs = pairs.image_pairs(slots, slots);

    // Teacher crops that any enabled term reads.
    let teacher_needed: Vec<bool> = slots
        .iter()
        .enumerate()
        .map(|(t, slot)| {
            slot.level == Level::Image
                || cfg.inter_teacher
                || (cfg.region_loss && pairs.intra.iter().any(|&(_, tt)| tt == t))
        })
        .collect();
    let teacher_slots: Vec<CropSlot> = slots
        .iter()
        .zip(&teacher_needed)
        .filter(|(_, &n)| n)
        .map(|(s, _)| *s)
        .collect();
    let teacher_inputs: Vec<Var> = inputs
        .iter()
        .zip(&teacher_needed)
        .filter(|(_, &n)| n)
        .map(|(&x, _)| tape.detach(x))
        .collect();

    let student_bags = forward_net(tape, student, enc, cfg, Net::Student, slots, inputs, bags)?;
    let teacher_bags = forward_net(
        tape,
        teacher,
        enc,
        cfg,
        Net::Teacher,
        &teacher_slots,
        &teacher_inputs,
        bags,
    )?;

    let k = tape.shape(teacher_bags[0].bag_logits)[1];
    if center.len() != k {
        return Err(Error::shape(
            "center",
            format!("{} entries for {k} logits", center.len()),
        ));
    }
    let neg_center = tape.constant(Tensor::vector(&center.iter().map(|c| -c).collect::<Vec<_>>()));

    let mut teacher_logit_mean = vec![0.0; k];
    let mut image_crops = 0;
    for tb in teacher_bags.iter().filter(|b| b.level == Level::Image) {
        for row in 0..bags {
            for (m, v) in teacher_logit_mean.iter_mut().zip(tape.value(tb.bag_logits).row(row)) {
                *m += v;
            }
        }
        image_crops += 1;
    }
    teacher_logit_mean
        .iter_mut()
        .for_each(|m| *m /= (image_crops * bags) as f64);

    let student_d = student_bags
        .iter()
        .map(|b| CropDistributions::from_bag(tape, b, cfg.student_temperature, None, cfg.region_loss, false))
        .collect::<Result<Vec<_>>>()?;
    // teacher distributions indexed by the full slot list
    let mut teacher_d: Vec<Option<CropDistributions>> = vec![None; slots.len()];
    let mut it = teacher_bags.iter();
    for (t, &needed) in teacher_needed.iter().enumerate() {
        if needed {
            let b = it.next().expect("one bag per needed slot");
            teacher_d[t] = Some(CropDistributions::from_bag(
                tape,
                b,
                cfg.teacher_temperature,
                Some(neg_center),
                cfg.region_loss,
                true,
            )?);
        }
    }
    // Slots the teacher skipped are never paired; fill them with a cheap
    // placeholder so the pair indices stay valid.
    let placeholder = teacher_d.iter().flatten().next().expect("image crops present").clone();
    let teacher_d: Vec<CropDistributions> = teacher_d
        .into_iter()
        .map(|d| d.unwrap_or_else(|| placeholder.clone()))
        .collect();

    let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));
    let image = loss_image(tape, &image_pairs, &student_d, &teacher_d, cfg.ce_direction)?;
    let region = if cfg.region_loss {
        loss_region(tape, &pairs.intra, &student_d, &teacher_d, cfg.ce_direction)?
    } else {
        zero(tape)
    };
    let inter_student = if cfg.inter_student {
        loss_inter(tape, &student_d, &pairs.student)?
    } else {
        zero(tape)
    };
    let inter_teacher = if cfg.inter_teacher {
        loss_inter(tape, &teacher_d, &pairs.teacher)?
    } else {
        zero(tape)
    };
    let total = loss_total_on_tape(tape, image, region, inter_student, inter_teacher, cfg.lambda1)?;
    Ok(Objective {
        total,
        image,
        region,
        inter_student,
        inter_teacher,
        teacher_logit_mean,
    })
}

/// Slot inputs as constants, rendered from the batch.
pub fn constant_inputs(tape: &mut Tape, batch: &CropBatch, instance_px: usize) -> Result<Vec<Var>> {
    (0..batch.geometry[0].len())
        .map(|slot| Ok(tape.constant(batch.instances(slot, instance_px)?)))
        .collect()
}

/// Slot inputs as sparse maps of a tracked pixel leaf holding the stacked
/// batch images. Returns the leaf and the inputs.
pub fn pixel_inputs(tape: &mut Tape, batch: &CropBatch, instance_px: usize) -> Result<(Var, Vec<Var>)> {
    let stacked: Vec<f64> = batch.images.iter().flat_map(|i| i.data().iter().copied()).collect();
    let n = stacked.len();
    let leaf = tape.leaf(Tensor::new([n], stacked)?);
    let inputs = (0..batch.geometry[0].len())
        .map(|slot| {
            let map = batch.instance_map(slot, instance_px)?;
            tape.sparse(leaf, Rc::new(map))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((leaf, inputs))
}
