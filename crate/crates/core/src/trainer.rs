//! Teacher-student optimization.
//!
//! Each step renders two augmented views of every image in the batch, runs
//! the teacher without gradient tracking and the student with it, takes an
//! AdamW step on the student, moves the teacher toward the student by an
//! exponential moving average and updates the teacher center. All state is
//! rounded to `f32` after every step so checkpoints reload bit-exactly.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor};
use crate::checkpoint::{tensor_to_u64, u64_to_tensor, TensorFile};
use crate::data::{derive_seed, sample_geometry, CropConfig, Dataset, Split};
use crate::encoder::{EncoderConfig, ParamSet};
use crate::error::{Error, Result};
use crate::losses::{CeDirection, PairingMode};
use crate::objective::{build_objective, constant_inputs, CropBatch, ObjectiveConfig};

/// Everything that defines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n_image_crops: usize,
    pub n_region_crops: usize,
    pub image_crop_px: usize,
    pub region_crop_px: usize,
    pub instance_px: usize,
    pub image_area: (f64, f64),
    pub region_area: (f64, f64),
    pub augment: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub attention_blocks: usize,
    pub lambda1: f64,
    pub teacher_temperature: f64,
    pub student_temperature: f64,
    pub center_momentum: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub mil_aggregation: bool,
    pub region_crops: bool,
    pub inter_teacher: bool,
    pub inter_student: bool,
    pub pairing_mode: PairingMode,
    pub ce_direction: CeDirection,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_image_crops: 2,
            n_region_crops: 8,
            image_crop_px: 56,
            region_crop_px: 24,
            instance_px: 8,
            image_area: (0.4, 1.0),
            region_area: (0.05, 0.4),
            augment: true,
            hidden_dim: 64,
            embed_dim: 64,
            head_dim: 256,
            attention_blocks: 0,
            lambda1: 0.1,
            teacher_temperature: 0.04,
            student_temperature: 0.1,
            center_momentum: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
            learning_rate: 5e-4,
            weight_decay: 0.05,
            warmup_epochs: 10,
            epochs: 100,
            batch_size: 64,
            checkpoint_every: 0,
            mil_aggregation: true,
            region_crops: true,
            inter_teacher: true,
            inter_student: true,
            pairing_mode: PairingMode::TeacherGlobal,
            ce_direction: CeDirection::TeacherTarget,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// The image-crops-only baseline: no MIL pooling, no region crops, no
    /// inter-level terms.
    pub fn baseline(&self) -> Self {
        RunConfig {
            mil_aggregation: false,
            region_crops: false,
            inter_teacher: false,
            inter_student: false,
            ..self.clone()
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            instance_px: self.instance_px,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            head_dim: self.head_dim,
            attention_blocks: self.attention_blocks,
        }
    }

    pub fn crops(&self) -> CropConfig {
        CropConfig {
            n_image_crops: self.n_image_crops,
            n_region_crops: if self.region_crops { self.n_region_crops } else { 0 },
            image_crop_px: self.image_crop_px,
            region_crop_px: self.region_crop_px,
            instance_px: self.instance_px,
            image_area: self.image_area,
            region_area: self.region_area,
            augment: self.augment,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            mil_aggregation: self.mil_aggregation,
            region_loss: self.region_crops,
            inter_student: self.inter_student,
            inter_teacher: self.inter_teacher,
            pairing_mode: self.pairing_mode,
            ce_direction: self.ce_direction,
            student_temperature: self.student_temperature,
            teacher_temperature: self.teacher_temperature,
            lambda1: self.lambda1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.crops().validate()?;
        // region crops are validated even when the toggle removes them
        crate::encoder::instance_count(self.region_crop_px, self.region_crop_px, self.instance_px)?;
        if self.n_image_crops < 2 {
            return Err(Error::config(format!(
                "at least 2 image-level crops are needed, got {}",
                self.n_image_crops
            )));
        }
        let positive = [
            ("teacher_temperature", self.teacher_temperature),
            ("student_temperature", self.student_temperature),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lambda1", self.lambda1),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        let unit = [
            ("center_momentum", self.center_momentum),
            ("ema_start", self.ema_start),
            ("ema_end", self.ema_end),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.ema_start > self.ema_end {
            return Err(Error::config("ema_start must not exceed ema_end"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 || self.head_dim == 0 {
            return Err(Error::config("network dimensions must be positive"));
        }
        Ok(())
    }
}

/// EMA coefficient on a cosine ramp from `start` (step 0) to `end`
/// (`step == total_steps`).
pub fn ema_schedule(step: u64, total_steps: u64, start: f64, end: f64) -> f64 {
    if step >= total_steps {
        if step > total_steps {
            warn!("ema_schedule: step {step} beyond {total_steps}, clamping");
        }
        return end;
    }
    if step == 0 {
        return start;
    }
    let ramp = ((PI * step as f64 / total_steps as f64).cos() + 1.0) / 2.0;
    (end - (end - start) * ramp).clamp(start, end)
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, lambda: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(Error::StateCorruption("teacher and student layouts differ".into()));
    }
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = lambda * *a + (1.0 - lambda) * b;
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay. Rank-1 tensors (biases) are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: ParamSet,
    pub v: ParamSet,
    pub steps: u64,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        }
    }

    /// Applies one update. Fails without touching anything when a gradient
    /// is missing or non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, weight_decay: f64) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::StateCorruption("optimizer layout mismatch".into()));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let iter = params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in iter {
            let decay = if p.rank() > 1 { weight_decay } else { 0.0 };
            let entries = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((pi, &gi), (mi, vi)) in entries {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let m_hat = *mi / bc1;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let v_hat = *vi / bc2;
                *pi -= lr * decay * *pi;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Complete training state.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub center: Vec<f64>,
    pub optimizer: AdamW,
    pub step: u64,
    pub total_steps: u64,
    pub seed: u64,
}

impl DistillState {
    /// Fresh state: student initialized from `seed`, teacher a copy.
    pub fn new(cfg: &RunConfig, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        let mut student = cfg.encoder().init_params(derive_seed(&[cfg.seed, 0x696e_6974]));
        round_params(&mut student);
        Ok(DistillState {
            teacher: student.clone(),
            optimizer: AdamW::new(&student),
            student,
            center: vec![0.0; cfg.head_dim],
            step: 0,
            total_steps,
            seed: cfg.seed,
        })
    }

    pub fn to_file(&self) -> TensorFile {
        let mut tensors = Vec::new();
        for (prefix, set) in [
            ("student/", &self.student),
            ("teacher/", &self.teacher),
            ("adam_m/", &self.optimizer.m),
            ("adam_v/", &self.optimizer.v),
        ] {
            tensors.extend(set.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())));
        }
        tensors.push(("center".into(), Tensor::vector(&self.center)));
        tensors.push(("meta/seed".into(), u64_to_tensor(self.seed)));
        tensors.push(("meta/adam_steps".into(), u64_to_tensor(self.optimizer.steps)));
        TensorFile {
            step: self.step,
            total_steps: self.total_steps,
            tensors,
        }
    }

    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let set = |prefix: &str| -> ParamSet {
            ParamSet(
                file.with_prefix(prefix)
                    .map(|(n, t)| (n.to_string(), t.clone()))
                    .collect(),
            )
        };
        let student = set("student/");
        let teacher = set("teacher/");
        let m = set("adam_m/");
        let v = set("adam_v/");
        if student.0.is_empty()
            || !student.same_layout(&teacher)
            || !student.same_layout(&m)
            || !student.same_layout(&v)
        {
            return Err(Error::StateCorruption(
                "student, teacher and moment tensors do not line up".into(),
            ));
        }
        let center = file.get("center")?;
        let k = student.get("head.b").map(|b| b.len()).unwrap_or(center.len());
        if center.rank() != 1 || center.len() != k {
            return Err(Error::StateCorruption(format!("center has shape {:?}", center.shape())));
        }
        let mut optimizer = AdamW::new(&student);
        optimizer.m = m;
        optimizer.v = v;
        optimizer.steps = tensor_to_u64(file.get("meta/adam_steps")?)?;
        Ok(DistillState {
            center: center.data().to_vec(),
            seed: tensor_to_u64(file.get("meta/seed")?)?,
            student,
            teacher,
            optimizer,
            step: file.step,
            total_steps: file.total_steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&TensorFile::load(path)?)
    }

    fn round_to_f32(&mut self) {
        for set in [
            &mut self.student,
            &mut self.teacher,
            &mut self.optimizer.m,
            &mut self.optimizer.v,
        ] {
            round_params(set);
        }
        self.center.iter_mut().for_each(|c| *c = *c as f32 as f64);
    }
}

fn round_params(set: &mut ParamSet) {
    set.iter_mut().for_each(|(_, t)| t.round_to_f32());
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_image: f64,
    pub loss_region: f64,
    pub loss_inter_student: f64,
    pub loss_inter_teacher: f64,
    pub ema_lambda: f64,
    pub lr: f64,
    /// The update was abandoned because of a non-finite loss or gradient.
    pub skipped: bool,
}

pub const METRICS_HEADER: &str = "step,epoch,loss_total,loss_I,loss_R,loss_S,loss_T,ema_lambda,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.loss_total,
            self.loss_image,
            self.loss_region,
            self.loss_inter_student,
            self.loss_inter_teacher,
            self.ema_lambda,
            self.lr
        )
    }
}

pub fn metrics_csv(records: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Learning rate: linear warm-up from 0 over `warmup_epochs`, then constant.
pub fn learning_rate(cfg: &RunConfig, step: u64, steps_per_epoch: u64) -> f64 {
    let warm = cfg.warmup_epochs as u64 * steps_per_epoch;
    if step >= warm {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / warm as f64
    }
}

/// Gradients of the student parameters, as a parameter set.
fn collect_grads(grads: &mut Gradients, bound: &crate::encoder::BoundParams, like: &ParamSet) -> Result<ParamSet> {
    let mut out = like.zeros_like();
    for (name, t) in out.iter_mut() {
        if let Some(g) = grads.take(bound.var(name)?) {
            *t = g;
        }
    }
    Ok(out)
}

/// One optimization step on the records `indices` of `data`.
pub fn train_step(
    data: &Dataset,
    indices: &[usize],
    state: &mut DistillState,
    cfg: &RunConfig,
    epoch: usize,
    steps_per_epoch: u64,
) -> Result<StepMetrics> {
    let crops = cfg.crops();
    let geometry = indices
        .iter()
        .map(|&i| {
            let rec = &data.records[i];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[state.seed, state.step, i as u64]));
            sample_geometry(rec.height(), rec.width(), &crops, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = CropBatch {
        images: indices.iter().map(|&i| &data.records[i].pixels).collect(),
        geometry,
    };

    let mut tape = Tape::new();
    let student = state.student.bind(&mut tape, true);
    let teacher = state.teacher.bind(&mut tape, false);
    let inputs = constant_inputs(&mut tape, &batch, cfg.instance_px)?;
    let obj = build_objective(
        &mut tape,
        &cfg.objective(),
        &cfg.encoder(),
        &student,
        &teacher,
        &batch.slots(),
        &inputs,
        batch.len(),
        &state.center,
    )?;

    let lr = learning_rate(cfg, state.step, steps_per_epoch);
    let lambda = ema_schedule(state.step, state.total_steps, cfg.ema_start, cfg.ema_end);
    let mut metrics = StepMetrics {
        step: state.step,
        epoch,
        loss_total: tape.value(obj.total).item(),
        loss_image: tape.value(obj.image).item(),
        loss_region: tape.value(obj.region).item(),
        loss_inter_student: tape.value(obj.inter_student).item(),
        loss_inter_teacher: tape.value(obj.inter_teacher).item(),
        ema_lambda: lambda,
        lr,
        skipped: false,
    };

    let update = if metrics.loss_total.is_finite() {
        let mut grads = tape.backward(obj.total)?;
        let grads = collect_grads(&mut grads, &student, &state.student)?;
        state.optimizer.step(&mut state.student, &grads, lr, cfg.weight_decay)
    } else {
        Err(Error::NonFinite(format!("loss {}", metrics.loss_total)))
    };
    match update {
        Ok(()) => {
            ema_update(&mut state.teacher, &state.student, lambda)?;
            let m = cfg.center_momentum;
            for (c, &x) in state.center.iter_mut().zip(&obj.teacher_logit_mean) {
                *c = m * *c + (1.0 - m) * x;
            }
            state.round_to_f32();
        }
        Err(Error::NonFinite(what)) => {
            warn!("step {}: {what} is not finite, update skipped", state.step);
            metrics.skipped = true;
        }
        Err(e) => return Err(e),
    }
    state.step += 1;
    Ok(metrics)
}

/// Mini-batches of the training split for one epoch, shuffled by
/// `(seed, epoch)`.
pub fn epoch_batches(train: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x7368_7566, epoch as u64]));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt-{epoch:04}.bin")
}

/// Result of [`fit`].
pub struct FitOutput {
    pub state: DistillState,
    pub metrics: Vec<StepMetrics>,
}

/// Trains on the training split. With `out_dir`, writes the resolved
/// configuration, the metrics log and checkpoints every
/// `checkpoint_every` epochs (only the final one when 0).
pub fn fit(
    data: &Dataset,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
    resolved_config: Option<&str>,
) -> Result<FitOutput> {
    cfg.validate()?;
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::usage("the training split is empty"));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let mut state = DistillState::new(cfg, steps_per_epoch * cfg.epochs as u64)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(text) = resolved_config {
            let p = dir.join(CONFIG_FILE);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
    }
    let mut metrics = Vec::with_capacity(state.total_steps as usize);
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&train, cfg.batch_size, cfg.seed, epoch) {
            metrics.push(train_step(data, &batch, &mut state, cfg, epoch, steps_per_epoch)?);
        }
        let last = metrics.last().expect("at least one step per epoch");
        info!(
            "epoch {epoch}: loss {:.4} (I {:.4}, R {:.4}, S {:.4}, T {:.4})",
            last.loss_total, last.loss_image, last.loss_region, last.loss_inter_student, last.loss_inter_teacher
        );
        if let Some(dir) = out_dir {
            let done = epoch + 1;
            let due = (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.epochs;
            if due {
                state.save(&dir.join(checkpoint_name(done)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join(METRICS_FILE);
        fs::write(&p, metrics_csv(&metrics)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(FitOutput { state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(ema_schedule(0, 100, 0.996, 1.0), 0.996);
        assert_eq!(ema_schedule(100, 100, 0.996, 1.0), 1.0);
        assert!((ema_schedule(50, 100, 0.996, 1.0) - 0.998).abs() < 1e-15);
        assert_eq!(ema_schedule(150, 100, 0.996, 1.0), 1.0);
    }

    #[test]
    fn ema_update_examples() {
        let one = |v: f64| ParamSet([("x".to_string(), Tensor::vector(&[v]))].into_iter().collect());
        let mut t = one(2.0);
        ema_update(&mut t, &one(4.0), 0.5).unwrap();
        assert_eq!(t, one(3.0));
        let mut t = one(2.0);
        ema_update(&mut t, &one(4.0), 1.0).unwrap();
        assert_eq!(t, one(2.0));
        ema_update(&mut t, &one(4.0), 0.0).unwrap();
        assert_eq!(t, one(4.0));
        let other = ParamSet([("y".to_string(), Tensor::vector(&[1.0]))].into_iter().collect());
        assert!(matches!(
            ema_update(&mut t, &other, 0.5),
            Err(Error::StateCorruption(_))
        ));
    }

    fn matrix_param(v: f64) -> ParamSet {
        ParamSet(
            [
                ("w".to_string(), Tensor::full([1, 1], v)),
                ("b".to_string(), Tensor::vector(&[v])),
            ]
            .into_iter()
            .collect(),
        )
    }

    #[test]
    fn adamw_zero_gradients() {
        let mut p = matrix_param(2.0);
        let mut opt = AdamW::new(&p);
        let zero = p.zeros_like();
        opt.step(&mut p, &zero, 0.1, 0.0).unwrap();
        assert_eq!(p, matrix_param(2.0));
        opt.step(&mut p, &zero, 0.1, 0.5).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 2.0 * (1.0 - 0.1 * 0.5));
        // biases are decay-exempt
        assert_eq!(p.get("b").unwrap().item(), 2.0);
    }

    #[test]
    fn adamw_refuses_non_finite() {
        let mut p = matrix_param(1.0);
        let mut opt = AdamW::new(&p);
        let bad = matrix_param(f64::NAN);
        assert!(matches!(opt.step(&mut p, &bad, 0.1, 0.0), Err(Error::NonFinite(_))));
        assert_eq!(p, matrix_param(1.0));
        assert_eq!(opt.steps, 0);
    }

    #[test]
    fn learning_rate_warms_up_linearly() {
        let cfg = RunConfig::default();
        assert_eq!(learning_rate(&cfg, 0, 10), 0.0);
        assert!((learning_rate(&cfg, 50, 10) - 2.5e-4).abs() < 1e-18);
        assert_eq!(learning_rate(&cfg, 100, 10), 5e-4);
        assert_eq!(learning_rate(&cfg, 1000, 10), 5e-4);
    }

    #[test]
    fn divisibility_error() {
        let cfg = RunConfig {
            instance_px: 5,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
