//! Numerical verification of the objective's gradients and the glyph
//! gradient-concentration diagnostic.

use std::fmt;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor};
use crate::data::{derive_seed, sample_geometry, Dataset};
use crate::encoder::{Level, ParamSet};
use crate::error::{Error, Result};
use crate::objective::{build_objective, constant_inputs, pixel_inputs, CropBatch, Objective, ObjectiveConfig};
use crate::trainer::RunConfig;

/// Largest relative error a passing gradient check may show.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const FD_EPS: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`,
/// so entries whose gradient is at round-off level compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// The loss a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Total,
    Image,
    Region,
    InterStudent,
    InterTeacher,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Total,
        LossTerm::Image,
        LossTerm::Region,
        LossTerm::InterStudent,
        LossTerm::InterTeacher,
    ];

    fn pick(self, obj: &Objective) -> crate::autodiff::Var {
        match self {
            LossTerm::Total => obj.total,
            LossTerm::Image => obj.image,
            LossTerm::Region => obj.region,
            LossTerm::InterStudent => obj.inter_student,
            LossTerm::InterTeacher => obj.inter_teacher,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest relative error per student parameter tensor.
    pub per_parameter: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Set when a value was not finite; names the parameter.
    pub failure: Option<String>,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, err) in &self.per_parameter {
            writeln!(f, "{name:<24} {err:.3e}")?;
        }
        if let Some(why) = &self.failure {
            writeln!(f, "failure: {why}")?;
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {GRAD_TOLERANCE:.0e}): {}",
            self.max_rel_error,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// The small configuration gradient checks run on: 16px images, 12px image
/// crops and 8px region crops of 4px instances, two of each, D = 8, K = 4,
/// one attention block.
pub fn toy_config() -> RunConfig {
    RunConfig {
        n_image_crops: 2,
        n_region_crops: 2,
        image_crop_px: 12,
        region_crop_px: 8,
        instance_px: 4,
        hidden_dim: 8,
        embed_dim: 8,
        head_dim: 4,
        attention_blocks: 1,
        batch_size: 2,
        ..RunConfig::default()
    }
}

/// Fixed inputs of a gradient check: images, crops, teacher and center.
struct Problem {
    images: Vec<Tensor>,
    geometry: Vec<Vec<crate::data::CropGeometry>>,
    student: ParamSet,
    teacher: ParamSet,
    center: Vec<f64>,
}

impl Problem {
    fn new(cfg: &RunConfig, image_px: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x6763]));
        let crops = cfg.crops();
        let images: Vec<Tensor> = (0..cfg.batch_size)
            .map(|_| Tensor::from_fn([image_px, image_px, 3], |_| rng.gen_range(0.0f32..1.0) as f64))
            .collect();
        let geometry = images
            .iter()
            .map(|_| sample_geometry(image_px, image_px, &crops, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let student = cfg.encoder().init_params(derive_seed(&[seed, 0x696e_6974]));
        let noise = Normal::new(0.0, 0.05).expect("valid std");
        let mut teacher = student.clone();
        for (_, t) in teacher.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        let center = (0..cfg.head_dim).map(|_| noise.sample(&mut rng) * 2.0).collect();
        Ok(Problem {
            images,
            geometry,
            student,
            teacher,
            center,
        })
    }

    fn batch(&self) -> CropBatch<'_> {
        CropBatch {
            images: self.images.iter().collect(),
            geometry: self.geometry.clone(),
        }
    }

    /// Loss value and, with `grads`, the analytic student gradients.
    fn evaluate(
        &self,
        student: &ParamSet,
        cfg: &RunConfig,
        term: LossTerm,
        fault: Option<(&'static str, f64)>,
        grads: bool,
    ) -> Result<(f64, Option<ParamSet>)> {
        let batch = self.batch();
        let mut tape = Tape::new();
        if let Some((op, factor)) = fault {
            tape.inject_backward_fault(op, factor);
        }
        let bound = student.bind(&mut tape, true);
        let teacher = self.teacher.bind(&mut tape, false);
        let inputs = constant_inputs(&mut tape, &batch, cfg.instance_px)?;
        let obj = build_objective(
            &mut tape,
            &cfg.objective(),
            &cfg.encoder(),
            &bound,
            &teacher,
            &batch.slots(),
            &inputs,
            batch.len(),
            &self.center,
        )?;
        let loss = term.pick(&obj);
        let value = tape.value(loss).item();
        if !grads {
            return Ok((value, None));
        }
        let mut g = tape.backward(loss)?;
        let mut out = student.zeros_like();
        for (name, t) in out.iter_mut() {
            if let Some(v) = g.take(bound.var(name)?) {
                *t = v;
            }
        }
        Ok((value, Some(out)))
    }
}

/// Central-difference check of every student parameter against the
/// analytic gradient of the full objective.
pub fn grad_check(cfg: &RunConfig, seed: u64) -> Result<GradReport> {
    grad_check_term(cfg, seed, LossTerm::Total, None)
}

/// As [`grad_check`] for one loss term, optionally with a backward rule
/// scaled by `fault = (op, factor)` to exercise the failure path.
pub fn grad_check_term(
    cfg: &RunConfig,
    seed: u64,
    term: LossTerm,
    fault: Option<(&'static str, f64)>,
) -> Result<GradReport> {
    let image_px = cfg.image_crop_px.max(cfg.region_crop_px) + 4;
    let problem = Problem::new(cfg, image_px, seed)?;
    let (_, analytic) = problem.evaluate(&problem.student, cfg, term, fault, true)?;
    let analytic = analytic.expect("gradients requested");

    let mut per_parameter = Vec::new();
    let mut failure = None;
    let mut max_rel_error: f64 = 0.0;
    let mut probe = problem.student.clone();
    'outer: for (name, grad) in analytic.iter() {
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let original = probe.0[name].data()[i];
            probe.0.get_mut(name).expect("same layout").data_mut()[i] = original + FD_EPS;
            let (plus, _) = problem.evaluate(&probe, cfg, term, None, false)?;
            probe.0.get_mut(name).expect("same layout").data_mut()[i] = original - FD_EPS;
            let (minus, _) = problem.evaluate(&probe, cfg, term, None, false)?;
            probe.0.get_mut(name).expect("same layout").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let a = grad.data()[i];
            if !a.is_finite() || !numeric.is_finite() {
                failure = Some(format!("{name}[{i}]: analytic {a}, numeric {numeric}"));
                per_parameter.push((name.clone(), f64::INFINITY));
                max_rel_error = f64::INFINITY;
                break 'outer;
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
        max_rel_error = max_rel_error.max(worst);
        per_parameter.push((name.clone(), worst));
    }
    Ok(GradReport {
        per_parameter,
        max_rel_error,
        passed: failure.is_none() && max_rel_error < GRAD_TOLERANCE,
        failure,
    })
}

/// Which objective the concentration diagnostic differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConcentrationObjective {
    /// Image-level term only, MIL pooling off.
    ImageOnly,
    /// The full objective of the run configuration.
    Cmd,
}

impl std::str::FromStr for ConcentrationObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_only" => Ok(ConcentrationObjective::ImageOnly),
            "cmd" => Ok(ConcentrationObjective::Cmd),
            _ => Err(Error::config(format!(
                "unknown objective {s:?}, expected image_only or cmd"
            ))),
        }
    }
}

impl ConcentrationObjective {
    pub fn as_str(self) -> &'static str {
        match self {
            ConcentrationObjective::ImageOnly => "image_only",
            ConcentrationObjective::Cmd => "cmd",
        }
    }
}

/// Mean share of absolute input-gradient mass falling inside the glyph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConcentrationReport {
    pub glyph_fraction_baseline: Option<f64>,
    pub glyph_fraction_cmd: Option<f64>,
    /// Samples with a non-zero input gradient, per evaluated objective.
    pub samples: usize,
}

impl ConcentrationReport {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        format!(
            "glyph_fraction_baseline,glyph_fraction_cmd,samples\n{},{},{}\n",
            cell(self.glyph_fraction_baseline),
            cell(self.glyph_fraction_cmd),
            self.samples
        )
    }
}

impl fmt::Display for ConcentrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
        write!(
            f,
            "glyph gradient fraction: image_only {}, cmd {} ({} samples)",
            cell(self.glyph_fraction_baseline),
            cell(self.glyph_fraction_cmd),
            self.samples
        )
    }
}

/// One image with its glyph mask (`H*W*3` entries in `[0, 1]`).
#[derive(Clone, Copy, Debug)]
pub struct MaskedSample<'a> {
    pub pixels: &'a Tensor,
    pub mask: Option<&'a [f64]>,
}

/// Network state the diagnostic differentiates through.
#[derive(Clone, Copy, Debug)]
pub struct Nets<'a> {
    pub student: &'a ParamSet,
    pub teacher: &'a ParamSet,
    pub center: &'a [f64],
}

/// Per-sample glyph fractions of one objective. `cfg` is the full run
/// configuration; its crop settings (including region crops) fix the views,
/// drawn from `seed` and the sample position, so two objectives evaluated
/// with the same seed see identical image-level crops. Samples whose input
/// gradient vanishes are skipped.
pub fn glyph_fractions(
    nets: Nets,
    samples: &[MaskedSample],
    cfg: &RunConfig,
    objective: ConcentrationObjective,
    seed: u64,
) -> Result<Vec<f64>> {
    let crops = crate::data::CropConfig {
        n_region_crops: cfg.n_region_crops,
        ..cfg.crops()
    };
    let ocfg: ObjectiveConfig = match objective {
        ConcentrationObjective::ImageOnly => cfg.objective().image_only(),
        ConcentrationObjective::Cmd => cfg.objective(),
    };
    let mut out = Vec::with_capacity(samples.len());
    for (n, sample) in samples.iter().enumerate() {
        let mask = sample
            .mask
            .ok_or_else(|| Error::usage(format!("sample {n} has no glyph mask")))?;
        if mask.len() != sample.pixels.len() {
            return Err(Error::usage(format!(
                "sample {n}: mask has {} entries for {} pixels",
                mask.len(),
                sample.pixels.len()
            )));
        }
        let shape = sample.pixels.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, n as u64]));
        let mut geometry = sample_geometry(shape[0], shape[1], &crops, &mut rng)?;
        if !ocfg.region_loss {
            geometry.retain(|g| g.level == Level::Image);
        }
        let batch = CropBatch {
            images: vec![sample.pixels],
            geometry: vec![geometry],
        };
        let mut tape = Tape::new();
        let student = nets.student.bind(&mut tape, true);
        let teacher = nets.teacher.bind(&mut tape, false);
        let (leaf, inputs) = pixel_inputs(&mut tape, &batch, cfg.instance_px)?;
        let obj = build_objective(
            &mut tape,
            &ocfg,
            &cfg.encoder(),
            &student,
            &teacher,
            &batch.slots(),
            &inputs,
            1,
            nets.center,
        )?;
        let grads = tape.backward(obj.total)?;
        let Some(g) = grads.get(leaf) else { continue };
        let (mut inside, mut total) = (0.0, 0.0);
        for (&gv, &m) in g.data().iter().zip(mask) {
            inside += gv.abs() * m;
            total += gv.abs();
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("input gradient of sample {n}")));
        }
        if total > 0.0 {
            out.push(inside / total);
        } else {
            warn!("sample {n}: input gradient is zero, skipped");
        }
    }
    Ok(out)
}

/// Glyph gradient concentration of one objective over the records
/// `indices` of `data`.
pub fn gradient_concentration(
    nets: Nets,
    data: &Dataset,
    indices: &[usize],
    cfg: &RunConfig,
    objective: ConcentrationObjective,
    seed: u64,
) -> Result<ConcentrationReport> {
    let masks: Vec<Vec<f64>> = indices.iter().map(|&i| data.records[i].glyph_mask()).collect();
    let samples: Vec<MaskedSample> = indices
        .iter()
        .zip(&masks)
        .map(|(&i, m)| MaskedSample {
            pixels: &data.records[i].pixels,
            mask: Some(m),
        })
        .collect();
    let fractions = glyph_fractions(nets, &samples, cfg, objective, seed)?;
    if fractions.is_empty() {
        return Err(Error::usage("no sample produced a non-zero input gradient"));
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let mut report = ConcentrationReport {
        samples: fractions.len(),
        ..ConcentrationReport::default()
    };
    match objective {
        ConcentrationObjective::ImageOnly => report.glyph_fraction_baseline = Some(mean),
        ConcentrationObjective::Cmd => report.glyph_fraction_cmd = Some(mean),
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_full_objective_passes() {
        let report = grad_check(&toy_config(), 0).unwrap();
        assert!(report.passed, "{report}");
        assert!(report.per_parameter.iter().all(|(_, e)| *e >= 0.0));
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let report = grad_check_term(&toy_config(), 0, LossTerm::Total, Some(("gelu", 1.5))).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn zero_head_gives_zero_gradients_and_passes() {
        let cfg = toy_config();
        let problem = Problem::new(&cfg, 16, 3).unwrap();
        let mut student = problem.student.clone();
        for (name, t) in student.iter_mut() {
            if name.starts_with("head") {
                t.data_mut().fill(0.0);
            }
        }
        let (_, g) = problem.evaluate(&student, &cfg, LossTerm::Image, None, true).unwrap();
        let g = g.unwrap();
        // uniform outputs everywhere, so nothing below the head matters
        for (name, t) in g.iter() {
            if !name.starts_with("head") {
                assert_eq!(t.max_abs(), 0.0, "{name}");
            }
        }
        let mut probe = student.clone();
        probe.0.get_mut("enc.w1").unwrap().data_mut()[0] += FD_EPS;
        let (plus, _) = problem.evaluate(&probe, &cfg, LossTerm::Image, None, false).unwrap();
        probe.0.get_mut("enc.w1").unwrap().data_mut()[0] -= 2.0 * FD_EPS;
        let (minus, _) = problem.evaluate(&probe, &cfg, LossTerm::Image, None, false).unwrap();
        assert_eq!(plus, minus);
    }

    #[test]
    fn whole_image_mask_gives_fraction_one() {
        let cfg = RunConfig {
            image_crop_px: 16,
            region_crop_px: 8,
            instance_px: 8,
            hidden_dim: 8,
            embed_dim: 8,
            head_dim: 8,
            ..RunConfig::default()
        };
        let params = cfg.encoder().init_params(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn([24, 24, 3], |_| rng.gen_range(0.0..1.0));
        let mask = vec![1.0; img.len()];
        let nets = Nets {
            student: &params,
            teacher: &params,
            center: &[0.0; 8],
        };
        let sample = [MaskedSample {
            pixels: &img,
            mask: Some(&mask),
        }];
        for obj in [ConcentrationObjective::ImageOnly, ConcentrationObjective::Cmd] {
            let f = glyph_fractions(nets, &sample, &cfg, obj, 0).unwrap();
            assert_eq!(f.len(), 1);
            assert!((f[0] - 1.0).abs() < 1e-12);
        }
        let missing = [MaskedSample {
            pixels: &img,
            mask: None,
        }];
        assert!(matches!(
            glyph_fractions(nets, &missing, &cfg, ConcentrationObjective::Cmd, 0),
            Err(Error::Usage(_))
        ));
    }
}
