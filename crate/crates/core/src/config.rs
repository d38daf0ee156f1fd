//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. A run configuration
//! file may set any training field and any synthetic-data field; unknown
//! keys are rejected.

use std::fmt::Display;

use crate::data::{parse_value, SyntheticSpec};
use crate::error::{Error, Result};
use crate::trainer::RunConfig;

/// Splits `text` into `(key, value)` entries, rejecting duplicates.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(Error::config(format!("line {}: duplicate key {key:?}", n + 1)));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Accumulates `key = value` lines in insertion order.
#[derive(Default)]
pub struct KvWriter {
    text: String,
}

impl KvWriter {
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.text.push_str(&format!("{key} = {value}\n"));
    }

    pub fn finish(self) -> String {
        self.text
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!(
            "invalid value {value:?} for {key}, expected true or false"
        ))),
    }
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    let (lo, hi) = value
        .split_once(',')
        .ok_or_else(|| Error::config(format!("{key} expects two comma-separated numbers, got {value:?}")))?;
    Ok((parse_value(key, lo.trim())?, parse_value(key, hi.trim())?))
}

impl RunConfig {
    /// Applies one `key = value` entry; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_image_crops" => self.n_image_crops = parse_value(key, value)?,
            "n_region_crops" => self.n_region_crops = parse_value(key, value)?,
            "image_crop_px" => self.image_crop_px = parse_value(key, value)?,
            "region_crop_px" => self.region_crop_px = parse_value(key, value)?,
            "instance_px" => self.instance_px = parse_value(key, value)?,
            "image_area" => self.image_area = parse_range(key, value)?,
            "region_area" => self.region_area = parse_range(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "head_dim" => self.head_dim = parse_value(key, value)?,
            "attention_blocks" => self.attention_blocks = parse_value(key, value)?,
            "lambda1" => self.lambda1 = parse_value(key, value)?,
            "teacher_temperature" => self.teacher_temperature = parse_value(key, value)?,
            "student_temperature" => self.student_temperature = parse_value(key, value)?,
            "center_momentum" => self.center_momentum = parse_value(key, value)?,
            "ema_start" => self.ema_start = parse_value(key, value)?,
            "ema_end" => self.ema_end = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "mil_aggregation" => self.mil_aggregation = parse_bool(key, value)?,
            "region_crops" => self.region_crops = parse_bool(key, value)?,
            "inter_teacher" => self.inter_teacher = parse_bool(key, value)?,
            "inter_student" => self.inter_student = parse_bool(key, value)?,
            "pairing_mode" => self.pairing_mode = value.parse()?,
            "ce_direction" => self.ce_direction = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn write_kv(&self, w: &mut KvWriter) {
        w.push("n_image_crops", self.n_image_crops);
        w.push("n_region_crops", self.n_region_crops);
        w.push("image_crop_px", self.image_crop_px);
        w.push("region_crop_px", self.region_crop_px);
        w.push("instance_px", self.instance_px);
        w.push("image_area", format!("{}, {}", self.image_area.0, self.image_area.1));
        w.push("region_area", format!("{}, {}", self.region_area.0, self.region_area.1));
        w.push("augment", self.augment);
        w.push("hidden_dim", self.hidden_dim);
        w.push("embed_dim", self.embed_dim);
        w.push("head_dim", self.head_dim);
        w.push("attention_blocks", self.attention_blocks);
        w.push("lambda1", self.lambda1);
        w.push("teacher_temperature", self.teacher_temperature);
        w.push("student_temperature", self.student_temperature);
        w.push("center_momentum", self.center_momentum);
        w.push("ema_start", self.ema_start);
        w.push("ema_end", self.ema_end);
        w.push("learning_rate", self.learning_rate);
        w.push("weight_decay", self.weight_decay);
        w.push("warmup_epochs", self.warmup_epochs);
        w.push("epochs", self.epochs);
        w.push("batch_size", self.batch_size);
        w.push("checkpoint_every", self.checkpoint_every);
        w.push("mil_aggregation", self.mil_aggregation);
        w.push("region_crops", self.region_crops);
        w.push("inter_teacher", self.inter_teacher);
        w.push("inter_student", self.inter_student);
        w.push("pairing_mode", self.pairing_mode.as_str());
        w.push("ce_direction", self.ce_direction.as_str());
        w.push("seed", self.seed);
    }
}

/// A complete run description: training settings plus the synthetic data
/// they were tuned for.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub data: SyntheticSpec,
}

impl ConfigFile {
    /// Parses `text` on top of the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        for (key, value) in parse_kv(text)? {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.run.set(key, value)? || self.data.set(key, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown configuration key {key:?}")))
        }
    }

    /// Applies `CMD_SEED` from the environment, when set, to the run seed.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("CMD_SEED") {
            self.run.seed = parse_value("CMD_SEED", v.trim())?;
        }
        Ok(())
    }

    /// Every field, one `key = value` line each; parses back to `self`.
    pub fn resolved(&self) -> String {
        let mut w = KvWriter::default();
        self.run.write_kv(&mut w);
        self.data.write_kv(&mut w);
        w.finish()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_round_trip() {
        let mut cfg = ConfigFile::default();
        cfg.set("lambda1", "0.01").unwrap();
        cfg.set("pairing_mode", "all-cross").unwrap();
        cfg.set("region_area", "0.1, 0.3").unwrap();
        cfg.set("data_seed", "9").unwrap();
        assert_eq!(ConfigFile::parse(&cfg.resolved()).unwrap(), cfg);
    }

    #[test]
    fn bad_entries_are_rejected() {
        assert!(matches!(ConfigFile::parse("colour = red"), Err(Error::Config(_))));
        assert!(matches!(ConfigFile::parse("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(ConfigFile::parse("epochs"), Err(Error::Config(_))));
        assert!(matches!(
            ConfigFile::parse("epochs = 1\nepochs = 2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(ConfigFile::parse("augment = maybe"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = ConfigFile::parse("# a run\n\n  epochs = 3  \n").unwrap();
        assert_eq!(cfg.run.epochs, 3);
    }
}
