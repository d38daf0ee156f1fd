//! Synthetic fine-grained images and the multi-crop pipeline.
//!
//! Every image is a textured background, chosen by its coarse label, with a
//! small high-contrast glyph pasted at a uniformly random position. Fine
//! classes share everything except the glyph pattern. Every pattern is a
//! fine texture with half ink, so only the arrangement of the glyph tells two
//! fine classes apart, and any part of a glyph already shows its class.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{SparseMap, Tensor};
use crate::config::{parse_kv, KvWriter};
use crate::encoder::{instance_count, CropView, Level};
use crate::error::{Error, Result};
use crate::losses::CropSlot;

const DATASET_MAGIC: &[u8; 4] = b"CMDD";
const DATASET_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Folds several integers into one well-mixed seed (splitmix64 steps).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        state = splitmix(state ^ p);
    }
    state
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_coarse_backgrounds: usize,
    pub n_fine_classes: usize,
    pub samples_per_class: usize,
    pub image_px: usize,
    pub glyph_px: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_coarse_backgrounds: 2,
            n_fine_classes: 8,
            samples_per_class: 200,
            image_px: 64,
            glyph_px: 8,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse_backgrounds == 0 || self.n_fine_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::config("class and sample counts must be positive"));
        }
        if self.glyph_px < 2 {
            return Err(Error::config(format!(
                "glyph_px must be at least 2, got {}",
                self.glyph_px
            )));
        }
        if self.glyph_px > self.image_px {
            return Err(Error::config(format!(
                "glyph of {}px does not fit a {}px image",
                self.glyph_px, self.image_px
            )));
        }
        if self.image_px > u16::MAX as usize {
            return Err(Error::config(format!("image_px {} exceeds 65535", self.image_px)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if self.glyph_px < 4 {
            return Err(Error::config(format!(
                "glyph_px must be at least 4, got {}",
                self.glyph_px
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_fine_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Plain-text `key = value` manifest.
    pub fn to_manifest(&self, records: usize) -> String {
        let mut w = KvWriter::default();
        self.write_kv(&mut w);
        w.push("records", records);
        w.finish()
    }

    pub(crate) fn write_kv(&self, w: &mut KvWriter) {
        w.push("n_coarse_backgrounds", self.n_coarse_backgrounds);
        w.push("n_fine_classes", self.n_fine_classes);
        w.push("samples_per_class", self.samples_per_class);
        w.push("image_px", self.image_px);
        w.push("glyph_px", self.glyph_px);
        w.push("noise_std", self.noise_std);
        w.push("data_seed", self.seed);
    }

    /// Applies one `key = value` entry; returns false for keys it does not own.
    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_coarse_backgrounds" => self.n_coarse_backgrounds = parse_value(key, value)?,
            "n_fine_classes" => self.n_fine_classes = parse_value(key, value)?,
            "samples_per_class" => self.samples_per_class = parse_value(key, value)?,
            "image_px" => self.image_px = parse_value(key, value)?,
            "glyph_px" => self.glyph_px = parse_value(key, value)?,
            "noise_std" => self.noise_std = parse_value(key, value)?,
            "data_seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses `key = value` lines on top of the defaults. Unknown keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for (key, value) in parse_kv(text)? {
            if !spec.set(&key, &value)? {
                return Err(Error::config(format!("unknown data key {key:?}")));
            }
        }
        Ok(spec)
    }

    pub fn from_manifest(text: &str) -> Result<(Self, usize)> {
        let mut spec = SyntheticSpec::default();
        let mut records = None;
        for (key, value) in parse_kv(text)? {
            if key == "records" {
                records = Some(parse_value(&key, &value)?);
            } else if !spec.set(&key, &value)? {
                return Err(Error::config(format!("unknown manifest key {key:?}")));
            }
        }
        let records = records.ok_or_else(|| Error::config("manifest lacks a records entry"))?;
        Ok((spec, records))
    }
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

/// Axis-aligned glyph rectangle in image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlyphBox {
    pub x: u16,
    pub y: u16,
    pub w: u16,
    pub h: u16,
}

impl GlyphBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (gx, gy) = (self.x as usize, self.y as usize);
        (gy..gy + self.h as usize).contains(&y) && (gx..gx + self.w as usize).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub fine_label: u32,
    pub coarse_label: u32,
    pub glyph: GlyphBox,
    /// `H x W x 3`, values exactly representable as `f32`.
    pub pixels: Tensor,
}

impl Record {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// 1 on every pixel channel inside the glyph box, 0 elsewhere.
    pub fn glyph_mask(&self) -> Vec<f64> {
        let (h, w) = (self.height(), self.width());
        let mut mask = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                if self.glyph.contains(y, x) {
                    mask[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(1.0);
                }
            }
        }
        mask
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<Record>,
}

/// Glyph textures by fine class: ink at glyph pixel `(y, x)`. Stripes of
/// two periods in both orientations, checkers of two scales, a diagonal
/// hatch and flat gray; all hold half ink on glyphs whose side is a multiple
/// of 4. No texture is the mirror image of another, so horizontal flips
/// never turn one class into another.
const TEXTURES: [fn(usize, usize) -> f64; 8] = [
    |y, _| (y % 2 == 0) as u8 as f64,
    |y, _| (y % 4 < 2) as u8 as f64,
    |_, x| (x % 2 == 0) as u8 as f64,
    |_, x| (x % 4 < 2) as u8 as f64,
    |y, x| ((x + y) % 2 == 0) as u8 as f64,
    |y, x| ((x / 2 + y / 2) % 2 == 0) as u8 as f64,
    |y, x| ((x + y) % 4 < 2) as u8 as f64,
    |_, _| 0.5,
];

/// Class-specific glyph patterns and coarse textures for one spec.
pub struct Renderer {
    spec: SyntheticSpec,
    patterns: Vec<Vec<f64>>,
}

impl Renderer {
    /// Classes beyond the texture table get random half-ink pixel patterns.
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let g = spec.glyph_px;
        let mirror = |p: &[f64]| -> Vec<f64> { (0..g * g).map(|i| p[(i / g) * g + g - 1 - i % g]).collect() };
        let mut patterns: Vec<Vec<f64>> = TEXTURES
            .iter()
            .take(spec.n_fine_classes)
            .map(|f| (0..g * g).map(|i| f(i / g, i % g)).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, 0x6c79_7068]));
        while patterns.len() < spec.n_fine_classes {
            let mut p: Vec<f64> = (0..g * g).map(|i| (i < g * g / 2) as u8 as f64).collect();
            p.shuffle(&mut rng);
            let m = mirror(&p);
            if patterns.iter().all(|q| *q != p && *q != m) {
                patterns.push(p);
            }
        }
        Ok(Renderer {
            spec: spec.clone(),
            patterns,
        })
    }

    /// Ink of every glyph pixel, row-major.
    pub fn pattern(&self, fine: usize) -> &[f64] {
        &self.patterns[fine]
    }

    /// Draws one sample. `rng` supplies only the per-sample nuisance: smooth
    /// background variation and pixel noise, both scaled by `noise_std`.
    pub fn render(
        &self,
        fine: usize,
        coarse: usize,
        glyph_x: usize,
        glyph_y: usize,
        rng: &mut impl Rng,
    ) -> Result<Record> {
        let s = &self.spec;
        if fine >= s.n_fine_classes || coarse >= s.n_coarse_backgrounds {
            return Err(Error::usage(format!("class ({fine}, {coarse}) out of range")));
        }
        if glyph_x + s.glyph_px > s.image_px || glyph_y + s.glyph_px > s.image_px {
            return Err(Error::usage(format!(
                "glyph at ({glyph_x}, {glyph_y}) leaves the image"
            )));
        }
        let n = s.image_px;
        let angle = PI * coarse as f64 / s.n_coarse_backgrounds as f64;
        let freq = 2.0 + (coarse % 3) as f64;
        let hue = 2.0 * PI * coarse as f64 / s.n_coarse_backgrounds as f64;
        let base: [f64; 3] = [0, 1, 2].map(|c| 0.5 + 0.15 * (hue + 2.0 * PI * c as f64 / 3.0).cos());
        let (dir_y, dir_x) = (angle.sin(), angle.cos());

        let noise = Normal::new(0.0, s.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        // smooth nuisance field: one random plane wave per channel
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(-PI..PI),
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(0.0..2.0 * PI),
                    2.0 * s.noise_std * rng.gen_range(0.0..1.0),
                )
            })
            .collect();

        let pattern = &self.patterns[fine];
        let mut px = vec![0.0; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                let (fy, fx) = (y as f64 / n as f64, x as f64 / n as f64);
                let phase = 2.0 * PI * freq * (fx * dir_x + fy * dir_y);
                let glyph =
                    if (glyph_y..glyph_y + s.glyph_px).contains(&y) && (glyph_x..glyph_x + s.glyph_px).contains(&x) {
                        Some(pattern[(y - glyph_y) * s.glyph_px + x - glyph_x])
                    } else {
                        None
                    };
                for c in 0..3 {
                    let v = match glyph {
                        Some(ink) => ink,
                        None => {
                            let (theta, f, ph, amp) = waves[c];
                            let smooth = amp * (2.0 * PI * f * (fx * theta.cos() + fy * theta.sin()) + ph).sin();
                            base[c] + 0.2 * (phase + c as f64).sin() + smooth
                        }
                    };
                    let v = if s.noise_std > 0.0 { v + noise.sample(rng) } else { v };
                    px[(y * n + x) * 3 + c] = v as f32 as f64;
                }
            }
        }
        Ok(Record {
            fine_label: fine as u32,
            coarse_label: coarse as u32,
            glyph: GlyphBox {
                x: glyph_x as u16,
                y: glyph_y as u16,
                w: s.glyph_px as u16,
                h: s.glyph_px as u16,
            },
            pixels: Tensor::new([n, n, 3], px)?,
        })
    }
}

/// Generates the full dataset. Record `i` has fine label `i % n_fine`.
/// Within a fine class the coarse label advances every four ordinals, so
/// coarse labels are independent of both the fine label and the split.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let renderer = Renderer::new(spec)?;
    let records = (0..spec.len())
        .map(|i| {
            let fine = i % spec.n_fine_classes;
            let ordinal = i / spec.n_fine_classes;
            let coarse = (ordinal / 4) % spec.n_coarse_backgrounds;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, i as u64]));
            let span = spec.image_px - spec.glyph_px + 1;
            let (gx, gy) = (rng.gen_range(0..span), rng.gen_range(0..span));
            renderer.render(fine, coarse, gx, gy, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { records })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Every fourth sample of each fine class (ordinal 3, 7, ...) is held out.
    pub fn splits(&self) -> Vec<Split> {
        let mut seen = std::collections::HashMap::new();
        self.records
            .iter()
            .map(|r| {
                let ordinal = seen.entry(r.fine_label).or_insert(0usize);
                let split = if *ordinal % 4 == 3 { Split::Test } else { Split::Train };
                *ordinal += 1;
                split
            })
            .collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits()
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fine_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.fine_label as usize).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let (h, w) = (r.height(), r.width());
            if h > u16::MAX as usize || w > u16::MAX as usize {
                return Err(Error::usage(format!("image {h}x{w} too large for the container")));
            }
            out.extend_from_slice(&r.fine_label.to_le_bytes());
            out.extend_from_slice(&r.coarse_label.to_le_bytes());
            for v in [r.glyph.x, r.glyph.y, r.glyph.w, r.glyph.h, h as u16, w as u16] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in r.pixels.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes, "dataset");
        if rd.take(4)? != DATASET_MAGIC {
            return Err(rd.error(0, "bad magic, not a dataset container"));
        }
        let version = rd.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                what: "dataset",
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let count = rd.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let fine_label = rd.u32()?;
            let coarse_label = rd.u32()?;
            let mut f = [0u16; 6];
            for v in &mut f {
                *v = rd.u16()?;
            }
            let (h, w) = (f[4] as usize, f[5] as usize);
            let at = rd.offset();
            let data = rd.f32s(h * w * 3)?;
            let pixels = Tensor::new([h, w, 3], data).map_err(|e| rd.error(at, &e.to_string()))?;
            records.push(Record {
                fine_label,
                coarse_label,
                glyph: GlyphBox {
                    x: f[0],
                    y: f[1],
                    w: f[2],
                    h: f[3],
                },
                pixels,
            });
        }
        if rd.offset() != bytes.len() {
            return Err(rd.error(rd.offset(), "trailing bytes after last record"));
        }
        Ok(Dataset { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Writes `dataset.bin` and `manifest.txt` into `dir`.
    pub fn write_dir(&self, spec: &SyntheticSpec, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save(&dir.join(DATASET_FILE))?;
        let manifest = dir.join(MANIFEST_FILE);
        fs::write(&manifest, spec.to_manifest(self.len())).map_err(|e| Error::io(&manifest, e))
    }

    /// Reads a directory written by [`Dataset::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<(SyntheticSpec, Self)> {
        let manifest = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let (spec, records) = SyntheticSpec::from_manifest(&text)?;
        let data = Self::load(&dir.join(DATASET_FILE))?;
        if data.len() != records {
            return Err(Error::config(format!(
                "manifest lists {records} records, container holds {}",
                data.len()
            )));
        }
        Ok((spec, data))
    }
}

/// Little-endian cursor with offset-carrying errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        ByteReader { bytes, pos: 0, what }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn error(&self, offset: usize, detail: &str) -> Error {
        Error::Format {
            what: self.what,
            offset: offset as u64,
            detail: detail.to_string(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                &format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.error(self.pos, "length overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

/// Crop counts, sizes and area ranges for [`multicrop`].
#[derive(Clone, Debug, PartialEq)]
pub struct CropConfig {
    pub n_image_crops: usize,
    pub n_region_crops: usize,
    pub image_crop_px: usize,
    pub region_crop_px: usize,
    pub instance_px: usize,
    pub image_area: (f64, f64),
    pub region_area: (f64, f64),
    /// Without augmentation every crop is the whole image, unflipped and
    /// unjittered.
    pub augment: bool,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            n_image_crops: 2,
            n_region_crops: 8,
            image_crop_px: 56,
            region_crop_px: 24,
            instance_px: 8,
            image_area: (0.4, 1.0),
            region_area: (0.05, 0.4),
            augment: true,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        instance_count(self.image_crop_px, self.image_crop_px, self.instance_px)?;
        if self.n_region_crops > 0 {
            instance_count(self.region_crop_px, self.region_crop_px, self.instance_px)?;
        }
        for (name, (lo, hi)) in [("image_area", self.image_area), ("region_area", self.region_area)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::config(format!(
                    "{name} must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> Vec<CropSlot> {
        (0..self.n_image_crops)
            .map(|i| CropSlot {
                level: Level::Image,
                augmentation_index: (i % 2) as u8,
            })
            .chain((0..self.n_region_crops).map(|r| CropSlot {
                level: Level::Region,
                augmentation_index: (r % 2) as u8,
            }))
            .collect()
    }

    pub fn crop_px(&self, level: Level) -> usize {
        match level {
            Level::Image => self.image_crop_px,
            Level::Region => self.region_crop_px,
        }
    }
}

/// Photometric jitter `v -> contrast * v + brightness`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub contrast: f64,
    pub brightness: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        contrast: 1.0,
        brightness: 0.0,
    };
}

/// Where a crop comes from: a source rectangle of the (flipped, jittered)
/// image, resampled bilinearly to `out_px x out_px`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub level: Level,
    pub augmentation_index: u8,
    pub flip: bool,
    pub jitter: Jitter,
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
    pub out_px: usize,
}

impl CropGeometry {
    /// Calls `f(out_pixel, src_pixel, weight)` for every bilinear tap, where
    /// pixels are flat `y * W + x` indices and weights exclude jitter.
    pub fn for_each_tap(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, f64)) {
        let n = self.out_px;
        let axis = |start: f64, len: f64, i: usize, limit: usize| -> (usize, usize, f64) {
            let s = (start + (i as f64 + 0.5) * len / n as f64 - 0.5).clamp(0.0, (limit - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(limit - 1);
            (lo, hi, s - lo as f64)
        };
        let cols: Vec<(usize, usize, f64)> = (0..n).map(|j| axis(self.left, self.width, j, w)).collect();
        for i in 0..n {
            let (y0, y1, fy) = axis(self.top, self.height, i, h);
            for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                let o = i * n + j;
                let col = |x: usize| if self.flip { w - 1 - x } else { x };
                for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let wt = wy * wx;
                        if wt != 0.0 {
                            f(o, y * w + col(x), wt);
                        }
                    }
                }
            }
        }
    }

    /// Renders into `out` (`out_px * out_px * 3` values).
    pub fn render_into(&self, image: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let Jitter { contrast, brightness } = self.jitter;
        out.fill(brightness);
        self.for_each_tap(h, w, |o, src, wt| {
            let wt = wt * contrast;
            for c in 0..3 {
                out[o * 3 + c] += wt * image[src * 3 + c];
            }
        });
    }

    pub fn render(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = check_image(image)?;
        let n = self.out_px;
        let mut out = vec![0.0; n * n * 3];
        self.render_into(image.data(), h, w, &mut out);
        Tensor::new([n, n, 3], out)
    }

    /// The crop as a sparse linear map from `H x W x 3` image values to
    /// `out_px x out_px x 3` crop values, jitter included.
    pub fn sparse_map(&self, h: usize, w: usize) -> Result<SparseMap> {
        let n = self.out_px;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n * n];
        self.for_each_tap(h, w, |o, src, wt| rows[o].push((src, wt * self.jitter.contrast)));
        let mut b = SparseMap::builder(h * w * 3);
        for row in &rows {
            for c in 0..3 {
                b.push_row(row.iter().map(|&(s, wt)| (s * 3 + c, wt)), self.jitter.brightness);
            }
        }
        b.finish([n, n, 3])
    }

    /// Instances (row-major, `instance_px` tiles) that read any glyph pixel.
    pub fn instance_mask(&self, h: usize, w: usize, glyph: &GlyphBox, instance_px: usize) -> Result<Vec<bool>> {
        let t = instance_count(self.out_px, self.out_px, instance_px)?;
        let grid = self.out_px / instance_px;
        let mut hit = vec![false; t];
        self.for_each_tap(h, w, |o, src, _| {
            if glyph.contains(src / w, src % w) {
                let (i, j) = (o / self.out_px, o % self.out_px);
                hit[(i / instance_px) * grid + j / instance_px] = true;
            }
        });
        Ok(hit)
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("image", format!("expected HxWx3, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Samples an area fraction and aspect ratio, retrying until the rectangle
/// fits; falls back to a centered square.
fn random_rect(h: usize, w: usize, area: (f64, f64), rng: &mut impl Rng) -> (f64, f64, f64, f64) {
    let (hf, wf) = (h as f64, w as f64);
    let total = hf * wf;
    for _ in 0..10 {
        let a = total * rng.gen_range(area.0..=area.1);
        let r = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln()).exp();
        let (cw, ch) = ((a * r).sqrt(), (a / r).sqrt());
        if cw <= wf && ch <= hf {
            let top = rng.gen_range(0.0..=hf - ch);
            let left = rng.gen_range(0.0..=wf - cw);
            return (top, left, ch, cw);
        }
    }
    let side = (total * (area.0 + area.1) / 2.0).sqrt().min(hf.min(wf));
    ((hf - side) / 2.0, (wf - side) / 2.0, side, side)
}

/// Draws the crop geometry of one image: two augmentations (flip and jitter
/// each), image crops first, then region crops, alternating augmentations.
pub fn sample_geometry(h: usize, w: usize, cfg: &CropConfig, rng: &mut impl Rng) -> Result<Vec<CropGeometry>> {
    cfg.validate()?;
    let largest = cfg
        .image_crop_px
        .max(if cfg.n_region_crops > 0 { cfg.region_crop_px } else { 0 });
    if largest > h.min(w) {
        return Err(Error::config(format!("{largest}px crops exceed the {h}x{w} image")));
    }
    let augs: Vec<(bool, Jitter)> = (0..2)
        .map(|_| {
            if !cfg.augment {
                return (false, Jitter::IDENTITY);
            }
            let flip = rng.gen_bool(0.5);
            let contrast = rng.gen_range(0.6..=1.0);
            let brightness = rng.gen_range(0.0..=1.0 - contrast);
            (flip, Jitter { contrast, brightness })
        })
        .collect();
    cfg.slots()
        .into_iter()
        .map(|slot| {
            let (flip, jitter) = augs[slot.augmentation_index as usize];
            let (top, left, height, width) = if cfg.augment {
                let area = match slot.level {
                    Level::Image => cfg.image_area,
                    Level::Region => cfg.region_area,
                };
                random_rect(h, w, area, rng)
            } else {
                (0.0, 0.0, h as f64, w as f64)
            };
            Ok(CropGeometry {
                level: slot.level,
                augmentation_index: slot.augmentation_index,
                flip,
                jitter,
                top,
                left,
                height,
                width,
                out_px: cfg.crop_px(slot.level),
            })
        })
        .collect()
}

/// The deterministic full-image view used for feature extraction.
pub fn center_geometry(h: usize, w: usize, out_px: usize) -> CropGeometry {
    CropGeometry {
        level: Level::Image,
        augmentation_index: 0,
        flip: false,
        jitter: Jitter::IDENTITY,
        top: 0.0,
        left: 0.0,
        height: h as f64,
        width: w as f64,
        out_px,
    }
}

/// Crops of one image. Both nets see the same crop in the same slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub geometry: Vec<CropGeometry>,
    pub views: Vec<CropView>,
}

impl ViewSet {
    pub fn for_net(&self, _net: crate::mil::Net) -> &[CropView] {
        &self.views
    }

    pub fn slots(&self) -> Vec<CropSlot> {
        self.geometry
            .iter()
            .map(|g| CropSlot {
                level: g.level,
                augmentation_index: g.augmentation_index,
            })
            .collect()
    }
}

pub fn multicrop(image: &Tensor, cfg: &CropConfig, rng: &mut impl Rng) -> Result<ViewSet> {
    let (h, w) = check_image(image)?;
    let geometry = sample_geometry(h, w, cfg, rng)?;
    let views = geometry
        .iter()
        .map(|g| CropView::new(g.render(image)?, g.level, g.augmentation_index, cfg.instance_px))
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet { geometry, views })
}
