//! Instance extraction and the per-instance backbone.
//!
//! A crop is cut into non-overlapping `s x s` instances in row-major order.
//! Each instance is flattened (`y, x, channel` order) and mapped by a
//! two-layer perceptron to a `D`-dim embedding; optional self-attention
//! blocks then mix embeddings within a crop. A linear head turns every
//! embedding into `K` instance logits.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{SparseMap, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Image,
    Region,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Image => "image",
            Level::Region => "region",
        })
    }
}

/// One augmented crop, `H x W x 3` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CropView {
    pub pixels: Tensor,
    pub level: Level,
    pub augmentation_index: u8,
    pub instance_px: usize,
}

impl CropView {
    pub fn new(pixels: Tensor, level: Level, augmentation_index: u8, instance_px: usize) -> Result<Self> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::shape("crop", format!("expected HxWx3 pixels, got {shape:?}")));
        }
        instance_count(shape[0], shape[1], instance_px)?;
        Ok(CropView {
            pixels,
            level,
            augmentation_index,
            instance_px,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn instance_count(&self) -> usize {
        (self.height() / self.instance_px) * (self.width() / self.instance_px)
    }
}

/// Number of `s x s` instances tiling an `h x w` crop.
pub fn instance_count(h: usize, w: usize, s: usize) -> Result<usize> {
    if s == 0 || h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
        return Err(Error::config(format!(
            "instance size {s} must divide crop size {h}x{w}"
        )));
    }
    Ok((h / s) * (w / s))
}

/// Flat pixel index (into `H x W x 3`) of element `e` of instance `t`.
#[inline]
pub(crate) fn instance_source(w: usize, s: usize, t: usize, e: usize) -> usize {
    let grid_w = w / s;
    let (ty, tx) = (t / grid_w, t % grid_w);
    let (py, rest) = (e / (s * 3), e % (s * 3));
    let (px, c) = (rest / 3, rest % 3);
    ((ty * s + py) * w + tx * s + px) * 3 + c
}

/// Splits a crop into its `T` instances, one flattened row each: `[T, s*s*3]`.
pub fn patchify(crop: &CropView) -> Result<Tensor> {
    let (h, w, s) = (crop.height(), crop.width(), crop.instance_px);
    let t = instance_count(h, w, s)?;
    let p = s * s * 3;
    let src = crop.pixels.data();
    let data = (0..t * p).map(|i| src[instance_source(w, s, i / p, i % p)]).collect();
    Tensor::new([t, p], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(instances: &Tensor, h: usize, w: usize, s: usize) -> Result<Tensor> {
    let t = instance_count(h, w, s)?;
    let p = s * s * 3;
    if instances.shape() != [t, p] {
        return Err(Error::shape(
            "unpatchify",
            format!("expected [{t}, {p}], got {:?}", instances.shape()),
        ));
    }
    let mut out = vec![0.0; h * w * 3];
    for (i, &v) in instances.data().iter().enumerate() {
        out[instance_source(w, s, i / p, i % p)] = v;
    }
    Tensor::new([h, w, 3], out)
}

/// Gather map from `H x W x 3` pixels to `[T, s*s*3]` instance rows.
pub fn patch_map(h: usize, w: usize, s: usize) -> Result<SparseMap> {
    let t = instance_count(h, w, s)?;
    let p = s * s * 3;
    let mut b = SparseMap::builder(h * w * 3);
    for i in 0..t * p {
        b.push_row([(instance_source(w, s, i / p, i % p), 1.0)], 0.0);
    }
    b.finish([t, p])
}

/// Backbone and head dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub instance_px: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    /// Self-attention mixing blocks after the per-instance perceptron; 0 keeps
    /// every embedding a function of its own instance only.
    pub attention_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            instance_px: 8,
            hidden_dim: 64,
            embed_dim: 64,
            head_dim: 256,
            attention_blocks: 0,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.instance_px * self.instance_px * 3
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (p, h, d, k) = (self.input_dim(), self.hidden_dim, self.embed_dim, self.head_dim);
        let mut out = vec![
            ("enc.w1".to_string(), vec![p, h]),
            ("enc.b1".to_string(), vec![h]),
            ("enc.w2".to_string(), vec![h, d]),
            ("enc.b2".to_string(), vec![d]),
        ];
        for l in 0..self.attention_blocks {
            for m in ["wq", "wk", "wv", "wo"] {
                out.push((format!("attn{l}.{m}"), vec![d, d]));
            }
        }
        out.push(("head.w".to_string(), vec![d, k]));
        out.push(("head.b".to_string(), vec![k]));
        out
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization; a bias
    /// uses the fan-in of its weight.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fan_in = 1;
        let mut params = BTreeMap::new();
        for (name, shape) in self.layout() {
            if shape.len() == 2 {
                fan_in = shape[0];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
            params.insert(name, t);
        }
        ParamSet(params)
    }

    /// Checks that `params` has exactly this layout.
    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let layout = self.layout();
        if layout.len() != params.0.len() {
            return Err(Error::config(format!(
                "encoder expects {} tensors, parameters have {}",
                layout.len(),
                params.0.len()
            )));
        }
        for (name, shape) in layout {
            match params.0.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, encoder expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet(pub BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        )
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Places every tensor on `tape`, as gradient-tracked leaves or constants.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> BoundParams {
        let vars = self
            .0
            .iter()
            .map(|(n, t)| {
                let v = if tracked {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        BoundParams(vars)
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams(pub BTreeMap<String, Var>);

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }
}

/// Patch embeddings `R` for a stack of `bags` crops with `instances` rows
/// each: input `[bags*instances, s*s*3]`, output `[bags*instances, D]`.
pub fn encode(tape: &mut Tape, params: &BoundParams, cfg: &EncoderConfig, instances: Var, bags: usize) -> Result<Var> {
    let shape = tape.shape(instances).to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_dim() || bags == 0 || !shape[0].is_multiple_of(bags) {
        return Err(Error::shape(
            "encode",
            format!("{shape:?} for {bags} bags of {}-dim instances", cfg.input_dim()),
        ));
    }
    let per_bag = shape[0] / bags;
    let h = tape.matmul(instances, params.var("enc.w1")?)?;
    let h = tape.add_row(h, params.var("enc.b1")?)?;
    let h = tape.gelu(h);
    let r = tape.matmul(h, params.var("enc.w2")?)?;
    let mut r = tape.add_row(r, params.var("enc.b2")?)?;
    for l in 0..cfg.attention_blocks {
        r = attention_block(tape, params, cfg, l, r, bags, per_bag)?;
    }
    Ok(r)
}

fn attention_block(
    tape: &mut Tape,
    params: &BoundParams,
    cfg: &EncoderConfig,
    layer: usize,
    r: Var,
    bags: usize,
    per_bag: usize,
) -> Result<Var> {
    let d = cfg.embed_dim;
    let proj = |tape: &mut Tape, m: &str| -> Result<Var> {
        let w = params.var(&format!("attn{layer}.{m}"))?;
        let x = tape.matmul(r, w)?;
        tape.reshape(x, [bags, per_bag, d])
    };
    let q = proj(tape, "wq")?;
    let k = proj(tape, "wk")?;
    let v = proj(tape, "wv")?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_t(scores, 1.0)?;
    let mixed = tape.bmm(attn, v, false)?;
    let mixed = tape.reshape(mixed, [bags * per_bag, d])?;
    let out = tape.matmul(mixed, params.var(&format!("attn{layer}.wo"))?)?;
    tape.add(r, out)
}

/// Linear head applied row-wise: `R · W + b`.
pub fn head(tape: &mut Tape, params: &BoundParams, r: Var) -> Result<Var> {
    let w = params.var("head.w")?;
    let b = params.var("head.b")?;
    if tape.shape(r).last() != tape.shape(w).first() {
        return Err(Error::config(format!(
            "head expects {:?}-dim features, got {:?}",
            tape.shape(w).first(),
            tape.shape(r)
        )));
    }
    let z = tape.matmul(r, w)?;
    tape.add_row(z, b)
}

/// Row-wise affine map outside a tape; `weights` is `D x K`, `bias` is `K`.
pub fn head_logits(r: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ok = r.rank() == 2
        && weights.rank() == 2
        && r.shape()[1] == weights.shape()[0]
        && bias.shape() == [weights.shape()[1]];
    if !ok {
        return Err(Error::config(format!(
            "head dimensions do not line up: R {:?}, W {:?}, b {:?}",
            r.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let mut tape = Tape::new();
    let rv = tape.constant(r.clone());
    let wv = tape.constant(weights.clone());
    let bv = tape.constant(bias.clone());
    let z = tape.matmul(rv, wv)?;
    let z = tape.add_row(z, bv)?;
    Ok(tape.value(z).clone())
}

/// Embeds already-extracted instance rows `[bags*T, P]` with fixed parameters.
pub fn embed_instances(params: &ParamSet, cfg: &EncoderConfig, instances: Tensor, bags: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(instances);
    let r = encode(&mut tape, &bound, cfg, x, bags)?;
    Ok(tape.value(r).clone())
}

/// Convenience wrapper: patch embeddings of a single crop.
pub fn encode_crop(params: &ParamSet, cfg: &EncoderConfig, crop: &CropView) -> Result<Tensor> {
    if crop.instance_px != cfg.instance_px {
        return Err(Error::config(format!(
            "crop uses {}px instances, encoder expects {}px",
            crop.instance_px, cfg.instance_px
        )));
    }
    embed_instances(params, cfg, patchify(crop)?, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crop(h: usize, w: usize, s: usize, seed: u64) -> CropView {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Tensor::from_fn([h, w, 3], |_| rng.gen());
        CropView::new(px, Level::Image, 0, s).unwrap()
    }

    #[test]
    fn instance_counts_follow_geometry() {
        assert_eq!(instance_count(224, 224, 32).unwrap(), 49);
        assert_eq!(instance_count(96, 96, 32).unwrap(), 9);
        assert_eq!(instance_count(56, 56, 8).unwrap(), 49);
        assert_eq!(instance_count(24, 24, 8).unwrap(), 9);
        assert!(matches!(instance_count(56, 56, 5), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_round_trips() {
        let c = crop(24, 16, 8, 3);
        let inst = patchify(&c).unwrap();
        assert_eq!(inst.shape(), &[6, 192]);
        assert_eq!(unpatchify(&inst, 24, 16, 8).unwrap(), c.pixels);
        // first row of instance 1 starts at pixel (0, 8)
        assert_eq!(inst.row(1)[0], c.pixels.data()[8 * 3]);
    }

    #[test]
    fn patch_map_agrees_with_patchify() {
        let c = crop(16, 16, 4, 9);
        let map = patch_map(16, 16, 4).unwrap();
        assert_eq!(map.apply(c.pixels.data()), patchify(&c).unwrap().data());
    }

    #[test]
    fn zero_projection_gives_zero_embeddings() {
        let cfg = EncoderConfig {
            instance_px: 4,
            hidden_dim: 5,
            embed_dim: 6,
            head_dim: 3,
            attention_blocks: 0,
        };
        let mut params = cfg.init_params(1);
        for name in ["enc.w2", "enc.b2"] {
            params.0.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let c = CropView::new(Tensor::zeros([8, 8, 3]), Level::Region, 1, 4).unwrap();
        let r = encode_crop(&params, &cfg, &c).unwrap();
        assert_eq!(r, Tensor::zeros([4, 6]));
    }

    #[test]
    fn head_identity_and_bias_cases() {
        let r = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(head_logits(&r, &eye, &Tensor::zeros([2])).unwrap(), r);
        let b = Tensor::vector(&[0.25, -4.0, 9.0]);
        let z = head_logits(&r, &Tensor::zeros([2, 3]), &b).unwrap();
        assert_eq!(z.row(0), b.data());
        assert_eq!(z.row(1), b.data());
    }

    #[test]
    fn head_matches_scalar_reference() {
        let r = Tensor::from_rows(&[vec![0.3, -1.1], vec![2.0, 0.7], vec![-0.4, 0.9]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.5, -0.2], vec![0.6, 0.8]]).unwrap();
        let b = Tensor::vector(&[0.1, -0.3]);
        let z = head_logits(&r, &w, &b).unwrap();
        for i in 0..3 {
            for k in 0..2 {
                let want = r.row(i)[0] * w.row(0)[k] + r.row(i)[1] * w.row(1)[k] + b.data()[k];
                assert!((z.row(i)[k] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn head_rejects_mismatched_dims() {
        let r = Tensor::zeros([2, 3]);
        assert!(matches!(
            head_logits(&r, &Tensor::zeros([2, 2]), &Tensor::zeros([2])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = EncoderConfig {
            attention_blocks: 1,
            ..EncoderConfig::default()
        };
        let a = cfg.init_params(7);
        assert_eq!(a, cfg.init_params(7));
        assert_ne!(a, cfg.init_params(8));
        cfg.check(&a).unwrap();
        let bound = 1.0 / (cfg.input_dim() as f64).sqrt();
        assert!(a.get("enc.w1").unwrap().max_abs() <= bound);
        assert!(a.get("enc.b1").unwrap().max_abs() <= bound);
    }
}
