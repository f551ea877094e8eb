//! Miniature ViT image encoder with multi-scale feature taps.
//!
//! Both temporal images go through the same weights, one at a time; the
//! encoder never mixes information between them.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{init_normal, Block, Linear};
use crate::params::{Cx, Group, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Negative offsets from the last layer; -1 is the final block output.
    pub tap_indices: Vec<i32>,
    pub residual_index: i32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            depth: 12,
            d_model: 32,
            heads: 4,
            tap_indices: vec![-11, -8, -5, -2],
            residual_index: -2,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if self.tap_indices.is_empty() {
            return bad("at least one tap is required".into());
        }
        let mut sorted = self.tap_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.tap_indices.len() {
            return bad(format!("duplicate tap offsets in {:?}", self.tap_indices));
        }
        for &o in self.tap_indices.iter().chain(std::iter::once(&self.residual_index)) {
            if o >= 0 || self.depth as i64 + (o as i64) < 0 {
                return bad(format!("offset {o} invalid for depth {}", self.depth));
            }
        }
        if self.residual_index != -2 && !self.tap_indices.contains(&self.residual_index) {
            return bad(format!("residual offset {} is neither a tap nor -2", self.residual_index));
        }
        Ok(())
    }

    /// 1-based block whose output a negative offset refers to.
    pub fn layer_of(&self, offset: i32) -> usize {
        (self.depth as i64 + 1 + offset as i64) as usize
    }
}

/// Bi-temporal features captured at each tap, plus the residual pair.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Offset -> (F1, F2), ascending by offset.
    pub taps: BTreeMap<i32, (Var, Var)>,
    pub residual: (Var, Var),
    /// Output of the last block for each image.
    pub final_output: (Var, Var),
}

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    patch_index: Arc<[usize]>,
}

impl ToyEncoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (p, d, n) = (config.patch_size, config.d_model, config.num_tokens());
        let patch = Linear::new(store, rng, "encoder.patch", Group::Encoder, p * p * 3, d)?;
        let pos = store.register("encoder.pos", Group::Encoder, init_normal(rng, &[n, d], d))?;
        let blocks = (0..config.depth)
            .map(|l| Block::new(store, rng, &format!("encoder.blocks.{l}"), Group::Encoder, d, config.heads, false))
            .collect::<Result<Vec<_>>>()?;
        let patch_index = patch_gather_index(config.image_size, p);
        Ok(ToyEncoder {
            config,
            patch,
            pos,
            blocks,
            patch_index,
        })
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::shape("encode", image.shape(), &[s, s, 3]));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("encode", "pixel values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Token `j` = linear(flattened patch `j`) + learned position `j`.
    pub fn patch_embed(&self, cx: &Cx, image: Var) -> Result<Var> {
        let s = self.config.image_size;
        if cx.tape.shape(image) != [s, s, 3] {
            return Err(Error::shape("patch_embed", &cx.tape.shape(image), &[s, s, 3]));
        }
        let p = self.config.patch_size;
        let n = self.config.num_tokens();
        let patches = cx.tape.take(image, self.patch_index.clone(), &[n, p * p * 3])?;
        let tokens = self.patch.forward(cx, patches)?;
        cx.tape.add(tokens, cx.param(self.pos))
    }

    /// Output of every block, first to last.
    pub fn hidden_states(&self, cx: &Cx, image: Var) -> Result<Vec<Var>> {
        let mut x = self.patch_embed(cx, image)?;
        let mut states = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(cx, x)?;
            states.push(x);
        }
        Ok(states)
    }

    pub fn encode_pair(&self, cx: &Cx, image1: &Tensor, image2: &Tensor) -> Result<FeaturePyramid> {
        self.check_image(image1)?;
        self.check_image(image2)?;
        let h1 = self.hidden_states(cx, cx.tape.constant(image1.clone()))?;
        let h2 = self.hidden_states(cx, cx.tape.constant(image2.clone()))?;
        let at = |o: i32| {
            let l = self.config.layer_of(o) - 1;
            (h1[l], h2[l])
        };
        Ok(FeaturePyramid {
            taps: self.config.tap_indices.iter().map(|&o| (o, at(o))).collect(),
            residual: at(self.config.residual_index),
            final_output: at(-1),
        })
    }
}

/// Flat indices turning an `[H, W, 3]` image into row-major patches of
/// `(dy, dx, channel)` values.
fn patch_gather_index(size: usize, p: usize) -> Arc<[usize]> {
    let g = size / p;
    let mut idx = Vec::with_capacity(size * size * 3);
    for py in 0..g {
        for px in 0..g {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (py * p + dy, px * p + dx);
                    for c in 0..3 {
                        idx.push((y * size + x) * 3 + c);
                    }
                }
            }
        }
    }
    idx.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::GroupSet;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            depth: 3,
            d_model: 8,
            heads: 2,
            tap_indices: vec![-3, -2],
            residual_index: -2,
        }
    }

    fn image(seed: u64, size: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[size, size, 3], |_| rng.uniform())
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = EncoderConfig::default();
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.tap_indices = vec![-13];
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.residual_index = -3;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.tap_indices = vec![-2, 0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_geometry() {
        let c = EncoderConfig::default();
        assert_eq!(c.num_tokens(), 64);
        assert_eq!(c.layer_of(-2), 11);
        assert_eq!(c.layer_of(-11), 2);
    }

    #[test]
    fn zero_image_tokens_are_bias_plus_position() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let enc = ToyEncoder::new(small(), &mut store, &mut rng).unwrap();
        // Non-zero bias so the check is not vacuous.
        let bias = store.get(enc.patch.bias).tensor.clone();
        store.get_mut(enc.patch.bias).tensor = Tensor::from_fn(bias.shape(), |i| 0.1 * i as f64);
        let tape = Tape::new();
        let cx = Cx::new(&tape, &store, GroupSet::none());
        let img = tape.constant(Tensor::zeros(&[8, 8, 3]));
        let tokens = enc.patch_embed(&cx, img).unwrap();
        let tokens = tape.value(tokens);
        let pos = &store.get(enc.pos).tensor;
        let b = &store.get(enc.patch.bias).tensor;
        for j in 0..4 {
            for c in 0..8 {
                assert_eq!(tokens.row(j)[c], b.data()[c] + pos.row(j)[c]);
            }
        }
    }

    #[test]
    fn patch_index_is_a_permutation() {
        let idx = patch_gather_index(8, 4);
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..192).collect::<Vec<_>>());
        // second patch starts at pixel (0, 4)
        assert_eq!(idx[48], 4 * 3);
    }

    #[test]
    fn rejects_bad_images() {
        let mut store = ParamStore::new();
        let enc = ToyEncoder::new(small(), &mut store, &mut Rng::new(0)).unwrap();
        let tape = Tape::new();
        let cx = Cx::new(&tape, &store, GroupSet::none());
        assert!(enc.encode_pair(&cx, &image(0, 16), &image(1, 8)).is_err());
        let bright = Tensor::full(&[8, 8, 3], 1.5);
        assert!(enc.encode_pair(&cx, &bright, &image(1, 8)).is_err());
    }

    #[test]
    fn identical_and_swapped_inputs() {
        let mut store = ParamStore::new();
        let enc = ToyEncoder::new(small(), &mut store, &mut Rng::new(2)).unwrap();
        let (a, b) = (image(3, 8), image(4, 8));
        let tape = Tape::new();
        let cx = Cx::new(&tape, &store, GroupSet::none());
        let same = enc.encode_pair(&cx, &a, &a).unwrap();
        for (f1, f2) in same.taps.values() {
            assert!(tape.value(*f1).bit_eq(&tape.value(*f2)));
        }
        let ab = enc.encode_pair(&cx, &a, &b).unwrap();
        let ba = enc.encode_pair(&cx, &b, &a).unwrap();
        for (o, (f1, f2)) in &ab.taps {
            let (g1, g2) = ba.taps[o];
            assert!(tape.value(*f1).bit_eq(&tape.value(g2)));
            assert!(tape.value(*f2).bit_eq(&tape.value(g1)));
        }
    }
}
