//! Layers shared by the encoder, enhancer, projector and decoder.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Cx, Group, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Weights drawn from N(0, 1/fan_in).
pub fn init_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

/// `y = x @ W + b`, with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, group: Group, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), group, init_normal(rng, &[in_dim, out_dim], in_dim))?;
        let bias = store.register(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, cx: &Cx, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x);
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let y = cx.tape.matmul(x, cx.param(self.weight))?;
        cx.tape.add(y, cx.param(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.register(format!("{name}.gain"), group, Tensor::ones(&[dim]))?,
            bias: store.register(format!("{name}.bias"), group, Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, cx: &Cx, x: Var) -> Result<Var> {
        cx.tape.layer_norm(x, cx.param(self.gain), cx.param(self.bias))
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, group: Group, dims: (usize, usize, usize)) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), group, dims.0, dims.1)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), group, dims.1, dims.2)?,
        })
    }

    pub fn forward(&self, cx: &Cx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.gelu(h)?;
        self.fc2.forward(cx, h)
    }
}

/// Multi-head scaled dot-product attention.
///
/// Queries come from `x[tq, d]`, keys and values from `memory[tk, d]`.
/// When the tape has probes enabled, the `[heads, tq, tk]` probability
/// tensor is recorded under `attn.<tag>`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    tag: String,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, group: Group, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: width {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), group, dim, dim)?,
            k: Linear::new(store, rng, &format!("{name}.k"), group, dim, dim)?,
            v: Linear::new(store, rng, &format!("{name}.v"), group, dim, dim)?,
            out: Linear::new(store, rng, &format!("{name}.out"), group, dim, dim)?,
            heads,
            tag: format!("attn.{name}"),
        })
    }

    pub fn forward(&self, cx: &Cx, x: Var, memory: Var, causal: bool) -> Result<Var> {
        let t = cx.tape;
        let d = self.q.in_dim;
        let dh = d / self.heads;
        let tq = t.shape(x)[0];
        let tk = t.shape(memory)[0];
        let split = |v: Var, n: usize| -> Result<Var> {
            let r = t.reshape(v, &[n, self.heads, dh])?;
            t.permute(r, &[1, 0, 2])
        };
        let q = split(self.q.forward(cx, x)?, tq)?;
        let k = split(self.k.forward(cx, memory)?, tk)?;
        let v = split(self.v.forward(cx, memory)?, tk)?;
        let scores = t.scale(t.matmul_nt(q, k)?, 1.0 / (dh as f64).sqrt())?;
        let probs = if causal { t.softmax_causal(scores)? } else { t.softmax(scores, 2)? };
        t.probe(&self.tag, probs);
        let ctx = t.matmul(probs, v)?;
        let ctx = t.permute(ctx, &[1, 0, 2])?;
        let ctx = t.reshape(ctx, &[tq, d])?;
        self.out.forward(cx, ctx)
    }
}

/// Pre-norm transformer block: self-attention and MLP sublayers, each residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub causal: bool,
}

impl Block {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, group: Group, dim: usize, heads: usize, causal: bool) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim)?,
            attn: Attention::new(store, rng, &format!("{name}.attn"), group, dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), group, (dim, 4 * dim, dim))?,
            causal,
        })
    }

    pub fn forward(&self, cx: &Cx, x: Var) -> Result<Var> {
        let t = cx.tape;
        let h = self.ln1.forward(cx, x)?;
        let x = t.add(x, self.attn.forward(cx, h, h, self.causal)?)?;
        let h = self.ln2.forward(cx, x)?;
        t.add(x, self.mlp.forward(cx, h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::GroupSet;

    #[test]
    fn init_statistics() {
        let mut rng = Rng::new(0);
        let w = init_normal(&mut rng, &[64, 256], 64);
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 1.0 / 64.0).abs() < 0.002, "{var}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let attn = Attention::new(&mut store, &mut rng, "a", Group::Enhancer, 8, 2).unwrap();
        let tape = Tape::new().with_probes();
        let cx = Cx::new(&tape, &store, GroupSet::none());
        let x = tape.constant(Tensor::from_fn(&[3, 8], |_| rng.normal()));
        let m = tape.constant(Tensor::from_fn(&[5, 8], |_| rng.normal()));
        let y = attn.forward(&cx, x, m, false).unwrap();
        assert_eq!(tape.shape(y), vec![3, 8]);
        let probes = tape.probes();
        assert_eq!(probes.len(), 1);
        let p = tape.value(probes[0].1);
        assert_eq!(p.shape(), &[2, 3, 5]);
        for r in 0..6 {
            let s: f64 = p.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        assert!(Attention::new(&mut store, &mut rng, "a", Group::Encoder, 10, 4).is_err());
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let lin = Linear::new(&mut store, &mut rng, "l", Group::Projector, 4, 3).unwrap();
        let tape = Tape::new();
        let cx = Cx::new(&tape, &store, GroupSet::none());
        let x = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(lin.forward(&cx, x).is_err());
    }
}
