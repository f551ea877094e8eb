//! Difference-aware integration of multi-scale bi-temporal features.
//!
//! For every encoder tap a shared *diff expert* (a stack of change-aware
//! transformer layers) builds a difference feature `dF` and injects it back
//! into both image streams. *Adaptive adjustment* then scores each tap with
//! a small gated MLP and adds the score-weighted enhanced features to the
//! residual tap:
//!
//! ```text
//! G_i     = mean_tokens([F1~_i | F2~_i | dF_i])
//! score_i = sigmoid(W1 gelu(W2 G_i))
//! F1'     = sum_i score_i * F1~_i + F1_k
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::params::{Cx, Group, ParamStore};
use crate::rng::Rng;

/// Which features feed the tap-score pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreConcat {
    /// `[F1~ | F2~ | dF]`
    #[default]
    T1t2,
    /// `[F1~ | F1~ | dF]`, the formula exactly as typeset.
    T1t1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerConfig {
    pub enabled: bool,
    pub num_catl_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub score_hidden: usize,
    #[serde(default)]
    pub score_concat: ScoreConcat,
}

impl EnhancerConfig {
    pub fn for_width(d_model: usize) -> Self {
        EnhancerConfig {
            enabled: true,
            num_catl_layers: 2,
            heads: 4,
            d_model,
            mlp_hidden: 4 * d_model,
            score_hidden: d_model,
            score_concat: ScoreConcat::T1t2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_catl_layers == 0 {
            return Err(Error::Config("enhancer: at least one change-aware layer is required".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "enhancer: d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.mlp_hidden == 0 || self.score_hidden == 0 {
            return Err(Error::Config("enhancer: hidden widths must be positive".into()));
        }
        Ok(())
    }
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        EnhancerConfig::for_width(32)
    }
}

fn check_pair(cx: &Cx, f1: Var, f2: Var, op: &'static str) -> Result<()> {
    let (s1, s2) = (cx.tape.shape(f1), cx.tape.shape(f2));
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::shape(op, &s1, &s2));
    }
    Ok(())
}

/// Gated initialization of the difference feature.
#[derive(Debug, Clone)]
pub struct ChangeFeatureInit {
    /// 2d -> d, shared by both gates with the operand order swapped.
    pub gate: Linear,
    /// 3d -> d over `[F1_init | F2_init | F1_init - F2_init]`.
    pub proj: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct InitFeatures {
    pub f1_init: Var,
    pub f2_init: Var,
    pub diff: Var,
    pub delta: Var,
}

impl ChangeFeatureInit {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize) -> Result<Self> {
        Ok(ChangeFeatureInit {
            gate: Linear::new(store, rng, &format!("{name}.gate"), Group::Enhancer, 2 * d, d)?,
            proj: Linear::new(store, rng, &format!("{name}.proj"), Group::Enhancer, 3 * d, d)?,
        })
    }

    pub fn forward_parts(&self, cx: &Cx, f1: Var, f2: Var) -> Result<InitFeatures> {
        check_pair(cx, f1, f2, "change_feature_init")?;
        let t = cx.tape;
        let g1 = t.sigmoid(self.gate.forward(cx, t.concat(&[f1, f2], 1)?)?)?;
        let g2 = t.sigmoid(self.gate.forward(cx, t.concat(&[f2, f1], 1)?)?)?;
        let f1_init = t.mul(f1, g1)?;
        let f2_init = t.mul(f2, g2)?;
        let diff = t.sub(f1_init, f2_init)?;
        let delta = self.proj.forward(cx, t.concat(&[f1_init, f2_init, diff], 1)?)?;
        Ok(InitFeatures {
            f1_init,
            f2_init,
            diff,
            delta,
        })
    }

    pub fn forward(&self, cx: &Cx, f1: Var, f2: Var) -> Result<Var> {
        Ok(self.forward_parts(cx, f1, f2)?.delta)
    }
}

/// Output of one change-aware layer or of a whole diff expert.
#[derive(Debug, Clone, Copy)]
pub struct ChangeFeatures {
    pub f1: Var,
    pub f2: Var,
    pub delta: Var,
}

/// One change-aware transformer layer. Every sublayer after the
/// initialization is pre-norm and residual.
#[derive(Debug, Clone)]
pub struct ChangeAwareLayer {
    pub init: ChangeFeatureInit,
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    pub c2i_norm: LayerNorm,
    pub c2i_mem_norm: LayerNorm,
    pub c2i_attn: Attention,
    pub mlp_norm: LayerNorm,
    pub mlp: Mlp,
    pub i2c_norm: LayerNorm,
    pub i2c_mem_norm: LayerNorm,
    pub i2c_attn: Attention,
}

impl ChangeAwareLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &EnhancerConfig) -> Result<Self> {
        let (d, h, g) = (cfg.d_model, cfg.heads, Group::Enhancer);
        let ln = |store: &mut ParamStore, n: &str| LayerNorm::new(store, &format!("{name}.{n}"), g, d);
        Ok(ChangeAwareLayer {
            init: ChangeFeatureInit::new(store, rng, &format!("{name}.init"), d)?,
            self_norm: ln(store, "self_norm")?,
            self_attn: Attention::new(store, rng, &format!("{name}.self_attn"), g, d, h)?,
            c2i_norm: ln(store, "c2i_norm")?,
            c2i_mem_norm: ln(store, "c2i_mem_norm")?,
            c2i_attn: Attention::new(store, rng, &format!("{name}.c2i_attn"), g, d, h)?,
            mlp_norm: ln(store, "mlp_norm")?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), g, (d, cfg.mlp_hidden, d))?,
            i2c_norm: ln(store, "i2c_norm")?,
            i2c_mem_norm: ln(store, "i2c_mem_norm")?,
            i2c_attn: Attention::new(store, rng, &format!("{name}.i2c_attn"), g, d, h)?,
        })
    }

    pub fn forward(&self, cx: &Cx, f1: Var, f2: Var) -> Result<ChangeFeatures> {
        check_pair(cx, f1, f2, "change_aware_layer")?;
        let t = cx.tape;
        let mut delta = self.init.forward(cx, f1, f2)?;

        let h = self.self_norm.forward(cx, delta)?;
        delta = t.add(delta, self.self_attn.forward(cx, h, h, false)?)?;

        let q = self.c2i_norm.forward(cx, delta)?;
        let mem = self.c2i_mem_norm.forward(cx, t.concat(&[f1, f2, delta], 0)?)?;
        delta = t.add(delta, self.c2i_attn.forward(cx, q, mem, false)?)?;

        let h = self.mlp_norm.forward(cx, delta)?;
        delta = t.add(delta, self.mlp.forward(cx, h)?)?;

        let inject = |f: Var| -> Result<Var> {
            let q = self.i2c_norm.forward(cx, f)?;
            let mem = self.i2c_mem_norm.forward(cx, t.concat(&[f, delta], 0)?)?;
            t.add(f, self.i2c_attn.forward(cx, q, mem, false)?)
        };
        Ok(ChangeFeatures {
            f1: inject(f1)?,
            f2: inject(f2)?,
            delta,
        })
    }
}

/// Stack of change-aware layers; each layer re-derives the difference
/// feature from the previous layer's enhanced image features.
#[derive(Debug, Clone)]
pub struct DiffExpert {
    pub layers: Vec<ChangeAwareLayer>,
}

impl DiffExpert {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &EnhancerConfig) -> Result<Self> {
        let layers = (0..cfg.num_catl_layers)
            .map(|l| ChangeAwareLayer::new(store, rng, &format!("enhancer.expert.{l}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(DiffExpert { layers })
    }

    pub fn forward(&self, cx: &Cx, f1: Var, f2: Var) -> Result<ChangeFeatures> {
        let mut out = ChangeFeatures { f1, f2, delta: f1 };
        for layer in &self.layers {
            out = layer.forward(cx, out.f1, out.f2)?;
        }
        Ok(out)
    }
}

/// Per-tap scoring and residual fusion.
#[derive(Debug, Clone)]
pub struct AdaptiveAdjustment {
    /// 3d -> score_hidden
    pub proj2: Linear,
    /// score_hidden -> 1
    pub proj1: Linear,
    pub concat: ScoreConcat,
}

/// Fused bi-temporal features and the per-tap scores (shape `[taps]`).
#[derive(Debug, Clone, Copy)]
pub struct Adjusted {
    pub f1: Var,
    pub f2: Var,
    pub scores: Var,
}

impl AdaptiveAdjustment {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &EnhancerConfig) -> Result<Self> {
        Ok(AdaptiveAdjustment {
            proj2: Linear::new(store, rng, "enhancer.adjust.proj2", Group::Enhancer, 3 * cfg.d_model, cfg.score_hidden)?,
            proj1: Linear::new(store, rng, "enhancer.adjust.proj1", Group::Enhancer, cfg.score_hidden, 1)?,
            concat: cfg.score_concat,
        })
    }

    /// Score of one tap, shape `[1]`.
    pub fn score(&self, cx: &Cx, tap: &ChangeFeatures) -> Result<Var> {
        let t = cx.tape;
        let second = match self.concat {
            ScoreConcat::T1t2 => tap.f2,
            ScoreConcat::T1t1 => tap.f1,
        };
        let pooled = t.mean_axis(t.concat(&[tap.f1, second, tap.delta], 1)?, 0)?;
        let width = t.shape(pooled)[0];
        let g = t.reshape(pooled, &[1, width])?;
        let h = t.gelu(self.proj2.forward(cx, g)?)?;
        let s = t.sigmoid(self.proj1.forward(cx, h)?)?;
        t.reshape(s, &[1])
    }

    pub fn forward(&self, cx: &Cx, taps: &[ChangeFeatures], residual: (Var, Var)) -> Result<Adjusted> {
        let t = cx.tape;
        if taps.is_empty() {
            return Err(Error::invalid("adaptive_adjustment", "no taps"));
        }
        let shape = t.shape(residual.0);
        check_pair(cx, residual.0, residual.1, "adaptive_adjustment")?;
        for tap in taps {
            for v in [tap.f1, tap.f2, tap.delta] {
                if t.shape(v) != shape {
                    return Err(Error::shape("adaptive_adjustment", &t.shape(v), &shape));
                }
            }
        }
        let mut scores = Vec::with_capacity(taps.len());
        let mut acc: Option<(Var, Var)> = None;
        for tap in taps {
            let s = self.score(cx, tap)?;
            scores.push(s);
            let w1 = t.mul(tap.f1, s)?;
            let w2 = t.mul(tap.f2, s)?;
            acc = Some(match acc {
                None => (w1, w2),
                Some((a1, a2)) => (t.add(a1, w1)?, t.add(a2, w2)?),
            });
        }
        let (sum1, sum2) = acc.expect("non-empty taps");
        Ok(Adjusted {
            f1: t.add(sum1, residual.0)?,
            f2: t.add(sum2, residual.1)?,
            scores: t.concat(&scores, 0)?,
        })
    }
}

/// Everything the enhancer produces for one image pair.
#[derive(Debug, Clone)]
pub struct EnhancedFeatures {
    /// (offset, enhanced features) in ascending offset order.
    pub taps: Vec<(i32, ChangeFeatures)>,
    pub fused: (Var, Var),
    /// `[taps]`, each in (0, 1). `None` when the enhancer is bypassed.
    pub scores: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct DiffEnhancer {
    pub config: EnhancerConfig,
    pub expert: DiffExpert,
    pub adjust: AdaptiveAdjustment,
}

impl DiffEnhancer {
    pub fn new(config: EnhancerConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let expert = DiffExpert::new(store, rng, &config)?;
        let adjust = AdaptiveAdjustment::new(store, rng, &config)?;
        Ok(DiffEnhancer { config, expert, adjust })
    }

    pub fn enhance(&self, cx: &Cx, pyramid: &FeaturePyramid) -> Result<EnhancedFeatures> {
        if !self.config.enabled {
            return Ok(EnhancedFeatures {
                taps: Vec::new(),
                fused: pyramid.residual,
                scores: None,
            });
        }
        let taps = pyramid
            .taps
            .iter()
            .map(|(&o, &(f1, f2))| Ok((o, self.expert.forward(cx, f1, f2)?)))
            .collect::<Result<Vec<_>>>()?;
        let per_tap: Vec<ChangeFeatures> = taps.iter().map(|(_, c)| *c).collect();
        let adjusted = self.adjust.forward(cx, &per_tap, pyramid.residual)?;
        Ok(EnhancedFeatures {
            taps,
            fused: (adjusted.f1, adjusted.f2),
            scores: Some(adjusted.scores),
        })
    }
}
