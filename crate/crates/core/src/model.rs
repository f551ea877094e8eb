//! The full captioner: encoder, enhancer, projector and decoder over one
//! parameter store.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bridge::{CaptionDecoder, DecoderConfig, GeneratedCaption, Projector, PromptLayout, Vocabulary};
use crate::encoder::{EncoderConfig, ToyEncoder};
use crate::enhancer::{DiffEnhancer, EnhancerConfig};
use crate::error::{Error, Result};
use crate::params::{Cx, GroupSet, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub enhancer: EnhancerConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let enhancer = EnhancerConfig::for_width(encoder.d_model);
        ModelConfig {
            encoder,
            enhancer,
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.enhancer.validate()?;
        self.decoder.validate()?;
        if self.enhancer.d_model != self.encoder.d_model {
            return Err(Error::Config(format!(
                "enhancer.d_model {} must equal encoder.d_model {}",
                self.enhancer.d_model, self.encoder.d_model
            )));
        }
        Ok(())
    }
}

/// One sample's loss and the gradients of every trainable parameter it touched.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct ChangeCaptioner {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub layout: PromptLayout,
    pub store: ParamStore,
    pub encoder: ToyEncoder,
    pub enhancer: DiffEnhancer,
    pub projector: Projector,
    pub decoder: CaptionDecoder,
}

impl ChangeCaptioner {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let mut store = ParamStore::new();
        let encoder = ToyEncoder::new(config.encoder.clone(), &mut store, &mut root.fork(1))?;
        let enhancer = DiffEnhancer::new(config.enhancer.clone(), &mut store, &mut root.fork(2))?;
        let projector = Projector::new(&mut store, &mut root.fork(3), config.encoder.d_model, config.decoder.c_model)?;
        let layout = PromptLayout::new(&vocab, config.encoder.num_tokens())?;
        let decoder = CaptionDecoder::new(config.decoder.clone(), vocab.len(), layout.prompt_len(), &mut store, &mut root.fork(4))?;
        Ok(ChangeCaptioner {
            config,
            vocab,
            layout,
            store,
            encoder,
            enhancer,
            projector,
            decoder,
        })
    }

    /// Projected features `(F1^, F2^)`, each `[N, c]`.
    pub fn features(&self, cx: &Cx, image1: &Tensor, image2: &Tensor) -> Result<(Var, Var)> {
        let pyramid = self.encoder.encode_pair(cx, image1, image2)?;
        let enhanced = self.enhancer.enhance(cx, &pyramid)?;
        self.projector.project(cx, enhanced.fused.0, enhanced.fused.1)
    }

    pub fn loss(&self, cx: &Cx, image1: &Tensor, image2: &Tensor, caption: &[usize]) -> Result<Var> {
        let (f1, f2) = self.features(cx, image1, image2)?;
        let seq = self.decoder.assemble_sequence(cx, f1, f2, &self.layout, Some(caption))?;
        self.decoder.decode_loss(cx, &seq)
    }

    /// Forward and backward for one pair; `tape` may carry a fault or checks.
    pub fn sample_grad(&self, tape: &Tape, trainable: GroupSet, image1: &Tensor, image2: &Tensor, caption: &[usize]) -> Result<SampleGrad> {
        let cx = Cx::new(tape, &self.store, trainable);
        let loss = self.loss(&cx, image1, image2, caption)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        if trainable.iter().next().is_none() {
            return Ok(SampleGrad {
                loss: value,
                grads: Vec::new(),
            });
        }
        tape.backward(loss)?;
        Ok(SampleGrad {
            loss: value,
            grads: cx.param_grads(),
        })
    }

    pub fn caption(&self, image1: &Tensor, image2: &Tensor) -> Result<GeneratedCaption> {
        let tape = Tape::new();
        let cx = Cx::new(&tape, &self.store, GroupSet::none());
        let (f1, f2) = self.features(&cx, image1, image2)?;
        self.decoder.generate(&cx, f1, f2, &self.layout, &self.vocab, self.config.decoder.max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::PROMPT;
    use crate::params::Group;

    pub(crate) fn tiny() -> ModelConfig {
        let encoder = EncoderConfig {
            image_size: 8,
            patch_size: 4,
            depth: 3,
            d_model: 8,
            heads: 2,
            tap_indices: vec![-3, -2],
            residual_index: -2,
        };
        ModelConfig {
            enhancer: EnhancerConfig {
                heads: 2,
                num_catl_layers: 1,
                ..EnhancerConfig::for_width(8)
            },
            encoder,
            decoder: DecoderConfig {
                c_model: 8,
                depth: 1,
                heads: 2,
                max_len: 8,
            },
        }
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[8, 8, 3], |_| rng.uniform())
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut c = tiny();
        c.enhancer.d_model = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn construction_is_seeded() {
        let vocab = Vocabulary::build([PROMPT, "a road"]).unwrap();
        let a = ChangeCaptioner::new(tiny(), vocab.clone(), 3).unwrap();
        let b = ChangeCaptioner::new(tiny(), vocab.clone(), 3).unwrap();
        let c = ChangeCaptioner::new(tiny(), vocab, 4).unwrap();
        assert_eq!(a.store.checksum(None), b.store.checksum(None));
        assert_ne!(a.store.checksum(None), c.store.checksum(None));
    }

    #[test]
    fn grads_only_for_trainable_groups() {
        let vocab = Vocabulary::build([PROMPT, "a road"]).unwrap();
        let m = ChangeCaptioner::new(tiny(), vocab, 1).unwrap();
        let caption = m.vocab.encode("a road").unwrap();
        let tape = Tape::new();
        let trainable: GroupSet = [Group::Enhancer].into_iter().collect();
        let sg = m.sample_grad(&tape, trainable, &image(1), &image(2), &caption).unwrap();
        assert!(sg.loss.is_finite() && sg.loss > 0.0);
        assert!(!sg.grads.is_empty());
        assert!(sg.grads.iter().all(|(id, _)| m.store.get(*id).group == Group::Enhancer));
    }

    #[test]
    fn caption_is_deterministic() {
        let vocab = Vocabulary::build([PROMPT, "a road"]).unwrap();
        let m = ChangeCaptioner::new(tiny(), vocab, 1).unwrap();
        let a = m.caption(&image(1), &image(2)).unwrap();
        assert_eq!(a, m.caption(&image(1), &image(2)).unwrap());
        assert!(a.ids.len() <= 8);
    }
}
