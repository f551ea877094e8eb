//! From fused image features to caption tokens: projector, prompt
//! assembly, and a small causal decoder.

pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{init_normal, Block, LayerNorm, Linear};
use crate::params::{Cx, Group, ParamId, ParamStore};
use crate::rng::Rng;

pub use vocab::{tokenize, Vocabulary, BOS, EOS, IMAGE1, IMAGE2, PAD};

pub const PROMPT: &str = "This is Image1 <image1>. This is Image2 <image2>. What difference happened from Image1 to Image2?";

/// Maps enhanced features (width `d`) into decoder width `c`:
/// `Linear(d, c) -> GELU -> Linear(c, c)`, shared by both streams.
#[derive(Debug, Clone)]
pub struct Projector {
    pub proj1: Linear,
    pub proj2: Linear,
}

impl Projector {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d: usize, c: usize) -> Result<Self> {
        Ok(Projector {
            proj1: Linear::new(store, rng, "projector.proj1", Group::Projector, d, c)?,
            proj2: Linear::new(store, rng, "projector.proj2", Group::Projector, c, c)?,
        })
    }

    pub fn forward(&self, cx: &Cx, x: Var) -> Result<Var> {
        let h = cx.tape.gelu(self.proj1.forward(cx, x)?)?;
        self.proj2.forward(cx, h)
    }

    pub fn project(&self, cx: &Cx, f1: Var, f2: Var) -> Result<(Var, Var)> {
        Ok((self.forward(cx, f1)?, self.forward(cx, f2)?))
    }
}

/// Token layout of the fixed prompt; each placeholder expands to the
/// `n` projected feature rows of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    /// Text token ids, placeholders excluded, in order.
    pub text_ids: Vec<usize>,
    /// Text tokens before `<image1>` and between the two placeholders.
    pub before1: usize,
    pub between: usize,
    pub span1: (usize, usize),
    pub span2: (usize, usize),
}

impl PromptLayout {
    pub fn new(vocab: &Vocabulary, n: usize) -> Result<Self> {
        let ids = vocab.encode(PROMPT)?;
        let p1 = ids.iter().position(|&i| i == IMAGE1).ok_or_else(|| Error::invalid("prompt", "missing <image1>"))?;
        let p2 = ids.iter().position(|&i| i == IMAGE2).ok_or_else(|| Error::invalid("prompt", "missing <image2>"))?;
        if p2 < p1 || n == 0 {
            return Err(Error::invalid("prompt", "placeholders out of order"));
        }
        let text_ids: Vec<usize> = ids.iter().copied().filter(|&i| i != IMAGE1 && i != IMAGE2).collect();
        let before1 = p1;
        let between = p2 - p1 - 1;
        let span1 = (before1, n);
        let span2 = (before1 + n + between, n);
        Ok(PromptLayout {
            text_ids,
            before1,
            between,
            span1,
            span2,
        })
    }

    pub fn template_len(&self) -> usize {
        self.text_ids.len()
    }

    pub fn image_tokens(&self) -> usize {
        self.span1.1
    }

    /// Prompt length once the placeholders are expanded.
    pub fn prompt_len(&self) -> usize {
        self.template_len() + 2 * self.image_tokens()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub c_model: usize,
    pub depth: usize,
    pub heads: usize,
    /// Caption budget in tokens, counting `<bos>` and `<eos>`.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            c_model: 48,
            depth: 4,
            heads: 4,
            max_len: 48,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.c_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder: c_model {} not divisible by heads {}",
                self.c_model, self.heads
            )));
        }
        if self.depth == 0 || self.max_len < 2 {
            return Err(Error::Config("decoder: depth must be positive and max_len at least 2".into()));
        }
        Ok(())
    }
}

/// Decoder input for one sample.
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    /// `[len, c]` input embeddings.
    pub embeddings: Var,
    /// Next-token target per position (only meaningful where `mask` is set).
    pub targets: Vec<usize>,
    /// True exactly at the positions whose next token is a caption token.
    pub mask: Vec<bool>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn loss_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedCaption {
    pub ids: Vec<usize>,
    pub text: String,
    /// Stopped by the length budget rather than `<eos>`.
    pub truncated: bool,
}

/// Small causal pre-norm transformer with learned absolute positions.
#[derive(Debug, Clone)]
pub struct CaptionDecoder {
    pub config: DecoderConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl CaptionDecoder {
    pub fn new(config: DecoderConfig, vocab_size: usize, prompt_len: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.c_model;
        let max_positions = prompt_len + config.max_len;
        let embed = store.register("decoder.embed", Group::Decoder, init_normal(rng, &[vocab_size, c], c))?;
        let pos = store.register("decoder.pos", Group::Decoder, init_normal(rng, &[max_positions, c], c))?;
        let blocks = (0..config.depth)
            .map(|l| Block::new(store, rng, &format!("decoder.blocks.{l}"), Group::Decoder, c, config.heads, true))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "decoder.norm", Group::Decoder, c)?;
        let head = Linear::new(store, rng, "decoder.head", Group::Decoder, c, vocab_size)?;
        Ok(CaptionDecoder {
            config,
            embed,
            pos,
            blocks,
            norm,
            head,
            vocab_size,
            max_positions,
        })
    }

    fn embed_ids(&self, cx: &Cx, ids: &[usize]) -> Result<Var> {
        cx.tape.gather_rows(cx.param(self.embed), ids)
    }

    /// Prompt with both feature spans spliced in, optionally followed by
    /// `<bos> caption <eos>` for teacher forcing.
    pub fn assemble_sequence(
        &self,
        cx: &Cx,
        f1: Var,
        f2: Var,
        layout: &PromptLayout,
        caption: Option<&[usize]>,
    ) -> Result<AssembledSequence> {
        let t = cx.tape;
        let n = layout.image_tokens();
        for f in [f1, f2] {
            let s = t.shape(f);
            if s != [n, self.config.c_model] {
                return Err(Error::shape("assemble_sequence", &s, &[n, self.config.c_model]));
            }
        }
        let ids = &layout.text_ids;
        let (a, b) = (layout.before1, layout.before1 + layout.between);
        let mut parts = Vec::with_capacity(6);
        if a > 0 {
            parts.push(self.embed_ids(cx, &ids[..a])?);
        }
        parts.push(f1);
        if b > a {
            parts.push(self.embed_ids(cx, &ids[a..b])?);
        }
        parts.push(f2);
        if ids.len() > b {
            parts.push(self.embed_ids(cx, &ids[b..])?);
        }
        let prompt_len = layout.prompt_len();
        let mut targets = vec![PAD; prompt_len];
        let mut mask = vec![false; prompt_len];
        if let Some(words) = caption {
            let total = words.len() + 2;
            if total > self.config.max_len {
                return Err(Error::invalid(
                    "assemble_sequence",
                    format!("caption of {total} tokens exceeds max_len {}", self.config.max_len),
                ));
            }
            let mut seq = Vec::with_capacity(total);
            seq.push(BOS);
            seq.extend_from_slice(words);
            seq.push(EOS);
            parts.push(self.embed_ids(cx, &seq)?);
            // position i predicts token i+1; the final <eos> predicts nothing
            for w in seq.windows(2) {
                targets.push(w[1]);
                mask.push(true);
            }
            targets.push(PAD);
            mask.push(false);
        } else {
            parts.push(self.embed_ids(cx, &[BOS])?);
            targets.push(PAD);
            mask.push(false);
        }
        let embeddings = t.concat(&parts, 0)?;
        Ok(AssembledSequence {
            embeddings,
            targets,
            mask,
        })
    }

    /// `[len, vocab]` next-token logits.
    pub fn logits(&self, cx: &Cx, embeddings: Var) -> Result<Var> {
        let t = cx.tape;
        let len = t.shape(embeddings)[0];
        if len > self.max_positions {
            return Err(Error::invalid("decoder", format!("sequence of {len} exceeds {} positions", self.max_positions)));
        }
        let pos = t.narrow(cx.param(self.pos), 0, 0, len)?;
        let mut x = t.add(embeddings, pos)?;
        for b in &self.blocks {
            x = b.forward(cx, x)?;
        }
        let x = self.norm.forward(cx, x)?;
        self.head.forward(cx, x)
    }

    /// Mean cross-entropy over the caption positions.
    pub fn decode_loss(&self, cx: &Cx, seq: &AssembledSequence) -> Result<Var> {
        let logits = self.logits(cx, seq.embeddings)?;
        cx.tape.cross_entropy(logits, &seq.targets, &seq.mask)
    }

    /// Greedy decoding from `<bos>`; at most `max_len` tokens are produced
    /// (capped by the positional table).
    pub fn generate(&self, cx: &Cx, f1: Var, f2: Var, layout: &PromptLayout, vocab: &Vocabulary, max_len: usize) -> Result<GeneratedCaption> {
        let t = cx.tape;
        let budget = max_len.min(self.config.max_len - 1);
        let prefix = self.assemble_sequence(cx, f1, f2, layout, None)?.embeddings;
        let mut ids = Vec::new();
        let mut truncated = true;
        for _ in 0..budget {
            let seq = if ids.is_empty() {
                prefix
            } else {
                t.concat(&[prefix, self.embed_ids(cx, &ids)?], 0)?
            };
            let logits = self.logits(cx, seq)?;
            let next = {
                let l = t.value(logits);
                let row = l.row(l.shape()[0] - 1);
                argmax(row)
            };
            if next == EOS {
                truncated = false;
                break;
            }
            ids.push(next);
        }
        Ok(GeneratedCaption {
            text: vocab.decode(&ids),
            ids,
            truncated,
        })
    }
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
