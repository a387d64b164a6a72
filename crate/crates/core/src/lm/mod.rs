//! Decoder-only transformer over delayed multi-stream token rows with a
//! conditioning prefix, rotary positions, optional cross-attention to a
//! gated source encoder, and classifier-free guidance.

mod cache;
mod model;
pub mod ops;
mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array3, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

pub use cache::DecoderState;
pub use model::{Model, Tape};
#[cfg(test)]
pub(crate) use model::tests as model_tests;
pub use params::{AttnIdx, EncoderIdx, LayerIdx, Layout, Params};

use crate::error::{Error, Result};
use crate::lyricproc::{StructureTag, TextTokenSeq};
use crate::seqcodec::Vocab;
use crate::tokenizer::SemanticTokens;

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Default
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub streams: usize,
    pub codebook_size: usize,
    pub syllable_vocab: usize,
    pub cross_attention: bool,
    pub encoder_layers: usize,
    pub max_sequence: usize,
    pub rope_theta: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            model_dim: 128,
            ff_dim: 512,
            streams: 4,
            codebook_size: 64,
            syllable_vocab: 32,
            cross_attention: true,
            encoder_layers: 2,
            max_sequence: 2048,
            rope_theta: 10000.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.codebook_size)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: &str| {
            Err(Error::Config {
                field: format!("model.{field}"),
                detail: detail.into(),
            })
        };
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("heads", "model_dim must be divisible by heads");
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad("heads", "head dimension must be even for rotary phases");
        }
        if self.layers == 0 || self.ff_dim == 0 || self.streams == 0 || self.codebook_size == 0 {
            return bad("layers", "layers, ff_dim, streams and codebook_size must be positive");
        }
        if self.max_sequence < 2 {
            return bad("max_sequence", "must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Accompaniment,
    Vocal,
    None,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::Accompaniment, SourceKind::Vocal, SourceKind::None];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCondition {
    pub kind: SourceKind,
    pub tokens: Option<SemanticTokens>,
}

impl SourceCondition {
    pub fn none() -> Self {
        SourceCondition {
            kind: SourceKind::None,
            tokens: None,
        }
    }

    pub fn new(kind: SourceKind, tokens: Option<SemanticTokens>) -> Result<Self> {
        let c = SourceCondition { kind, tokens };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.tokens) {
            (SourceKind::None, Some(_)) => Err(Error::InvalidArgument(
                "source tokens given with kind none".into(),
            )),
            (SourceKind::None, None) => Ok(()),
            (_, None) => Err(Error::InvalidArgument(format!(
                "source kind {:?} requires tokens",
                self.kind
            ))),
            (_, Some(t)) if t.is_empty() => Err(Error::InvalidArgument("empty source tokens".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LyricToken {
    pub symbol: Option<u32>,
    pub tag: StructureTag,
}

pub fn lyric_tokens(seq: &TextTokenSeq) -> Vec<LyricToken> {
    seq.entries
        .iter()
        .map(|e| LyricToken {
            symbol: e.symbol_id,
            tag: e.tag,
        })
        .collect()
}

/// Everything the decoder conditions on besides the token rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub style: Option<SemanticTokens>,
    pub lyrics: Vec<LyricToken>,
    pub drop_style: bool,
    pub drop_lyrics: bool,
    pub source: SourceCondition,
}

impl Conditioning {
    pub fn new(style: Option<SemanticTokens>, lyrics: Vec<LyricToken>, source: SourceCondition) -> Self {
        Conditioning {
            style,
            lyrics,
            drop_style: false,
            drop_lyrics: false,
            source,
        }
    }

    /// Guidance branch: style and lyrics replaced by null rows of the same
    /// length, no source.
    pub fn unconditional(&self) -> Conditioning {
        Conditioning {
            style: self.style.clone(),
            lyrics: self.lyrics.clone(),
            drop_style: true,
            drop_lyrics: true,
            source: SourceCondition::none(),
        }
    }

    /// Prefix rows including the leading start row.
    pub fn prefix_len(&self) -> usize {
        1 + self.style.as_ref().map_or(0, |s| s.len()) + self.lyrics.len()
    }
}

/// `uncond + gamma * (cond - uncond)`, evaluated as
/// `(1 - gamma) * uncond + gamma * cond` so both endpoints are exact.
pub fn cfg_logits<T: Real>(cond: &Array3<T>, uncond: &Array3<T>, gamma: T) -> Array3<T> {
    let mut out = uncond.clone();
    let rest = T::one() - gamma;
    Zip::from(&mut out).and(cond).for_each(|u, &c| *u = rest * *u + gamma * c);
    out
}
