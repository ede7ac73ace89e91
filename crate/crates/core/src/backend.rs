//! Uniform interface over causal LM backbones.
//!
//! Sub-layer states are residual-stream values: `AttnOut` of layer `l` is
//! the stream after the attention branch has been added, `MlpOut` the stream
//! after the MLP branch. Layer 0 `MlpOut` is the embedding output feeding
//! layer 1, so `cos(h^Mlp_{l-1}, h^Attn_l)` is defined for `l = 1`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::prompt::PromptPart;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    PreNorm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    pub layers: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub norm_style: NormStyle,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.hidden < 2 || self.vocab < 4 {
            return Err(Error::InvalidConfig(format!(
                "backend {} needs L >= 2, d >= 2, |V| >= 4 (got L={}, d={}, |V|={})",
                self.id, self.layers, self.hidden, self.vocab
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Positions holding media placeholders.
    #[serde(default)]
    pub media_slots: Vec<usize>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        Self { ids, text: None, media_slots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        match self.ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(Error::InvalidToken { id, vocab }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubLayer {
    AttnOut,
    MlpOut,
}

impl fmt::Display for SubLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubLayer::AttnOut => "attn",
            SubLayer::MlpOut => "mlp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPosition {
    LastToken,
    Index(usize),
}

impl TokenPosition {
    pub fn resolve(self, len: usize) -> Option<usize> {
        match self {
            TokenPosition::LastToken => len.checked_sub(1),
            TokenPosition::Index(i) if i < len => Some(i),
            TokenPosition::Index(_) => None,
        }
    }
}

/// A read point on the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubLayerTap {
    pub layer: usize,
    pub sublayer: SubLayer,
    pub position: TokenPosition,
}

impl SubLayerTap {
    pub const fn last(layer: usize, sublayer: SubLayer) -> Self {
        Self { layer, sublayer, position: TokenPosition::LastToken }
    }

    /// Layer 0 only exposes the embedding stream (`MlpOut`).
    pub fn validate(&self, layers: usize, seq_len: usize) -> Result<()> {
        if self.layer > layers {
            return Err(Error::InvalidTap(format!("layer {} beyond L={}", self.layer, layers)));
        }
        if self.layer == 0 && self.sublayer == SubLayer::AttnOut {
            return Err(Error::InvalidTap("layer 0 has no attention output".into()));
        }
        if self.position.resolve(seq_len).is_none() {
            return Err(Error::InvalidTap(format!(
                "position {:?} outside sequence of length {}",
                self.position, seq_len
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SubLayerTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.sublayer)?;
        if let TokenPosition::Index(i) = self.position {
            write!(f, "@{i}")?;
        }
        Ok(())
    }
}

/// States captured during one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStateBundle {
    pub states: BTreeMap<SubLayerTap, Vec<f64>>,
    /// Logits at the last input position.
    pub final_logits: Vec<f64>,
    /// Argmax of `final_logits`, lowest id on ties.
    pub predicted_token: TokenId,
}

impl HiddenStateBundle {
    pub fn new(states: BTreeMap<SubLayerTap, Vec<f64>>, final_logits: Vec<f64>) -> Self {
        let predicted_token = argmax(&final_logits).unwrap_or(0) as TokenId;
        Self { states, final_logits, predicted_token }
    }

    pub fn state(&self, tap: &SubLayerTap) -> Result<&[f64]> {
        self.states.get(tap).map(Vec::as_slice).ok_or_else(|| Error::InvalidTap(format!("tap {tap} was not captured")))
    }

    /// Re-derive `predicted_token` after the logits were edited.
    pub fn refresh_prediction(&mut self) {
        self.predicted_token = argmax(&self.final_logits).unwrap_or(0) as TokenId;
    }
}

/// Every sub-layer tap of a backend with `layers` layers at the last position,
/// including the layer-0 embedding stream.
pub fn all_taps(layers: usize) -> Vec<SubLayerTap> {
    let mut taps = Vec::with_capacity(2 * layers + 1);
    taps.push(SubLayerTap::last(0, SubLayer::MlpOut));
    for l in 1..=layers {
        taps.push(SubLayerTap::last(l, SubLayer::AttnOut));
        taps.push(SubLayerTap::last(l, SubLayer::MlpOut));
    }
    taps
}

/// A causal LM backbone.
///
/// Implementations must be immutable once built; forward passes take `&self`
/// and may run concurrently.
///
/// Real-model adapters only need to turn prompt parts (text and media
/// references) into token ids with media slots and return a
/// [`HiddenStateBundle`] for them. Labels used as reranking options must map
/// to single tokens; an adapter whose tokenizer splits them must override
/// [`Backend::option_token_id`] with substitute single-token ids.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn encode(&self, parts: &[PromptPart]) -> Result<TokenSequence>;

    fn decode(&self, ids: &[TokenId]) -> String;

    fn forward_with_taps(&self, tokens: &TokenSequence, taps: &[SubLayerTap]) -> Result<HiddenStateBundle>;

    /// Column `w_id` of the unembedding matrix.
    fn lm_head_column(&self, token: TokenId) -> Result<Vec<f64>>;

    /// Token that ends generation, if the backend has one.
    fn stop_token(&self) -> Option<TokenId> {
        None
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        self.encode(&[PromptPart::Text(text.into())])
    }

    /// Resolve an option label to the single token whose logit scores it.
    fn option_token_id(&self, option: &str) -> Result<TokenId> {
        let seq = self.tokenize(option)?;
        match seq.ids.as_slice() {
            [id] => Ok(*id),
            _ => Err(Error::UnsupportedOption(format!("'{option}' is {} tokens, expected exactly one", seq.len()))),
        }
    }

    fn generate_greedy_token(&self, tokens: &TokenSequence) -> Result<(TokenId, HiddenStateBundle)> {
        let bundle = self.forward_with_taps(tokens, &all_taps(self.descriptor().layers))?;
        Ok((bundle.predicted_token, bundle))
    }

    /// Final-position logits of `option_ids`, in input order.
    fn option_logits(&self, tokens: &TokenSequence, option_ids: &[TokenId]) -> Result<Vec<f64>> {
        let vocab = self.descriptor().vocab;
        if let Some(&id) = option_ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::InvalidToken { id, vocab });
        }
        let bundle = self.forward_with_taps(tokens, &[])?;
        Ok(option_ids.iter().map(|&id| bundle.final_logits[id as usize]).collect())
    }
}

macro_rules! forward_backend {
    ($ty:ty) => {
        impl<B: Backend + ?Sized> Backend for $ty {
            fn descriptor(&self) -> &BackendDescriptor {
                (**self).descriptor()
            }
            fn encode(&self, parts: &[PromptPart]) -> Result<TokenSequence> {
                (**self).encode(parts)
            }
            fn decode(&self, ids: &[TokenId]) -> String {
                (**self).decode(ids)
            }
            fn forward_with_taps(&self, tokens: &TokenSequence, taps: &[SubLayerTap]) -> Result<HiddenStateBundle> {
                (**self).forward_with_taps(tokens, taps)
            }
            fn lm_head_column(&self, token: TokenId) -> Result<Vec<f64>> {
                (**self).lm_head_column(token)
            }
            fn stop_token(&self) -> Option<TokenId> {
                (**self).stop_token()
            }
            fn tokenize(&self, text: &str) -> Result<TokenSequence> {
                (**self).tokenize(text)
            }
            fn option_token_id(&self, option: &str) -> Result<TokenId> {
                (**self).option_token_id(option)
            }
            fn generate_greedy_token(&self, tokens: &TokenSequence) -> Result<(TokenId, HiddenStateBundle)> {
                (**self).generate_greedy_token(tokens)
            }
            fn option_logits(&self, tokens: &TokenSequence, option_ids: &[TokenId]) -> Result<Vec<f64>> {
                (**self).option_logits(tokens, option_ids)
            }
        }
    };
}

forward_backend!(&B);
forward_backend!(alloc::boxed::Box<B>);
forward_backend!(alloc::sync::Arc<B>);

/// Greedy multi-token continuation. Stops at the backend's stop token
/// (not included) or after `max_new_tokens`.
pub fn generate_greedy<B: Backend + ?Sized>(
    backend: &B,
    prompt: &TokenSequence,
    max_new_tokens: usize,
) -> Result<Vec<TokenId>> {
    let mut seq = prompt.clone();
    let mut out = Vec::new();
    let stop = backend.stop_token();
    for _ in 0..max_new_tokens {
        let bundle = backend.forward_with_taps(&seq, &[])?;
        let next = bundle.predicted_token;
        if Some(next) == stop {
            break;
        }
        out.push(next);
        seq.ids.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_validation() {
        let t = SubLayerTap::last(5, SubLayer::AttnOut);
        assert!(matches!(t.validate(4, 3), Err(Error::InvalidTap(_))));
        assert!(SubLayerTap::last(4, SubLayer::AttnOut).validate(4, 3).is_ok());
        assert!(SubLayerTap::last(0, SubLayer::AttnOut).validate(4, 3).is_err());
        assert!(SubLayerTap::last(0, SubLayer::MlpOut).validate(4, 3).is_ok());
        let idx = SubLayerTap { layer: 1, sublayer: SubLayer::MlpOut, position: TokenPosition::Index(3) };
        assert!(idx.validate(4, 3).is_err());
        assert!(idx.validate(4, 4).is_ok());
    }

    #[test]
    fn taps_order_by_layer_then_sublayer() {
        let mut taps = all_taps(3);
        taps.reverse();
        taps.sort();
        assert_eq!(taps, all_taps(3));
        assert_eq!(taps.len(), 7);
    }

    #[test]
    fn descriptor_minimums() {
        let mut d =
            BackendDescriptor { id: "x".into(), layers: 2, hidden: 2, vocab: 4, norm_style: NormStyle::PreNorm };
        assert!(d.validate().is_ok());
        d.layers = 1;
        assert!(d.validate().is_err());
    }

    #[test]
    fn sequence_validation() {
        assert_eq!(TokenSequence::default().validate(10), Err(Error::EmptyInput));
        assert_eq!(
            TokenSequence::from_ids(alloc::vec![1, 10]).validate(10),
            Err(Error::InvalidToken { id: 10, vocab: 10 })
        );
    }
}
