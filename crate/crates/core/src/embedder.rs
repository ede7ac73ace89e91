//! Unit-norm embeddings read from a residual-stream tap.
//!
//! The default tap is the last layer's attention output, which leaves out the
//! final MLP. [`EmbedConfig::baseline`] taps the last MLP output with the
//! bare summary prompt instead.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendDescriptor, SubLayer, SubLayerTap, TokenId, TokenPosition};
use crate::error::{Error, Result};
use crate::linalg::normalized;
use crate::prompt::{build_embed_prompt, ModalityInput, PromptFlags, PromptSpec, PromptTemplates, TaskHint};

/// Tap choice relative to the bound backend's depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TapSelector {
    /// `(L, AttnOut)`.
    #[default]
    FinalAttn,
    /// `(L, MlpOut)`.
    FinalMlp,
    /// `(L - k, MlpOut)`.
    MlpFromEnd(usize),
    Explicit(SubLayerTap),
}

impl TapSelector {
    /// The four depth settings of the tap ablation.
    pub const ABLATION: [Self; 4] =
        [TapSelector::FinalMlp, TapSelector::FinalAttn, TapSelector::MlpFromEnd(1), TapSelector::MlpFromEnd(2)];

    pub fn resolve(&self, descriptor: &BackendDescriptor) -> Result<SubLayerTap> {
        let layers = descriptor.layers;
        let tap = match *self {
            TapSelector::FinalAttn => SubLayerTap::last(layers, SubLayer::AttnOut),
            TapSelector::FinalMlp => SubLayerTap::last(layers, SubLayer::MlpOut),
            TapSelector::MlpFromEnd(k) => {
                let layer = layers
                    .checked_sub(k)
                    .ok_or_else(|| Error::InvalidTap(format!("mlp-{k} is above the first layer (L={layers})")))?;
                SubLayerTap::last(layer, SubLayer::MlpOut)
            }
            TapSelector::Explicit(tap) => tap,
        };
        if tap.layer > layers || (tap.layer == 0 && tap.sublayer == SubLayer::AttnOut) {
            return Err(Error::InvalidTap(format!("{tap} is not a tap of a {layers}-layer backend")));
        }
        Ok(tap)
    }
}

impl fmt::Display for TapSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapSelector::FinalAttn => f.write_str("attn"),
            TapSelector::FinalMlp => f.write_str("mlp"),
            TapSelector::MlpFromEnd(k) => write!(f, "mlp-{k}"),
            TapSelector::Explicit(tap) => write!(f, "{tap}"),
        }
    }
}

impl FromStr for TapSelector {
    type Err = Error;

    /// `attn`, `mlp`, `mlp-<k>`, or `<layer>:<attn|mlp>[@<position>]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidTap(format!("cannot parse tap '{s}'"));
        match s.trim() {
            "attn" | "attn-out" => return Ok(TapSelector::FinalAttn),
            "mlp" | "mlp-out" => return Ok(TapSelector::FinalMlp),
            _ => {}
        }
        if let Some(k) = s.trim().strip_prefix("mlp-") {
            return k.parse().map(TapSelector::MlpFromEnd).map_err(|_| bad());
        }
        let (layer, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        let (sub, position) = match rest.split_once('@') {
            Some((sub, pos)) => (sub, TokenPosition::Index(pos.parse().map_err(|_| bad())?)),
            None => (rest, TokenPosition::LastToken),
        };
        let sublayer = match sub {
            "attn" => SubLayer::AttnOut,
            "mlp" => SubLayer::MlpOut,
            _ => return Err(bad()),
        };
        Ok(TapSelector::Explicit(SubLayerTap { layer: layer.parse().map_err(|_| bad())?, sublayer, position }))
    }
}

impl From<TapSelector> for String {
    fn from(t: TapSelector) -> Self {
        t.to_string()
    }
}

impl TryFrom<String> for TapSelector {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub tap: TapSelector,
    pub flags: PromptFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_hint: Option<TaskHint>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { tap: TapSelector::FinalAttn, flags: PromptFlags::ALL, task_hint: None }
    }
}

impl EmbedConfig {
    /// Last-MLP tap with the bare summary prompt.
    pub fn baseline() -> Self {
        Self { tap: TapSelector::FinalMlp, flags: PromptFlags::NONE, task_hint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub input_id: String,
    pub vector: Vec<f32>,
    pub backend_id: String,
    pub tap: SubLayerTap,
    pub prompt_hash: String,
    /// Greedy next token at the tapped position.
    pub predicted_token: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchError {
    pub index: usize,
    pub input_id: String,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchOutput {
    pub records: Vec<EmbeddingRecord>,
    pub errors: Vec<BatchError>,
}

pub struct Embedder<'a, B: ?Sized> {
    backend: &'a B,
    templates: &'a PromptTemplates,
}

impl<B: ?Sized> Clone for Embedder<'_, B> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<B: ?Sized> Copy for Embedder<'_, B> {}

impl<'a, B: Backend + ?Sized> Embedder<'a, B> {
    pub fn new(backend: &'a B, templates: &'a PromptTemplates) -> Self {
        Self { backend, templates }
    }

    pub fn backend(&self) -> &'a B {
        self.backend
    }

    pub fn templates(&self) -> &'a PromptTemplates {
        self.templates
    }

    pub fn prompt(&self, input: &ModalityInput, config: &EmbedConfig) -> Result<PromptSpec> {
        build_embed_prompt(self.templates, input, config.flags, config.task_hint.as_ref())
    }

    pub fn embed(&self, input_id: &str, input: &ModalityInput, config: &EmbedConfig) -> Result<EmbeddingRecord> {
        let mut records = self.embed_taps(input_id, input, config, &[config.tap])?;
        Ok(records.remove(0))
    }

    /// One forward pass, one record per tap in `taps` (in order). `config.tap`
    /// is ignored.
    pub fn embed_taps(
        &self,
        input_id: &str,
        input: &ModalityInput,
        config: &EmbedConfig,
        taps: &[TapSelector],
    ) -> Result<Vec<EmbeddingRecord>> {
        let prompt = self.prompt(input, config)?;
        let descriptor = self.backend.descriptor();
        let resolved = taps.iter().map(|t| t.resolve(descriptor)).collect::<Result<Vec<_>>>()?;
        let tokens = self.backend.encode(&prompt.parts)?;
        let bundle = self.backend.forward_with_taps(&tokens, &resolved)?;
        let prompt_hash = prompt.hash();
        resolved
            .into_iter()
            .map(|tap| {
                let unit = normalized(bundle.state(&tap)?).ok_or(Error::DegenerateVector)?;
                Ok(EmbeddingRecord {
                    input_id: input_id.to_string(),
                    vector: unit.into_iter().map(|x| x as f32).collect(),
                    backend_id: descriptor.id.clone(),
                    tap,
                    prompt_hash: prompt_hash.clone(),
                    predicted_token: bundle.predicted_token,
                })
            })
            .collect()
    }

    /// Embeds each input independently; failures are collected, not fatal.
    pub fn embed_batch<S: AsRef<str>>(&self, inputs: &[(S, ModalityInput)], config: &EmbedConfig) -> BatchOutput {
        let mut out = BatchOutput::default();
        for (index, (id, input)) in inputs.iter().enumerate() {
            match self.embed(id.as_ref(), input, config) {
                Ok(record) => out.records.push(record),
                Err(error) => out.errors.push(BatchError { index, input_id: id.as_ref().to_string(), error }),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{ToyBackend, ToyConfig};
    use alloc::vec;

    fn toy() -> ToyBackend {
        ToyBackend::new(ToyConfig::default()).unwrap()
    }

    fn unit_norm(v: &[f32]) -> f64 {
        libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>())
    }

    #[test]
    fn tap_selectors_resolve_against_depth() {
        let b = toy();
        let d = b.descriptor();
        assert_eq!(TapSelector::FinalAttn.resolve(d).unwrap(), SubLayerTap::last(4, SubLayer::AttnOut));
        assert_eq!(TapSelector::FinalMlp.resolve(d).unwrap(), SubLayerTap::last(4, SubLayer::MlpOut));
        assert_eq!(TapSelector::MlpFromEnd(2).resolve(d).unwrap(), SubLayerTap::last(2, SubLayer::MlpOut));
        assert!(TapSelector::MlpFromEnd(5).resolve(d).is_err());
        assert!("9:attn".parse::<TapSelector>().unwrap().resolve(d).is_err());
    }

    #[test]
    fn tap_selector_strings() {
        for s in ["attn", "mlp", "mlp-1", "3:attn", "2:mlp@4"] {
            assert_eq!(s.parse::<TapSelector>().unwrap().to_string(), s);
        }
        assert!("deep".parse::<TapSelector>().is_err());
        assert!("3:ffn".parse::<TapSelector>().is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let b = toy();
        let t = PromptTemplates::default();
        let e = Embedder::new(&b, &t);
        for cfg in [EmbedConfig::default(), EmbedConfig::baseline()] {
            let r = e.embed("x", &ModalityInput::text("a photo of a red bus"), &cfg).unwrap();
            assert_eq!(r.vector.len(), 32);
            assert!((unit_norm(&r.vector) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attn_and_mlp_taps_differ_unless_mlp_is_zero() {
        let t = PromptTemplates::default();
        let input = ModalityInput::text("a bowl of soup");
        let b = toy();
        let e = Embedder::new(&b, &t);
        let attn = e.embed("q", &input, &EmbedConfig::default()).unwrap();
        let mlp = e.embed("q", &input, &EmbedConfig { tap: TapSelector::FinalMlp, ..EmbedConfig::default() }).unwrap();
        assert_ne!(attn.vector, mlp.vector);

        let z = toy().zero_mlp();
        let e = Embedder::new(&z, &t);
        let attn = e.embed("q", &input, &EmbedConfig::default()).unwrap();
        let mlp = e.embed("q", &input, &EmbedConfig { tap: TapSelector::FinalMlp, ..EmbedConfig::default() }).unwrap();
        assert_eq!(attn.vector, mlp.vector);
    }

    #[test]
    fn batch_collects_errors_and_keeps_order() {
        let b = toy();
        let t = PromptTemplates::default();
        let e = Embedder::new(&b, &t);
        let inputs = vec![
            ("a", ModalityInput::text("first")),
            ("b", ModalityInput::default()),
            ("c", ModalityInput::text("third")),
        ];
        let out = e.embed_batch(&inputs, &EmbedConfig::default());
        assert_eq!(out.records.iter().map(|r| r.input_id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(out.errors.len(), 1);
        assert_eq!(out.errors[0].index, 1);
        assert_eq!(out.errors[0].error, Error::EmptyInput);
        let solo = e.embed("c", &inputs[2].1, &EmbedConfig::default()).unwrap();
        assert_eq!(out.records[1], solo);
    }

    #[test]
    fn multi_tap_matches_single_tap() {
        let b = toy();
        let t = PromptTemplates::default();
        let e = Embedder::new(&b, &t);
        let input = ModalityInput::text("a lighthouse at dusk");
        let base = EmbedConfig { flags: PromptFlags::NONE, ..EmbedConfig::default() };
        let many = e.embed_taps("x", &input, &base, &TapSelector::ABLATION).unwrap();
        for (tap, record) in TapSelector::ABLATION.iter().zip(&many) {
            assert_eq!(record, &e.embed("x", &input, &EmbedConfig { tap: *tap, ..base.clone() }).unwrap());
        }
        assert!(e.embed_taps("x", &input, &base, &[TapSelector::MlpFromEnd(9)]).is_err());
    }
}
