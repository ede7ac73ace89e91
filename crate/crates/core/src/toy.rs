//! Deterministic toy decoder-only transformer.
//!
//! Pre-norm blocks with RMSNorm, causal multi-head attention, a GELU MLP of
//! width `mlp_ratio * d`, sinusoidal positions and an untied LM head. The
//! tokenizer is byte level: ids below 128 are ASCII bytes.
//!
//! Weights come from a ChaCha8 stream seeded with `ToyConfig::seed`, drawn in
//! this order: token embedding (row per token), then per layer attention
//! gain, `W_q`, `W_k`, `W_v`, `W_o`, MLP gain, `W_up`, `b_up`, `W_down`, then
//! the final gain and the LM head (row per token). Every draw is uniform in
//! `[-1, 1)` times a per-tensor scale.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, BackendDescriptor, HiddenStateBundle, NormStyle, SubLayer, SubLayerTap, TokenId, TokenSequence,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::prompt::PromptPart;

/// Placeholder id for any media reference.
pub const MEDIA_TOKEN: TokenId = 0x1A;
/// Bytes outside the vocabulary map here.
pub const UNKNOWN_TOKEN: TokenId = 0x7F;
/// Generation stops at a newline.
pub const STOP_TOKEN: TokenId = b'\n' as TokenId;

pub const RMS_EPS: f64 = 1e-6;
pub const POSITION_SCALE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub seed: u64,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub mlp_ratio: usize,
    /// Score a multi-byte option label by its first byte.
    pub option_prefix_substitution: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { seed: 1729, layers: 4, hidden: 32, heads: 4, vocab: 128, mlp_ratio: 4, option_prefix_substitution: true }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab < 128 {
            return Err(Error::InvalidConfig(format!("byte-level toy tokenizer needs |V| >= 128, got {}", self.vocab)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f64>,
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    /// `|V| x d`.
    pub token_embedding: Matrix,
    pub layers: Vec<ToyLayer>,
    pub final_norm: Vec<f64>,
    /// `|V| x d`; row `v` is the LM-head column `w_v`.
    pub lm_head: Matrix,
}

struct Draw(ChaCha8Rng);

impl Draw {
    fn unit(&mut self) -> f64 {
        self.0.random_range(-1.0..1.0)
    }

    fn matrix(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.unit() * scale)
    }

    fn vector(&mut self, len: usize, offset: f64, scale: f64) -> Vec<f64> {
        (0..len).map(|_| offset + self.unit() * scale).collect()
    }
}

impl ToyWeights {
    pub fn generate(config: &ToyConfig) -> Self {
        let d = config.hidden;
        let inner = config.mlp_ratio * d;
        let unit_var = |fan_in: usize| libm::sqrt(3.0 / fan_in as f64);
        let mut draw = Draw(ChaCha8Rng::seed_from_u64(config.seed));

        let token_embedding = draw.matrix(config.vocab, d, 1.0);
        let layers = (0..config.layers)
            .map(|_| ToyLayer {
                attn_norm: draw.vector(d, 1.0, 0.1),
                wq: draw.matrix(d, d, unit_var(d)),
                wk: draw.matrix(d, d, unit_var(d)),
                wv: draw.matrix(d, d, unit_var(d)),
                wo: draw.matrix(d, d, 0.5 * unit_var(d)),
                mlp_norm: draw.vector(d, 1.0, 0.1),
                w_up: draw.matrix(inner, d, unit_var(d)),
                b_up: draw.vector(inner, 0.0, 0.1),
                w_down: draw.matrix(d, inner, unit_var(inner)),
            })
            .collect();
        let final_norm = draw.vector(d, 1.0, 0.1);
        let lm_head = draw.matrix(config.vocab, d, unit_var(d));
        Self { token_embedding, layers, final_norm, lm_head }
    }
}

pub fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / libm::sqrt(ms + RMS_EPS);
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + libm::tanh(C * (x + 0.044_715 * x * x * x)))
}

/// Sinusoidal position code, scaled by [`POSITION_SCALE`].
pub fn position_code(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10_000.0, 2.0 * pair / d as f64);
            POSITION_SCALE * if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: ToyConfig,
    descriptor: BackendDescriptor,
    weights: ToyWeights,
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let descriptor = BackendDescriptor {
            id: format!("toy-s{}-l{}-d{}", config.seed, config.layers, config.hidden),
            layers: config.layers,
            hidden: config.hidden,
            vocab: config.vocab,
            norm_style: NormStyle::PreNorm,
        };
        descriptor.validate()?;
        let weights = ToyWeights::generate(&config);
        Ok(Self { config, descriptor, weights })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.descriptor.id = id.into();
        self
    }

    /// Variant whose MLP output projections are all zero, so every MLP
    /// sub-layer leaves the residual stream unchanged.
    pub fn zero_mlp(mut self) -> Self {
        for layer in &mut self.weights.layers {
            layer.w_down.data.iter_mut().for_each(|w| *w = 0.0);
        }
        self.descriptor.id.push_str("-zero-mlp");
        self
    }

    /// Replace LM-head column `w_token`.
    pub fn with_lm_head_column(mut self, token: TokenId, column: &[f64]) -> Result<Self> {
        self.check_token(token)?;
        if column.len() != self.config.hidden {
            return Err(Error::DimensionMismatch { expected: self.config.hidden, found: column.len() });
        }
        self.weights.lm_head.row_mut(token as usize).copy_from_slice(column);
        self.descriptor.id.push_str(&format!("-w{token}"));
        Ok(self)
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if token as usize >= self.config.vocab {
            return Err(Error::InvalidToken { id: token, vocab: self.config.vocab });
        }
        Ok(())
    }

    fn attention(&self, layer: &ToyLayer, stream: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let heads = self.config.heads;
        let hd = self.config.hidden / heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let normed: Vec<Vec<f64>> = stream.iter().map(|x| rms_norm(x, &layer.attn_norm)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|x| layer.wq.matvec(x)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| layer.wk.matvec(x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| layer.wv.matvec(x)).collect();

        let mut scores = vec![0.0; stream.len()];
        (0..stream.len())
            .map(|i| {
                let mut mixed = vec![0.0; self.config.hidden];
                for h in 0..heads {
                    let span = h * hd..(h + 1) * hd;
                    let qi = &q[i][span.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        scores[j] = dot(qi, &k[j][span.clone()]) * scale;
                        max = max.max(scores[j]);
                    }
                    let mut total = 0.0;
                    for s in &mut scores[..=i] {
                        *s = libm::exp(*s - max);
                        total += *s;
                    }
                    for j in 0..=i {
                        let a = scores[j] / total;
                        for (m, vj) in mixed[span.clone()].iter_mut().zip(&v[j][span.clone()]) {
                            *m += a * vj;
                        }
                    }
                }
                layer.wo.matvec(&mixed)
            })
            .collect()
    }

    fn mlp(&self, layer: &ToyLayer, x: &[f64]) -> Vec<f64> {
        let normed = rms_norm(x, &layer.mlp_norm);
        let hidden: Vec<f64> =
            layer.w_up.matvec(&normed).into_iter().zip(&layer.b_up).map(|(u, b)| gelu(u + b)).collect();
        layer.w_down.matvec(&hidden)
    }
}

fn capture(
    out: &mut BTreeMap<SubLayerTap, Vec<f64>>,
    taps: &[SubLayerTap],
    layer: usize,
    sublayer: SubLayer,
    stream: &[Vec<f64>],
) {
    for tap in taps.iter().filter(|t| t.layer == layer && t.sublayer == sublayer) {
        // Positions were validated before the pass.
        let pos = tap.position.resolve(stream.len()).unwrap_or(stream.len() - 1);
        out.insert(*tap, stream[pos].clone());
    }
}

impl Backend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode(&self, parts: &[PromptPart]) -> Result<TokenSequence> {
        let mut seq = TokenSequence::default();
        let mut text = String::new();
        for part in parts {
            match part {
                PromptPart::Text(t) => {
                    for b in t.bytes() {
                        let id = if (b as usize) < 128 { TokenId::from(b) } else { UNKNOWN_TOKEN };
                        seq.ids.push(id);
                    }
                    text.push_str(t);
                }
                PromptPart::Media { .. } => {
                    seq.media_slots.push(seq.ids.len());
                    seq.ids.push(MEDIA_TOKEN);
                    text.push_str(&part.display());
                }
            }
        }
        seq.text = Some(text);
        Ok(seq)
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| if id < 128 { char::from(id as u8) } else { char::REPLACEMENT_CHARACTER }).collect()
    }

    fn forward_with_taps(&self, tokens: &TokenSequence, taps: &[SubLayerTap]) -> Result<HiddenStateBundle> {
        tokens.validate(self.config.vocab)?;
        let n = tokens.len();
        for tap in taps {
            tap.validate(self.config.layers, n)?;
        }
        let d = self.config.hidden;
        let mut states = BTreeMap::new();

        let mut stream: Vec<Vec<f64>> = tokens
            .ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| {
                let emb = self.weights.token_embedding.row(id as usize);
                emb.iter().zip(position_code(pos, d)).map(|(e, p)| e + p).collect()
            })
            .collect();
        capture(&mut states, taps, 0, SubLayer::MlpOut, &stream);

        for (l, layer) in self.weights.layers.iter().enumerate() {
            let attn = self.attention(layer, &stream);
            for (x, a) in stream.iter_mut().zip(attn) {
                x.iter_mut().zip(a).for_each(|(xi, ai)| *xi += ai);
            }
            capture(&mut states, taps, l + 1, SubLayer::AttnOut, &stream);

            for x in stream.iter_mut() {
                let m = self.mlp(layer, x);
                x.iter_mut().zip(m).for_each(|(xi, mi)| *xi += mi);
            }
            capture(&mut states, taps, l + 1, SubLayer::MlpOut, &stream);
        }

        let last = rms_norm(&stream[n - 1], &self.weights.final_norm);
        let logits = self.weights.lm_head.matvec(&last);
        Ok(HiddenStateBundle::new(states, logits))
    }

    fn lm_head_column(&self, token: TokenId) -> Result<Vec<f64>> {
        self.check_token(token)?;
        Ok(self.weights.lm_head.row(token as usize).to_vec())
    }

    fn stop_token(&self) -> Option<TokenId> {
        Some(STOP_TOKEN)
    }

    fn option_token_id(&self, option: &str) -> Result<TokenId> {
        let seq = self.tokenize(option)?;
        match seq.ids.as_slice() {
            [id] => Ok(*id),
            [first, ..] if self.config.option_prefix_substitution => Ok(*first),
            _ => {
                Err(Error::UnsupportedOption(format!("'{option}' is {} byte tokens, expected exactly one", seq.len())))
            }
        }
    }
}
