//! Diagnostics for where a backbone turns semantic states into lexical ones.
//!
//! - shift `alpha`: cosine between consecutive residual-stream sub-layer outputs,
//! - alignment `beta`: cosine between a sub-layer output and the LM-head
//!   column of the greedy next token,
//! - synonym similarity per sub-layer,
//! - the next-token distribution at the embedding position,
//! - label framing bias from a context-free instruction, averaged over both
//!   label orders,
//! - the cross-entropy gradient with respect to the LM-head input, checked
//!   against central differences.
//!
//! Every aggregate is reported as mean and population standard deviation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, HiddenStateBundle, SubLayer, SubLayerTap, TokenId, TokenSequence};
use crate::embedder::EmbedConfig;
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, log_sum_exp, mean_std, orthonormal_basis, projection_residual, softmax};
use crate::prompt::{build_embed_prompt, Binding, ModalityInput, PromptTemplates};
use crate::rerank::{two_way_softmax, FramingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Alpha,
    Beta,
    Synonym,
    Framing,
    WordProb,
    Gradient,
}

impl ProbeKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "alpha" => ProbeKind::Alpha,
            "beta" => ProbeKind::Beta,
            "synonym" => ProbeKind::Synonym,
            "framing" => ProbeKind::Framing,
            "wordprob" | "word_prob" => ProbeKind::WordProb,
            "gradient" => ProbeKind::Gradient,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub sublayer: SubLayer,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProbeDetails {
    None,
    Framing { framings: Vec<FramingBias> },
    WordProb { table: WordProbTable },
    Gradient { checks: Vec<GradientReport>, worst_abs_diff: f64, worst_span_residual: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub backend_id: String,
    pub sample_count: usize,
    /// Sorted by layer, then sublayer.
    pub per_layer: Vec<LayerStat>,
    pub details: ProbeDetails,
}

impl ProbeReport {
    pub fn framing(backend_id: &str, framings: Vec<FramingBias>) -> Self {
        Self {
            kind: ProbeKind::Framing,
            backend_id: backend_id.into(),
            sample_count: framings.len(),
            per_layer: Vec::new(),
            details: ProbeDetails::Framing { framings },
        }
    }

    pub fn word_prob(backend_id: &str, table: WordProbTable) -> Self {
        Self {
            kind: ProbeKind::WordProb,
            backend_id: backend_id.into(),
            sample_count: 1,
            per_layer: Vec::new(),
            details: ProbeDetails::WordProb { table },
        }
    }

    pub fn gradient(backend_id: &str, checks: Vec<GradientReport>) -> Self {
        let worst_abs_diff = checks.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max);
        let worst_span_residual = checks.iter().map(|c| c.span_residual).fold(0.0, f64::max);
        Self {
            kind: ProbeKind::Gradient,
            backend_id: backend_id.into(),
            sample_count: checks.len(),
            per_layer: Vec::new(),
            details: ProbeDetails::Gradient { checks, worst_abs_diff, worst_span_residual },
        }
    }

    pub fn stat(&self, layer: usize, sublayer: SubLayer) -> Option<&LayerStat> {
        self.per_layer.iter().find(|s| s.layer == layer && s.sublayer == sublayer)
    }
}

fn check_range<B: Backend + ?Sized>(backend: &B, layers: &RangeInclusive<usize>) -> Result<()> {
    let total = backend.descriptor().layers;
    if *layers.start() == 0 || layers.start() > layers.end() || *layers.end() > total {
        return Err(Error::InvalidTap(format!(
            "layer range {}..={} outside 1..={total}",
            layers.start(),
            layers.end()
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Samples(BTreeMap<(usize, SubLayer), Vec<f64>>);

impl Samples {
    fn push(&mut self, layer: usize, sublayer: SubLayer, value: f64) {
        self.0.entry((layer, sublayer)).or_default().push(value);
    }

    fn into_report(self, kind: ProbeKind, backend_id: &str, sample_count: usize) -> ProbeReport {
        let per_layer = self
            .0
            .into_iter()
            .map(|((layer, sublayer), xs)| {
                let (mean, std) = mean_std(&xs);
                LayerStat { layer, sublayer, mean, std }
            })
            .collect();
        ProbeReport { kind, backend_id: backend_id.into(), sample_count, per_layer, details: ProbeDetails::None }
    }
}

fn layer_taps(layers: &RangeInclusive<usize>, with_previous_mlp: bool) -> Vec<SubLayerTap> {
    let mut taps = Vec::new();
    for l in layers.clone() {
        if with_previous_mlp {
            taps.push(SubLayerTap::last(l - 1, SubLayer::MlpOut));
        }
        taps.push(SubLayerTap::last(l, SubLayer::AttnOut));
        taps.push(SubLayerTap::last(l, SubLayer::MlpOut));
    }
    taps
}

fn at(bundle: &HiddenStateBundle, layer: usize, sublayer: SubLayer) -> Result<&[f64]> {
    bundle.state(&SubLayerTap::last(layer, sublayer))
}

/// `alpha^Attn_l = cos(h^Mlp_{l-1}, h^Attn_l)` and
/// `alpha^Mlp_l = cos(h^Attn_l, h^Mlp_l)` at the last token.
pub fn sublayer_shift_profile<B: Backend + ?Sized>(
    backend: &B,
    inputs: &[TokenSequence],
    layers: RangeInclusive<usize>,
) -> Result<ProbeReport> {
    if inputs.is_empty() {
        return Err(Error::EmptySample("shift profile needs at least one input"));
    }
    check_range(backend, &layers)?;
    let taps = layer_taps(&layers, true);
    let mut samples = Samples::default();
    for tokens in inputs {
        let bundle = backend.forward_with_taps(tokens, &taps)?;
        for l in layers.clone() {
            let prev = at(&bundle, l - 1, SubLayer::MlpOut)?;
            let attn = at(&bundle, l, SubLayer::AttnOut)?;
            let mlp = at(&bundle, l, SubLayer::MlpOut)?;
            samples.push(l, SubLayer::AttnOut, cosine(prev, attn));
            samples.push(l, SubLayer::MlpOut, cosine(attn, mlp));
        }
    }
    Ok(samples.into_report(ProbeKind::Alpha, &backend.descriptor().id, inputs.len()))
}

/// `beta = cos(h, w_{y*})` per sub-layer, with `y*` the greedy next token.
pub fn lexical_alignment_profile<B: Backend + ?Sized>(
    backend: &B,
    inputs: &[TokenSequence],
    layers: RangeInclusive<usize>,
) -> Result<ProbeReport> {
    if inputs.is_empty() {
        return Err(Error::EmptySample("alignment profile needs at least one input"));
    }
    check_range(backend, &layers)?;
    let taps = layer_taps(&layers, false);
    let mut samples = Samples::default();
    for tokens in inputs {
        let bundle = backend.forward_with_taps(tokens, &taps)?;
        let column = backend.lm_head_column(bundle.predicted_token)?;
        for l in layers.clone() {
            for sub in [SubLayer::AttnOut, SubLayer::MlpOut] {
                samples.push(l, sub, cosine(at(&bundle, l, sub)?, &column));
            }
        }
    }
    Ok(samples.into_report(ProbeKind::Beta, &backend.descriptor().id, inputs.len()))
}

/// Cosine between the two members of each pair at every sub-layer.
pub fn synonym_similarity<B: Backend + ?Sized>(
    backend: &B,
    pairs: &[(TokenSequence, TokenSequence)],
    layers: RangeInclusive<usize>,
) -> Result<ProbeReport> {
    if pairs.is_empty() {
        return Err(Error::EmptySample("synonym probe needs at least one pair"));
    }
    check_range(backend, &layers)?;
    let taps = layer_taps(&layers, false);
    let mut samples = Samples::default();
    for (a, b) in pairs {
        let ha = backend.forward_with_taps(a, &taps)?;
        let hb = backend.forward_with_taps(b, &taps)?;
        for l in layers.clone() {
            for sub in [SubLayer::AttnOut, SubLayer::MlpOut] {
                samples.push(l, sub, cosine(at(&ha, l, sub)?, at(&hb, l, sub)?));
            }
        }
    }
    Ok(samples.into_report(ProbeKind::Synonym, &backend.descriptor().id, pairs.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordProb {
    pub token: TokenId,
    pub text: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordProbTable {
    pub prompt: String,
    pub entries: Vec<WordProb>,
    pub requested_top_k: usize,
    /// `requested_top_k` exceeded the vocabulary and was cut down.
    pub clipped: bool,
    /// Probability mass over the whole vocabulary.
    pub total_probability: f64,
}

/// Top-`k` next-token probabilities at the embedding position, with the LM
/// head (and the final MLP) applied as in normal decoding. Sorted by
/// probability descending, then token id.
pub fn word_probability_table<B: Backend + ?Sized>(
    backend: &B,
    templates: &PromptTemplates,
    input: &ModalityInput,
    config: &EmbedConfig,
    top_k: usize,
) -> Result<WordProbTable> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    let prompt = build_embed_prompt(templates, input, config.flags, config.task_hint.as_ref())?;
    let tokens = backend.encode(&prompt.parts)?;
    let bundle = backend.forward_with_taps(&tokens, &[])?;
    let probs = softmax(&bundle.final_logits);
    let total_probability = probs.iter().sum();
    let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let clipped = top_k > ranked.len();
    let entries = ranked
        .into_iter()
        .take(top_k)
        .map(|(id, probability)| {
            let token = id as TokenId;
            WordProb { token, text: backend.decode(&[token]), probability }
        })
        .collect();
    Ok(WordProbTable { prompt: prompt.rendered_text, entries, requested_top_k: top_k, clipped, total_probability })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramingBias {
    pub framing: String,
    pub labels: [String; 2],
    /// Option logits per label, averaged over both instruction orders.
    pub averaged_logits: [f64; 2],
    /// Two-way softmax probability of the first label.
    pub p_first: f64,
    /// `|p_first - 0.5| * 2`: 0 is balanced, 1 is fully skewed.
    pub bias: f64,
}

fn context_free_logits<B: Backend + ?Sized>(
    backend: &B,
    templates: &PromptTemplates,
    first: &str,
    second: &str,
    ids: [TokenId; 2],
) -> Result<[f64; 2]> {
    let parts =
        templates.get("context_free")?.render(&[("first", Binding::Text(first)), ("second", Binding::Text(second))])?;
    let tokens = backend.encode(&parts)?;
    let z = backend.option_logits(&tokens, &ids)?;
    Ok([z[0], z[1]])
}

/// Intrinsic preference between the two labels of `framing` with no task
/// context. Both label orders are rendered and the per-label logits
/// averaged, so the result does not depend on which label is listed first.
pub fn framing_bias<B: Backend + ?Sized>(
    backend: &B,
    templates: &PromptTemplates,
    framing: &FramingConfig,
) -> Result<FramingBias> {
    let ids = framing.option_ids(backend)?;
    let [a, b] = [&framing.options[0].label, &framing.options[1].label];
    let forward = context_free_logits(backend, templates, a, b, ids)?;
    let reverse = context_free_logits(backend, templates, b, a, ids)?;
    let averaged_logits = [(forward[0] + reverse[0]) / 2.0, (forward[1] + reverse[1]) / 2.0];
    let gap = averaged_logits[0] - averaged_logits[1];
    Ok(FramingBias {
        framing: framing.id.clone(),
        labels: [a.clone(), b.clone()],
        averaged_logits,
        p_first: two_way_softmax(averaged_logits[0], averaged_logits[1]),
        // 2p - 1 = tanh(gap / 2); tanh is odd, so a label swap gives the same value.
        bias: libm::fabs(libm::tanh(gap / 2.0)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub target: TokenId,
    pub loss: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_abs_diff: f64,
    /// Largest component of the analytic gradient outside span(W).
    pub span_residual: f64,
}

/// Cross-entropy of `target` for LM-head input `h`: `logsumexp(W^T h) - w_target . h`.
pub fn lm_head_loss(columns: &[Vec<f64>], h: &[f64], target: TokenId) -> f64 {
    let logits: Vec<f64> = columns.iter().map(|w| dot(w, h)).collect();
    log_sum_exp(&logits) - logits[target as usize]
}

pub fn lm_head_columns<B: Backend + ?Sized>(backend: &B) -> Result<Vec<Vec<f64>>> {
    (0..backend.descriptor().vocab).map(|v| backend.lm_head_column(v as TokenId)).collect()
}

/// Compare `sum_v p(v|h) w_v - w_target` with central differences of the
/// loss (step `step`), and measure how far it leaves span(W).
pub fn gradient_identity_check<B: Backend + ?Sized>(
    backend: &B,
    h_prime: &[f64],
    target: TokenId,
    step: f64,
) -> Result<GradientReport> {
    let d = backend.descriptor().hidden;
    if h_prime.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: h_prime.len() });
    }
    let columns = lm_head_columns(backend)?;
    let target_column = backend.lm_head_column(target)?;

    let logits: Vec<f64> = columns.iter().map(|w| dot(w, h_prime)).collect();
    let p = softmax(&logits);
    let mut analytic: Vec<f64> = target_column.iter().map(|w| -w).collect();
    for (pv, w) in p.iter().zip(&columns) {
        analytic.iter_mut().zip(w).for_each(|(g, wi)| *g += pv * wi);
    }

    let mut probe = h_prime.to_vec();
    let numeric: Vec<f64> = (0..d)
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = lm_head_loss(&columns, &probe, target);
            probe[i] = orig - step;
            let down = lm_head_loss(&columns, &probe, target);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect();

    let max_abs_diff = analytic.iter().zip(&numeric).map(|(a, n)| libm::fabs(a - n)).fold(0.0, f64::max);
    let basis = orthonormal_basis(&columns, 1e-10);
    let span_residual = projection_residual(&basis, &analytic).iter().map(|x| libm::fabs(*x)).fold(0.0, f64::max);
    Ok(GradientReport {
        target,
        loss: lm_head_loss(&columns, h_prime, target),
        analytic,
        numeric,
        max_abs_diff,
        span_residual,
    })
}
