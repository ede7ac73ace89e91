//! Backends with hand-set output logits, for tests and calibration runs.
//!
//! [`LogitOverride`] wraps any backend and edits the final logits after each
//! forward pass. Hidden states, tokenization and the LM head are untouched.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backend::{Backend, BackendDescriptor, HiddenStateBundle, SubLayerTap, TokenId, TokenSequence};
use crate::error::Result;
use crate::prompt::{ModalityInput, PromptPart};

/// Logit magnitude used by the oracles; large enough that the two-way
/// softmax saturates to within `1e-8` of 0 or 1.
pub const ORACLE_MARGIN: f64 = 20.0;

/// A final-logit edit: receives the inner backend and the input tokens.
pub trait LogitEdit<B>: Fn(&B, &TokenSequence, &mut [f64]) + Send + Sync {}

impl<B, F: Fn(&B, &TokenSequence, &mut [f64]) + Send + Sync> LogitEdit<B> for F {}

pub struct LogitOverride<B, F> {
    inner: B,
    edit: F,
    descriptor: BackendDescriptor,
}

impl<B: Backend, F> LogitOverride<B, F>
where
    F: LogitEdit<B>,
{
    /// `suffix` is appended to the inner backend id.
    pub fn new(inner: B, suffix: &str, edit: F) -> Self {
        let mut descriptor = inner.descriptor().clone();
        descriptor.id = format!("{}+{suffix}", descriptor.id);
        Self { inner, edit, descriptor }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: Backend, F> Backend for LogitOverride<B, F>
where
    F: LogitEdit<B>,
{
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode(&self, parts: &[PromptPart]) -> Result<TokenSequence> {
        self.inner.encode(parts)
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        self.inner.decode(ids)
    }

    fn forward_with_taps(&self, tokens: &TokenSequence, taps: &[SubLayerTap]) -> Result<HiddenStateBundle> {
        let mut bundle = self.inner.forward_with_taps(tokens, taps)?;
        (self.edit)(&self.inner, tokens, &mut bundle.final_logits);
        bundle.refresh_prediction();
        Ok(bundle)
    }

    fn lm_head_column(&self, token: TokenId) -> Result<Vec<f64>> {
        self.inner.lm_head_column(token)
    }

    fn stop_token(&self) -> Option<TokenId> {
        self.inner.stop_token()
    }

    fn option_token_id(&self, option: &str) -> Result<TokenId> {
        self.inner.option_token_id(option)
    }
}

/// Pin the logits of `ids` to `values` on every forward pass.
pub fn fixed_option_logits<B: Backend>(
    inner: B,
    ids: [TokenId; 2],
    values: [f64; 2],
) -> LogitOverride<B, impl LogitEdit<B>> {
    LogitOverride::new(inner, "fixed", move |_: &B, _: &TokenSequence, z: &mut [f64]| {
        z[ids[0] as usize] = values[0];
        z[ids[1] as usize] = values[1];
    })
}

/// Both options get the same logit: relevance 0.5, no framing bias.
pub fn symmetric_options<B: Backend>(inner: B, ids: [TokenId; 2]) -> LogitOverride<B, impl LogitEdit<B>> {
    fixed_option_logits(inner, ids, [0.0, 0.0])
}

/// First option `ln 3` above the second: `p = 0.75` and framing bias 0.5.
pub fn ln3_gap<B: Backend>(inner: B, ids: [TokenId; 2]) -> LogitOverride<B, impl LogitEdit<B>> {
    fixed_option_logits(inner, ids, [libm::log(3.0), 0.0])
}

/// Next-token distribution one-hot at `token`.
pub fn one_hot<B: Backend>(inner: B, token: TokenId) -> LogitOverride<B, impl LogitEdit<B>> {
    LogitOverride::new(inner, "one-hot", move |_: &B, _: &TokenSequence, z: &mut [f64]| {
        z.iter_mut().for_each(|x| *x = 0.0);
        z[token as usize] = 1e3;
    })
}

/// First `#tag` word on the line starting with `prefix`.
pub fn line_tag<'t>(text: &'t str, prefix: &str) -> Option<&'t str> {
    text.lines()
        .filter_map(|l| l.trim_start().strip_prefix(prefix))
        .flat_map(str::split_whitespace)
        .find(|w| w.len() > 1 && w.starts_with('#'))
        .map(|w| w.trim_end_matches(|c: char| !c.is_ascii_alphanumeric()))
}

/// Positive-option bytes of the preset framings (`A`, `Yes`, `True`, `Right`).
pub const POSITIVE_OPTIONS: [&str; 4] = ["A", "Y", "T", "R"];
/// Negative-option bytes of the preset framings (`B`, `No`, `False`, `Wrong`).
pub const NEGATIVE_OPTIONS: [&str; 4] = ["B", "N", "F", "W"];

/// A relevance oracle: when the `Query:` and `Candidate:` lines of the
/// prompt carry the same `#tag`, every positive option is pushed up by
/// [`ORACLE_MARGIN`] and every negative one down; otherwise the reverse.
/// Prompts without both lines are left alone.
pub fn tag_oracle<B: Backend>(inner: B) -> Result<LogitOverride<B, impl LogitEdit<B>>> {
    let resolve =
        |labels: [&str; 4]| -> Result<Vec<TokenId>> { labels.iter().map(|l| inner.option_token_id(l)).collect() };
    let positive = resolve(POSITIVE_OPTIONS)?;
    let negative = resolve(NEGATIVE_OPTIONS)?;
    Ok(LogitOverride::new(inner, "tag-oracle", move |b: &B, tokens: &TokenSequence, z: &mut [f64]| {
        let text = b.decode(&tokens.ids);
        let (Some(q), Some(c)) = (line_tag(&text, "Query:"), line_tag(&text, "Candidate:")) else {
            return;
        };
        let sign = if q == c { 1.0 } else { -1.0 };
        for &id in &positive {
            z[id as usize] = sign * ORACLE_MARGIN;
        }
        for &id in &negative {
            z[id as usize] = -sign * ORACLE_MARGIN;
        }
    }))
}

/// A retrieval task whose gold pairs share a `#t<n>` tag, for use with
/// [`tag_oracle`].
#[derive(Debug, Clone)]
pub struct TagTask {
    pub candidates: Vec<(String, ModalityInput)>,
    pub queries: Vec<(String, ModalityInput)>,
    pub gold: BTreeMap<String, BTreeSet<String>>,
}

const SUBJECTS: [&str; 8] = [
    "red bicycle",
    "old lighthouse",
    "bowl of soup",
    "sleeping cat",
    "city bus",
    "pine forest",
    "violin case",
    "snowy road",
];
const PHRASINGS: [&str; 7] =
    ["a photo of", "a picture showing", "find me", "an image with", "looking for", "show", "a shot of"];

/// `n_candidates` tagged items and `n_queries` queries cycling over them.
/// Query wording varies, so embedding similarity alone does not always
/// rank the gold item first.
pub fn tag_task(n_candidates: usize, n_queries: usize) -> TagTask {
    let subject = |i: usize| SUBJECTS[i % SUBJECTS.len()];
    let candidates = (0..n_candidates)
        .map(|c| (format!("c{c:02}"), ModalityInput::text(format!("{} number {c} #t{c}", subject(c)))))
        .collect();
    let mut queries = Vec::with_capacity(n_queries);
    let mut gold = BTreeMap::new();
    for q in 0..n_queries {
        let target = q % n_candidates.max(1);
        let id = format!("q{q:02}");
        let text =
            format!("{} {} #t{target}", PHRASINGS[q % PHRASINGS.len()], subject(target + q / n_candidates.max(1)));
        queries.push((id.clone(), ModalityInput::text(text)));
        gold.insert(id, BTreeSet::from([format!("c{target:02}")]));
    }
    TagTask { candidates, queries, gold }
}
