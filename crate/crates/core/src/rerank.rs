//! Pointwise reranking with two-option framings.
//!
//! A pair is scored by the softmax over the logits of the two option tokens
//! at the answer position; option 1 is the positive answer. The default
//! framing is a two-choice question answered with `A` or `B`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, TokenId};
use crate::error::{Error, Result};
use crate::prompt::{Binding, ModalityInput, PromptSpec, PromptTemplates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramingKind {
    Mcq,
    BinaryWords,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramingOption {
    pub label: String,
    /// Text whose single token is scored for this option.
    pub option_token: String,
}

impl FramingOption {
    fn word(word: &str) -> Self {
        Self { label: word.to_string(), option_token: word.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramingConfig {
    pub id: String,
    pub kind: FramingKind,
    /// Positive option first.
    pub options: [FramingOption; 2],
    /// Template section name.
    pub template: String,
}

impl FramingConfig {
    pub const PRESETS: [&'static str; 4] = ["mcq", "yes_no", "true_false", "right_wrong"];

    pub fn mcq() -> Self {
        Self {
            id: "mcq".into(),
            kind: FramingKind::Mcq,
            options: [
                FramingOption { label: "A".into(), option_token: "A".into() },
                FramingOption { label: "B".into(), option_token: "B".into() },
            ],
            template: "rerank.mcq".into(),
        }
    }

    pub fn binary(id: &str, positive: &str, negative: &str) -> Self {
        Self {
            id: id.into(),
            kind: FramingKind::BinaryWords,
            options: [FramingOption::word(positive), FramingOption::word(negative)],
            template: "rerank.binary".into(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mcq" => Ok(Self::mcq()),
            "yes_no" => Ok(Self::binary("yes_no", "Yes", "No")),
            "true_false" => Ok(Self::binary("true_false", "True", "False")),
            "right_wrong" => Ok(Self::binary("right_wrong", "Right", "Wrong")),
            other => Err(Error::InvalidConfig(format!(
                "unknown framing '{other}' (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    /// Same framing with the two options exchanged.
    pub fn swapped(&self) -> Self {
        let mut out = self.clone();
        out.options.swap(0, 1);
        out
    }

    /// Token ids of both options on `backend`; they must be distinct.
    pub fn option_ids<B: Backend + ?Sized>(&self, backend: &B) -> Result<[TokenId; 2]> {
        let first = backend.option_token_id(&self.options[0].option_token)?;
        let second = backend.option_token_id(&self.options[1].option_token)?;
        if first == second {
            return Err(Error::UnsupportedOption(format!(
                "options '{}' and '{}' map to the same token {first}",
                self.options[0].option_token, self.options[1].option_token
            )));
        }
        Ok([first, second])
    }
}

impl FromStr for FramingConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::preset(s)
    }
}

impl fmt::Display for FramingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id)
    }
}

/// `exp(z1) / (exp(z1) + exp(z2))`.
pub fn two_way_softmax(z1: f64, z2: f64) -> f64 {
    1.0 / (1.0 + libm::exp(z2 - z1))
}

/// Render the rerank prompt. For MCQ framings a `rerank.mcq.<task>` section,
/// when present, replaces the default question block.
pub fn build_rerank_prompt(
    templates: &PromptTemplates,
    query: &ModalityInput,
    candidate: &ModalityInput,
    framing: &FramingConfig,
    task: Option<&str>,
) -> Result<PromptSpec> {
    let section = match (framing.kind, task) {
        (FramingKind::Mcq, Some(task)) if templates.contains(&format!("{}.{task}", framing.template)) => {
            format!("{}.{task}", framing.template)
        }
        _ => framing.template.clone(),
    };
    let parts = templates.get(&section)?.render(&[
        ("query", Binding::Input(query)),
        ("candidate", Binding::Input(candidate)),
        ("positive", Binding::Text(&framing.options[0].label)),
        ("negative", Binding::Text(&framing.options[1].label)),
    ])?;
    Ok(PromptSpec::from_parts(format!("{section}/{}", framing.id), parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    /// Probability of the positive option.
    pub probability: f64,
    /// Logits of the positive and negative option tokens.
    pub logits: [f64; 2],
}

impl RelevanceScore {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        Self { probability: two_way_softmax(logits[0], logits[1]), logits }
    }

    /// Probability of the negative option.
    pub fn complement(&self) -> f64 {
        two_way_softmax(self.logits[1], self.logits[0])
    }
}

/// Anything that can score a query/candidate pair into `[0, 1]`.
pub trait RelevanceScorer {
    fn relevance(
        &self,
        query: &ModalityInput,
        candidate_id: &str,
        candidate: &ModalityInput,
        embed_score: f64,
    ) -> Result<f64>;
}

impl<S: RelevanceScorer + ?Sized> RelevanceScorer for &S {
    fn relevance(&self, q: &ModalityInput, id: &str, c: &ModalityInput, e: f64) -> Result<f64> {
        (**self).relevance(q, id, c, e)
    }
}

/// Scores by embedding cosine mapped to `[0, 1]`; reproduces the stage-1 order.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityScorer;

impl RelevanceScorer for IdentityScorer {
    fn relevance(&self, _: &ModalityInput, _: &str, _: &ModalityInput, embed_score: f64) -> Result<f64> {
        Ok((1.0 + embed_score) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Embedding score descending, then id ascending.
    #[default]
    EmbedThenId,
    IdOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_id: String,
    /// Rerank probability; `None` for candidates outside the rerank pool.
    pub relevance: Option<f64>,
    pub embed_score: f64,
    /// 1-based.
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RerankCandidate<'a> {
    pub id: &'a str,
    pub input: Option<&'a ModalityInput>,
    pub embed_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankOptions {
    pub tie_break: TieBreak,
    /// Sort key is `(1 - w) * relevance + w * embed_score`; 0 keeps pure rerank scores.
    pub fusion_weight: f64,
}

impl Default for RerankOptions {
    fn default() -> Self {
        Self { tie_break: TieBreak::EmbedThenId, fusion_weight: 0.0 }
    }
}

/// Score and sort `candidates`. Failed candidates get relevance 0, keep their
/// error, and sink below every successful one. The result does not depend on
/// input order.
pub fn rerank_with<S: RelevanceScorer + ?Sized>(
    scorer: &S,
    query: &ModalityInput,
    candidates: &[RerankCandidate<'_>],
    options: RerankOptions,
) -> Vec<CandidateScore> {
    let mut scored: Vec<(f64, CandidateScore)> = candidates
        .iter()
        .map(|c| {
            let outcome = match c.input {
                Some(input) => scorer.relevance(query, c.id, input, c.embed_score),
                None => Err(Error::Backend(format!("candidate '{}' has no stored input", c.id))),
            };
            let (relevance, error) = match outcome {
                Ok(r) if r.is_finite() => (r, None),
                Ok(r) => (0.0, Some(format!("non-finite relevance {r}"))),
                Err(e) => (0.0, Some(e.to_string())),
            };
            let key = (1.0 - options.fusion_weight) * relevance + options.fusion_weight * c.embed_score;
            let score = CandidateScore {
                candidate_id: c.id.to_string(),
                relevance: Some(relevance),
                embed_score: c.embed_score,
                rank: 0,
                error,
            };
            (key, score)
        })
        .collect();

    scored.sort_by(|(ka, a), (kb, b)| {
        a.error
            .is_some()
            .cmp(&b.error.is_some())
            .then_with(|| kb.total_cmp(ka))
            .then_with(|| match options.tie_break {
                TieBreak::EmbedThenId => b.embed_score.total_cmp(&a.embed_score),
                TieBreak::IdOnly => Ordering::Equal,
            })
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut s))| {
            s.rank = i + 1;
            s
        })
        .collect()
}

/// LM-backed reranker for one framing.
pub struct Reranker<'a, B: ?Sized> {
    backend: &'a B,
    templates: &'a PromptTemplates,
    framing: FramingConfig,
    option_ids: [TokenId; 2],
    task: Option<String>,
}

impl<'a, B: Backend + ?Sized> Reranker<'a, B> {
    pub fn new(backend: &'a B, templates: &'a PromptTemplates, framing: FramingConfig) -> Result<Self> {
        templates.get(&framing.template)?;
        let option_ids = framing.option_ids(backend)?;
        Ok(Self { backend, templates, framing, option_ids, task: None })
    }

    pub fn with_task(mut self, task: impl Into<String>) -> Self {
        self.task = Some(task.into());
        self
    }

    pub fn framing(&self) -> &FramingConfig {
        &self.framing
    }

    pub fn option_ids(&self) -> [TokenId; 2] {
        self.option_ids
    }

    pub fn prompt(&self, query: &ModalityInput, candidate: &ModalityInput) -> Result<PromptSpec> {
        build_rerank_prompt(self.templates, query, candidate, &self.framing, self.task.as_deref())
    }

    pub fn score(&self, query: &ModalityInput, candidate: &ModalityInput) -> Result<RelevanceScore> {
        let prompt = self.prompt(query, candidate)?;
        let tokens = self.backend.encode(&prompt.parts)?;
        let logits = self.backend.option_logits(&tokens, &self.option_ids)?;
        match logits.as_slice() {
            [z1, z2] => Ok(RelevanceScore::from_logits([*z1, *z2])),
            _ => Err(Error::Backend(format!("expected 2 option logits, got {}", logits.len()))),
        }
    }

    pub fn rerank(
        &self,
        query: &ModalityInput,
        candidates: &[RerankCandidate<'_>],
        options: RerankOptions,
    ) -> Vec<CandidateScore> {
        rerank_with(self, query, candidates, options)
    }
}

impl<B: Backend + ?Sized> RelevanceScorer for Reranker<'_, B> {
    fn relevance(&self, query: &ModalityInput, _: &str, candidate: &ModalityInput, _: f64) -> Result<f64> {
        self.score(query, candidate).map(|s| s.probability)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{ToyBackend, ToyConfig};
    use alloc::collections::BTreeMap;
    use alloc::vec;

    #[test]
    fn softmax_values() {
        assert_eq!(two_way_softmax(0.3, 0.3), 0.5);
        assert!((two_way_softmax(2.0, 0.0) - 0.880_797_08).abs() < 1e-6);
        let s = RelevanceScore::from_logits([1.25, -0.5]);
        assert!((s.probability + s.complement() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mcq_prompt_contains_option_block() {
        let t = PromptTemplates::default();
        let p = build_rerank_prompt(
            &t,
            &ModalityInput::text("a red car"),
            &ModalityInput::text("a crimson automobile"),
            &FramingConfig::mcq(),
            None,
        )
        .unwrap();
        assert!(p.rendered_text.contains("A. Yes, the candidate fully matches the query."));
        assert!(p.rendered_text.contains("B. No, the candidate does not match or only partially matches."));
        assert!(p.rendered_text.contains("Query: a red car\nCandidate: a crimson automobile"));
    }

    #[test]
    fn binary_prompt_names_each_label_once() {
        let t = PromptTemplates::default();
        let p = build_rerank_prompt(
            &t,
            &ModalityInput::text("a cat"),
            &ModalityInput::text("a kitten"),
            &FramingConfig::preset("true_false").unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(p.rendered_text.matches("True").count(), 1);
        assert_eq!(p.rendered_text.matches("False").count(), 1);
    }

    #[test]
    fn per_task_mcq_section() {
        let text =
            alloc::format!("{}\n[rerank.mcq.cls]\nQ {{query}} C {{candidate}}\n", crate::prompt::DEFAULT_TEMPLATES);
        let t = PromptTemplates::parse(&text).unwrap();
        let q = ModalityInput::text("q");
        let c = ModalityInput::text("c");
        let p = build_rerank_prompt(&t, &q, &c, &FramingConfig::mcq(), Some("cls")).unwrap();
        assert_eq!(p.rendered_text, "Q q C c");
        let p = build_rerank_prompt(&t, &q, &c, &FramingConfig::mcq(), Some("other")).unwrap();
        assert!(p.rendered_text.starts_with("Task: Determine"));
    }

    #[test]
    fn presets_resolve_on_toy() {
        let b = ToyBackend::new(ToyConfig::default()).unwrap();
        for name in FramingConfig::PRESETS {
            let f = FramingConfig::preset(name).unwrap();
            let ids = f.option_ids(&b).unwrap();
            assert_ne!(ids[0], ids[1]);
        }
        let clash = FramingConfig::binary("x", "Real", "Right");
        assert!(matches!(clash.option_ids(&b), Err(Error::UnsupportedOption(_))));
        assert!(FramingConfig::preset("maybe").is_err());
    }

    struct Table(BTreeMap<&'static str, f64>);

    impl RelevanceScorer for Table {
        fn relevance(&self, _: &ModalityInput, id: &str, _: &ModalityInput, _: f64) -> Result<f64> {
            self.0.get(id).copied().ok_or_else(|| Error::Backend("boom".into()))
        }
    }

    #[test]
    fn ordering_ties_and_failures() {
        let scorer = Table(BTreeMap::from([("a", 0.5), ("b", 0.9), ("c", 0.5), ("d", 0.5)]));
        let x = ModalityInput::text("x");
        let cands = vec![
            RerankCandidate { id: "a", input: Some(&x), embed_score: 0.1 },
            RerankCandidate { id: "e", input: Some(&x), embed_score: 0.99 },
            RerankCandidate { id: "c", input: Some(&x), embed_score: 0.3 },
            RerankCandidate { id: "b", input: Some(&x), embed_score: 0.0 },
            RerankCandidate { id: "d", input: Some(&x), embed_score: 0.3 },
        ];
        let out = rerank_with(&scorer, &x, &cands, RerankOptions::default());
        let ids: Vec<&str> = out.iter().map(|s| s.candidate_id.as_str()).collect();
        assert_eq!(ids, ["b", "c", "d", "a", "e"]);
        assert_eq!(out.iter().map(|s| s.rank).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
        assert!(out[4].error.is_some());
        assert_eq!(out[4].relevance, Some(0.0));

        let mut reversed = cands.clone();
        reversed.reverse();
        assert_eq!(rerank_with(&scorer, &x, &reversed, RerankOptions::default()), out);
    }

    #[test]
    fn singleton_is_rank_one() {
        let scorer = Table(BTreeMap::from([("a", 0.01)]));
        let x = ModalityInput::text("x");
        let out = rerank_with(
            &scorer,
            &x,
            &[RerankCandidate { id: "a", input: Some(&x), embed_score: -0.4 }],
            RerankOptions::default(),
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].rank, 1);
    }
}
