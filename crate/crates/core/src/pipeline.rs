//! Two-stage search (embedding top-K, rerank top-M), Precision@1 and a
//! single-model RAG loop.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backend::{generate_greedy, Backend};
use crate::embedder::{EmbedConfig, Embedder};
use crate::error::{Error, Result};
use crate::index::VectorIndex;
use crate::prompt::{Binding, ModalityInput, PromptFlags, PromptSpec, PromptTemplates};
use crate::rerank::{rerank_with, CandidateScore, RelevanceScorer, RerankCandidate, RerankOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub embed: EmbedConfig,
    /// Stage-1 depth.
    pub k: usize,
    /// Rerank pool, `1 <= m <= k`.
    pub m: usize,
    #[serde(default)]
    pub rerank: RerankOptions,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.k {
            return Err(Error::InvalidConfig(format!("need 1 <= M <= K, got K={} M={}", self.k, self.m)));
        }
        if !(0.0..=1.0).contains(&self.rerank.fusion_weight) {
            return Err(Error::InvalidConfig(format!("fusion weight {} outside [0, 1]", self.rerank.fusion_weight)));
        }
        Ok(())
    }
}

pub struct TwoStagePipeline<'a, B: ?Sized, S> {
    embedder: Embedder<'a, B>,
    index: &'a VectorIndex,
    candidates: &'a BTreeMap<String, ModalityInput>,
    scorer: S,
    config: PipelineConfig,
}

impl<'a, B: Backend + ?Sized, S: RelevanceScorer> TwoStagePipeline<'a, B, S> {
    pub fn new(
        embedder: Embedder<'a, B>,
        index: &'a VectorIndex,
        candidates: &'a BTreeMap<String, ModalityInput>,
        scorer: S,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self { embedder, index, candidates, scorer, config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn search(&self, query_id: &str, query: &ModalityInput) -> Result<Vec<CandidateScore>> {
        if self.index.is_empty() {
            return Ok(Vec::new());
        }
        let record = self.embedder.embed(query_id, query, &self.config.embed)?;
        self.search_with_vector(query, &record.vector)
    }

    /// Stage 2 onwards for an already embedded query. The reranked pool comes
    /// first, then the rest of the top-K in embedding order.
    pub fn search_with_vector(&self, query: &ModalityInput, vector: &[f32]) -> Result<Vec<CandidateScore>> {
        if self.index.is_empty() {
            return Ok(Vec::new());
        }
        let hits = self.index.search(vector, self.config.k)?;
        let pool_len = self.config.m.min(hits.len());
        let pool: Vec<RerankCandidate<'_>> = hits[..pool_len]
            .iter()
            .map(|h| RerankCandidate { id: &h.id, input: self.candidates.get(&h.id), embed_score: h.cosine })
            .collect();
        let mut out = rerank_with(&self.scorer, query, &pool, self.config.rerank);
        out.extend(hits[pool_len..].iter().enumerate().map(|(i, h)| CandidateScore {
            candidate_id: h.id.clone(),
            relevance: None,
            embed_score: h.cosine,
            rank: pool_len + i + 1,
            error: None,
        }));
        Ok(out)
    }

    /// Retrieve evidence, then answer with the same backend. A generation
    /// failure keeps the evidence and reports the error.
    pub fn rag_answer(&self, question_id: &str, question: &ModalityInput, max_new_tokens: usize) -> Result<RagAnswer> {
        if self.index.is_empty() {
            return Err(Error::EmptySample("rag needs a non-empty index"));
        }
        let evidence = self.search(question_id, question)?;
        let inputs: Vec<&ModalityInput> = evidence
            .iter()
            .take(self.config.m)
            .filter(|s| s.error.is_none())
            .filter_map(|s| self.candidates.get(&s.candidate_id))
            .collect();
        let prompt = build_rag_prompt(self.embedder.templates(), question, &inputs)?;
        let backend = self.embedder.backend();
        let generated =
            backend.encode(&prompt.parts).and_then(|tokens| generate_greedy(backend, &tokens, max_new_tokens));
        Ok(match generated {
            Ok(ids) => {
                RagAnswer { answer_text: backend.decode(&ids), evidence, prompt: prompt.rendered_text, error: None }
            }
            Err(e) => RagAnswer {
                answer_text: String::new(),
                evidence,
                prompt: prompt.rendered_text,
                error: Some(e.to_string()),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagAnswer {
    pub answer_text: String,
    pub evidence: Vec<CandidateScore>,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn build_rag_prompt(
    templates: &PromptTemplates,
    question: &ModalityInput,
    evidence: &[&ModalityInput],
) -> Result<PromptSpec> {
    let mut parts = templates.get("rag.header")?.render(&[])?;
    let block = templates.get("rag.evidence")?;
    let newline = crate::prompt::PromptPart::Text("\n".into());
    for (i, item) in evidence.iter().enumerate() {
        parts.push(newline.clone());
        let n = (i + 1).to_string();
        parts.extend(block.render(&[("n", Binding::Text(&n)), ("evidence", Binding::Input(item))])?);
    }
    parts.push(newline);
    parts.extend(templates.get("rag.question")?.render(&[("question", Binding::Input(question))])?);
    Ok(PromptSpec::from_parts("rag".into(), merge_text(parts)))
}

fn merge_text(parts: Vec<crate::prompt::PromptPart>) -> Vec<crate::prompt::PromptPart> {
    use crate::prompt::PromptPart;
    let mut out: Vec<PromptPart> = Vec::with_capacity(parts.len());
    for p in parts {
        match (out.last_mut(), p) {
            (Some(PromptPart::Text(last)), PromptPart::Text(t)) => last.push_str(&t),
            (_, p) => out.push(p),
        }
    }
    out
}

/// Settings recorded with every evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub backend_id: String,
    pub tap: String,
    pub flags: PromptFlags,
    pub framing: String,
    pub k: usize,
    pub m: usize,
    pub fusion_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub top1_id: Option<String>,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub precision_at_1: f64,
    pub hits: usize,
    pub evaluated: usize,
    pub per_query: Vec<QueryOutcome>,
    /// Queries without a gold set.
    pub excluded: Vec<String>,
    pub config: EvalConfig,
}

impl EvalResult {
    /// Precision@1 recomputed from `per_query`.
    pub fn recomputed(&self) -> f64 {
        let hits = self.per_query.iter().filter(|q| q.hit).count();
        if self.per_query.is_empty() {
            0.0
        } else {
            hits as f64 / self.per_query.len() as f64
        }
    }
}

/// A query hits when its rank-1 result is in its gold set. Queries without
/// gold are listed in `excluded` and do not count.
pub fn precision_at_1(
    results: &[(String, Vec<CandidateScore>)],
    gold: &BTreeMap<String, BTreeSet<String>>,
    config: EvalConfig,
) -> EvalResult {
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for (query_id, ranked) in results {
        let Some(gold_ids) = gold.get(query_id).filter(|g| !g.is_empty()) else {
            excluded.push(query_id.clone());
            continue;
        };
        let top1 = ranked.iter().min_by_key(|s| s.rank).map(|s| s.candidate_id.clone());
        let hit = top1.as_ref().is_some_and(|id| gold_ids.contains(id));
        per_query.push(QueryOutcome { query_id: query_id.clone(), top1_id: top1, hit });
    }
    let hits = per_query.iter().filter(|q| q.hit).count();
    let evaluated = per_query.len();
    let precision_at_1 = if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 };
    EvalResult { precision_at_1, hits, evaluated, per_query, excluded, config }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg() -> EvalConfig {
        EvalConfig {
            backend_id: "b".into(),
            tap: "attn".into(),
            flags: PromptFlags::ALL,
            framing: "mcq".into(),
            k: 4,
            m: 2,
            fusion_weight: 0.0,
        }
    }

    fn top(id: &str) -> Vec<CandidateScore> {
        vec![CandidateScore { candidate_id: id.into(), relevance: Some(1.0), embed_score: 0.0, rank: 1, error: None }]
    }

    fn gold(pairs: &[(&str, &str)]) -> BTreeMap<String, BTreeSet<String>> {
        let mut g: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (q, c) in pairs {
            g.entry(q.to_string()).or_default().insert(c.to_string());
        }
        g
    }

    #[test]
    fn two_of_three() {
        let results = vec![("q1".into(), top("a")), ("q2".into(), top("b")), ("q3".into(), top("x"))];
        let r = precision_at_1(&results, &gold(&[("q1", "a"), ("q2", "b"), ("q3", "c")]), cfg());
        assert!((r.precision_at_1 - 0.666_666_7).abs() < 1e-7);
        assert_eq!(r.precision_at_1, r.recomputed());
        assert_eq!((r.hits, r.evaluated), (2, 3));
    }

    #[test]
    fn all_hits_and_exclusions() {
        let results = vec![("q1".into(), top("a")), ("q9".into(), top("z")), ("q2".into(), vec![])];
        let r = precision_at_1(&results, &gold(&[("q1", "a"), ("q2", "b")]), cfg());
        assert_eq!(r.excluded, ["q9"]);
        assert_eq!(r.per_query[1].top1_id, None);
        assert_eq!(r.precision_at_1, 0.5);
        let r = precision_at_1(&results[..1], &gold(&[("q1", "a")]), cfg());
        assert_eq!(r.precision_at_1, 1.0);
    }

    #[test]
    fn pool_bounds() {
        let mut c = PipelineConfig { embed: EmbedConfig::default(), k: 4, m: 5, rerank: RerankOptions::default() };
        assert!(c.validate().is_err());
        c.m = 0;
        assert!(c.validate().is_err());
        c.m = 4;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rag_prompt_has_one_block_per_evidence() {
        let t = PromptTemplates::default();
        let q = ModalityInput::text("who?");
        let e1 = ModalityInput::text("first fact");
        let e2 = ModalityInput::text("second fact");
        let p = build_rag_prompt(&t, &q, &[&e1]).unwrap();
        assert_eq!(p.rendered_text.matches("Evidence ").count(), 1);
        assert!(p.rendered_text.ends_with("Question: who?\nAnswer:"));
        let p = build_rag_prompt(&t, &q, &[&e1, &e2]).unwrap();
        assert!(p.rendered_text.contains("Evidence 1:\nfirst fact\nEvidence 2:\nsecond fact\n"));
    }
}
