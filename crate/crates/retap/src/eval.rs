//! Ablation grids: Precision@1 for every tap x flags x framing x M cell.
//!
//! Work is shared across cells: each (input, flags) pair is run once for all
//! taps, and each (framing, query, candidate) rerank score once for all
//! cells that pool that candidate.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use retap_core::pipeline::{precision_at_1, EvalConfig};
use retap_core::rerank::{RelevanceScorer, RerankOptions};
use retap_core::{
    EmbedConfig, EvalResult, FramingConfig, ModalityInput, PipelineConfig, PromptFlags, Reranker, Role, TapSelector,
    TwoStagePipeline, VectorIndex,
};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::report::ErrorRecord;
use crate::workspace::Workspace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutput {
    pub cells: Vec<EvalResult>,
    /// Candidates that failed to score, summed over cells.
    pub rerank_failures: usize,
}

/// Candidate id -> rerank score (or failure message) for one query.
type ScoreRow = BTreeMap<String, Result<f64, String>>;

/// Scores looked up by candidate id for one query.
struct Lookup<'a>(&'a ScoreRow);

impl RelevanceScorer for Lookup<'_> {
    fn relevance(&self, _: &ModalityInput, id: &str, _: &ModalityInput, _: f64) -> retap_core::Result<f64> {
        match self.0.get(id) {
            Some(Ok(p)) => Ok(*p),
            Some(Err(e)) => Err(retap_core::Error::Backend(e.clone())),
            None => Err(retap_core::Error::Backend(format!("no score for '{id}'"))),
        }
    }
}

struct Stage1 {
    index: VectorIndex,
    /// Query id -> vector; failed queries are absent.
    queries: BTreeMap<String, Vec<f32>>,
}

pub fn run_grid(ws: &Workspace, candidates: &Corpus, queries: &Corpus) -> (GridOutput, Vec<ErrorRecord>) {
    let cfg = &ws.cfg;
    let taps = cfg.taps();
    let flag_sets = cfg.flag_sets();
    let framings = cfg.framings();
    let ms = cfg.m_values();
    let max_m = ms.iter().copied().max().unwrap_or(1);
    let d = ws.backend.descriptor().hidden;
    let mut errors = Vec::new();

    let cand_inputs = candidates.inputs(Role::Target);
    let query_inputs = queries.inputs(Role::Query);
    let cand_map: BTreeMap<String, ModalityInput> = cand_inputs.iter().cloned().collect();

    let mut stage1: BTreeMap<(TapSelector, PromptFlags), Stage1> = BTreeMap::new();
    for &flags in &flag_sets {
        let embed = EmbedConfig { tap: cfg.tap, flags, task_hint: None };
        let (cand_records, e1) = ws.embed_all(&cand_inputs, &embed, &taps);
        let (query_records, e2) = ws.embed_all(&query_inputs, &embed, &taps);
        errors.extend(e1);
        errors.extend(e2);
        for ((tap, cands), qs) in taps.iter().zip(cand_records).zip(query_records) {
            let mut index = VectorIndex::new(d);
            if let Err(e) = index.add(cands) {
                errors.push(ErrorRecord::new("index", format!("{tap}/{flags}"), e));
            }
            let queries = qs.into_iter().map(|r| (r.input_id, r.vector)).collect();
            stage1.insert((*tap, flags), Stage1 { index, queries });
        }
    }

    // Candidates that reach any rerank pool, per query.
    let mut pools: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for s in stage1.values() {
        for (qid, v) in &s.queries {
            if s.index.is_empty() {
                continue;
            }
            if let Ok(hits) = s.index.search(v, cfg.k) {
                pools.entry(qid.as_str()).or_default().extend(hits.into_iter().take(max_m).map(|h| h.id));
            }
        }
    }
    let query_map: BTreeMap<&str, &ModalityInput> = query_inputs.iter().map(|(id, q)| (id.as_str(), q)).collect();
    let pairs: Vec<(&str, &String)> = pools.iter().flat_map(|(q, cs)| cs.iter().map(move |c| (*q, c))).collect();

    let mut scores: BTreeMap<&str, BTreeMap<&str, ScoreRow>> = BTreeMap::new();
    for framing in &framings {
        let reranker = FramingConfig::preset(framing).map_err(|e| e.to_string()).and_then(|f| {
            let r = Reranker::new(&*ws.backend, &ws.templates, f).map_err(|e| e.to_string())?;
            Ok(match &cfg.task {
                Some(task) => r.with_task(task.clone()),
                None => r,
            })
        });
        let reranker = match reranker {
            Ok(r) => r,
            Err(e) => {
                errors.push(ErrorRecord::new("rerank", framing.clone(), e));
                continue;
            }
        };
        let scored: Vec<Result<f64, String>> = ws.install(|| {
            pairs
                .par_iter()
                .map(|(q, c)| reranker.relevance(query_map[q], c, &cand_map[*c], 0.0).map_err(|e| e.to_string()))
                .collect()
        });
        let table = scores.entry(framing.as_str()).or_default();
        for ((q, c), s) in pairs.iter().zip(scored) {
            table.entry(q).or_default().insert((*c).clone(), s);
        }
    }

    let gold = candidates.gold();
    let empty = BTreeMap::new();
    let mut cells = Vec::new();
    let mut rerank_failures = 0;
    for &tap in &taps {
        for &flags in &flag_sets {
            let s1 = &stage1[&(tap, flags)];
            for framing in &framings {
                let Some(table) = scores.get(framing.as_str()) else { continue };
                for &m in &ms {
                    let pcfg = PipelineConfig {
                        embed: EmbedConfig { tap, flags, task_hint: None },
                        k: cfg.k,
                        m,
                        rerank: RerankOptions { fusion_weight: cfg.fusion_weight, ..RerankOptions::default() },
                    };
                    let mut results = Vec::with_capacity(query_inputs.len());
                    for (qid, q) in &query_inputs {
                        let ranked = match s1.queries.get(qid) {
                            Some(v) => {
                                let lookup = Lookup(table.get(qid.as_str()).unwrap_or(&empty));
                                TwoStagePipeline::new(ws.embedder(), &s1.index, &cand_map, lookup, pcfg.clone())
                                    .and_then(|p| p.search_with_vector(q, v))
                                    .unwrap_or_default()
                            }
                            None => Vec::new(),
                        };
                        rerank_failures += ranked.iter().filter(|c| c.error.is_some()).count();
                        results.push((qid.clone(), ranked));
                    }
                    let eval = EvalConfig {
                        backend_id: ws.backend.descriptor().id.clone(),
                        tap: tap.to_string(),
                        flags,
                        framing: framing.clone(),
                        k: cfg.k,
                        m,
                        fusion_weight: cfg.fusion_weight,
                    };
                    cells.push(precision_at_1(&results, &gold, eval));
                }
            }
        }
    }
    if rerank_failures > 0 {
        errors.push(ErrorRecord::new("rerank", "grid", format!("{rerank_failures} candidate scores failed")));
    }
    (GridOutput { cells, rerank_failures }, errors)
}
