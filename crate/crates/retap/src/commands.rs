//! One function per subcommand. Each writes its artifact(s) and returns the
//! number of error records it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use retap_core::pipeline::RagAnswer;
use retap_core::probes::{self, ProbeKind, ProbeReport};
use retap_core::rerank::{rerank_with, RerankCandidate, RerankOptions};
use retap_core::{
    Backend, CandidateScore, EmbeddingRecord, FramingConfig, ModalityInput, PipelineConfig, Reranker, Role,
    TokenSequence, TwoStagePipeline, VectorIndex,
};
use serde::Serialize;

use crate::corpus::{load_corpus, Corpus};
use crate::eval::run_grid;
use crate::report::{csv_path, eval_csv, probe_csv, write_csv, write_json, Artifact, ErrorRecord};
use crate::store::{load_store, save_store, StoreHeader};
use crate::workspace::Workspace;

pub const PROBE_INPUTS: &str = include_str!("../data/probe_inputs.txt");
pub const SYNONYM_PAIRS: &str = include_str!("../data/synonyms.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub errors: usize,
    /// One line for stdout.
    pub summary: String,
}

fn out_path(ws: &Workspace) -> Result<&Path> {
    ws.cfg.paths.out.as_deref().context("no output path (set --out or paths.out)")
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("no {what} path (set --{what} or paths.{what})"))
}

fn load_checked(path: &Path, stage: &str, errors: &mut Vec<ErrorRecord>) -> Result<Corpus> {
    let corpus = load_corpus(path)?;
    for e in &corpus.errors {
        errors.push(ErrorRecord::new(stage, format!("{}:{}", path.display(), e.line), &e.message));
    }
    Ok(corpus)
}

fn artifact<T: Serialize>(ws: &Workspace, command: &str, result: T, errors: Vec<ErrorRecord>) -> Artifact<T> {
    Artifact { command: command.into(), config: ws.config_json(), result, errors }
}

pub fn embed(ws: &Workspace) -> Result<Outcome> {
    let mut errors = Vec::new();
    let corpus = load_checked(required(&ws.cfg.paths.corpus, "corpus")?, "corpus", &mut errors)?;
    let config = ws.embed_config();
    let (mut per_tap, embed_errors) = ws.embed_all(&corpus.inputs(Role::Target), &config, &[config.tap]);
    errors.extend(embed_errors);
    let records = per_tap.remove(0);
    let descriptor = ws.backend.descriptor();
    let tap = config.tap.resolve(descriptor)?;
    let n = errors.len();
    let header = StoreHeader::new(&descriptor.id, descriptor.hidden, tap, &records, ws.config_json(), errors);
    save_store(out_path(ws)?, &header, &records)?;
    Ok(Outcome { errors: n, summary: format!("embedded {} records, d={}", records.len(), descriptor.hidden) })
}

/// Merge stores into one index file; later stores replace earlier ids.
pub fn index(ws: &Workspace, extra_stores: &[PathBuf]) -> Result<Outcome> {
    let stores: Vec<&Path> =
        ws.cfg.paths.store.iter().map(PathBuf::as_path).chain(extra_stores.iter().map(PathBuf::as_path)).collect();
    if stores.is_empty() {
        bail!("no store path (set --store or paths.store)");
    }
    let d = ws.backend.descriptor().hidden;
    let mut index = VectorIndex::new(d);
    let mut errors = Vec::new();
    let mut tap = None;
    for path in stores {
        let (header, records) = load_store(path)?;
        errors.extend(header.errors);
        tap.get_or_insert(header.tap);
        let report = index.add(records)?;
        for id in report.replaced {
            log::warn!("id '{id}' from {} replaced an earlier vector", path.display());
        }
    }
    let records = index.records().to_vec();
    let tap = tap.unwrap_or(ws.embed_config().tap.resolve(ws.backend.descriptor())?);
    let n = errors.len();
    let header = StoreHeader::new(&ws.backend.descriptor().id, d, tap, &records, ws.config_json(), errors);
    save_store(out_path(ws)?, &header, &records)?;
    Ok(Outcome { errors: n, summary: format!("indexed {} records, d={d}", records.len()) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResults {
    pub query_id: String,
    pub results: Vec<CandidateScore>,
}

/// Candidate inputs plus an index, from the store when given, else by
/// embedding the corpus.
fn candidate_index(ws: &Workspace, errors: &mut Vec<ErrorRecord>) -> Result<(Corpus, VectorIndex)> {
    let corpus = load_checked(required(&ws.cfg.paths.corpus, "corpus")?, "corpus", errors)?;
    let records: Vec<EmbeddingRecord> = match &ws.cfg.paths.store {
        Some(path) => {
            let (header, records) = load_store(path)?;
            let expected = ws.embed_config().tap.resolve(ws.backend.descriptor())?;
            if header.backend_id != ws.backend.descriptor().id || header.tap != expected {
                bail!(
                    "store {} was built with {} at {}, run uses {} at {expected}",
                    path.display(),
                    header.backend_id,
                    header.tap,
                    ws.backend.descriptor().id
                );
            }
            records
        }
        None => {
            let config = ws.embed_config();
            let (mut per_tap, e) = ws.embed_all(&corpus.inputs(Role::Target), &config, &[config.tap]);
            errors.extend(e);
            per_tap.remove(0)
        }
    };
    let mut index = VectorIndex::new(ws.backend.descriptor().hidden);
    index.add(records)?;
    Ok((corpus, index))
}

fn reranker(ws: &Workspace) -> Result<Reranker<'_, dyn Backend>> {
    let r = Reranker::new(&*ws.backend, &ws.templates, FramingConfig::preset(&ws.cfg.framing)?)?;
    Ok(match &ws.cfg.task {
        Some(t) => r.with_task(t.clone()),
        None => r,
    })
}

fn pipeline_config(ws: &Workspace) -> PipelineConfig {
    PipelineConfig {
        embed: ws.embed_config(),
        k: ws.cfg.k,
        m: ws.cfg.m,
        rerank: RerankOptions { fusion_weight: ws.cfg.fusion_weight, ..RerankOptions::default() },
    }
}

fn count_candidate_errors(rows: &[QueryResults], errors: &mut Vec<ErrorRecord>) {
    for row in rows {
        for c in &row.results {
            if let Some(e) = &c.error {
                errors.push(ErrorRecord::new("rerank", format!("{}/{}", row.query_id, c.candidate_id), e));
            }
        }
    }
}

pub fn search(ws: &Workspace) -> Result<Outcome> {
    let mut errors = Vec::new();
    let (corpus, index) = candidate_index(ws, &mut errors)?;
    let queries = load_checked(required(&ws.cfg.paths.queries, "queries")?, "queries", &mut errors)?;
    let candidates: BTreeMap<String, ModalityInput> = corpus.inputs(Role::Target).into_iter().collect();
    let reranker = reranker(ws)?;
    let pipeline = TwoStagePipeline::new(ws.embedder(), &index, &candidates, &reranker, pipeline_config(ws))?;
    let inputs = queries.inputs(Role::Query);
    let results: Vec<_> = ws.install(|| inputs.par_iter().map(|(id, q)| pipeline.search(id, q)).collect());
    let mut rows = Vec::new();
    for ((id, _), r) in inputs.iter().zip(results) {
        match r {
            Ok(results) => rows.push(QueryResults { query_id: id.clone(), results }),
            Err(e) => errors.push(ErrorRecord::new("search", id.clone(), e)),
        }
    }
    count_candidate_errors(&rows, &mut errors);
    let n = errors.len();
    write_json(out_path(ws)?, &artifact(ws, "search", &rows, errors))?;
    Ok(Outcome { errors: n, summary: format!("searched {} queries", rows.len()) })
}

/// Rerank the whole corpus for each query, without the embedding stage.
/// Embedding scores (for tie-breaks) come from the store when one is given.
pub fn rerank(ws: &Workspace) -> Result<Outcome> {
    let mut errors = Vec::new();
    let corpus = load_checked(required(&ws.cfg.paths.corpus, "corpus")?, "corpus", &mut errors)?;
    let queries = load_checked(required(&ws.cfg.paths.queries, "queries")?, "queries", &mut errors)?;
    let index = match &ws.cfg.paths.store {
        Some(p) => {
            let mut index = VectorIndex::new(ws.backend.descriptor().hidden);
            index.add(load_store(p)?.1)?;
            Some(index)
        }
        None => None,
    };
    let reranker = reranker(ws)?;
    let embedder = ws.embedder();
    let config = ws.embed_config();
    let inputs: Vec<(String, ModalityInput)> = corpus.inputs(Role::Target);
    let query_inputs = queries.inputs(Role::Query);
    let rows: Vec<Result<QueryResults, ErrorRecord>> = ws.install(|| {
        query_inputs
            .par_iter()
            .map(|(qid, q)| {
                let cosine = match &index {
                    Some(index) => {
                        let v =
                            embedder.embed(qid, q, &config).map_err(|e| ErrorRecord::new("embed", qid.clone(), e))?;
                        index
                            .search(&v.vector, index.len().max(1))
                            .map_err(|e| ErrorRecord::new("search", qid.clone(), e))?
                            .into_iter()
                            .map(|h| (h.id, h.cosine))
                            .collect()
                    }
                    None => BTreeMap::new(),
                };
                let cands: Vec<RerankCandidate<'_>> = inputs
                    .iter()
                    .map(|(id, c)| RerankCandidate {
                        id,
                        input: Some(c),
                        embed_score: cosine.get(id).copied().unwrap_or(0.0),
                    })
                    .collect();
                let options = RerankOptions { fusion_weight: ws.cfg.fusion_weight, ..RerankOptions::default() };
                Ok(QueryResults { query_id: qid.clone(), results: rerank_with(&reranker, q, &cands, options) })
            })
            .collect()
    });
    let mut ok = Vec::new();
    for r in rows {
        match r {
            Ok(row) => ok.push(row),
            Err(e) => errors.push(e),
        }
    }
    count_candidate_errors(&ok, &mut errors);
    let n = errors.len();
    write_json(out_path(ws)?, &artifact(ws, "rerank", &ok, errors))?;
    Ok(Outcome { errors: n, summary: format!("reranked {} candidates for {} queries", inputs.len(), ok.len()) })
}

pub fn eval(ws: &Workspace) -> Result<Outcome> {
    let mut errors = Vec::new();
    let corpus = load_checked(required(&ws.cfg.paths.corpus, "corpus")?, "corpus", &mut errors)?;
    let queries = load_checked(required(&ws.cfg.paths.queries, "queries")?, "queries", &mut errors)?;
    let (grid, grid_errors) = run_grid(ws, &corpus, &queries);
    errors.extend(grid_errors);
    let out = out_path(ws)?;
    write_csv(&csv_path(out), |buf| eval_csv(buf, &grid.cells))?;
    let n = errors.len();
    let cells = grid.cells.len();
    write_json(out, &artifact(ws, "eval", &grid, errors))?;
    Ok(Outcome { errors: n, summary: format!("evaluated {cells} cells") })
}

pub fn rag(ws: &Workspace) -> Result<Outcome> {
    let mut errors = Vec::new();
    let (corpus, index) = candidate_index(ws, &mut errors)?;
    let queries = load_checked(required(&ws.cfg.paths.queries, "queries")?, "queries", &mut errors)?;
    let candidates: BTreeMap<String, ModalityInput> = corpus.inputs(Role::Target).into_iter().collect();
    let reranker = reranker(ws)?;
    let pipeline = TwoStagePipeline::new(ws.embedder(), &index, &candidates, &reranker, pipeline_config(ws))?;
    let inputs = queries.inputs(Role::Query);
    let max = ws.cfg.max_new_tokens;
    let answers: Vec<_> = ws.install(|| inputs.par_iter().map(|(id, q)| pipeline.rag_answer(id, q, max)).collect());

    #[derive(Serialize)]
    struct Row {
        query_id: String,
        #[serde(flatten)]
        answer: RagAnswer,
    }
    let mut rows = Vec::new();
    for ((id, _), a) in inputs.iter().zip(answers) {
        match a {
            Ok(answer) => {
                if let Some(e) = &answer.error {
                    errors.push(ErrorRecord::new("generate", id.clone(), e));
                }
                rows.push(Row { query_id: id.clone(), answer });
            }
            Err(e) => errors.push(ErrorRecord::new("rag", id.clone(), e)),
        }
    }
    let n = errors.len();
    write_json(out_path(ws)?, &artifact(ws, "rag", &rows, errors))?;
    Ok(Outcome { errors: n, summary: format!("answered {} queries", rows.len()) })
}

fn read_or_default(path: &Option<PathBuf>, fallback: &'static str) -> Result<String> {
    match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(fallback.to_string()),
    }
}

/// Non-empty, non-comment lines.
pub fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

/// Tokens of the embedding prompt (run flags) for a plain-text input.
fn prompt_tokens(ws: &Workspace, text: &str) -> Result<TokenSequence> {
    let config = ws.embed_config();
    let prompt = ws.embedder().prompt(&ModalityInput::text(text), &config)?;
    Ok(ws.backend.encode(&prompt.parts)?)
}

pub fn probe(ws: &Workspace, kind: ProbeKind) -> Result<Outcome> {
    let b = &*ws.backend;
    let layers = b.descriptor().layers;
    let range = match ws.cfg.probe.layers {
        Some([lo, hi]) => lo..=hi,
        None => 1..=layers,
    };
    let id = b.descriptor().id.clone();
    let inputs = || -> Result<Vec<String>> {
        Ok(data_lines(&read_or_default(&ws.cfg.probe.inputs, PROBE_INPUTS)?).map(String::from).collect())
    };
    let reports: Vec<ProbeReport> = match kind {
        ProbeKind::Alpha | ProbeKind::Beta => {
            let seqs = inputs()?.iter().map(|t| prompt_tokens(ws, t)).collect::<Result<Vec<_>>>()?;
            vec![if kind == ProbeKind::Alpha {
                probes::sublayer_shift_profile(b, &seqs, range)?
            } else {
                probes::lexical_alignment_profile(b, &seqs, range)?
            }]
        }
        ProbeKind::Synonym => {
            let text = read_or_default(&ws.cfg.probe.synonyms, SYNONYM_PAIRS)?;
            let pairs = data_lines(&text)
                .map(|line| {
                    let (a, c) = line.split_once('\t').with_context(|| format!("synonym line '{line}' has no tab"))?;
                    Ok((prompt_tokens(ws, a.trim())?, prompt_tokens(ws, c.trim())?))
                })
                .collect::<Result<Vec<_>>>()?;
            vec![probes::synonym_similarity(b, &pairs, range)?]
        }
        ProbeKind::Framing => {
            let names = if ws.cfg.sweep.framings.is_empty() {
                FramingConfig::PRESETS.map(String::from).to_vec()
            } else {
                ws.cfg.framings()
            };
            let biases = names
                .iter()
                .map(|n| probes::framing_bias(b, &ws.templates, &FramingConfig::preset(n)?))
                .collect::<retap_core::Result<Vec<_>>>()?;
            vec![ProbeReport::framing(&id, biases)]
        }
        ProbeKind::WordProb => {
            let config = ws.embed_config();
            let top_k = ws.cfg.probe.top_k;
            inputs()?
                .iter()
                .map(|t| {
                    let table = probes::word_probability_table(
                        b,
                        &ws.templates,
                        &ModalityInput::text(t.as_str()),
                        &config,
                        top_k,
                    )?;
                    if table.clipped {
                        log::warn!("top_k {top_k} exceeds the vocabulary; clipped to {}", table.entries.len());
                    }
                    Ok(ProbeReport::word_prob(&id, table))
                })
                .collect::<Result<Vec<_>>>()?
        }
        ProbeKind::Gradient => {
            let d = b.descriptor().hidden;
            let vocab = b.descriptor().vocab as u32;
            let p = &ws.cfg.probe;
            let mut rng = ChaCha8Rng::seed_from_u64(ws.cfg.seed);
            let samples: Vec<(Vec<f64>, u32)> = (0..p.gradient_samples)
                .map(|_| {
                    let h = (0..d).map(|_| p.gradient_scale * rng.random_range(-1.0..1.0)).collect();
                    (h, rng.random_range(0..vocab))
                })
                .collect();
            let checks = ws.install(|| {
                samples
                    .par_iter()
                    .map(|(h, t)| probes::gradient_identity_check(b, h, *t, p.gradient_step))
                    .collect::<retap_core::Result<Vec<_>>>()
            })?;
            vec![ProbeReport::gradient(&id, checks)]
        }
    };
    let out = out_path(ws)?;
    write_csv(&csv_path(out), |buf| probe_csv(buf, &reports))?;
    write_json(out, &artifact(ws, "probe", &reports, Vec::new()))?;
    Ok(Outcome { errors: 0, summary: format!("probe {kind:?}: {} report(s)", reports.len()) })
}
