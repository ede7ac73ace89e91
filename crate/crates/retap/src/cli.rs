use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use retap_core::probes::ProbeKind;
use retap_core::{PromptFlags, TapSelector};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "retap", version, about = "Training-free retrieval and probing over causal LM sub-layer taps")]
pub struct Cli {
    #[command(flatten)]
    pub opts: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed a corpus into an embedding store.
    Embed,
    /// Merge embedding stores into one index file.
    Index {
        /// Further stores, after `--store`.
        #[arg(long = "merge")]
        merge: Vec<PathBuf>,
    },
    /// Two-stage search: embedding top-K, then rerank the top-M.
    Search,
    /// Rerank every corpus item for each query.
    Rerank,
    /// Precision@1 over the configured ablation grid.
    Eval,
    /// Run a probe: alpha, beta, synonym, framing, wordprob or gradient.
    Probe {
        #[arg(value_parser = parse_kind)]
        kind: ProbeKind,
    },
    /// Retrieve evidence and answer each query with the same backend.
    Rag,
    /// Print the resolved configuration as TOML.
    Config,
}

fn parse_kind(s: &str) -> Result<ProbeKind, String> {
    ProbeKind::parse(s)
        .ok_or_else(|| format!("unknown probe '{s}' (alpha, beta, synonym, framing, wordprob, gradient)"))
}

/// Flags that override the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// toy, toy-zero-mlp or toy-oracle.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// attn, mlp, mlp-<k> or <layer>:<attn|mlp>[@<pos>].
    #[arg(long, global = true)]
    pub tap: Option<TapSelector>,
    /// none, all, or a comma list of ground, noise, task.
    #[arg(long, global = true)]
    pub flags: Option<PromptFlags>,
    /// mcq, yes_no, true_false or right_wrong.
    #[arg(long, global = true)]
    pub framing: Option<String>,
    /// Stage-1 candidates per query.
    #[arg(long = "K", global = true)]
    pub k: Option<usize>,
    /// Stage-1 candidates re-scored by the reranker.
    #[arg(long = "M", global = true)]
    pub m: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for the toy weights and sampled probe states.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Weight of the embedding score mixed into pool relevance.
    #[arg(long, global = true)]
    pub fusion_weight: Option<f64>,
    /// Answer length limit for rag.
    #[arg(long, global = true)]
    pub max_new_tokens: Option<usize>,
    /// Task id: selects a per-task MCQ template section.
    #[arg(long, global = true)]
    pub task: Option<String>,
    /// Candidate corpus (JSONL).
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Query corpus (JSONL).
    #[arg(long, global = true)]
    pub queries: Option<PathBuf>,
    /// Embedding store to read.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Prompt template file replacing the built-in one.
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    /// Output artifact path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = &self.$src { $dst = v.clone().into(); })*
            };
        }
        set! {
            backend => cfg.backend.id,
            tap => cfg.tap,
            flags => cfg.flags,
            framing => cfg.framing,
            k => cfg.k,
            m => cfg.m,
            jobs => cfg.jobs,
            seed => cfg.seed,
            fusion_weight => cfg.fusion_weight,
            max_new_tokens => cfg.max_new_tokens,
            task => cfg.task,
            corpus => cfg.paths.corpus,
            queries => cfg.paths.queries,
            store => cfg.paths.store,
            templates => cfg.paths.templates,
            out => cfg.paths.out,
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "K = 20\nM = 4\nframing = \"yes_no\"\n[paths]\ncorpus = \"c.jsonl\"\n").unwrap();
        let cli = Cli::try_parse_from([
            "retap",
            "search",
            "--config",
            path.to_str().unwrap(),
            "--M",
            "2",
            "--tap",
            "mlp-2",
            "--flags",
            "ground",
        ])
        .unwrap();
        let cfg = cli.opts.resolve().unwrap();
        assert_eq!((cfg.k, cfg.m), (20, 2));
        assert_eq!(cfg.framing, "yes_no");
        assert_eq!(cfg.tap, TapSelector::MlpFromEnd(2));
        assert_eq!(cfg.paths.corpus.unwrap(), dir.path().join("c.jsonl"));
    }

    #[test]
    fn unknown_probe_is_a_usage_error() {
        let err = Cli::try_parse_from(["retap", "probe", "delta"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(Cli::try_parse_from(["retap", "probe", "framing"]).is_ok());
    }
}
