//! Everything a command needs: resolved config, backend, templates and a
//! bounded worker pool.

use anyhow::{Context, Result};
use rayon::prelude::*;
use retap_core::{Backend, EmbedConfig, Embedder, EmbeddingRecord, ModalityInput, PromptTemplates, TapSelector};

use crate::config::RunConfig;
use crate::registry::build_backend;
use crate::report::ErrorRecord;

pub struct Workspace {
    pub cfg: RunConfig,
    pub backend: Box<dyn Backend>,
    pub templates: PromptTemplates,
    pool: rayon::ThreadPool,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backend = build_backend(&cfg)?;
        let templates = match &cfg.paths.templates {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading templates {}", p.display()))?;
                PromptTemplates::parse(&text)?
            }
            None => PromptTemplates::default(),
        };
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build()?;
        Ok(Self { cfg, backend, templates, pool })
    }

    pub fn embedder(&self) -> Embedder<'_, dyn Backend> {
        Embedder::new(&*self.backend, &self.templates)
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig { tap: self.cfg.tap, flags: self.cfg.flags, task_hint: None }
    }

    /// Resolved configuration as embedded in artifacts. The output path is
    /// left out so an artifact's bytes do not depend on where it was written.
    pub fn config_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.cfg).expect("config serializes");
        v["backend"]["resolved_id"] = self.backend.descriptor().id.clone().into();
        if let Some(paths) = v["paths"].as_object_mut() {
            paths.remove("out");
        }
        v
    }

    /// Run `f` on the worker pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    /// Embed every input at every tap with one forward pass per input.
    /// Returns per-tap record lists (input order, failures skipped) and the
    /// failures.
    pub fn embed_all(
        &self,
        inputs: &[(String, ModalityInput)],
        config: &EmbedConfig,
        taps: &[TapSelector],
    ) -> (Vec<Vec<EmbeddingRecord>>, Vec<ErrorRecord>) {
        let embedder = self.embedder();
        let results: Vec<_> = self
            .install(|| inputs.par_iter().map(|(id, input)| embedder.embed_taps(id, input, config, taps)).collect());
        let mut per_tap = vec![Vec::with_capacity(inputs.len()); taps.len()];
        let mut errors = Vec::new();
        for ((id, _), result) in inputs.iter().zip(results) {
            match result {
                Ok(records) => {
                    for (slot, r) in per_tap.iter_mut().zip(records) {
                        slot.push(r);
                    }
                }
                Err(e) => errors.push(ErrorRecord::new(&format!("embed[{}]", config.flags), id.clone(), e)),
            }
        }
        (per_tap, errors)
    }
}
