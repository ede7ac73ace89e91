//! Backend construction by id.

use anyhow::{bail, Result};
use retap_core::fixtures::tag_oracle;
use retap_core::{Backend, ToyBackend, ToyConfig};

use crate::config::RunConfig;

pub const BACKENDS: [&str; 3] = ["toy", "toy-zero-mlp", "toy-oracle"];

pub fn toy_config(cfg: &RunConfig) -> ToyConfig {
    let b = &cfg.backend;
    ToyConfig {
        seed: cfg.seed,
        layers: b.layers,
        hidden: b.hidden,
        heads: b.heads,
        vocab: b.vocab,
        mlp_ratio: b.mlp_ratio,
        option_prefix_substitution: b.option_prefix_substitution,
    }
}

/// - `toy`: the seeded toy transformer,
/// - `toy-zero-mlp`: the same weights with every MLP output zeroed,
/// - `toy-oracle`: the toy transformer whose option logits follow the
///   `#tag` relevance oracle.
pub fn build_backend(cfg: &RunConfig) -> Result<Box<dyn Backend>> {
    let toy = ToyBackend::new(toy_config(cfg))?;
    Ok(match cfg.backend.id.as_str() {
        "toy" => Box::new(toy),
        "toy-zero-mlp" => Box::new(toy.zero_mlp()),
        "toy-oracle" => Box::new(tag_oracle(toy)?),
        other => bail!("unknown backend '{other}' (available: {})", BACKENDS.join(", ")),
    })
}
