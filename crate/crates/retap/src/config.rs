//! Run configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use retap_core::{FramingConfig, PromptFlags, TapSelector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// `toy`, `toy-zero-mlp` or `toy-oracle`.
    pub id: String,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub mlp_ratio: usize,
    pub option_prefix_substitution: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let toy = retap_core::ToyConfig::default();
        Self {
            id: "toy".into(),
            layers: toy.layers,
            hidden: toy.hidden,
            heads: toy.heads,
            vocab: toy.vocab,
            mlp_ratio: toy.mlp_ratio,
            option_prefix_substitution: toy.option_prefix_substitution,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Candidate corpus (JSONL).
    pub corpus: Option<PathBuf>,
    /// Query corpus (JSONL).
    pub queries: Option<PathBuf>,
    /// Embedding store of the candidates.
    pub store: Option<PathBuf>,
    /// Prompt template file replacing the built-in one.
    pub templates: Option<PathBuf>,
    /// Main output artifact; a `.csv` sibling is written where it applies.
    pub out: Option<PathBuf>,
}

/// Ablation axes; an empty axis falls back to the single run value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub taps: Vec<TapSelector>,
    #[serde(with = "flag_list")]
    pub flags: Vec<PromptFlags>,
    pub framings: Vec<String>,
    #[serde(rename = "M")]
    pub m: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// One input per line; defaults to the shipped list.
    pub inputs: Option<PathBuf>,
    /// Tab-separated word pairs; defaults to the shipped list.
    pub synonyms: Option<PathBuf>,
    /// Inclusive layer range; defaults to every layer.
    pub layers: Option<[usize; 2]>,
    pub top_k: usize,
    pub gradient_samples: usize,
    pub gradient_step: f64,
    /// Scale of the random LM-head inputs in the gradient probe.
    pub gradient_scale: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            inputs: None,
            synonyms: None,
            layers: None,
            top_k: 10,
            gradient_samples: 100,
            gradient_step: 1e-3,
            gradient_scale: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backend: BackendConfig,
    pub tap: TapSelector,
    #[serde(with = "flag_str")]
    pub flags: PromptFlags,
    pub framing: String,
    /// Per-task MCQ rerank section (`rerank.mcq.<task>`), when the templates have one.
    pub task: Option<String>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub fusion_weight: f64,
    /// Worker threads; 0 uses every core. Does not affect outputs.
    #[serde(skip_serializing)]
    pub jobs: usize,
    pub max_new_tokens: usize,
    pub paths: Paths,
    pub sweep: Sweep,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1729,
            backend: BackendConfig::default(),
            tap: TapSelector::FinalAttn,
            flags: PromptFlags::ALL,
            framing: "mcq".into(),
            task: None,
            k: 10,
            m: 5,
            fusion_weight: 0.0,
            jobs: 0,
            max_new_tokens: 16,
            paths: Paths::default(),
            sweep: Sweep::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Relative paths in the file are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
            for p in [&mut cfg.probe.inputs, &mut cfg.probe.synonyms].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!("K must be at least 1");
        }
        for &m in self.m_values().iter() {
            if m == 0 || m > self.k {
                bail!("need 1 <= M <= K, got K={} M={m}", self.k);
            }
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            bail!("fusion_weight {} outside [0, 1]", self.fusion_weight);
        }
        for f in self.framings() {
            FramingConfig::preset(&f)?;
        }
        if self.probe.top_k == 0 {
            bail!("probe.top_k must be at least 1");
        }
        if let Some([lo, hi]) = self.probe.layers {
            if lo == 0 || lo > hi {
                bail!("probe.layers must be [first, last] with 1 <= first <= last");
            }
        }
        Ok(())
    }

    pub fn taps(&self) -> Vec<TapSelector> {
        if self.sweep.taps.is_empty() {
            vec![self.tap]
        } else {
            self.sweep.taps.clone()
        }
    }

    pub fn flag_sets(&self) -> Vec<PromptFlags> {
        if self.sweep.flags.is_empty() {
            vec![self.flags]
        } else {
            self.sweep.flags.clone()
        }
    }

    pub fn framings(&self) -> Vec<String> {
        if self.sweep.framings.is_empty() {
            vec![self.framing.clone()]
        } else {
            self.sweep.framings.clone()
        }
    }

    pub fn m_values(&self) -> Vec<usize> {
        if self.sweep.m.is_empty() {
            vec![self.m]
        } else {
            self.sweep.m.clone()
        }
    }
}

impl Paths {
    fn rebase(&mut self, dir: &Path) {
        for p in [&mut self.corpus, &mut self.queries, &mut self.store, &mut self.templates, &mut self.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

/// `PromptFlags` as `"ground,noise,task"` strings.
mod flag_str {
    use retap_core::PromptFlags;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &PromptFlags, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(f)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PromptFlags, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

mod flag_list {
    use retap_core::PromptFlags;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(fs: &[PromptFlags], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(fs.iter().map(ToString::to_string))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<PromptFlags>, D::Error> {
        Vec::<String>::deserialize(d)?.iter().map(|s| s.parse().map_err(D::Error::custom)).collect()
    }
}
