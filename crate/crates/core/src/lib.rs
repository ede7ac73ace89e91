//! Training-free two-stage retrieval on top of causal language models.
//!
//! A [`Backend`] exposes tokenization, forward passes with sub-layer
//! hidden-state capture and LM-head access. On top of it:
//!
//! - [`embedder`] renders one-word-summary prompts and reads a unit-norm
//!   embedding from a residual-stream tap (by default the attention output
//!   of the last layer, which skips the final MLP),
//! - [`rerank`] scores query/candidate pairs with a two-option framing and a
//!   softmax over the two option logits,
//! - [`index`] and [`pipeline`] combine both into search, evaluation and a
//!   single-model RAG loop,
//! - [`probes`] measures sub-layer shift, lexical alignment, synonym
//!   similarity, label framing bias and the LM-head gradient identity.
//!
//! [`toy::ToyBackend`] is a small deterministic transformer used as the
//! reference backend and test substrate.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod backend;
pub mod embedder;
mod error;
pub mod fixtures;
pub mod index;
pub mod linalg;
pub mod pipeline;
pub mod probes;
pub mod prompt;
pub mod rerank;
pub mod toy;

pub use backend::{
    Backend, BackendDescriptor, HiddenStateBundle, NormStyle, SubLayer, SubLayerTap, TokenId, TokenPosition,
    TokenSequence,
};
pub use embedder::{EmbedConfig, Embedder, EmbeddingRecord, TapSelector};
pub use error::{Error, Result};
pub use index::{SearchHit, VectorIndex};
pub use pipeline::{EvalResult, PipelineConfig, TwoStagePipeline};
pub use prompt::{ModalityInput, PromptFlags, PromptSpec, PromptTemplates, Role, Segment, SegmentKind};
pub use rerank::{CandidateScore, FramingConfig, FramingKind, Reranker};
pub use toy::{ToyBackend, ToyConfig};
