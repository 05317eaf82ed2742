//! Desk-scale vision-language pipeline for interactive dermatology diagnosis.
//!
//! The crate holds everything except the HTTP service: the model and its
//! autodiff engine, the tokenizer, checkpoints, the synthetic corpus with its
//! pixel-statistics oracle, dataset loaders, the two-stage trainer and the
//! evaluation harness.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod ingest;
pub mod model;
pub mod prompts;
pub mod synth;
pub mod taxonomy;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use image::Image;
pub use model::{
    patchify, unpatchify, Component, DecodeMode, FinishReason, FreezeFlags, Generation, GenerationSettings, PatchGrid,
    PipelineModel, PrefixEmbedding, QueryEmbedding,
};
pub use tensor::Mat;
pub use tokenizer::{TokenSequence, Tokenizer};

#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    pub mod corpus {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/serving.md")]
    pub mod serving {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
