//! Relation-aware image-text retrieval.
//!
//! Images and descriptions are scored by combining pre-computed global
//! vectors with region and word features. Regions pass through learned
//! relational reasoning and are then aligned with words by attention. The
//! joined pairs are fused into one similarity. The crate also provides the
//! hardest-negative training loop, two-stage retrieval and the evaluation
//! harness.
//!
//! ```
//! use vitr_core::model::{ModelConfig, VitrParams};
//! use vitr_core::synth::{synth_corpus, SynthConfig};
//!
//! let corpus = synth_corpus(&SynthConfig { num_images: 2, k: 4, ..SynthConfig::default() })?;
//! let model = VitrParams::new(ModelConfig { d3: 8, d4: 8, ..ModelConfig::for_corpus(corpus.dims()) })?;
//! let image = model.encode_image(&corpus.images()[0])?;
//! let desc = model.encode_description(&corpus.descriptions()[0])?;
//! let score = model.pair_score(&image, &desc)?;
//! assert!(score > 0.0 && score < 1.0);
//! # Ok::<(), vitr_core::Error>(())
//! ```
//!
//! The guide under `book/` walks through each stage; its snippets run as
//! doc-tests of this crate.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod heatmap;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod reasoning;
pub mod retrieval;
pub mod semantic;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tensors.md")]
    pub struct Tensors;
    #[doc = include_str!("../../../book/src/features.md")]
    pub struct Features;
    #[doc = include_str!("../../../book/src/reasoning.md")]
    pub struct Reasoning;
    #[doc = include_str!("../../../book/src/scoring.md")]
    pub struct Scoring;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/retrieval.md")]
    pub struct Retrieval;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
