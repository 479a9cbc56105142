//! Rule-driven news captioning.
//!
//! The pipeline extracts named entities from a news article, ranks them
//! against the image, builds a semantic rule (verb plus role/entity pairs)
//! and feeds that rule into a small encoder-decoder transformer, both as an
//! encoder input token and as extra attention context in chosen encoder
//! layers.
//!
//! Modules:
//! - [`entity`]: slicing, recognition, top-k selection, typed partition
//! - [`rule`]: situation frames, entity replacement, rule text format
//! - [`scoring`]: hashed text embeddings, stub and contrastive scorers
//! - [`model`]: autodiff tape, prefix attention, encoder-decoder, decoding
//! - [`metrics`]: BLEU-4, ROUGE-L, CIDEr, entity precision/recall
//! - [`pipeline`]: datasets, synthetic corpus, experiments and ablations

pub mod entity;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rule;
pub mod scoring;
pub mod text;

pub use error::{Error, Result};
