//! Self-information-update toolkit.
//!
//! Pipeline stages: [`corpus`] ingestion, [`selfdata`] generation of grounded
//! instruction-response pairs through a [`backend`], [`templates`] rendering for
//! naïve and context-aware distillation, [`databuild`] tokenization and packing,
//! the [`trainer`] for the built-in [`model`], the [`exposurelab`] experiment and
//! [`eval`] metrics.

pub mod backend;
pub mod checkpoint;
pub mod corpus;
pub mod databuild;
pub mod eval;
pub mod exposurelab;
pub mod model;
pub mod selfdata;
pub mod templates;
pub mod text;
pub mod tokenizer;
pub mod trainer;

pub use backend::{BackendError, GenerationRequest, GenerationResult, LanguageModel, ScoreRequest, ToyBackend};
pub use corpus::{Article, Corpus, CorpusFormat, IngestError};
pub use model::{ToyLm, ToyLmConfig};
pub use selfdata::{InstructionResponsePair, PairOrigin};
pub use templates::{LossScope, TemplateKind, TrainingSample};
pub use tokenizer::{Tokenizer, TokenizerKind, TokenizerSpec};
