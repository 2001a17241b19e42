//! Dialogue utterance rewriting as sequence tagging.
//!
//! A rewrite is a [`TagProgram`]: per utterance token a deletion bit and an
//! optional span of context tokens to insert before it, plus a final END tag
//! for trailing insertions. The crate compiles gold programs from
//! (context, utterance, reference) triples, executes programs, trains a small
//! span-tagging model with an optional self-critical fluency objective, and
//! scores output with BLEU, ROUGE and exact match.

pub mod alignment;
pub mod compiler;
pub mod dialogue;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod reconstruct;
pub mod rl;
pub mod scalar;
pub mod synth;
pub mod tags;

pub use alignment::{find_span, lcs_align, Alignment, Span};
pub use compiler::{check_coverage, compile_tags, CompileError, CoverageReport};
pub use dialogue::{corpus_stats, tokenize, CorpusStats, DialogueInstance, FlatContext, Token, TokenizationMode};
pub use model::{ModelError, ModelInput, TagDistributions, Tagger, TaggerConfig, TaggerParams, Vocab};
pub use reconstruct::{apply_tags, validate_program, ProgramError, Violation};
pub use rl::{RLConfig, RewardKind};
pub use scalar::Scalar;
pub use tags::{TagProgram, TokenTag};

pub type Tagger32 = Tagger<f32>;
pub type Tagger64 = Tagger<f64>;
pub type TaggerParams32 = TaggerParams<f32>;
pub type TaggerParams64 = TaggerParams<f64>;
