//! Contextual predictability toolkit for conversational speech corpora.
//!
//! The crate covers the whole analysis path:
//!
//! - [`corpus`]: JSONL utterances with speaker tags, POS and disfluency regions, plus the
//!   word-level [`Vocabulary`].
//! - [`ngram`]: exact Laplace-smoothed n-gram models (forward and backward) with
//!   enumeration-based infill probabilities.
//! - [`augment`]: infill training data (`<PRE> … <SUF> … <MID> w <eos>`) and inference queries.
//! - [`gateway`]: a uniform scoring interface over the in-process n-gram model or an external
//!   scorer speaking the JSON wire protocol, with a content-addressed response cache.
//! - [`measures`]: forward/backward surprisal, unconditional and conditional PMI, relative
//!   backward predictability.
//! - [`noisy`]: noisy semantic and phonetic production targets and their distances.
//! - [`frames`]: substitution-error frame extraction and per-candidate regression rows.
//! - [`stats`]: OLS, random-intercept LMM, logistic IRLS, LRT, BIC and bootstrap intervals.
//! - [`synth`]: Markov corpora and a softmax speaker for parameter-recovery checks.
//! - [`pipeline`]: the declarative end-to-end driver used by the CLI.

pub mod augment;
pub mod corpus;
mod error;
pub mod frames;
pub mod gateway;
pub mod measures;
pub mod ngram;
pub mod noisy;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod synth;

pub use corpus::{Corpus, Speaker, Utterance, Vocabulary, WordId};
pub use error::{Error, Result};
pub use ngram::{Direction, NGramConfig, NGramModel};

/// Bundled toy conversational corpus (JSONL), used by `selfcheck` and the tests.
pub const TOY_CORPUS: &str = include_str!("../data/toy_corpus.jsonl");

/// Word vectors for every toy-corpus word (fastText text format, 8 dimensions).
pub const TOY_EMBEDDINGS: &str = include_str!("../data/toy_embeddings.vec");

/// IPA pronunciations for every toy-corpus word, over the bundled segment inventory.
pub const TOY_LEXICON: &str = include_str!("../data/toy_lexicon.tsv");
