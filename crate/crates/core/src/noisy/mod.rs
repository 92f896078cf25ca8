//! Noisy production targets and the two distance features of the word-choice model.
//!
//! The intended word reaches the choice stage only as a noisy representation: its embedding
//! plus Gaussian noise ([`semantic`]), and its phonetic feature matrix with randomly flipped
//! feature cells ([`phonetic`]). Every candidate is then scored by its cosine distance to the
//! noisy vector and its feature-weighted edit distance to the noisy matrix.

pub mod phonetic;
pub mod semantic;

pub use phonetic::{
    noisy_phonetic_target, noisy_phonetic_target_with, phonetic_distance, Feature, FeatureMatrix,
    PhoneticFeatureTable, PronLexicon, FEATURE_NAMES, N_FEATURES,
};
pub use semantic::{
    noisy_semantic_target, noisy_semantic_target_with, semantic_distance, EmbeddingTable,
};
