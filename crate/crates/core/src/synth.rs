//! Synthetic corpora and substitution errors from a known speaker policy.
//!
//! The simulated speaker intends a latent target word at a slot but produces a different
//! candidate, drawn from a softmax over a linear utility of the candidate's features. The
//! future context is the single realized continuation of the utterance, not an expectation
//! over futures. Fitting the word-choice model to the emitted rows should recover the policy's
//! coefficients, which is what makes this an oracle for the estimation pipeline.

use std::collections::HashSet;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Speaker, Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::frames::{
    assemble_rows, AssembleOptions, FeatureRow, FeatureSources, LexicalClass, SubstitutionFrame,
    FEATURE_COLUMNS,
};
use crate::gateway::{Gateway, GatewayOptions, ResponseCache};
use crate::ngram::{Direction, NGramConfig, NGramModel};
use crate::noisy::{EmbeddingTable, PhoneticFeatureTable, PronLexicon};
use crate::rng;

/// The policy's feature columns, in the order of the reference coefficient vector.
pub const POLICY_FEATURES: [&str; 5] = [
    "logp_unigram",
    "logp_forward",
    "sem_dist",
    "phon_dist",
    "cond_pmi",
];

/// Reference coefficients: frequent and forward-predictable words are favoured, semantically
/// and phonetically distant words and words with high conditional PMI are disfavoured.
pub const REFERENCE_BETA: [f64; 5] = [0.8, 0.2, -2.5, -0.4, -0.6];

/// A first-order Markov chain over word states with geometric utterance lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    pub states: Vec<String>,
    /// Row-stochastic transition matrix, `transition[i][j] = p(state j | state i)`.
    pub transition: Vec<Vec<f64>>,
    /// Mean utterance length in tokens (at least 1).
    #[serde(default = "default_mean_length")]
    pub mean_length: f64,
}

fn default_mean_length() -> f64 {
    8.0
}

impl MarkovChain {
    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::InvalidArgument("Markov chain has no states".into()));
        }
        if self.states.iter().collect::<HashSet<_>>().len() != n {
            return Err(Error::InvalidArgument(
                "Markov chain state names must be unique".into(),
            ));
        }
        if let Some(s) = self
            .states
            .iter()
            .find(|s| s.is_empty() || s.contains(char::is_whitespace))
        {
            return Err(Error::InvalidArgument(format!(
                "state name {s:?} is not a single token"
            )));
        }
        if self.transition.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.transition.len(),
            });
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "transition row {i} has a negative or non-finite entry"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "transition row {i} sums to {total}, not 1"
                )));
            }
        }
        if !(self.mean_length >= 1.0 && self.mean_length.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mean utterance length {} < 1",
                self.mean_length
            )));
        }
        Ok(())
    }

    /// A chain over `n` states `w0 … w{n-1}` with Dirichlet(1)-like random rows.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, u64::MAX);
        let transition = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..n)
                    .map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln())
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / total).collect()
            })
            .collect();
        MarkovChain {
            states: (0..n).map(|i| format!("w{i}")).collect(),
            transition,
            mean_length: default_mean_length(),
        }
    }
}

fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` just above the cumulative total: take the last positive entry.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// `n_utts` utterances sampled from `chain`; utterance `i` uses RNG stream `i` of `seed`.
///
/// The first state is uniform, lengths are `1 + Geometric(1 / mean_length)`, and speakers
/// alternate A/B within conversations of 50 utterances.
pub fn generate_markov_corpus(n_utts: usize, chain: &MarkovChain, seed: u64) -> Result<Corpus> {
    chain.validate()?;
    let n = chain.states.len();
    let length = Geometric::new(1.0 / chain.mean_length)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let utterances = (0..n_utts)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let len = 1 + length.sample(&mut rng) as usize;
            let mut state = rng.random_range(0..n);
            let mut tokens = Vec::with_capacity(len);
            tokens.push(chain.states[state].clone());
            for _ in 1..len {
                state = draw_index(&chain.transition[state], &mut rng);
                tokens.push(chain.states[state].clone());
            }
            let speaker = if i % 2 == 0 { Speaker::A } else { Speaker::B };
            Utterance::new(format!("sim{:04}", i / 50), speaker, tokens)
        })
        .collect();
    Ok(Corpus::new(utterances))
}

/// Softmax choice over candidate utilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPolicy {
    /// Utility coefficient per feature column.
    pub true_beta: IndexMap<String, f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for SpeakerPolicy {
    fn default() -> Self {
        SpeakerPolicy {
            true_beta: POLICY_FEATURES
                .iter()
                .zip(REFERENCE_BETA)
                .map(|(n, b)| (n.to_string(), b))
                .collect(),
            temperature: 1.0,
        }
    }
}

impl SpeakerPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        for (name, b) in &self.true_beta {
            if !FEATURE_COLUMNS.contains(&name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "policy coefficient for unknown feature {name:?}"
                )));
            }
            if !b.is_finite() {
                return Err(Error::NonFinite(format!("policy coefficient {name}")));
            }
        }
        Ok(())
    }

    pub fn utility(&self, row: &FeatureRow) -> Result<f64> {
        let mut u = 0.0;
        for (name, b) in &self.true_beta {
            let v = row.feature(name).ok_or_else(|| {
                Error::InvalidArgument(format!("candidate row lacks feature {name:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{name} of candidate {:?}",
                    row.candidate
                )));
            }
            u += b * v;
        }
        Ok(u)
    }
}

/// `softmax(utilities / temperature)`, computed stably.
pub fn choice_probabilities(utilities: &[f64], temperature: f64) -> Vec<f64> {
    let max = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = utilities
        .iter()
        .map(|u| ((u - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Index drawn from `softmax(utilities / temperature)`.
pub fn sample_choice<R: Rng + ?Sized>(utilities: &[f64], temperature: f64, rng: &mut R) -> usize {
    draw_index(&choice_probabilities(utilities, temperature), rng)
}

/// One simulated error site: the target is `utterance.tokens[position]`.
#[derive(Debug, Clone, Copy)]
pub struct Slot<'a> {
    pub frame_id: usize,
    pub utterance: &'a Utterance,
    pub utterance_index: usize,
    pub position: usize,
}

impl Slot<'_> {
    pub fn target(&self) -> &str {
        &self.utterance.tokens[self.position]
    }
}

/// Supplies the candidate rows of a slot, the target's row flagged with `is_repair`.
pub trait FeatureProvider: Sync {
    fn candidate_rows(&self, slot: &Slot<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<FeatureRow>>;
}

/// Mutually independent Gaussian features for the target and `n_candidates − 1` other words.
///
/// Competitors draw unigram and forward log-probabilities around −7 and −6 (SD 1), semantic
/// distance around 1.0 (SD 0.2), phonetic distance around 2.0 (SD 0.6) and conditional PMI
/// around 0 (SD 0.5); the target sits close to itself in both distance spaces.
#[derive(Debug, Clone)]
pub struct IndependentFeatures {
    words: Vec<String>,
    n_candidates: usize,
}

impl IndependentFeatures {
    pub fn new(words: Vec<String>, n_candidates: usize) -> Result<Self> {
        if n_candidates < 2 || n_candidates > words.len() {
            return Err(Error::InvalidArgument(format!(
                "need 2 <= candidates <= {} words, got {n_candidates}",
                words.len()
            )));
        }
        Ok(IndependentFeatures {
            words,
            n_candidates,
        })
    }
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("valid normal parameters")
}

impl FeatureProvider for IndependentFeatures {
    fn candidate_rows(&self, slot: &Slot<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<FeatureRow>> {
        let target = slot.target();
        let others: Vec<&String> = self.words.iter().filter(|w| *w != target).collect();
        let picked = sample(rng, others.len(), self.n_candidates - 1);
        let mut names: Vec<&str> = vec![target];
        names.extend(picked.iter().map(|i| others[i].as_str()));

        let (uni, fwd, upmi, cpmi) = (
            normal(-7.0, 1.0),
            normal(-6.0, 1.0),
            normal(0.0, 0.5),
            normal(0.0, 0.5),
        );
        let (sem, phon) = (normal(1.0, 0.2), normal(2.0, 0.6));
        let (sem_t, phon_t) = (normal(0.3, 0.1), normal(0.5, 0.3));
        Ok(names
            .into_iter()
            .enumerate()
            .map(|(k, word)| {
                let is_target = k == 0;
                let logp_unigram = uni.sample(rng);
                let logp_forward = fwd.sample(rng);
                let uncond_pmi = upmi.sample(rng);
                let cond_pmi = cpmi.sample(rng);
                let (sem_dist, phon_dist) = if is_target {
                    (sem_t.sample(rng).max(0.0), phon_t.sample(rng).max(0.0))
                } else {
                    (sem.sample(rng), phon.sample(rng))
                };
                let logp_backward = logp_unigram + uncond_pmi;
                FeatureRow {
                    frame_id: slot.frame_id,
                    candidate: word.to_string(),
                    produced: 0,
                    is_repair: is_target,
                    lexical_class: Some(LexicalClass::of(word)),
                    logp_unigram,
                    logp_forward,
                    logp_backward,
                    logp_bidirectional: logp_forward + cond_pmi,
                    uncond_pmi,
                    cond_pmi,
                    rel_backward: logp_backward - logp_forward,
                    sem_dist,
                    phon_dist,
                }
            })
            .collect())
    }
}

/// Features computed by the real pipeline (n-gram gateway, embeddings, pronunciations) over a
/// corpus, scored against the realized context of each slot.
pub struct PipelineFeatures {
    gateway: Gateway,
    unigram: NGramModel,
    vocab: Arc<Vocabulary>,
    embeddings: EmbeddingTable,
    lexicon: PronLexicon,
    features: PhoneticFeatureTable,
    options: AssembleOptions,
}

impl PipelineFeatures {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        gateway: Gateway,
        unigram: NGramModel,
        vocab: Arc<Vocabulary>,
        embeddings: EmbeddingTable,
        lexicon: PronLexicon,
        features: PhoneticFeatureTable,
        options: AssembleOptions,
    ) -> Self {
        PipelineFeatures {
            gateway,
            unigram,
            vocab,
            embeddings,
            lexicon,
            features,
            options,
        }
    }

    /// Bigram models trained on `corpus`, clustered random embeddings and random
    /// pronunciations over the bundled segment inventory; noise streams derive from `seed`.
    pub fn synthetic(corpus: &Corpus, seed: u64) -> Result<Self> {
        let vocab = Arc::new(Vocabulary::build(corpus, 1)?);
        let fwd = Arc::new(NGramModel::train(
            corpus,
            vocab.clone(),
            NGramConfig::new(2, 0.1, Direction::Forward),
        )?);
        let bwd = Arc::new(NGramModel::train(
            corpus,
            vocab.clone(),
            NGramConfig::new(2, 0.1, Direction::Backward),
        )?);
        let unigram = NGramModel::train(
            corpus,
            vocab.clone(),
            NGramConfig::new(1, 0.1, Direction::Forward),
        )?;
        let gateway = Gateway::ngram(
            fwd,
            Some(bwd),
            GatewayOptions::default(),
            ResponseCache::in_memory(),
        )?;
        let words: Vec<&str> = vocab.content_ids().map(|id| vocab.word(id)).collect();
        let embeddings = clustered_embeddings(&words, 16, 6, seed)?;
        let features = PhoneticFeatureTable::bundled();
        let lexicon = random_lexicon(&words, &features, seed)?;
        let options = AssembleOptions {
            seed,
            ..AssembleOptions::default()
        };
        Ok(PipelineFeatures::new(
            gateway, unigram, vocab, embeddings, lexicon, features, options,
        ))
    }
}

impl FeatureProvider for PipelineFeatures {
    fn candidate_rows(&self, slot: &Slot<'_>, _rng: &mut ChaCha8Rng) -> Result<Vec<FeatureRow>> {
        let tokens = &slot.utterance.tokens;
        let frame = SubstitutionFrame {
            conversation_id: slot.utterance.conversation_id.clone(),
            utterance: slot.utterance_index,
            speaker: slot.utterance.speaker,
            pre_context: tokens[..slot.position].to_vec(),
            post_context: tokens[slot.position + 1..].to_vec(),
            error: slot.target().to_string(),
            repair: slot.target().to_string(),
            pos: String::new(),
            category: None,
        };
        let src = FeatureSources {
            gateway: &self.gateway,
            unigram: &self.unigram,
            vocab: &self.vocab,
            embeddings: &self.embeddings,
            lexicon: &self.lexicon,
            features: &self.features,
        };
        let mut rows = assemble_rows(&frame, slot.frame_id, &src, &self.options)?;
        for r in &mut rows {
            r.produced = 0;
        }
        Ok(rows)
    }
}

/// Word vectors scattered around `n_clusters` random centres (words assigned round-robin).
pub fn clustered_embeddings(
    words: &[&str],
    dim: usize,
    n_clusters: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut rng = rng::stream(seed, u64::MAX - 1);
    let unit = normal(0.0, 1.0);
    let spread = normal(0.0, 0.35);
    let centres: Vec<Vec<f64>> = (0..n_clusters.max(1))
        .map(|_| (0..dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut table = EmbeddingTable::new(dim);
    for (i, w) in words.iter().enumerate() {
        let c = &centres[i % centres.len()];
        table.insert(*w, c.iter().map(|x| x + spread.sample(&mut rng)).collect())?;
    }
    Ok(table)
}

/// Random 2–5 segment pronunciations over the table's inventory.
pub fn random_lexicon(
    words: &[&str],
    table: &PhoneticFeatureTable,
    seed: u64,
) -> Result<PronLexicon> {
    let mut rng = rng::stream(seed, u64::MAX - 2);
    let inventory = table.inventory();
    let mut text = String::new();
    for w in words {
        let len = rng.random_range(2..=5);
        let segs: Vec<&str> = (0..len)
            .map(|_| inventory[rng.random_range(0..inventory.len())].as_str())
            .collect();
        text.push_str(&format!("{w}\t{}\n", segs.join(" ")));
    }
    PronLexicon::parse(&text, table)
}

/// Where each simulated error happened and what the speaker produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedFrame {
    pub frame_id: usize,
    pub utterance: usize,
    pub position: usize,
    pub target: String,
    pub produced: String,
}

/// Everything needed to score a recovery run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_beta: IndexMap<String, f64>,
    pub temperature: f64,
    pub seed: u64,
    pub n_frames: usize,
    pub frames: Vec<SimulatedFrame>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub rows: Vec<FeatureRow>,
    pub truth: GroundTruth,
}

/// One simulated substitution per non-empty utterance, at a uniformly chosen position.
///
/// The target's row is kept (flagged `is_repair`) but never chosen: the produced word is drawn
/// from the softmax over the other candidates. Frame `i` draws from RNG stream `i` of `seed`.
pub fn simulate_substitutions(
    corpus: &Corpus,
    policy: &SpeakerPolicy,
    features: &dyn FeatureProvider,
    seed: u64,
) -> Result<Simulation> {
    policy.validate()?;
    let sites: Vec<(usize, &Utterance)> = corpus
        .iter()
        .enumerate()
        .filter(|(_, u)| !u.is_empty())
        .collect();
    if sites.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let results: Vec<Result<(Vec<FeatureRow>, SimulatedFrame)>> = sites
        .par_iter()
        .enumerate()
        .map(|(frame_id, &(utt_index, utt))| {
            let mut rng = rng::stream(seed, frame_id as u64);
            let position = rng.random_range(0..utt.len());
            let slot = Slot {
                frame_id,
                utterance: utt,
                utterance_index: utt_index,
                position,
            };
            let mut rows = features.candidate_rows(&slot, &mut rng)?;
            let competitors: Vec<usize> = (0..rows.len()).filter(|&k| !rows[k].is_repair).collect();
            if competitors.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "frame {frame_id} has no competitor candidates"
                )));
            }
            let utilities = competitors
                .iter()
                .map(|&k| policy.utility(&rows[k]))
                .collect::<Result<Vec<f64>>>()?;
            let chosen = competitors[sample_choice(&utilities, policy.temperature, &mut rng)];
            rows[chosen].produced = 1;
            let frame = SimulatedFrame {
                frame_id,
                utterance: utt_index,
                position,
                target: slot.target().to_string(),
                produced: rows[chosen].candidate.clone(),
            };
            Ok((rows, frame))
        })
        .collect();
    let mut rows = Vec::new();
    let mut frames = Vec::with_capacity(results.len());
    for r in results {
        let (mut rs, f) = r?;
        rows.append(&mut rs);
        frames.push(f);
    }
    Ok(Simulation {
        rows,
        truth: GroundTruth {
            true_beta: policy.true_beta.clone(),
            temperature: policy.temperature,
            seed,
            n_frames: frames.len(),
            frames,
        },
    })
}

/// The `simulate` configuration: a Markov corpus plus a speaker policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_utts: usize,
    /// Explicit chain; when absent a random chain over `n_states` words is used.
    #[serde(default)]
    pub transition: Option<MarkovChain>,
    #[serde(default = "default_n_states")]
    pub n_states: usize,
    #[serde(default = "default_policy_beta")]
    pub true_beta: IndexMap<String, f64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub provider: ProviderKind,
    /// Candidates per frame for the independent provider.
    #[serde(default = "default_n_candidates")]
    pub n_candidates: usize,
}

fn default_n_states() -> usize {
    60
}

fn default_n_candidates() -> usize {
    40
}

fn default_policy_beta() -> IndexMap<String, f64> {
    SpeakerPolicy::default().true_beta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Independent Gaussian features ([`IndependentFeatures`]).
    #[default]
    Independent,
    /// Features from the scoring pipeline ([`PipelineFeatures::synthetic`]).
    Pipeline,
}

impl SimulationConfig {
    pub fn policy(&self) -> SpeakerPolicy {
        SpeakerPolicy {
            true_beta: self.true_beta.clone(),
            temperature: self.temperature,
        }
    }

    pub fn chain(&self) -> MarkovChain {
        self.transition
            .clone()
            .unwrap_or_else(|| MarkovChain::random(self.n_states, self.seed))
    }
}

/// Corpus generation (stream family `seed`) followed by substitution simulation (`seed + 1`).
pub fn run_simulation(config: &SimulationConfig) -> Result<(Corpus, Simulation)> {
    let chain = config.chain();
    let corpus = generate_markov_corpus(config.n_utts, &chain, config.seed)?;
    let policy = config.policy();
    let sub_seed = config.seed.wrapping_add(1);
    let sim = match config.provider {
        ProviderKind::Independent => {
            let provider = IndependentFeatures::new(chain.states.clone(), config.n_candidates)?;
            simulate_substitutions(&corpus, &policy, &provider, sub_seed)?
        }
        ProviderKind::Pipeline => {
            let provider = PipelineFeatures::synthetic(&corpus, sub_seed)?;
            simulate_substitutions(&corpus, &policy, &provider, sub_seed)?
        }
    };
    Ok((corpus, sim))
}
