//! Count-based n-gram language models with Laplace (add-α) smoothing.
//!
//! Every utterance is padded with `order - 1` beginning-of-utterance markers that are never
//! predicted and terminated with a predicted `<eos>`. A backward model is trained on each
//! utterance reversed (the `<eos>` still comes last), so it predicts a word from the words that
//! follow it.
//!
//! The outcome space (the "support") is every vocabulary entry except `<PRE>`, `<SUF>` and
//! `<MID>`; `<unk>` and speaker tags are included only when they occur in the training stream.
//! All probabilities are natural-log.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Vocabulary, WordId};
use crate::error::{Error, Result};

/// Padding id used for beginning-of-utterance context slots.
pub const BOS: WordId = WordId::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramConfig {
    pub order: usize,
    pub alpha: f64,
    pub direction: Direction,
    /// Prepend the `<A>`/`<B>` speaker tag to every training sequence.
    #[serde(default)]
    pub speaker_tags: bool,
}

impl NGramConfig {
    pub fn new(order: usize, alpha: f64, direction: Direction) -> Self {
        NGramConfig {
            order,
            alpha,
            direction,
            speaker_tags: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidArgument("n-gram order must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing constant must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    words: HashMap<WordId, u64>,
    total: u64,
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    config: NGramConfig,
    vocab: Arc<Vocabulary>,
    support: Vec<WordId>,
    counts: HashMap<Box<[WordId]>, ContextCounts>,
}

/// Trains a model over `corpus`, mapping out-of-vocabulary tokens to `<unk>`.
pub fn train_ngram(
    corpus: &Corpus,
    vocab: Arc<Vocabulary>,
    config: NGramConfig,
) -> Result<NGramModel> {
    NGramModel::train(corpus, vocab, config)
}

impl NGramModel {
    pub fn train(corpus: &Corpus, vocab: Arc<Vocabulary>, config: NGramConfig) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let width = config.order - 1;
        let mut counts: HashMap<Box<[WordId]>, ContextCounts> = HashMap::new();
        let mut observed = vec![false; vocab.len()];
        for utt in corpus {
            let seq = padded_sequence(&vocab, &utt.lm_tokens(config.speaker_tags), &config);
            for i in width..seq.len() {
                let word = seq[i];
                observed[word as usize] = true;
                let entry = counts.entry(seq[i - width..i].into()).or_default();
                *entry.words.entry(word).or_default() += 1;
                entry.total += 1;
            }
        }
        let support = support_ids(&vocab, &observed);
        Ok(NGramModel {
            config,
            vocab,
            support,
            counts,
        })
    }

    pub fn config(&self) -> &NGramConfig {
        &self.config
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    pub fn direction(&self) -> Direction {
        self.config.direction
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    /// Outcome space over which every conditional distribution is normalized.
    pub fn support(&self) -> &[WordId] {
        &self.support
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    /// Raw `(count(context, word), count(context))` for the last `order - 1` history tokens.
    pub fn counts(&self, word: WordId, history: &[WordId]) -> (u64, u64) {
        self.with_context(history, |ctx| match self.counts.get(ctx) {
            Some(c) => (c.words.get(&word).copied().unwrap_or(0), c.total),
            None => (0, 0),
        })
    }

    /// `ln p(word | history)`, where `history` runs from the start of the utterance in the
    /// model's own direction (already reversed for a backward model).
    pub fn cond_logprob(&self, word: WordId, history: &[WordId]) -> f64 {
        let (c, total) = self.counts(word, history);
        let alpha = self.config.alpha;
        ((c as f64 + alpha) / (total as f64 + alpha * self.support.len() as f64)).ln()
    }

    /// String convenience over [`NGramModel::cond_logprob`].
    pub fn cond_logprob_words<S: AsRef<str>>(&self, word: &str, history: &[S]) -> f64 {
        self.cond_logprob(self.vocab.lookup(word), &self.vocab.encode(history))
    }

    /// `ln p(word | future)` for a backward model; `future` is given in surface order.
    pub fn backward_logprob(&self, word: WordId, future: &[WordId]) -> f64 {
        debug_assert_eq!(self.config.direction, Direction::Backward);
        let reversed: Vec<WordId> = future.iter().rev().copied().collect();
        self.cond_logprob(word, &reversed)
    }

    /// Unnormalized infill score `ln p(pre · w · suf)` up to terms that do not depend on `w`.
    fn infill_score(&self, seq: &mut [WordId], slot: usize, word: WordId) -> f64 {
        seq[slot] = word;
        let last = (slot + self.config.order - 1).min(seq.len() - 1);
        (slot..=last)
            .map(|j| self.cond_logprob(seq[j], &seq[..j]))
            .sum()
    }

    fn suffix_is_independent(&self, suf: &[WordId]) -> bool {
        suf.is_empty() || self.config.order == 1
    }

    /// Exact bidirectional distribution `p(w | pre, suf)` over the support, obtained by
    /// enumerating every candidate in the slot and normalizing the sequence probabilities.
    /// Returned log-probabilities are aligned with [`NGramModel::support`].
    pub fn infill_distribution(&self, pre: &[WordId], suf: &[WordId]) -> Vec<f64> {
        if self.suffix_is_independent(suf) {
            return self
                .support
                .iter()
                .map(|&w| self.cond_logprob(w, pre))
                .collect();
        }
        let mut seq = Vec::with_capacity(pre.len() + 1 + suf.len());
        seq.extend_from_slice(pre);
        let slot = seq.len();
        seq.push(BOS);
        seq.extend_from_slice(suf);
        let scores: Vec<f64> = self
            .support
            .iter()
            .map(|&w| self.infill_score(&mut seq, slot, w))
            .collect();
        let norm = log_sum_exp(&scores);
        scores.into_iter().map(|s| s - norm).collect()
    }

    /// `ln p(word | pre, suf)`. With an empty suffix (or a unigram model) this is exactly
    /// [`NGramModel::cond_logprob`].
    pub fn infill_logprob(&self, word: WordId, pre: &[WordId], suf: &[WordId]) -> f64 {
        if self.suffix_is_independent(suf) {
            return self.cond_logprob(word, pre);
        }
        if let Some(i) = self.support.iter().position(|&w| w == word) {
            return self.infill_distribution(pre, suf)[i];
        }
        let mut seq: Vec<WordId> = pre
            .iter()
            .copied()
            .chain([BOS])
            .chain(suf.iter().copied())
            .collect();
        let dist_scores: Vec<f64> = self
            .support
            .iter()
            .map(|&w| self.infill_score(&mut seq, pre.len(), w))
            .collect();
        self.infill_score(&mut seq, pre.len(), word) - log_sum_exp(&dist_scores)
    }

    /// `ln p(sequence)` including the terminating `<eos>`; `tokens` in surface order.
    pub fn sequence_logprob(&self, tokens: &[WordId]) -> f64 {
        let mut ids: Vec<WordId> = tokens.to_vec();
        if self.config.direction == Direction::Backward {
            ids.reverse();
        }
        ids.push(Vocabulary::EOS_ID);
        (0..ids.len())
            .map(|i| self.cond_logprob(ids[i], &ids[..i]))
            .sum()
    }

    /// `exp` of the mean per-token negative log-probability, `<eos>` included.
    pub fn perplexity(&self, corpus: &Corpus) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut nll = 0.0;
        let mut n = 0usize;
        for utt in corpus {
            let ids = self.vocab.encode(&utt.lm_tokens(self.config.speaker_tags));
            nll -= self.sequence_logprob(&ids);
            n += ids.len() + 1;
        }
        Ok((nll / n as f64).exp())
    }

    fn with_context<R>(&self, history: &[WordId], f: impl FnOnce(&[WordId]) -> R) -> R {
        let width = self.config.order - 1;
        if history.len() >= width {
            f(&history[history.len() - width..])
        } else {
            let mut ctx = vec![BOS; width - history.len()];
            ctx.extend_from_slice(history);
            f(&ctx)
        }
    }

    pub fn to_json(&self) -> String {
        let mut contexts: Vec<ContextDump> = self
            .counts
            .iter()
            .map(|(ctx, c)| {
                let mut words: Vec<(WordId, u64)> = c.words.iter().map(|(&w, &n)| (w, n)).collect();
                words.sort_unstable();
                ContextDump {
                    context: ctx.iter().map(|&w| encode_context_id(w)).collect(),
                    total: c.total,
                    words,
                }
            })
            .collect();
        contexts.sort_by(|a, b| a.context.cmp(&b.context));
        let dump = ModelDump {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.words().to_vec(),
            support: self.support.clone(),
            contexts,
        };
        serde_json::to_string(&dump).expect("model dump serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dump: ModelDump = serde_json::from_str(text)?;
        if dump.format != MODEL_FORMAT || dump.version != MODEL_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported model format {} v{}",
                dump.format, dump.version
            )));
        }
        dump.config.validate()?;
        let vocab = Arc::new(Vocabulary::from_words(dump.vocab)?);
        let width = dump.config.order - 1;
        let mut counts = HashMap::with_capacity(dump.contexts.len());
        for c in dump.contexts {
            if c.context.len() != width {
                return Err(Error::InvalidArgument(
                    "context width does not match order".into(),
                ));
            }
            let ctx: Box<[WordId]> = c.context.iter().map(|&w| decode_context_id(w)).collect();
            counts.insert(
                ctx,
                ContextCounts {
                    words: c.words.into_iter().collect(),
                    total: c.total,
                },
            );
        }
        Ok(NGramModel {
            config: dump.config,
            vocab,
            support: dump.support,
            counts,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        NGramModel::from_json(&text)
    }
}

const MODEL_FORMAT: &str = "ctxpred-ngram";
const MODEL_VERSION: u32 = 1;

/// On-disk model: JSON with contexts sorted lexicographically (`-1` marks padding).
#[derive(Serialize, Deserialize)]
struct ModelDump {
    format: String,
    version: u32,
    config: NGramConfig,
    vocab: Vec<String>,
    support: Vec<WordId>,
    contexts: Vec<ContextDump>,
}

#[derive(Serialize, Deserialize)]
struct ContextDump {
    context: Vec<i64>,
    total: u64,
    words: Vec<(WordId, u64)>,
}

fn encode_context_id(w: WordId) -> i64 {
    if w == BOS {
        -1
    } else {
        w as i64
    }
}

fn decode_context_id(w: i64) -> WordId {
    if w < 0 {
        BOS
    } else {
        w as WordId
    }
}

fn padded_sequence(vocab: &Vocabulary, tokens: &[&str], config: &NGramConfig) -> Vec<WordId> {
    let mut ids = vocab.encode(tokens);
    if config.direction == Direction::Backward {
        ids.reverse();
    }
    let mut seq = vec![BOS; config.order - 1];
    seq.extend(ids);
    seq.push(Vocabulary::EOS_ID);
    seq
}

fn support_ids(vocab: &Vocabulary, observed: &[bool]) -> Vec<WordId> {
    (0..vocab.len() as WordId)
        .filter(|&id| match id {
            Vocabulary::EOS_ID => true,
            Vocabulary::PRE_ID | Vocabulary::SUF_ID | Vocabulary::MID_ID => false,
            Vocabulary::UNK_ID => observed[id as usize],
            _ if vocab.is_marker(id) => observed[id as usize],
            _ => true,
        })
        .collect()
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn toy(order: usize, direction: Direction) -> NGramModel {
        let corpus = Corpus::from_texts(&["a b", "a c"]);
        let vocab = Arc::new(Vocabulary::build(&corpus, 1).unwrap());
        NGramModel::train(&corpus, vocab, NGramConfig::new(order, 1.0, direction)).unwrap()
    }

    fn id(m: &NGramModel, w: &str) -> WordId {
        m.vocab().lookup(w)
    }

    #[test]
    fn hand_counts() {
        let m = toy(2, Direction::Forward);
        let (a, b) = (id(&m, "a"), id(&m, "b"));
        assert_eq!(m.counts(b, &[a]), (1, 2));
        assert_eq!(m.support_size(), 4, "a, b, c, <eos>");
    }

    #[test]
    fn bigram_conditionals_match_hand_counts() {
        let m = toy(2, Direction::Forward);
        let (a, b) = (id(&m, "a"), id(&m, "b"));
        // (1 + 1) / (2 + 4)
        assert_abs_diff_eq!(
            m.cond_logprob(b, &[a]),
            (1.0f64 / 3.0).ln(),
            epsilon = 1e-15
        );
        // (0 + 1) / (1 + 4): b is followed only by <eos>
        assert_abs_diff_eq!(m.cond_logprob(a, &[a, b]), 0.2f64.ln(), epsilon = 1e-15);
        // utterance-initial context: (2 + 1) / (2 + 4)
        assert_abs_diff_eq!(m.cond_logprob(a, &[]), 0.5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn unigram_model() {
        let m = toy(1, Direction::Forward);
        // six predicted tokens (a b <eos> a c <eos>), V = 4
        assert_abs_diff_eq!(
            m.cond_logprob(id(&m, "b"), &[]),
            (2.0f64 / 10.0).ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            m.cond_logprob(id(&m, "a"), &[id(&m, "c")]),
            (3.0f64 / 10.0).ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn backward_model_counts_reversed_sequences() {
        let m = toy(2, Direction::Backward);
        let (a, b) = (id(&m, "a"), id(&m, "b"));
        // "b a <eos>": b starts the reversed utterance and is followed by a
        assert_eq!(m.counts(a, &[b]), (1, 1));
        assert_eq!(m.counts(b, &[]), (1, 2));
        // p(a | future = [b]) through the surface-order helper
        assert_abs_diff_eq!(
            m.backward_logprob(a, &[b]),
            (2.0f64 / 5.0).ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn infill_matches_enumeration_oracle() {
        let m = toy(2, Direction::Forward);
        let (a, b) = (id(&m, "a"), id(&m, "b"));
        let eos = Vocabulary::EOS_ID;
        // Oracle: full chain probability of <bos> a w <eos>, normalized over the support.
        let chain = |w: WordId| -> f64 {
            let seq = [a, w, eos];
            (0..seq.len())
                .map(|i| m.cond_logprob(seq[i], &seq[..i]).exp())
                .product()
        };
        let z: f64 = m.support().iter().map(|&w| chain(w)).sum();
        let expected = chain(b) / z;
        assert_abs_diff_eq!(expected, 0.396_694, epsilon = 1e-6);
        assert_abs_diff_eq!(
            m.infill_logprob(b, &[a], &[eos]),
            expected.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn infill_with_empty_suffix_is_forward_exactly() {
        let m = toy(3, Direction::Forward);
        for &w in m.support() {
            for pre in [vec![], vec![id(&m, "a")], vec![id(&m, "a"), id(&m, "b")]] {
                assert_eq!(m.infill_logprob(w, &pre, &[]), m.cond_logprob(w, &pre));
            }
        }
    }

    #[test]
    fn perplexity_of_toy_corpus() {
        let m = toy(2, Direction::Forward);
        let corpus = Corpus::from_texts(&["a b", "a c"]);
        // per utterance: p(a|bos) = 1/2, p(b|a) = 1/3, p(eos|b) = 2/5
        let expected = ((2f64.ln() + 3f64.ln() + 2.5f64.ln()) / 3.0).exp();
        assert_abs_diff_eq!(m.perplexity(&corpus).unwrap(), expected, epsilon = 1e-12);
        assert!(m.perplexity(&Corpus::default()).is_err());
    }

    #[test]
    fn perplexity_of_near_uniform_model_is_support_size() {
        let corpus = Corpus::from_texts(&["a b", "a c"]);
        let vocab = Arc::new(Vocabulary::build(&corpus, 1).unwrap());
        let m = NGramModel::train(
            &corpus,
            vocab,
            NGramConfig::new(2, 1e15, Direction::Forward),
        )
        .unwrap();
        assert_abs_diff_eq!(m.perplexity(&corpus).unwrap(), 4.0, epsilon = 1e-9);
    }

    #[test]
    fn config_validation() {
        let corpus = Corpus::from_texts(&["a"]);
        let vocab = Arc::new(Vocabulary::build(&corpus, 1).unwrap());
        assert!(NGramModel::train(
            &corpus,
            vocab.clone(),
            NGramConfig::new(0, 1.0, Direction::Forward)
        )
        .is_err());
        assert!(NGramModel::train(
            &corpus,
            vocab.clone(),
            NGramConfig::new(2, 0.0, Direction::Forward)
        )
        .is_err());
        assert!(NGramModel::train(
            &Corpus::default(),
            vocab,
            NGramConfig::new(2, 1.0, Direction::Forward)
        )
        .is_err());
    }

    #[test]
    fn unk_enters_support_only_when_observed() {
        let corpus = Corpus::from_texts(&["a b", "a c"]);
        let vocab = Arc::new(Vocabulary::build(&corpus, 2).unwrap());
        let m = NGramModel::train(&corpus, vocab, NGramConfig::new(2, 1.0, Direction::Forward))
            .unwrap();
        assert!(m.support().contains(&Vocabulary::UNK_ID));
        assert!(!toy(2, Direction::Forward)
            .support()
            .contains(&Vocabulary::UNK_ID));
    }

    #[test]
    fn json_round_trip_preserves_scores() {
        let m = toy(3, Direction::Backward);
        let back = NGramModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back.to_json(), m.to_json());
        for &w in m.support() {
            assert_eq!(
                back.cond_logprob(w, &[id(&m, "a")]),
                m.cond_logprob(w, &[id(&m, "a")])
            );
        }
    }

    #[test]
    fn symmetric_corpus_gives_mirrored_models() {
        let corpus = Corpus::from_texts(&["a b c", "c b a", "b a", "a b"]);
        let vocab = Arc::new(Vocabulary::build(&corpus, 1).unwrap());
        let fwd = NGramModel::train(
            &corpus,
            vocab.clone(),
            NGramConfig::new(2, 0.5, Direction::Forward),
        )
        .unwrap();
        let bwd = NGramModel::train(
            &corpus,
            vocab,
            NGramConfig::new(2, 0.5, Direction::Backward),
        )
        .unwrap();
        for &w in fwd.support() {
            for &c in fwd.support() {
                assert_eq!(fwd.cond_logprob(w, &[c]), bwd.cond_logprob(w, &[c]));
            }
        }
    }

    fn arb_corpus() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(
            prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..6)
                .prop_map(|ws| ws.join(" ")),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn conditionals_normalize(texts in arb_corpus(), order in 1usize..4, alpha in 0.01f64..3.0,
                                  history in prop::collection::vec(0u32..9, 0..4)) {
            let corpus = Corpus::from_texts(&texts);
            prop_assume!(corpus.token_count() > 0);
            let vocab = Arc::new(Vocabulary::build(&corpus, 1).unwrap());
            let m = NGramModel::train(&corpus, vocab.clone(), NGramConfig::new(order, alpha, Direction::Forward)).unwrap();
            let history: Vec<WordId> = history.into_iter().map(|h| h % vocab.len() as u32).collect();
            let total: f64 = m.support().iter().map(|&w| m.cond_logprob(w, &history).exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let suf: Vec<WordId> = history.iter().rev().copied().collect();
            let infill: f64 = m.infill_distribution(&history, &suf).iter().map(|l| l.exp()).sum();
            prop_assert!((infill - 1.0).abs() < 1e-9);
        }

        #[test]
        fn larger_alpha_moves_toward_uniform(texts in arb_corpus(), a1 in 0.01f64..2.0, factor in 1.5f64..10.0) {
            let corpus = Corpus::from_texts(&texts);
            prop_assume!(corpus.token_count() > 0);
            let vocab = Arc::new(Vocabulary::build(&corpus, 1).unwrap());
            let lo = NGramModel::train(&corpus, vocab.clone(), NGramConfig::new(2, a1, Direction::Forward)).unwrap();
            let hi = NGramModel::train(&corpus, vocab, NGramConfig::new(2, a1 * factor, Direction::Forward)).unwrap();
            let uniform = 1.0 / lo.support_size() as f64;
            for &c in lo.support() {
                for &w in lo.support() {
                    let p_lo = lo.cond_logprob(w, &[c]).exp();
                    let p_hi = hi.cond_logprob(w, &[c]).exp();
                    prop_assert!((p_hi - uniform).abs() <= (p_lo - uniform).abs() + 1e-15);
                }
            }
        }
    }
}
