//! Backend-agnostic probability scoring.
//!
//! A [`Gateway`] wraps one [`ScoringBackend`] (the in-process n-gram pair, an HTTP scorer or a
//! stdio child process) and turns it into the three quantities the measures need at every
//! position: forward `p(w | C<t)`, backward `p(w | C>t)` and bidirectional
//! `p(w | C<t, C>t)`. Responses are cached by `(backend id, request hash)`, transport failures
//! are retried with exponential backoff, and corpus scoring fans out over a bounded worker pool
//! while keeping the output order fixed.

mod backend;
mod cache;
mod wire;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backend::{HttpBackend, NGramBackend, ScoringBackend, StdioBackend};
pub use cache::{ResponseCache, CACHE_DIR_ENV};
pub use wire::{
    serve_http, serve_lines, ErrorResponse, ScoreMode, ScoreRequest, ScoreResponse, ScoreServer,
};

use crate::corpus::{Corpus, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::ngram::NGramModel;

/// Query order for bidirectional scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfillOrder {
    /// `<PRE> pre <SUF> suf <MID>` only.
    #[default]
    PreFirst,
    /// Mean of the log-probabilities from both block orders.
    Averaged,
}

/// Where backward probabilities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardSource {
    /// Native backward scoring when the backend offers it, otherwise the infill approximation.
    #[default]
    Auto,
    Native,
    /// The infill model queried with an empty prefix — an approximation of `p(w | C>t)`.
    InfillEmptyPrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayOptions {
    pub infill_order: InfillOrder,
    pub backward: BackwardSource,
    pub retry: RetryPolicy,
    /// Worker threads for corpus scoring; 0 means one per core.
    pub jobs: usize,
    /// Put the utterance's speaker tag at the head of every past context.
    pub speaker_tags: bool,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            infill_order: InfillOrder::PreFirst,
            backward: BackwardSource::Auto,
            retry: RetryPolicy::default(),
            jobs: 0,
            speaker_tags: false,
        }
    }
}

/// Per-candidate log-probabilities in candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub logprobs: IndexMap<String, f64>,
    /// Candidates outside the backend vocabulary, scored as `<unk>`.
    pub unknown: Vec<String>,
}

impl Scored {
    pub fn get(&self, word: &str) -> Option<f64> {
        self.logprobs.get(word).copied()
    }
}

/// Log-probabilities of one corpus token under every conditioning context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictabilityRecord {
    pub conversation_id: String,
    #[serde(rename = "utt_index")]
    pub utterance: usize,
    /// 0-based token position.
    #[serde(rename = "t")]
    pub position: usize,
    pub word: String,
    pub logp_unigram: f64,
    pub logp_forward: f64,
    pub logp_backward: f64,
    pub logp_bidirectional: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BatchReport {
    pub records: Vec<PredictabilityRecord>,
    /// `(utterance index, error message)` for every utterance that could not be scored.
    pub failures: Vec<(usize, String)>,
}

pub struct Gateway {
    backend: Arc<dyn ScoringBackend>,
    model_id: String,
    vocab: Option<HashSet<String>>,
    outcomes: Option<Vec<String>>,
    cache: ResponseCache,
    options: GatewayOptions,
    backend_calls: AtomicU64,
}

impl Gateway {
    pub fn new(
        backend: Arc<dyn ScoringBackend>,
        options: GatewayOptions,
        cache: ResponseCache,
    ) -> Result<Self> {
        if options.backward == BackwardSource::Native && !backend.supports_backward() {
            return Err(Error::InvalidArgument(format!(
                "backend {} has no native backward scoring",
                backend.model_id()
            )));
        }
        if options.retry.attempts == 0 {
            return Err(Error::InvalidArgument(
                "retry policy needs at least one attempt".into(),
            ));
        }
        let outcomes = backend.outcomes();
        Ok(Gateway {
            model_id: backend.model_id(),
            vocab: None,
            outcomes,
            backend,
            cache,
            options,
            backend_calls: AtomicU64::new(0),
        })
    }

    /// Gateway over in-process n-gram models; OOV candidates are flagged against their vocabulary.
    pub fn ngram(
        forward: Arc<NGramModel>,
        backward: Option<Arc<NGramModel>>,
        options: GatewayOptions,
        cache: ResponseCache,
    ) -> Result<Self> {
        let vocab = Arc::clone(forward.vocab());
        let backend = NGramBackend::new(forward, backward)?;
        Ok(Gateway::new(Arc::new(backend), options, cache)?.with_vocabulary(&vocab))
    }

    /// Candidates not in `vocab` are sent as `<unk>` and reported in [`Scored::unknown`].
    pub fn with_vocabulary(mut self, vocab: &Vocabulary) -> Self {
        self.vocab = Some(vocab.words().iter().cloned().collect());
        self
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn options(&self) -> &GatewayOptions {
        &self.options
    }

    /// Full outcome space of the backend, when it advertises one.
    pub fn outcomes(&self) -> Option<&[String]> {
        self.outcomes.as_deref()
    }

    /// Requests that actually reached the backend (cache hits excluded).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    /// `ln p(w | pre)` for each candidate.
    pub fn score_forward<S: AsRef<str>>(&self, pre: &[S], candidates: &[S]) -> Result<Scored> {
        self.score_mode(
            ScoreMode::Forward,
            strings(pre),
            Vec::new(),
            candidates,
            false,
        )
    }

    /// `ln p(w | suf)` for each candidate.
    pub fn score_backward<S: AsRef<str>>(&self, suf: &[S], candidates: &[S]) -> Result<Scored> {
        let native = match self.options.backward {
            BackwardSource::Native => true,
            BackwardSource::InfillEmptyPrefix => false,
            BackwardSource::Auto => self.backend.supports_backward(),
        };
        if native {
            self.score_mode(
                ScoreMode::Backward,
                Vec::new(),
                strings(suf),
                candidates,
                false,
            )
        } else {
            self.score_bidirectional(Vec::new(), strings(suf), candidates)
        }
    }

    /// `ln p(w | pre, suf)` for each candidate.
    pub fn score_infill<S: AsRef<str>>(
        &self,
        pre: &[S],
        suf: &[S],
        candidates: &[S],
    ) -> Result<Scored> {
        self.score_bidirectional(strings(pre), strings(suf), candidates)
    }

    fn score_bidirectional<S: AsRef<str>>(
        &self,
        pre: Vec<String>,
        suf: Vec<String>,
        candidates: &[S],
    ) -> Result<Scored> {
        let first = self.score_mode(
            ScoreMode::Infill,
            pre.clone(),
            suf.clone(),
            candidates,
            false,
        )?;
        match self.options.infill_order {
            InfillOrder::PreFirst => Ok(first),
            InfillOrder::Averaged => {
                let second = self.score_mode(ScoreMode::Infill, pre, suf, candidates, true)?;
                let mut out = first;
                for (w, lp) in out.logprobs.iter_mut() {
                    *lp = 0.5 * (*lp + second.logprobs[w]);
                }
                self.renormalize(&mut out);
                Ok(out)
            }
        }
    }

    fn score_mode<S: AsRef<str>>(
        &self,
        mode: ScoreMode,
        pre: Vec<String>,
        suf: Vec<String>,
        candidates: &[S],
        swapped: bool,
    ) -> Result<Scored> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("no candidates to score".into()));
        }
        let mut unknown = Vec::new();
        let mut sent: Vec<String> = Vec::with_capacity(candidates.len());
        for c in candidates {
            let c = c.as_ref();
            match &self.vocab {
                Some(v) if !v.contains(c) => {
                    unknown.push(c.to_string());
                    sent.push(UNK.to_string());
                }
                _ => sent.push(c.to_string()),
            }
        }
        let mut wire_candidates = sent.clone();
        wire_candidates.sort();
        wire_candidates.dedup();
        let mut request =
            ScoreRequest::new(mode, self.map_oov(pre), self.map_oov(suf), wire_candidates);
        request.swapped = swapped;
        let response = self.call(&request)?;
        let mut logprobs = IndexMap::with_capacity(candidates.len());
        for (c, s) in candidates.iter().zip(&sent) {
            let lp = *response
                .logprobs
                .get(s)
                .ok_or_else(|| Error::Protocol(format!("response lacks candidate {s:?}")))?;
            if !lp.is_finite() && lp != f64::NEG_INFINITY {
                return Err(Error::Protocol(format!(
                    "non-finite log-probability for {s:?}"
                )));
            }
            logprobs.insert(c.as_ref().to_string(), lp);
        }
        let mut scored = Scored { logprobs, unknown };
        if mode == ScoreMode::Infill {
            self.renormalize(&mut scored);
        }
        Ok(scored)
    }

    fn map_oov(&self, tokens: Vec<String>) -> Vec<String> {
        match &self.vocab {
            Some(v) => tokens
                .into_iter()
                .map(|t| if v.contains(&t) { t } else { UNK.to_string() })
                .collect(),
            None => tokens,
        }
    }

    /// Exact renormalization when the candidates are the backend's whole outcome space.
    fn renormalize(&self, scored: &mut Scored) {
        let Some(outcomes) = &self.outcomes else {
            return;
        };
        if !scored.unknown.is_empty() || scored.logprobs.len() != outcomes.len() {
            return;
        }
        if !outcomes.iter().all(|w| scored.logprobs.contains_key(w)) {
            return;
        }
        let values: Vec<f64> = scored.logprobs.values().copied().collect();
        let lse = crate::ngram::log_sum_exp(&values);
        if lse.abs() > 1e-12 {
            for lp in scored.logprobs.values_mut() {
                *lp -= lse;
            }
        }
    }

    fn call(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let key = request.cache_key(&self.model_id);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let mut backoff = self.options.retry.initial_backoff;
        let mut attempt = 1;
        let response = loop {
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.score(request) {
                Ok(r) => break r,
                Err(Error::Transport(msg)) if attempt < self.options.retry.attempts => {
                    log::warn!("scoring attempt {attempt} failed ({msg}); retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        self.cache.put(&key, &response)?;
        Ok(response)
    }

    /// Scores every token of every utterance. Failing utterances are reported, not fatal.
    pub fn batch_score_corpus(&self, corpus: &Corpus, unigram: &NGramModel) -> Result<BatchReport> {
        if unigram.order() != 1 {
            return Err(Error::InvalidArgument(format!(
                "unigram model must have order 1, got {}",
                unigram.order()
            )));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.options.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        let results: Vec<Result<Vec<PredictabilityRecord>>> = pool.install(|| {
            corpus
                .utterances()
                .par_iter()
                .enumerate()
                .map(|(i, _)| self.score_utterance(corpus, i, unigram))
                .collect()
        });
        let mut report = BatchReport::default();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(mut recs) => report.records.append(&mut recs),
                Err(e) => {
                    log::warn!("utterance {i} not scored: {e}");
                    report.failures.push((i, e.to_string()));
                }
            }
        }
        Ok(report)
    }

    fn score_utterance(
        &self,
        corpus: &Corpus,
        index: usize,
        unigram: &NGramModel,
    ) -> Result<Vec<PredictabilityRecord>> {
        let utt = &corpus.utterances()[index];
        let tag = self
            .options
            .speaker_tags
            .then(|| utt.speaker.tag().to_string());
        let tokens = &utt.tokens;
        let mut out = Vec::with_capacity(tokens.len());
        for (t, word) in tokens.iter().enumerate() {
            let pre: Vec<String> = tag
                .iter()
                .cloned()
                .chain(tokens[..t].iter().cloned())
                .collect();
            let suf: Vec<String> = tokens[t + 1..].to_vec();
            let cand = std::slice::from_ref(word);
            let fwd = self.score_forward(&pre, cand)?;
            let bwd = self.score_backward(&suf, cand)?;
            let bi = self.score_infill(&pre, &suf, cand)?;
            out.push(PredictabilityRecord {
                conversation_id: utt.conversation_id.clone(),
                utterance: index,
                position: t,
                word: word.clone(),
                logp_unigram: unigram.cond_logprob(unigram.vocab().lookup(word), &[]),
                logp_forward: fwd.logprobs[0],
                logp_backward: bwd.logprobs[0],
                logp_bidirectional: bi.logprobs[0],
            });
        }
        Ok(out)
    }
}

fn strings<S: AsRef<str>>(xs: &[S]) -> Vec<String> {
    xs.iter().map(|s| s.as_ref().to_string()).collect()
}

/// Records CSV (columns in [`PredictabilityRecord`] field order).
pub fn write_records_csv<W: Write>(records: &[PredictabilityRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<PredictabilityRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
