//! The contextual predictability measures, in nats.
//!
//! From the four log-probabilities of a token (unigram, forward, backward, bidirectional):
//!
//! - unconditional PMI `ln p(w | C>t) − ln p(w)`
//! - conditional PMI `ln p(w | C<t, C>t) − ln p(w | C<t)`
//! - relative backward predictability `ln p(w | C>t) − ln p(w | C<t)`
//!
//! [`pmi_symmetry_check`] evaluates conditional PMI a second way, through Bayes' rule on
//! chained sequence probabilities, `ln p(C>t | w, C<t) − ln p(C>t | C<t)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, WordId};
use crate::error::{Error, Result};
use crate::gateway::PredictabilityRecord;
use crate::ngram::{log_sum_exp, NGramModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureSet {
    pub unigram: f64,
    pub forward: f64,
    pub backward: f64,
    pub bidirectional: f64,
    pub uncond_pmi: f64,
    pub cond_pmi: f64,
    pub rel_backward: f64,
}

impl MeasureSet {
    pub fn from_logprobs(
        unigram: f64,
        forward: f64,
        backward: f64,
        bidirectional: f64,
    ) -> Result<Self> {
        for (name, v) in [
            ("unigram", unigram),
            ("forward", forward),
            ("backward", backward),
            ("bidirectional", bidirectional),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} log-probability ({v})")));
            }
        }
        Ok(MeasureSet {
            unigram,
            forward,
            backward,
            bidirectional,
            uncond_pmi: backward - unigram,
            cond_pmi: bidirectional - forward,
            rel_backward: backward - forward,
        })
    }
}

/// Derived measures for one record; a non-finite input names the record.
pub fn compute_measures(rec: &PredictabilityRecord) -> Result<MeasureSet> {
    MeasureSet::from_logprobs(
        rec.logp_unigram,
        rec.logp_forward,
        rec.logp_backward,
        rec.logp_bidirectional,
    )
    .map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!(
            "{what} of record ({}, utterance {}, t={}, {:?})",
            rec.conversation_id, rec.utterance, rec.position, rec.word
        )),
        other => other,
    })
}

/// Conditional PMI at position `t` of `utterance`, computed twice under `model` (forward):
/// `lhs` from the normalized infill distribution, `rhs` via Bayes' rule with
/// `p(C>t | C<t) = Σ_w p(w | C<t) · p(C>t | w, C<t)` over the model's support.
pub fn pmi_symmetry_check(
    model: &NGramModel,
    utterance: &Utterance,
    t: usize,
) -> Result<(f64, f64)> {
    if t >= utterance.len() {
        return Err(Error::InvalidArgument(format!(
            "position {t} outside utterance of {} tokens",
            utterance.len()
        )));
    }
    let vocab = model.vocab();
    let ids = vocab.encode(&utterance.lm_tokens(model.config().speaker_tags));
    let slot = ids.len() - utterance.len() + t;
    let (pre, rest) = ids.split_at(slot);
    let (word, suf) = (rest[0], &rest[1..]);

    let lhs = model.infill_logprob(word, pre, suf) - model.cond_logprob(word, pre);

    let future_given = |w: WordId| -> f64 {
        let mut seq: Vec<WordId> = pre.to_vec();
        seq.push(w);
        let mut total = 0.0;
        for &s in suf {
            total += model.cond_logprob(s, &seq);
            seq.push(s);
        }
        total
    };
    let joint: Vec<f64> = model
        .support()
        .iter()
        .map(|&w| model.cond_logprob(w, pre) + future_given(w))
        .collect();
    let rhs = future_given(word) - log_sum_exp(&joint);
    Ok((lhs, rhs))
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two observations"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub const MEASURE_NAMES: [&str; 7] = [
    "unigram",
    "forward",
    "backward",
    "bidirectional",
    "uncond_pmi",
    "cond_pmi",
    "rel_backward",
];

fn columns(set: &MeasureSet) -> [f64; 7] {
    [
        set.unigram,
        set.forward,
        set.backward,
        set.bidirectional,
        set.uncond_pmi,
        set.cond_pmi,
        set.rel_backward,
    ]
}

/// Pairwise Pearson correlations between every measure; undefined pairs are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.values[i][j]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::new()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.names.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(
                row.iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())),
            );
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

pub fn correlation_matrix(sets: &[MeasureSet]) -> CorrelationMatrix {
    let cols: Vec<Vec<f64>> = (0..MEASURE_NAMES.len())
        .map(|k| sets.iter().map(|s| columns(s)[k]).collect())
        .collect();
    let values = cols
        .iter()
        .map(|a| cols.iter().map(|b| pearson(a, b).ok()).collect())
        .collect();
    CorrelationMatrix {
        names: MEASURE_NAMES.iter().map(|s| s.to_string()).collect(),
        values,
    }
}

/// One row of the scores CSV: raw log-probabilities plus the derived measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub conversation_id: String,
    pub utt_index: usize,
    pub t: usize,
    pub word: String,
    pub logp_unigram: f64,
    pub logp_forward: f64,
    pub logp_backward: f64,
    pub logp_bidirectional: f64,
    pub uncond_pmi: f64,
    pub cond_pmi: f64,
    pub rel_backward: f64,
}

pub fn score_rows(records: &[PredictabilityRecord]) -> Result<Vec<ScoreRow>> {
    records
        .iter()
        .map(|r| {
            let m = compute_measures(r)?;
            Ok(ScoreRow {
                conversation_id: r.conversation_id.clone(),
                utt_index: r.utterance,
                t: r.position,
                word: r.word.clone(),
                logp_unigram: m.unigram,
                logp_forward: m.forward,
                logp_backward: m.backward,
                logp_bidirectional: m.bidirectional,
                uncond_pmi: m.uncond_pmi,
                cond_pmi: m.cond_pmi,
                rel_backward: m.rel_backward,
            })
        })
        .collect()
}

pub fn write_scores_csv<W: Write>(rows: &[ScoreRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
