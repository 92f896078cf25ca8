//! Substitution-error frames and per-candidate regression rows.
//!
//! A frame is a fluent utterance with one slot: the word the speaker produced there in error,
//! and the word they repaired it to. Only single-word substitutions qualify:
//!
//! - reparandum and repair have the same length and differ in exactly one aligned word
//!   (so `whether you → whether we` is the substitution `you → we`);
//! - anything between reparandum and repair is a filled pause or a repetition;
//! - the error and the repair carry the same part-of-speech tag.
//!
//! Contexts come from the fluent version of the utterance: reparanda, fillers and repetitions
//! are dropped, so in a multi-error utterance each frame sees the other errors already repaired.
//!
//! Each frame then expands into one [`FeatureRow`] per vocabulary word. The produced error is
//! the positive row; every other word, the repair included, is negative.

use std::collections::HashSet;
use std::io::Write;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    Corpus, DisfluencyKind, ErrorCategory, Speaker, Utterance, Vocabulary, WordId,
};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::measures::MeasureSet;
use crate::ngram::NGramModel;
use crate::noisy::{
    noisy_phonetic_target_with, noisy_semantic_target_with, phonetic_distance, semantic_distance,
    EmbeddingTable, PhoneticFeatureTable, PronLexicon,
};
use crate::rng;

/// Bundled closed-class word list used for the lexical-class factor.
pub const FUNCTION_WORDS: &str = include_str!("../data/function_words.txt");

fn function_words() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        FUNCTION_WORDS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexicalClass {
    Function,
    Content,
}

impl LexicalClass {
    pub fn of(word: &str) -> LexicalClass {
        if function_words().contains(word) {
            LexicalClass::Function
        } else {
            LexicalClass::Content
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LexicalClass::Function => "function",
            LexicalClass::Content => "content",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionFrame {
    pub conversation_id: String,
    pub utterance: usize,
    pub speaker: Speaker,
    pub pre_context: Vec<String>,
    pub post_context: Vec<String>,
    pub error: String,
    pub repair: String,
    pub pos: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ErrorCategory>,
}

impl SubstitutionFrame {
    /// The fluent utterance: the repair in its slot.
    pub fn fluent(&self) -> Vec<String> {
        let mut out = self.pre_context.clone();
        out.push(self.repair.clone());
        out.extend(self.post_context.iter().cloned());
        out
    }
}

/// Why reparandum/repair pairs were not turned into frames.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExtractionReport {
    pub pairs: usize,
    pub frames: usize,
    pub unequal_length: usize,
    pub intervening: usize,
    pub not_single: usize,
    pub missing_pos: usize,
    pub pos_mismatch: usize,
}

/// Frames from every qualifying reparandum/repair pair, in corpus order.
pub fn extract_frames(corpus: &Corpus) -> (Vec<SubstitutionFrame>, ExtractionReport) {
    let mut frames = Vec::new();
    let mut report = ExtractionReport::default();
    for (i, utt) in corpus.iter().enumerate() {
        extract_from(utt, i, &mut frames, &mut report);
    }
    report.frames = frames.len();
    (frames, report)
}

fn extract_from(
    utt: &Utterance,
    index: usize,
    frames: &mut Vec<SubstitutionFrame>,
    report: &mut ExtractionReport,
) {
    let regions = &utt.disfluencies;
    let removed = |k: usize| {
        regions.iter().any(|r| {
            r.contains(k)
                && matches!(
                    r.kind,
                    DisfluencyKind::Reparandum
                        | DisfluencyKind::Filler
                        | DisfluencyKind::Repetition
                )
        })
    };
    for repair in regions.iter().filter(|r| r.kind == DisfluencyKind::Repair) {
        let Some(reparandum) = repair.repair_of.and_then(|j| regions.get(j)) else {
            continue;
        };
        report.pairs += 1;
        if reparandum.len() != repair.len() {
            report.unequal_length += 1;
            continue;
        }
        let bridged = repair.start >= reparandum.end
            && (reparandum.end..repair.start).all(|k| {
                regions.iter().any(|r| {
                    r.contains(k)
                        && matches!(r.kind, DisfluencyKind::Filler | DisfluencyKind::Repetition)
                })
            });
        if !bridged {
            report.intervening += 1;
            continue;
        }
        let diffs: Vec<usize> = (0..repair.len())
            .filter(|&o| utt.tokens[reparandum.start + o] != utt.tokens[repair.start + o])
            .collect();
        if diffs.len() != 1 {
            report.not_single += 1;
            continue;
        }
        let (err_at, rep_at) = (reparandum.start + diffs[0], repair.start + diffs[0]);
        let Some(pos) = &utt.pos else {
            report.missing_pos += 1;
            continue;
        };
        if pos[err_at] != pos[rep_at] {
            report.pos_mismatch += 1;
            continue;
        }
        let fluent: Vec<(usize, &String)> = utt
            .tokens
            .iter()
            .enumerate()
            .filter(|(k, _)| !removed(*k))
            .collect();
        let slot = fluent
            .iter()
            .position(|(k, _)| *k == rep_at)
            .expect("repairs stay in the fluent sequence");
        frames.push(SubstitutionFrame {
            conversation_id: utt.conversation_id.clone(),
            utterance: index,
            speaker: utt.speaker,
            pre_context: fluent[..slot].iter().map(|(_, w)| (*w).clone()).collect(),
            post_context: fluent[slot + 1..]
                .iter()
                .map(|(_, w)| (*w).clone())
                .collect(),
            error: utt.tokens[err_at].clone(),
            repair: utt.tokens[rep_at].clone(),
            pos: pos[rep_at].clone(),
            category: repair.category,
        });
    }
}

/// Keeps frames whose annotated category is in `categories`.
pub fn filter_by_category(
    frames: Vec<SubstitutionFrame>,
    categories: &[ErrorCategory],
) -> Vec<SubstitutionFrame> {
    frames
        .into_iter()
        .filter(|f| f.category.is_some_and(|c| categories.contains(&c)))
        .collect()
}

/// Rough category guess from word forms and pronunciations.
///
/// Not a substitute for human coding: a shared stem of four or more letters suggests a
/// morphosyntactic error, a shared first or last segment a phonological one; anything else is
/// left unlabeled.
pub fn heuristic_category(
    error: &str,
    repair: &str,
    lexicon: Option<&PronLexicon>,
) -> Option<ErrorCategory> {
    let shared = error
        .chars()
        .zip(repair.chars())
        .take_while(|(a, b)| a == b)
        .count();
    if shared >= 4 {
        return Some(ErrorCategory::Morphosyntactic);
    }
    let (e, r) = (lexicon?.get(error)?, lexicon?.get(repair)?);
    if e.first() == r.first() || e.last() == r.last() {
        return Some(ErrorCategory::Phonological);
    }
    None
}

pub fn write_frames_jsonl<W: Write>(frames: &[SubstitutionFrame], mut out: W) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")
            .map_err(|e| Error::Transport(e.to_string()))?;
    }
    Ok(())
}

pub fn parse_frames_jsonl(text: &str) -> Result<Vec<SubstitutionFrame>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// One candidate word in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub frame_id: usize,
    pub candidate: String,
    pub produced: u8,
    /// The frame's production target (never the produced word).
    pub is_repair: bool,
    pub lexical_class: Option<LexicalClass>,
    pub logp_unigram: f64,
    pub logp_forward: f64,
    pub logp_backward: f64,
    pub logp_bidirectional: f64,
    pub uncond_pmi: f64,
    pub cond_pmi: f64,
    pub rel_backward: f64,
    pub sem_dist: f64,
    pub phon_dist: f64,
}

/// Numeric predictor columns of [`FeatureRow`], in CSV order.
pub const FEATURE_COLUMNS: [&str; 9] = [
    "logp_unigram",
    "logp_forward",
    "logp_backward",
    "logp_bidirectional",
    "uncond_pmi",
    "cond_pmi",
    "rel_backward",
    "sem_dist",
    "phon_dist",
];

impl FeatureRow {
    /// Numeric predictor by column name.
    pub fn feature(&self, name: &str) -> Option<f64> {
        Some(match name {
            "produced" => self.produced as f64,
            "logp_unigram" => self.logp_unigram,
            "logp_forward" => self.logp_forward,
            "logp_backward" => self.logp_backward,
            "logp_bidirectional" => self.logp_bidirectional,
            "uncond_pmi" => self.uncond_pmi,
            "cond_pmi" => self.cond_pmi,
            "rel_backward" => self.rel_backward,
            "sem_dist" => self.sem_dist,
            "phon_dist" => self.phon_dist,
            _ => return None,
        })
    }
}

/// What to do with a candidate that has no embedding or pronunciation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    #[default]
    Skip,
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssembleOptions {
    /// Variance of the Gaussian noise added to the target embedding.
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    /// Perturb the target's phonetic features.
    #[serde(default = "default_true")]
    pub phonetic_noise: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub missing: MissingPolicy,
    /// Keep only this many random negatives (plus the error and the repair) per frame.
    #[serde(default)]
    pub subsample: Option<usize>,
}

fn default_noise_var() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

impl Default for AssembleOptions {
    fn default() -> Self {
        AssembleOptions {
            noise_var: default_noise_var(),
            phonetic_noise: true,
            seed: 0,
            missing: MissingPolicy::Skip,
            subsample: None,
        }
    }
}

/// Everything row assembly reads from.
pub struct FeatureSources<'a> {
    pub gateway: &'a Gateway,
    pub unigram: &'a NGramModel,
    pub vocab: &'a Vocabulary,
    pub embeddings: &'a EmbeddingTable,
    pub lexicon: &'a PronLexicon,
    pub features: &'a PhoneticFeatureTable,
}

/// Candidate rows for frame `frame_id`, in vocabulary order.
///
/// The noisy targets are drawn from RNG stream `frame_id` of `options.seed` and shared by all
/// candidates of the frame.
pub fn assemble_rows(
    frame: &SubstitutionFrame,
    frame_id: usize,
    src: &FeatureSources<'_>,
    options: &AssembleOptions,
) -> Result<Vec<FeatureRow>> {
    for w in [&frame.error, &frame.repair] {
        if src.vocab.id(w).is_none_or(|id| src.vocab.is_marker(id)) {
            return Err(Error::MissingWord {
                word: w.clone(),
                table: "vocabulary",
            });
        }
    }
    let mut rng = rng::stream(options.seed, frame_id as u64);
    let target_vec = noisy_semantic_target_with(
        src.embeddings.require(&frame.repair)?,
        options.noise_var,
        &mut rng,
    )?;
    let target_matrix = src.features.matrix(src.lexicon.require(&frame.repair)?)?;
    let target_matrix = if options.phonetic_noise {
        noisy_phonetic_target_with(&target_matrix, &mut rng)?
    } else {
        target_matrix
    };

    let mut ids: Vec<WordId> = src.vocab.content_ids().collect();
    if let Some(m) = options.subsample {
        let keep: HashSet<&str> = [frame.error.as_str(), frame.repair.as_str()].into();
        let others: Vec<WordId> = ids
            .iter()
            .copied()
            .filter(|&id| !keep.contains(src.vocab.word(id)))
            .collect();
        let mut chosen: Vec<WordId> = sample(&mut rng, others.len(), m.min(others.len()))
            .into_iter()
            .map(|i| others[i])
            .collect();
        chosen.extend(
            ids.iter()
                .copied()
                .filter(|&id| keep.contains(src.vocab.word(id))),
        );
        chosen.sort_unstable();
        ids = chosen;
    }

    let mut candidates: Vec<&str> = Vec::with_capacity(ids.len());
    let mut distances: Vec<(f64, f64)> = Vec::with_capacity(ids.len());
    for &id in &ids {
        let word = src.vocab.word(id);
        let dists = src
            .embeddings
            .require(word)
            .and_then(|v| semantic_distance(&target_vec, v))
            .and_then(|sem| {
                let m = src.features.matrix(src.lexicon.require(word)?)?;
                Ok((sem, phonetic_distance(&target_matrix, &m)))
            });
        match dists {
            Ok(d) => {
                candidates.push(word);
                distances.push(d);
            }
            Err(e) if word == frame.error || options.missing == MissingPolicy::Strict => {
                return Err(e)
            }
            Err(e) => log::debug!("frame {frame_id}: dropping candidate {word:?}: {e}"),
        }
    }

    let pre: Vec<&str> = frame.pre_context.iter().map(String::as_str).collect();
    let post: Vec<&str> = frame.post_context.iter().map(String::as_str).collect();
    let speaker_pre: Vec<&str>;
    let pre = if src.gateway.options().speaker_tags {
        speaker_pre = std::iter::once(frame.speaker.tag())
            .chain(pre.iter().copied())
            .collect();
        &speaker_pre
    } else {
        &pre
    };
    let fwd = src.gateway.score_forward(pre, &candidates)?;
    let bwd = src.gateway.score_backward(&post, &candidates)?;
    let bi = src.gateway.score_infill(pre, &post, &candidates)?;

    candidates
        .iter()
        .zip(&distances)
        .enumerate()
        .map(|(k, (&word, &(sem_dist, phon_dist)))| {
            let uni = src
                .unigram
                .cond_logprob(src.unigram.vocab().lookup(word), &[]);
            let m =
                MeasureSet::from_logprobs(uni, fwd.logprobs[k], bwd.logprobs[k], bi.logprobs[k])?;
            Ok(FeatureRow {
                frame_id,
                candidate: word.to_string(),
                produced: u8::from(word == frame.error),
                is_repair: word == frame.repair,
                lexical_class: Some(LexicalClass::of(word)),
                logp_unigram: m.unigram,
                logp_forward: m.forward,
                logp_backward: m.backward,
                logp_bidirectional: m.bidirectional,
                uncond_pmi: m.uncond_pmi,
                cond_pmi: m.cond_pmi,
                rel_backward: m.rel_backward,
                sem_dist,
                phon_dist,
            })
        })
        .collect()
}

/// Rows for every frame, assembled in parallel; failed frames are reported, not fatal, under
/// [`MissingPolicy::Skip`].
#[allow(clippy::type_complexity)]
pub fn assemble_all(
    frames: &[SubstitutionFrame],
    src: &FeatureSources<'_>,
    options: &AssembleOptions,
) -> Result<(Vec<FeatureRow>, Vec<(usize, String)>)> {
    let results: Vec<Result<Vec<FeatureRow>>> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| assemble_rows(f, i, src, options))
        .collect();
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut rs) => rows.append(&mut rs),
            Err(e) if options.missing == MissingPolicy::Strict => return Err(e),
            Err(e) => {
                log::warn!("frame {i} skipped: {e}");
                failed.push((i, e.to_string()));
            }
        }
    }
    Ok((rows, failed))
}

/// Rows CSV in [`FeatureRow`] field order.
pub fn write_rows_csv<W: Write>(rows: &[FeatureRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn read_rows_csv<R: std::io::Read>(input: R) -> Result<Vec<FeatureRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DisfluencyRegion, LoadOptions};

    fn utt(text: &str, pos: &str, regions: Vec<DisfluencyRegion>) -> Utterance {
        let mut u = Utterance::from_text(Speaker::A, text);
        u.pos = Some(pos.split_whitespace().map(str::to_owned).collect());
        u.disfluencies = regions;
        u.validate().unwrap();
        u
    }

    use DisfluencyKind::*;

    fn region(kind: DisfluencyKind, start: usize, end: usize) -> DisfluencyRegion {
        DisfluencyRegion::new(kind, start, end)
    }

    #[test]
    fn two_error_utterance_yields_two_frames() {
        let corpus = Corpus::parse_jsonl(
            include_str!("../tests/data/multi_error.jsonl"),
            &LoadOptions::default(),
        )
        .unwrap()
        .0;
        let (frames, report) = extract_frames(&corpus);
        assert_eq!(frames.len(), 2);
        assert_eq!(report.pairs, 2);
        assert_eq!(frames[0].pre_context.join(" "), "it depends on whether");
        assert_eq!(
            (frames[0].error.as_str(), frames[0].repair.as_str()),
            ("you", "we")
        );
        assert_eq!(
            frames[0].post_context.join(" "),
            "figure that we have a defense oriented military or an aggression oriented military"
        );
        assert!(frames[1]
            .pre_context
            .join(" ")
            .ends_with("whether we figure that we have a defense oriented military or an"));
        assert_eq!(
            (frames[1].error.as_str(), frames[1].repair.as_str()),
            ("aggressive", "aggression")
        );
        assert_eq!(frames[1].post_context.join(" "), "oriented military");
        assert_eq!(frames[0].fluent(), frames[1].fluent());
    }

    #[test]
    fn unequal_lengths_are_excluded() {
        let u = utt(
            "i saw the big dog cat",
            "PRP VBD DT JJ NN NN",
            vec![region(Reparandum, 3, 5), DisfluencyRegion::repair(5, 6, 0)],
        );
        let (frames, report) = extract_frames(&Corpus::new(vec![u]));
        assert!(frames.is_empty());
        assert_eq!(report.unequal_length, 1);
    }

    #[test]
    fn pos_mismatch_is_excluded() {
        let u = utt(
            "i like running runs",
            "PRP VBP VBG NN",
            vec![region(Reparandum, 2, 3), DisfluencyRegion::repair(3, 4, 0)],
        );
        let (frames, report) = extract_frames(&Corpus::new(vec![u]));
        assert!(frames.is_empty());
        assert_eq!(report.pos_mismatch, 1);
    }

    #[test]
    fn fillers_and_repetitions_may_intervene_but_nothing_else() {
        let ok = utt(
            "i like the cat uh the dog",
            "PRP VBP DT NN UH DT NN",
            vec![
                region(Reparandum, 3, 4),
                region(Filler, 4, 5),
                region(Repetition, 5, 6),
                DisfluencyRegion::repair(6, 7, 0),
            ],
        );
        let bad = utt(
            "i like cats really dogs",
            "PRP VBP NNS RB NNS",
            vec![region(Reparandum, 2, 3), DisfluencyRegion::repair(4, 5, 0)],
        );
        let (frames, report) = extract_frames(&Corpus::new(vec![ok, bad]));
        assert_eq!(frames.len(), 1);
        assert_eq!(report.intervening, 1);
        assert_eq!(frames[0].fluent().join(" "), "i like the dog");
        assert_eq!(frames[0].pre_context, ["i", "like", "the"]);
    }

    #[test]
    fn missing_pos_is_counted() {
        let mut u = Utterance::from_text(Speaker::B, "a b c");
        u.disfluencies = vec![region(Reparandum, 1, 2), DisfluencyRegion::repair(2, 3, 0)];
        let (frames, report) = extract_frames(&Corpus::new(vec![u]));
        assert!(frames.is_empty());
        assert_eq!(report.missing_pos, 1);
    }

    #[test]
    fn identical_reparandum_is_not_a_substitution() {
        let u = utt(
            "the dog the dog",
            "DT NN DT NN",
            vec![region(Reparandum, 0, 2), DisfluencyRegion::repair(2, 4, 0)],
        );
        assert_eq!(extract_frames(&Corpus::new(vec![u])).1.not_single, 1);
    }

    #[test]
    fn lexical_class_and_heuristic_labels() {
        assert_eq!(LexicalClass::of("the"), LexicalClass::Function);
        assert_eq!(LexicalClass::of("dog"), LexicalClass::Content);
        assert_eq!(
            heuristic_category("aggressive", "aggression", None),
            Some(ErrorCategory::Morphosyntactic)
        );
        let table = PhoneticFeatureTable::bundled();
        let lex = PronLexicon::parse(
            "talking\tt ɔ k ɪ ŋ\nwalking\tw ɔ k ɪ ŋ\ncat\tk æ t\ndog\td ɔ g\n",
            &table,
        )
        .unwrap();
        assert_eq!(
            heuristic_category("talking", "walking", Some(&lex)),
            Some(ErrorCategory::Phonological)
        );
        assert_eq!(heuristic_category("cat", "dog", Some(&lex)), None);
    }

    #[test]
    fn frames_round_trip_through_jsonl() {
        let corpus = Corpus::parse_jsonl(
            include_str!("../tests/data/multi_error.jsonl"),
            &LoadOptions::default(),
        )
        .unwrap()
        .0;
        let frames = extract_frames(&corpus).0;
        let mut buf = Vec::new();
        write_frames_jsonl(&frames, &mut buf).unwrap();
        assert_eq!(
            parse_frames_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap(),
            frames
        );
        let semantic = filter_by_category(frames, &[ErrorCategory::Semantic]);
        assert_eq!(semantic.len(), 1);
        assert_eq!(semantic[0].error, "you");
    }
}
