//! Conversational corpus data model, JSONL ingestion and vocabulary construction.
//!
//! One utterance per line:
//!
//! ```text
//! {"conversation_id": "sw2005", "speaker": "A", "tokens": ["so", "uh", "i", "think"],
//!  "pos": ["UH", "UH", "PRP", "VBP"],
//!  "disfluencies": [{"kind": "filler", "start": 1, "end": 2}]}
//! ```
//!
//! A `"text"` field may replace `"tokens"`; it is split on whitespace. Token indices in
//! disfluency regions are 0-based and end-exclusive. Words are lowercased at ingestion unless
//! [`LoadOptions::lowercase`] is off; punctuation is kept as-is.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    /// Token materialized at the head of the utterance when speaker tags are enabled.
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::A => "<A>",
            Speaker::B => "<B>",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::A => "A",
            Speaker::B => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisfluencyKind {
    Reparandum,
    Repair,
    Filler,
    Repetition,
}

/// Substitution-error taxonomy; supplied by annotators, never inferred authoritatively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorCategory {
    Semantic,
    Phonological,
    Mixed,
    Morphosyntactic,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Semantic => "semantic",
            ErrorCategory::Phonological => "phonological",
            ErrorCategory::Mixed => "mixed",
            ErrorCategory::Morphosyntactic => "morphosyntactic",
        }
    }
}

impl std::str::FromStr for ErrorCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(ErrorCategory::Semantic),
            "phonological" => Ok(ErrorCategory::Phonological),
            "mixed" => Ok(ErrorCategory::Mixed),
            "morphosyntactic" => Ok(ErrorCategory::Morphosyntactic),
            other => Err(Error::InvalidArgument(format!(
                "unknown error category {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisfluencyRegion {
    pub kind: DisfluencyKind,
    pub start: usize,
    pub end: usize,
    /// Index (within the utterance's region list) of the reparandum this repair corrects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair_of: Option<usize>,
    /// Optional annotated error category, carried on repair regions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ErrorCategory>,
}

impl DisfluencyRegion {
    pub fn new(kind: DisfluencyKind, start: usize, end: usize) -> Self {
        DisfluencyRegion {
            kind,
            start,
            end,
            repair_of: None,
            category: None,
        }
    }

    pub fn repair(start: usize, end: usize, reparandum: usize) -> Self {
        DisfluencyRegion {
            repair_of: Some(reparandum),
            ..DisfluencyRegion::new(DisfluencyKind::Repair, start, end)
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.start..self.end).contains(&index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    #[serde(default)]
    pub conversation_id: String,
    pub speaker: Speaker,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disfluencies: Vec<DisfluencyRegion>,
}

impl Utterance {
    pub fn new(conversation_id: impl Into<String>, speaker: Speaker, tokens: Vec<String>) -> Self {
        Utterance {
            conversation_id: conversation_id.into(),
            speaker,
            tokens,
            pos: None,
            disfluencies: Vec::new(),
        }
    }

    /// Whitespace-tokenized utterance, mostly for tests and synthetic corpora.
    pub fn from_text(speaker: Speaker, text: &str) -> Self {
        Utterance::new(
            "",
            speaker,
            text.split_whitespace().map(str::to_owned).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The normalized text field: tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Token sequence fed to a language model, with the speaker tag first when requested.
    pub fn lm_tokens(&self, speaker_tags: bool) -> Vec<&str> {
        let mut out = Vec::with_capacity(self.tokens.len() + 1);
        if speaker_tags {
            out.push(self.speaker.tag());
        }
        out.extend(self.tokens.iter().map(String::as_str));
        out
    }

    /// The utterance as intended: reparanda, fillers and repeated material removed, repairs kept.
    pub fn fluent(&self) -> Utterance {
        let drop = |i: usize| {
            self.disfluencies
                .iter()
                .any(|r| r.kind != DisfluencyKind::Repair && r.contains(i))
        };
        let keep: Vec<usize> = (0..self.tokens.len()).filter(|&i| !drop(i)).collect();
        Utterance {
            conversation_id: self.conversation_id.clone(),
            speaker: self.speaker,
            tokens: keep.iter().map(|&i| self.tokens[i].clone()).collect(),
            pos: self
                .pos
                .as_ref()
                .map(|p| keep.iter().map(|&i| p[i].clone()).collect()),
            disfluencies: Vec::new(),
        }
    }

    /// Checks POS alignment and disfluency-region structure.
    pub fn validate(&self) -> Result<()> {
        if let Some(pos) = &self.pos {
            if pos.len() != self.tokens.len() {
                return Err(Error::Alignment {
                    tokens: self.tokens.len(),
                    pos: pos.len(),
                });
            }
        }
        let n = self.tokens.len();
        for (i, r) in self.disfluencies.iter().enumerate() {
            if r.start >= r.end {
                return Err(Error::InvalidUtterance(format!(
                    "region {i} has start {} >= end {}",
                    r.start, r.end
                )));
            }
            if r.end > n {
                return Err(Error::InvalidUtterance(format!(
                    "region {i} ends at {} beyond {n} tokens",
                    r.end
                )));
            }
            match (r.kind, r.repair_of) {
                (DisfluencyKind::Repair, None) => {
                    return Err(Error::InvalidUtterance(format!(
                        "repair region {i} has no repair_of link"
                    )))
                }
                (DisfluencyKind::Repair, Some(j)) => {
                    let target = self.disfluencies.get(j).ok_or_else(|| {
                        Error::InvalidUtterance(format!(
                            "repair region {i} links to missing region {j}"
                        ))
                    })?;
                    if target.kind != DisfluencyKind::Reparandum {
                        return Err(Error::InvalidUtterance(format!(
                            "repair region {i} links to region {j}, which is not a reparandum"
                        )));
                    }
                }
                (_, Some(_)) => {
                    return Err(Error::InvalidUtterance(format!(
                        "region {i} is not a repair but carries repair_of"
                    )))
                }
                _ => {}
            }
        }
        let mut spans: Vec<(usize, usize)> =
            self.disfluencies.iter().map(|r| (r.start, r.end)).collect();
        spans.sort_unstable();
        if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
            return Err(Error::InvalidUtterance(format!(
                "regions [{}, {}) and [{}, {}) overlap",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Malformed lines abort the load when set; otherwise they are skipped and counted.
    pub strict: bool,
    pub lowercase: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            strict: true,
            lowercase: true,
        }
    }
}

/// Lines skipped during a lenient load.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub skipped: Vec<(usize, String)>,
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    conversation_id: String,
    speaker: Speaker,
    tokens: Option<Vec<String>>,
    text: Option<String>,
    pos: Option<Vec<String>>,
    #[serde(default)]
    disfluencies: Vec<DisfluencyRegion>,
}

impl RawRecord {
    fn into_utterance(self, lowercase: bool) -> Result<Utterance> {
        let tokens: Vec<String> = match (self.tokens, self.text) {
            (Some(tokens), _) => tokens,
            (None, Some(text)) => text.split_whitespace().map(str::to_owned).collect(),
            (None, None) => {
                return Err(Error::InvalidUtterance(
                    "record has neither tokens nor text".into(),
                ))
            }
        };
        let tokens = if lowercase {
            tokens.into_iter().map(|t| t.to_lowercase()).collect()
        } else {
            tokens
        };
        let utt = Utterance {
            conversation_id: self.conversation_id,
            speaker: self.speaker,
            tokens,
            pos: self.pos,
            disfluencies: self.disfluencies,
        };
        utt.validate()?;
        Ok(utt)
    }
}

/// An ordered, immutable collection of utterances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Corpus { utterances }
    }

    /// Builds a corpus of speaker-A utterances from whitespace-separated strings.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        Corpus::new(
            texts
                .iter()
                .map(|t| Utterance::from_text(Speaker::A, t.as_ref()))
                .collect(),
        )
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Utterance> {
        self.utterances.iter()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Every utterance replaced by its [`Utterance::fluent`] rendering.
    pub fn fluent(&self) -> Corpus {
        Corpus::new(self.iter().map(Utterance::fluent).collect())
    }

    pub fn token_count(&self) -> usize {
        self.utterances.iter().map(Utterance::len).sum()
    }

    /// Parses JSONL text. Alignment and region errors are fatal in both modes; malformed JSON
    /// is fatal only in strict mode.
    pub fn parse_jsonl(input: &str, options: &LoadOptions) -> Result<(Corpus, LoadReport)> {
        let mut utterances = Vec::new();
        let mut report = LoadReport::default();
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = match serde_json::from_str(line) {
                Ok(raw) => raw,
                Err(e) if !options.strict => {
                    report.skipped.push((line_no, e.to_string()));
                    continue;
                }
                Err(e) => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            };
            match raw.into_utterance(options.lowercase) {
                Ok(u) => utterances.push(u),
                Err(e @ Error::Alignment { .. }) => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })
                }
                Err(e) if !options.strict => report.skipped.push((line_no, e.to_string())),
                Err(e) => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok((Corpus { utterances }, report))
    }

    pub fn load(path: impl AsRef<Path>, options: &LoadOptions) -> Result<(Corpus, LoadReport)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Corpus::parse_jsonl(&text, options)
    }

    /// Canonical JSONL serialization (one utterance per line, trailing newline).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(u).expect("utterances always serialize"));
            out.push('\n');
        }
        out
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Utterance;
    type IntoIter = std::slice::Iter<'a, Utterance>;

    fn into_iter(self) -> Self::IntoIter {
        self.utterances.iter()
    }
}

/// Loads a JSONL corpus with default normalization; lenient loads log the skip count.
pub fn load_corpus(path: impl AsRef<Path>, strict: bool) -> Result<Corpus> {
    let (corpus, report) = Corpus::load(
        path,
        &LoadOptions {
            strict,
            ..LoadOptions::default()
        },
    )?;
    if !report.skipped.is_empty() {
        log::warn!("skipped {} malformed corpus lines", report.skipped.len());
    }
    Ok(corpus)
}

pub type WordId = u32;

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const PRE: &str = "<PRE>";
pub const SUF: &str = "<SUF>";
pub const MID: &str = "<MID>";

/// Word-level vocabulary. Ids are dense from 0; the five special tokens occupy ids 0..5 and
/// ordinary words follow in order of decreasing frequency, ties broken alphabetically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, WordId>,
    min_count: u64,
}

impl Vocabulary {
    pub const EOS_ID: WordId = 0;
    pub const UNK_ID: WordId = 1;
    pub const PRE_ID: WordId = 2;
    pub const SUF_ID: WordId = 3;
    pub const MID_ID: WordId = 4;
    pub const SPECIALS: [&'static str; 5] = [EOS, UNK, PRE, SUF, MID];

    /// Vocabulary over plain corpus tokens.
    pub fn build(corpus: &Corpus, min_count: u64) -> Result<Self> {
        Vocabulary::build_with(corpus, min_count, false)
    }

    /// Vocabulary over LM token streams; with `speaker_tags` the `<A>`/`<B>` tags are counted
    /// like words.
    pub fn build_with(corpus: &Corpus, min_count: u64, speaker_tags: bool) -> Result<Self> {
        if corpus.token_count() == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for utt in corpus {
            for tok in utt.lm_tokens(speaker_tags) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !Vocabulary::SPECIALS.contains(w))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words = Vocabulary::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w.to_owned()))
            .collect();
        let mut vocab = Vocabulary::from_words_unchecked(words);
        vocab.min_count = min_count;
        Ok(vocab)
    }

    fn from_words_unchecked(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as WordId))
            .collect();
        Vocabulary {
            words,
            index,
            min_count: 1,
        }
    }

    /// Rebuilds a vocabulary from its id-ordered word list (see [`Vocabulary::export`]).
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < Vocabulary::SPECIALS.len()
            || words[..Vocabulary::SPECIALS.len()] != Vocabulary::SPECIALS
        {
            return Err(Error::InvalidArgument(
                "vocabulary must start with <eos> <unk> <PRE> <SUF> <MID>".into(),
            ));
        }
        let vocab = Vocabulary::from_words_unchecked(words);
        if vocab.index.len() != vocab.words.len() {
            return Err(Error::InvalidArgument(
                "duplicate vocabulary entries".into(),
            ));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    /// Id of `word`, falling back to `<unk>`.
    pub fn lookup(&self, word: &str) -> WordId {
        self.id(word).unwrap_or(Vocabulary::UNK_ID)
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<WordId> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    pub fn is_special(id: WordId) -> bool {
        (id as usize) < Vocabulary::SPECIALS.len()
    }

    /// Specials and speaker tags: angle-bracketed tokens that are never lexical candidates.
    pub fn is_marker(&self, id: WordId) -> bool {
        let w = self.word(id);
        Vocabulary::is_special(id) || (w.len() > 2 && w.starts_with('<') && w.ends_with('>'))
    }

    /// Ordinary lexical entries, in id order.
    pub fn content_ids(&self) -> impl Iterator<Item = WordId> + '_ {
        (0..self.words.len() as WordId).filter(move |&id| !self.is_marker(id))
    }

    /// One token per line in id order; shared verbatim with external scorers.
    pub fn export(&self) -> String {
        let mut out = self.words.join("\n");
        out.push('\n');
        out
    }

    pub fn parse_export(text: &str) -> Result<Self> {
        Vocabulary::from_words(text.lines().map(str::to_owned).collect())
    }
}
