//! Infill data augmentation.
//!
//! Each utterance becomes one training sequence in which a uniformly chosen word is moved to
//! the end, after a `<MID>` marker, with its past and future contexts delimited by `<PRE>` and
//! `<SUF>`:
//!
//! ```text
//! <PRE> so this is the <SUF> time i did this conversation <MID> first <eos>
//! ```
//!
//! An independent Bernoulli draw swaps the two context blocks so the model also sees the
//! future before the past.

use rand::Rng;

use crate::corpus::{Corpus, EOS, MID, PRE, SUF};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedRecord {
    /// Index of the source utterance in the corpus.
    pub utterance: usize,
    /// Sampled position, 1-based.
    pub k: usize,
    pub swapped: bool,
    pub sequence: Vec<String>,
}

impl AugmentedRecord {
    pub fn line(&self) -> String {
        self.sequence.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOptions {
    pub seed: u64,
    pub swap_prob: f64,
    /// Place the speaker tag at the head of the prefix block.
    pub speaker_tags: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            seed: 0,
            swap_prob: 0.5,
            speaker_tags: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Augmented {
    pub records: Vec<AugmentedRecord>,
    /// Utterances without tokens, which cannot be augmented.
    pub skipped: Vec<usize>,
}

impl Augmented {
    /// Plain-text training file: one sequence per line, tokens space-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.line());
            out.push('\n');
        }
        out
    }
}

/// Builds the training sequence for position `k` (1-based) of `tokens`.
pub fn augment_at(
    tokens: &[&str],
    k: usize,
    swapped: bool,
    speaker_tag: Option<&str>,
) -> Vec<String> {
    assert!(
        (1..=tokens.len()).contains(&k),
        "position {k} outside 1..={}",
        tokens.len()
    );
    let mut pre: Vec<&str> = speaker_tag.into_iter().collect();
    pre.extend_from_slice(&tokens[..k - 1]);
    let mut seq: Vec<String> = make_infill_query(&pre, &tokens[k..], swapped);
    seq.push(tokens[k - 1].to_owned());
    seq.push(EOS.to_owned());
    seq
}

/// One augmented record per non-empty utterance; utterance `i` draws from RNG stream `i`, so
/// the output is a pure function of `(corpus, seed, swap_prob)`.
pub fn augment_corpus(corpus: &Corpus, options: &AugmentOptions) -> Result<Augmented> {
    if !(0.0..=1.0).contains(&options.swap_prob) {
        return Err(Error::InvalidArgument(format!(
            "swap probability {} outside [0, 1]",
            options.swap_prob
        )));
    }
    let mut out = Augmented::default();
    for (i, utt) in corpus.iter().enumerate() {
        if utt.is_empty() {
            out.skipped.push(i);
            continue;
        }
        let mut rng = rng::stream(options.seed, i as u64);
        let k = rng.random_range(1..=utt.len());
        let swapped = rng.random_bool(options.swap_prob);
        let tokens: Vec<&str> = utt.tokens.iter().map(String::as_str).collect();
        let tag = options.speaker_tags.then(|| utt.speaker.tag());
        out.records.push(AugmentedRecord {
            utterance: i,
            k,
            swapped,
            sequence: augment_at(&tokens, k, swapped, tag),
        });
    }
    if !out.skipped.is_empty() {
        log::warn!(
            "skipped {} empty utterances during augmentation",
            out.skipped.len()
        );
    }
    Ok(out)
}

/// Inference query `<PRE> pre <SUF> suf <MID>` (suffix block first when `swapped`); the
/// scorer reads the slot word's distribution right after `<MID>`.
pub fn make_infill_query<S: AsRef<str>>(pre: &[S], suf: &[S], swapped: bool) -> Vec<String> {
    let pre_block = std::iter::once(PRE).chain(pre.iter().map(AsRef::as_ref));
    let suf_block = std::iter::once(SUF).chain(suf.iter().map(AsRef::as_ref));
    let blocks: Vec<&str> = if swapped {
        suf_block.chain(pre_block).collect()
    } else {
        pre_block.chain(suf_block).collect()
    };
    blocks
        .into_iter()
        .chain(std::iter::once(MID))
        .map(str::to_owned)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn worked_example() {
        let toks = words("So this is the first time I did this conversation");
        let seq = augment_at(&toks, 5, false, None).join(" ");
        assert_eq!(
            seq,
            "<PRE> So this is the <SUF> time I did this conversation <MID> first <eos>"
        );
    }

    #[test]
    fn swapped_puts_suffix_block_first() {
        let seq = augment_at(&words("a b c"), 2, true, None).join(" ");
        assert_eq!(seq, "<SUF> c <PRE> a <MID> b <eos>");
    }

    #[test]
    fn single_token_has_empty_contexts() {
        assert_eq!(
            augment_at(&["hi"], 1, false, None).join(" "),
            "<PRE> <SUF> <MID> hi <eos>"
        );
    }

    #[test]
    fn speaker_tag_heads_prefix_block() {
        let seq = augment_at(&words("a b"), 1, true, Some("<B>")).join(" ");
        assert_eq!(seq, "<SUF> b <PRE> <B> <MID> a <eos>");
    }

    #[test]
    fn query_construction() {
        assert_eq!(
            make_infill_query(&["a"], &["b", "c"], false),
            ["<PRE>", "a", "<SUF>", "b", "c", "<MID>"]
        );
        assert_eq!(
            make_infill_query::<&str>(&[], &[], false),
            ["<PRE>", "<SUF>", "<MID>"]
        );
        assert_eq!(
            make_infill_query(&["a"], &["b"], true),
            ["<SUF>", "b", "<PRE>", "a", "<MID>"]
        );
    }

    #[test]
    fn records_conserve_tokens_and_are_deterministic() {
        let corpus = Corpus::from_texts(&["a b c d", "e", "", "f g"]);
        let opts = AugmentOptions {
            seed: 11,
            ..AugmentOptions::default()
        };
        let out = augment_corpus(&corpus, &opts).unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.skipped, vec![2]);
        for r in &out.records {
            let src = &corpus.utterances()[r.utterance].tokens;
            let specials = [PRE, SUF, MID, EOS];
            for s in specials {
                assert_eq!(r.sequence.iter().filter(|t| *t == s).count(), 1);
            }
            let mid = r.sequence.iter().position(|t| t == MID).unwrap();
            assert_eq!(r.sequence[mid + 1], src[r.k - 1]);
            let mut kept: Vec<&String> = r
                .sequence
                .iter()
                .filter(|t| !specials.contains(&t.as_str()))
                .collect();
            let mut orig: Vec<&String> = src.iter().collect();
            kept.sort();
            orig.sort();
            assert_eq!(kept, orig);
        }
        assert_eq!(augment_corpus(&corpus, &opts).unwrap().records, out.records);
    }

    #[test]
    fn rejects_bad_swap_probability() {
        let corpus = Corpus::from_texts(&["a"]);
        let opts = AugmentOptions {
            swap_prob: 1.5,
            ..AugmentOptions::default()
        };
        assert!(augment_corpus(&corpus, &opts).is_err());
    }
}
