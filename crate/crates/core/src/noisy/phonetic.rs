//! Articulatory feature matrices, target perturbation and feature-weighted edit distance.
//!
//! Each IPA segment is a row of 22 categorical features valued `+`, `-` or `0`. The noisy
//! target draws a number of perturbations `k ~ U(1, N)` for an `N`-segment word; each one picks
//! a position `~ U(1, N)` (with replacement) and a feature `~ U(1, 22)` and moves that cell to
//! one of the two other values. The distance aligns two matrices with unit insertion/deletion
//! cost and a substitution cost equal to the fraction of differing cells.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const N_FEATURES: usize = 22;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "syl", "son", "cons", "cont", "delrel", "lat", "nas", "strid", "voi", "sg", "cg", "ant", "cor",
    "distr", "lab", "hi", "lo", "back", "round", "velaric", "tense", "long",
];

/// Bundled feature table covering the segments of common English pronunciations.
pub const BUNDLED_FEATURES: &str = include_str!("../../data/ipa_features.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feature {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
    #[serde(rename = "0")]
    Zero,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::Plus, Feature::Minus, Feature::Zero];

    pub fn parse(cell: &str) -> Option<Feature> {
        match cell {
            "+" => Some(Feature::Plus),
            "-" => Some(Feature::Minus),
            "0" => Some(Feature::Zero),
            _ => None,
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Feature::Plus => "+",
            Feature::Minus => "-",
            Feature::Zero => "0",
        })
    }
}

pub type FeatureRow = [Feature; N_FEATURES];
/// One feature row per segment.
pub type FeatureMatrix = Vec<FeatureRow>;

#[derive(Debug, Clone, Default)]
pub struct PhoneticFeatureTable {
    rows: HashMap<String, FeatureRow>,
    inventory: Vec<String>,
}

impl PhoneticFeatureTable {
    /// TSV with a `segment f1 … f22` header and cells in `{+, -, 0}`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            message: "empty feature table".into(),
        })?;
        let columns = header.split('\t').count();
        if columns != N_FEATURES + 1 {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected {} columns, found {columns}", N_FEATURES + 1),
            });
        }
        let mut table = PhoneticFeatureTable::default();
        for (i, line) in lines {
            let cells: Vec<&str> = line.split('\t').collect();
            let bad = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            if cells.len() != N_FEATURES + 1 {
                return Err(bad(format!(
                    "expected {} cells, found {}",
                    N_FEATURES + 1,
                    cells.len()
                )));
            }
            let mut row = [Feature::Zero; N_FEATURES];
            for (j, c) in cells[1..].iter().enumerate() {
                row[j] = Feature::parse(c.trim())
                    .ok_or_else(|| bad(format!("bad feature value {c:?}")))?;
            }
            let seg = cells[0].trim().to_string();
            if table.rows.insert(seg.clone(), row).is_some() {
                return Err(bad(format!("duplicate segment {seg:?}")));
            }
            table.inventory.push(seg);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PhoneticFeatureTable::parse(&text)
    }

    pub fn bundled() -> Self {
        PhoneticFeatureTable::parse(BUNDLED_FEATURES).expect("bundled feature table is valid")
    }

    pub fn inventory(&self) -> &[String] {
        &self.inventory
    }

    pub fn row(&self, segment: &str) -> Option<&FeatureRow> {
        self.rows.get(segment)
    }

    pub fn matrix<S: AsRef<str>>(&self, segments: &[S]) -> Result<FeatureMatrix> {
        segments
            .iter()
            .map(|s| {
                self.row(s.as_ref())
                    .copied()
                    .ok_or_else(|| Error::UnknownSegment(s.as_ref().to_string()))
            })
            .collect()
    }
}

/// Word → IPA segment list, from a TSV of `word<TAB>seg seg …`.
#[derive(Debug, Clone, Default)]
pub struct PronLexicon {
    entries: HashMap<String, Vec<String>>,
}

impl PronLexicon {
    /// Parses the lexicon and checks every segment against `table`.
    pub fn parse(text: &str, table: &PhoneticFeatureTable) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, pron) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected word<TAB>segments".into(),
            })?;
            let segs: Vec<String> = pron.split_whitespace().map(str::to_owned).collect();
            if segs.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("empty pronunciation for {word:?}"),
                });
            }
            if let Some(s) = segs.iter().find(|s| table.row(s).is_none()) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: Error::UnknownSegment(s.clone()).to_string(),
                });
            }
            entries.insert(word.trim().to_string(), segs);
        }
        Ok(PronLexicon { entries })
    }

    pub fn load(path: impl AsRef<Path>, table: &PhoneticFeatureTable) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PronLexicon::parse(&text, table)
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn require(&self, word: &str) -> Result<&[String]> {
        self.get(word).ok_or_else(|| Error::MissingWord {
            word: word.to_string(),
            table: "pronunciation lexicon",
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Noisy feature matrix for `segments`, drawn from stream 0 of `seed`.
pub fn noisy_phonetic_target<S: AsRef<str>>(
    segments: &[S],
    table: &PhoneticFeatureTable,
    seed: u64,
) -> Result<FeatureMatrix> {
    noisy_phonetic_target_with(&table.matrix(segments)?, &mut rng::stream(seed, 0))
}

/// Perturbs a copy of `matrix` using a caller-supplied generator.
pub fn noisy_phonetic_target_with<R: Rng + ?Sized>(
    matrix: &[FeatureRow],
    rng: &mut R,
) -> Result<FeatureMatrix> {
    let n = matrix.len();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cannot perturb an empty segment list".into(),
        ));
    }
    let mut out = matrix.to_vec();
    let k = rng.random_range(1..=n);
    for _ in 0..k {
        let pos = rng.random_range(0..n);
        let feat = rng.random_range(0..N_FEATURES);
        let current = out[pos][feat];
        let others: Vec<Feature> = Feature::ALL.into_iter().filter(|&f| f != current).collect();
        out[pos][feat] = others[rng.random_range(0..others.len())];
    }
    Ok(out)
}

fn substitution_cost(a: &FeatureRow, b: &FeatureRow) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / N_FEATURES as f64
}

/// Minimal alignment cost: substitution = differing cells / 22, insertion/deletion = 1.
pub fn phonetic_distance(a: &[FeatureRow], b: &[FeatureRow]) -> f64 {
    let mut prev: Vec<f64> = (0..=b.len()).map(|j| j as f64).collect();
    let mut cur = vec![0.0; b.len() + 1];
    for (i, ra) in a.iter().enumerate() {
        cur[0] = (i + 1) as f64;
        for (j, rb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + substitution_cost(ra, rb))
                .min(prev[j + 1] + 1.0)
                .min(cur[j] + 1.0);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Renders a matrix as one `segment-index: cells` line per row (used in golden files).
pub fn format_matrix(matrix: &[FeatureRow]) -> String {
    matrix
        .iter()
        .map(|row| {
            row.iter()
                .map(Feature::to_string)
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
