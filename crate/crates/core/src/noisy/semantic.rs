//! Word embeddings, Gaussian target noise and cosine distance.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Word vectors of a single dimension, loaded from the whitespace text format
/// (`word v1 … v_dim` per line, optional fastText `count dim` header).
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        let word = word.into();
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {word:?}")));
        }
        self.vectors.insert(word, vector);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();
            if i == 0
                && rest.len() == 1
                && word.parse::<u64>().is_ok()
                && rest[0].parse::<u64>().is_ok()
            {
                continue;
            }
            let vector = rest
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
            t.insert(word, vector).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        table.ok_or_else(|| Error::Parse {
            line: 0,
            message: "no embedding vectors".into(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EmbeddingTable::parse(&text)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn require(&self, word: &str) -> Result<&[f64]> {
        self.get(word).ok_or_else(|| Error::MissingWord {
            word: word.to_string(),
            table: "embeddings",
        })
    }
}

/// `vector + ε`, `ε ~ N(0, noise_var)` i.i.d. per coordinate, drawn from stream 0 of `seed`.
pub fn noisy_semantic_target(vector: &[f64], noise_var: f64, seed: u64) -> Result<Vec<f64>> {
    noisy_semantic_target_with(vector, noise_var, &mut rng::stream(seed, 0))
}

/// [`noisy_semantic_target`] drawing from a caller-supplied generator.
pub fn noisy_semantic_target_with<R: Rng + ?Sized>(
    vector: &[f64],
    noise_var: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be >= 0, got {noise_var}"
        )));
    }
    if noise_var == 0.0 {
        return Ok(vector.to_vec());
    }
    let normal = Normal::new(0.0, noise_var.sqrt()).expect("finite positive sd");
    Ok(vector.iter().map(|v| v + normal.sample(rng)).collect())
}

/// Cosine distance `1 − cos(a, b)`, in `[0, 2]`; exactly 0 for identical vectors.
pub fn semantic_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument(
            "cosine distance of a zero vector".into(),
        ));
    }
    if a == b {
        return Ok(0.0);
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_noise_is_identity() {
        let v = vec![0.5, -1.25, 3.0];
        assert_eq!(noisy_semantic_target(&v, 0.0, 3).unwrap(), v);
    }

    #[test]
    fn noise_energy_matches_variance() {
        let dim = 100;
        let var = 0.1;
        let zero = vec![0.0; dim];
        let mut rng = rng::stream(42, 0);
        let draws = 10_000;
        let mean_sq: f64 = (0..draws)
            .map(|_| {
                let e = noisy_semantic_target_with(&zero, var, &mut rng).unwrap();
                e.iter().map(|x| x * x).sum::<f64>()
            })
            .sum::<f64>()
            / draws as f64;
        let expected = dim as f64 * var;
        assert!(
            (mean_sq - expected).abs() / expected < 0.02,
            "{mean_sq} vs {expected}"
        );
    }

    #[test]
    fn noisy_target_is_seed_deterministic() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let a = noisy_semantic_target(&v, 0.1, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, noisy_semantic_target(&v, 0.1, 7).unwrap());
        assert_ne!(a, noisy_semantic_target(&v, 0.1, 8).unwrap());
        assert!(noisy_semantic_target(&v, -0.1, 7).is_err());
    }

    #[test]
    fn distance_landmarks() {
        assert_eq!(semantic_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            semantic_distance(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(),
            2.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            semantic_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert!(semantic_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(semantic_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn parse_skips_fasttext_header_and_checks_dims() {
        let t = EmbeddingTable::parse("2 3\ncat 1 0 0\ndog 0.5 0.5 0\n").unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
        assert_eq!(t.get("dog").unwrap(), &[0.5, 0.5, 0.0]);
        let err = EmbeddingTable::parse("cat 1 0 0\ndog 1 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(EmbeddingTable::parse("cat 1 nan\n").is_err());
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_scale_invariant(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let d = semantic_distance(&a, &b).unwrap();
            prop_assert!((d - semantic_distance(&b, &a).unwrap()).abs() < 1e-12);
            let scaled: Vec<f64> = a.iter().map(|x| c * x).collect();
            prop_assert!((d - semantic_distance(&scaled, &b).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}
