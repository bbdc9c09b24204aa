//! Frozen toy text encoder: every word maps to a fixed random unit vector
//! derived from a hash of the word.

use crate::numerics::{l2_normalize, Matrix, SeededRng, stable_hash};

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    dim: usize,
    n_tokens: usize,
    seed: u64,
}

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl TextEncoder {
    pub fn new(dim: usize, n_tokens: usize, seed: u64) -> Self {
        assert!(n_tokens >= 1, "a token matrix needs at least the CLS row");
        Self { dim, n_tokens, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn word_embedding(&self, word: &str) -> Vec<f64> {
        SeededRng::with_stream(self.seed, stable_hash(word)).unit_vector(self.dim)
    }

    /// Normalized mean of the word embeddings; zero for text without words.
    pub fn cls(&self, text: &str) -> Vec<f64> {
        let words = tokenize(text);
        if words.is_empty() {
            return vec![0.0; self.dim];
        }
        let mut acc = vec![0.0; self.dim];
        for w in &words {
            for (a, e) in acc.iter_mut().zip(self.word_embedding(w)) {
                *a += e;
            }
        }
        l2_normalize(&acc)
    }

    /// `N_t × d` token matrix: row 0 is the CLS embedding, the remaining rows
    /// cycle through contextual word tokens, each word embedding mixed with
    /// the sentence CLS and renormalized (zeros when there are no words).
    pub fn encode(&self, text: &str) -> Matrix {
        let words = tokenize(text);
        let cls = self.cls(text);
        let embeddings: Vec<Vec<f64>> = words
            .iter()
            .map(|w| {
                let e = self.word_embedding(w);
                l2_normalize(&e.iter().zip(&cls).map(|(a, b)| a + b).collect::<Vec<_>>())
            })
            .collect();
        let mut m = Matrix::zeros(self.n_tokens, self.dim);
        m.row_mut(0).copy_from_slice(&cls);
        if !embeddings.is_empty() {
            for r in 1..self.n_tokens {
                m.row_mut(r).copy_from_slice(&embeddings[(r - 1) % embeddings.len()]);
            }
        }
        m
    }

    /// CLS embeddings of several texts stacked as rows.
    pub fn encode_cls(&self, texts: &[String]) -> Matrix {
        let rows: Vec<Vec<f64>> = texts.iter().map(|t| self.cls(t)).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, self.dim);
        }
        Matrix::from_rows(&rows).expect("equal widths")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(tokenize("A dog, running!"), vec!["a", "dog", "running"]);
        assert!(tokenize("  ,, ").is_empty());
    }

    #[test]
    fn encoding_is_deterministic_and_unit_norm() {
        let enc = TextEncoder::new(8, 5, 3);
        let a = enc.encode("red ball park");
        assert_eq!(a, enc.encode("red ball park"));
        let n: f64 = a.row(0).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(a.row(1), a.row(4));
        assert_eq!(enc.encode("").row(2), &[0.0; 8]);
    }
}
