//! Prompt embeddings: the provider contract a text encoder plugs into, and a
//! deterministic hashed embedder for desk-scale runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConditioningError {
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("embedding width {got} does not match backbone context width {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
}

/// Prompt embedding `e`, or the null-prompt embedding used by guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding<S> {
    pub data: Matrix<S>,
    pub is_null: bool,
}

impl<S: Scalar> PromptEmbedding<S> {
    pub fn tokens(&self) -> usize {
        self.data.rows
    }

    pub fn dim(&self) -> usize {
        self.data.cols
    }

    /// Fails unless the width matches `context_dim` and all entries are finite.
    pub fn check_compatible(&self, context_dim: usize) -> Result<(), ConditioningError> {
        if self.dim() != context_dim {
            return Err(ConditioningError::DimMismatch {
                expected: context_dim,
                got: self.dim(),
            });
        }
        if !self.data.all_finite() {
            return Err(ConditioningError::NonFinite);
        }
        Ok(())
    }

    /// Cosine similarity of the flattened matrices.
    pub fn cosine(&self, other: &Self) -> f64 {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for (a, b) in self.data.data.iter().zip(&other.data.data) {
            let (a, b) = (a.f64(), b.f64());
            ab += a * b;
            aa += a * a;
            bb += b * b;
        }
        ab / (aa.sqrt() * bb.sqrt()).max(f64::MIN_POSITIVE)
    }
}

/// Contract for text encoders: `embed` and `null_embedding` only.
pub trait EmbeddingProvider<S: Scalar>: Send + Sync {
    fn name(&self) -> String;
    fn embed(&self, text: &str) -> Result<PromptEmbedding<S>, ConditioningError>;
    fn null_embedding(&self) -> PromptEmbedding<S>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEmbedderConfig {
    pub tokens: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ToyEmbedderConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            dim: 32,
            seed: 0,
        }
    }
}

/// Hashes each lower-cased word to a seeded Gaussian row and mixes in a
/// whole-prompt row, so distinct prompts never share an embedding.
#[derive(Debug, Clone)]
pub struct ToyEmbedder<S> {
    config: ToyEmbedderConfig,
    null: PromptEmbedding<S>,
}

const NULL_KEY: &str = "\u{0}null";
const PAD_KEY: &str = "\u{0}pad";

impl<S: Scalar> ToyEmbedder<S> {
    pub fn new(config: ToyEmbedderConfig) -> Self {
        let mut data = Vec::with_capacity(config.tokens * config.dim);
        for i in 0..config.tokens {
            data.extend(gaussian_row(config.seed, &format!("{NULL_KEY}{i}"), config.dim));
        }
        let null = PromptEmbedding {
            data: Matrix::from_vec(
                config.tokens,
                config.dim,
                data.into_iter().map(S::of).collect(),
            ),
            is_null: true,
        };
        Self { config, null }
    }

    pub fn config(&self) -> ToyEmbedderConfig {
        self.config
    }
}

impl<S: Scalar> EmbeddingProvider<S> for ToyEmbedder<S> {
    fn name(&self) -> String {
        format!(
            "toy-hash(tokens={},dim={},seed={})",
            self.config.tokens, self.config.dim, self.config.seed
        )
    }

    fn embed(&self, text: &str) -> Result<PromptEmbedding<S>, ConditioningError> {
        let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if normalized.is_empty() {
            return Ok(self.null_embedding());
        }
        let words: Vec<&str> = normalized.split(' ').collect();
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        let mut data = Vec::with_capacity(self.config.tokens * self.config.dim);
        for i in 0..self.config.tokens {
            let word = words.get(i).copied().unwrap_or(PAD_KEY);
            let word_row = gaussian_row(self.config.seed, word, self.config.dim);
            let prompt_row = gaussian_row(
                self.config.seed,
                &format!("{normalized}\u{0}{i}"),
                self.config.dim,
            );
            data.extend(
                word_row
                    .iter()
                    .zip(&prompt_row)
                    .map(|(a, b)| S::of((a + b) * scale)),
            );
        }
        Ok(PromptEmbedding {
            data: Matrix::from_vec(self.config.tokens, self.config.dim, data),
            is_null: false,
        })
    }

    fn null_embedding(&self) -> PromptEmbedding<S> {
        self.null.clone()
    }
}

/// 64-bit FNV-1a, stable across platforms and processes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn gaussian_row(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()) ^ seed.rotate_left(17));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ToyEmbedder<f64> {
        ToyEmbedder::new(ToyEmbedderConfig::default())
    }

    #[test]
    fn empty_prompt_is_null() {
        let e = toy().embed("   ").unwrap();
        assert!(e.is_null);
        assert_eq!(e, toy().null_embedding());
        assert_eq!((e.tokens(), e.dim()), (8, 32));
    }

    #[test]
    fn embedding_is_deterministic() {
        let a = toy().embed("a snowy winter landscape").unwrap();
        let b = toy().embed("a snowy winter landscape").unwrap();
        assert_eq!(a, b);
        assert!(!a.is_null);
        // Whitespace and case normalize away.
        assert_eq!(a, toy().embed("A  snowy Winter landscape").unwrap());
    }

    #[test]
    fn distinct_prompts_are_distinct() {
        let prompts = [
            "a snowy winter landscape",
            "a snowy winter landscape with frosted trees",
            "a herd of mustang horses crossing a river at sunset",
            "vertical stripes",
            "horizontal stripes",
            "one two three four five six seven eight nine",
            "one two three four five six seven eight ten",
        ];
        let e = toy();
        for (i, p) in prompts.iter().enumerate() {
            for q in &prompts[i + 1..] {
                let c = e.embed(p).unwrap().cosine(&e.embed(q).unwrap());
                assert!(c < 0.99, "{p:?} vs {q:?}: {c}");
            }
            assert!(e.embed(p).unwrap().cosine(&e.null_embedding()) < 0.99);
        }
    }

    #[test]
    fn null_embedding_is_stable_and_flagged() {
        let a: PromptEmbedding<f32> = ToyEmbedder::new(ToyEmbedderConfig::default()).null_embedding();
        let b: PromptEmbedding<f32> = ToyEmbedder::new(ToyEmbedderConfig::default()).null_embedding();
        assert!(a.is_null);
        assert_eq!(a, b);
        let c: PromptEmbedding<f64> = toy().null_embedding();
        assert_eq!(c.data.data[0].to_bits(), 13835420513000411855);
    }

    #[test]
    fn compatibility_check() {
        let e = toy().embed("x").unwrap();
        assert!(e.check_compatible(32).is_ok());
        assert_eq!(
            e.check_compatible(16),
            Err(ConditioningError::DimMismatch { expected: 16, got: 32 })
        );
    }
}
