//! Hashed bag-of-n-grams features.
//!
//! Text is lowercased and split on non-alphanumeric characters; every n-gram
//! in the configured range is hashed with a seeded 64-bit FNV-1a into one of
//! `dim - 1` buckets. The last component is a bias fixed at 1.

use serde::{Deserialize, Serialize};

use super::BackendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    /// Total dimension including the bias component.
    pub dim: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hash_seed: u64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            dim: 4096,
            ngram_min: 1,
            ngram_max: 2,
            hash_seed: 0,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.dim < 2 {
            return Err(BackendError::FeatureDimension(self.dim));
        }
        if self.ngram_min == 0 || self.ngram_min > self.ngram_max {
            return Err(BackendError::NgramRange(self.ngram_min, self.ngram_max));
        }
        Ok(())
    }

    pub fn bias_index(&self) -> usize {
        self.dim - 1
    }
}

/// Sparse storage of a dense feature vector: sorted `(index, value)` pairs
/// with all other components zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl FeatureVector {
    /// Builds from dense components; zeros are dropped.
    pub fn from_dense(values: &[f64]) -> Self {
        FeatureVector {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |(i, _)| *i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, v)| v.is_finite())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Seeded FNV-1a: the seed's little-endian bytes are hashed ahead of the
/// term.
pub fn hash_term(term: &str, seed: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(term.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn featurize(text: &str, config: &FeaturizerConfig) -> Result<FeatureVector, BackendError> {
    config.validate()?;
    let buckets = (config.dim - 1) as u64;
    let tokens = tokenize(text);
    let mut dense = vec![0.0; config.dim];
    for n in config.ngram_min..=config.ngram_max {
        for gram in tokens.windows(n) {
            let term = gram.join(" ");
            dense[(hash_term(&term, config.hash_seed) % buckets) as usize] += 1.0;
        }
    }
    dense[config.bias_index()] = 1.0;
    Ok(FeatureVector::from_dense(&dense))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_bias_only() {
        let cfg = FeaturizerConfig::default();
        let v = featurize("", &cfg).unwrap();
        assert_eq!(v.entries(), &[(cfg.dim - 1, 1.0)]);
        assert_eq!(v.dim(), cfg.dim);
    }

    #[test]
    fn dimension_below_two_is_rejected() {
        let cfg = FeaturizerConfig {
            dim: 1,
            ..FeaturizerConfig::default()
        };
        assert!(matches!(featurize("x", &cfg), Err(BackendError::FeatureDimension(1))));
        let cfg = FeaturizerConfig {
            ngram_min: 3,
            ngram_max: 2,
            ..FeaturizerConfig::default()
        };
        assert!(matches!(featurize("x", &cfg), Err(BackendError::NgramRange(3, 2))));
    }

    #[test]
    fn deterministic() {
        let cfg = FeaturizerConfig::default();
        let a = featurize("Washer in Tablet Stand", &cfg).unwrap();
        let b = featurize("Washer in Tablet Stand", &cfg).unwrap();
        assert_eq!(a, b);
    }

    // Expected bucket computed offline with an independent FNV-1a script:
    // seed 7 (8 little-endian bytes) followed by "ab", modulo 15 buckets.
    #[test]
    fn unigram_counts_at_hand_computed_index() {
        let cfg = FeaturizerConfig {
            dim: 16,
            ngram_min: 1,
            ngram_max: 1,
            hash_seed: 7,
        };
        assert_eq!(hash_term("ab", 7), 0x1ea1_2cc1_95f4_e301);
        // 0x1ea12cc195f4e301 mod 15 = 14
        let twice = featurize("ab ab", &cfg).unwrap();
        let once = featurize("ab", &cfg).unwrap();
        assert_eq!(twice.get(14), 2.0);
        assert_eq!(once.get(14), 1.0);
        assert_eq!(twice.entries().len(), 2);
        assert_eq!(twice.get(15), 1.0);
    }

    #[test]
    fn bigrams_add_features() {
        let uni = FeaturizerConfig {
            ngram_max: 1,
            ..FeaturizerConfig::default()
        };
        let bi = FeaturizerConfig::default();
        let text = "brake caliper clamp";
        let total = |v: &FeatureVector| v.entries().iter().map(|e| e.1).sum::<f64>();
        assert_eq!(total(&featurize(text, &uni).unwrap()), 3.0 + 1.0);
        assert_eq!(total(&featurize(text, &bi).unwrap()), 3.0 + 2.0 + 1.0);
    }
}
