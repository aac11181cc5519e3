//! Vocabulary, token sequences, probability and logit vectors, and the
//! seed-derivation scheme every random draw in the crate flows through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Flat integer vocabulary of ids `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::VocabTooSmall(size));
        }
        if size > u32::MAX as usize {
            return Err(Error::param("vocab.size", "must fit in 32 bits"));
        }
        Ok(Self { size })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token,
                size: self.size,
            })
        }
    }
}

/// A token sequence whose first `prompt_len` tokens are the prompt; the rest
/// is the continuation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
}

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::param(
                "prompt_len",
                format!("{prompt_len} exceeds sequence length {}", tokens.len()),
            ));
        }
        Ok(Self { tokens, prompt_len })
    }

    /// A sequence with no prompt.
    pub fn plain(tokens: Vec<TokenId>) -> Self {
        Self {
            tokens,
            prompt_len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    pub fn continuation(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn validate(&self, vocab: Vocab) -> Result<()> {
        self.tokens.iter().try_for_each(|&t| vocab.check(t))
    }
}

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dist(Vec<f64>);

const DIST_TOL: f64 = 1e-9;

impl Dist {
    /// Validates an already-normalized probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDist("empty".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDist(format!(
                "entry {i} is {} (must be finite and non-negative)",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > DIST_TOL {
            return Err(Error::InvalidDist(format!("sums to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDist(format!(
                "weight {i} is {} (must be finite and non-negative)",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDist("all weights are zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self(weights))
    }

    pub fn uniform(size: usize) -> Self {
        Self(vec![1.0 / size as f64; size])
    }

    pub fn point_mass(size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; size];
        probs[token as usize] = 1.0;
        Self(probs)
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Multiplies entry `i` by `factor(i)` and renormalizes. Equivalent to
    /// adding `ln factor(i)` to the logits and taking the softmax.
    pub fn reweight(self, factor: impl Fn(usize) -> f64) -> Result<Self> {
        let mut w = self.0;
        for (i, p) in w.iter_mut().enumerate() {
            *p *= factor(i);
        }
        Self::from_weights(w)
    }

    /// Natural-log logits; zero-probability entries map to `floor`.
    pub fn to_logits(&self, floor: f64) -> LogitVec {
        LogitVec(
            self.0
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { floor })
                .collect(),
        )
    }
}

/// Unnormalized log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVec(Vec<f64>);

impl LogitVec {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLogit(i));
        }
        Ok(Self(logits))
    }

    #[inline]
    pub fn logits(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[cfg(test)]
    pub(crate) fn from_raw(logits: Vec<f64>) -> Self {
        Self(logits)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// `exp(l_i / T) / sum_j exp(l_j / T)`, stabilized by subtracting the max.
pub fn softmax(logits: &LogitVec, temperature: f64) -> Result<Dist> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param("temperature", "must be positive and finite"));
    }
    let l = logits.logits();
    if l.is_empty() {
        return Err(Error::Empty("logit vector"));
    }
    if let Some(i) = l.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogit(i));
    }
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = l.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    Dist::from_weights(exps)
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

/// Splitmix64 finalizer: the crate's only pseudo-random function.
#[inline]
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
    z ^ (z >> 31)
}

/// Keyed mix of several words: `mix(...mix(mix(key) ^ w0) ^ w1 ...)`.
#[inline]
pub fn mix_words(key: u64, words: &[u64]) -> u64 {
    words.iter().fold(mix64(key), |s, &w| mix64(s ^ w))
}

/// FNV-1a over the label bytes.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A master seed plus a path of `(label, index)` steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedPath {
    pub master_seed: u64,
    pub path: Vec<(String, u64)>,
}

impl SeedPath {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            path: Vec::new(),
        }
    }

    pub fn child(&self, label: &str, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push((label.to_string(), index));
        Self {
            master_seed: self.master_seed,
            path,
        }
    }

    pub fn seed(&self) -> u64 {
        derive_seed(self)
    }
}

/// `derive_seed(path ++ [(label, index)]) == seed_step(derive_seed(path), label, index)`.
pub fn derive_seed(path: &SeedPath) -> u64 {
    path.path
        .iter()
        .fold(mix64(path.master_seed), |s, (label, index)| {
            seed_step(s, label, *index)
        })
}

#[inline]
pub fn seed_step(seed: u64, label: &str, index: u64) -> u64 {
    mix64(mix64(seed ^ label_hash(label)) ^ index)
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn unit_interval(seed: u64) -> f64 {
    (mix64(seed) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Inverse-CDF sampling from `dist` driven by a single 64-bit seed.
pub fn sample(dist: &Dist, seed: u64) -> Result<TokenId> {
    sample_weights(dist.probs(), seed)
}

/// Inverse-CDF sampling from unnormalized non-negative weights.
pub fn sample_weights(weights: &[f64], seed: u64) -> Result<TokenId> {
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::InvalidDist("cannot sample from zero mass".into()));
    }
    let target = unit_interval(seed) * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if target < acc {
                return Ok(i as TokenId);
            }
        }
    }
    // rounding left `target` just past the final partial sum
    Ok(last_positive as TokenId)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_for_equal_logits() {
        for t in [0.5, 1.0, 7.0] {
            let d = softmax(&LogitVec::new(vec![2.5; 5]).unwrap(), t).unwrap();
            for p in d.probs() {
                assert!((p - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_two_point_analytic() {
        let d = softmax(&LogitVec::new(vec![0.0, 3f64.ln()]).unwrap(), 1.0).unwrap();
        assert!((d.probs()[0] - 0.25).abs() < 1e-15);
        assert!((d.probs()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let d = softmax(&LogitVec::new(vec![1000.0, 1001.0]).unwrap(), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((d.probs()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((d.probs()[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((d.probs()[0] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(LogitVec::new(vec![0.0, f64::NAN]).is_err());
        assert!(matches!(
            softmax(&LogitVec::from_raw(vec![0.0, f64::INFINITY]), 1.0),
            Err(Error::NonFiniteLogit(1))
        ));
        assert!(softmax(&LogitVec::new(vec![0.0, 1.0]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn empty_path_is_plain_mix() {
        assert_eq!(derive_seed(&SeedPath::new(17)), mix64(17));
    }

    #[test]
    fn derive_seed_is_incremental() {
        let p = SeedPath::new(3).child("teacher", 1).child("row", 99);
        let step = seed_step(SeedPath::new(3).child("teacher", 1).seed(), "row", 99);
        assert_eq!(p.seed(), step);
        assert_eq!(p.seed(), p.clone().seed());
    }

    #[test]
    fn point_mass_always_sampled() {
        let d = Dist::point_mass(10, 7);
        for s in 0..1000 {
            assert_eq!(sample(&d, s).unwrap(), 7);
        }
    }

    #[test]
    fn zero_mass_rejected() {
        assert!(Dist::from_weights(vec![0.0; 4]).is_err());
        assert!(Dist::new(vec![0.0; 4]).is_err());
        assert!(sample_weights(&[0.0, 0.0], 1).is_err());
    }

    #[test]
    fn dist_validation() {
        assert!(Dist::new(vec![0.5, 0.5]).is_ok());
        assert!(Dist::new(vec![0.5, 0.6]).is_err());
        assert!(Dist::new(vec![1.5, -0.5]).is_err());
        assert!(TokenSeq::new(vec![1, 2], 3).is_err());
        assert!(Vocab::new(1).is_err());
    }
}
