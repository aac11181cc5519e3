//! Context hashing and the keyed partitions / g-functions derived from it.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::base::{label_hash, mix64, mix_words, TokenId, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WatermarkKey(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HashKind {
    /// Product of `id + 2` over the window, modulo `|V|`.
    Multiplicative,
    /// Smallest id in the window.
    MinToken,
    /// Leftmost id in the window.
    SkipLeftmost,
}

impl HashKind {
    pub fn name(&self) -> &'static str {
        match self {
            HashKind::Multiplicative => "multiplicative",
            HashKind::MinToken => "min",
            HashKind::SkipLeftmost => "skip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multiplicative" => Some(HashKind::Multiplicative),
            "min" => Some(HashKind::MinToken),
            "skip" => Some(HashKind::SkipLeftmost),
            _ => None,
        }
    }
}

/// Hash of the `n - 1` tokens preceding the position being generated.
///
/// The multiplicative variant offsets ids by 2 so that ids 0 and 1 are not
/// absorbing elements of the product.
pub fn window_hash(window: &[TokenId], kind: HashKind, vocab: Vocab) -> Result<u64> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    Ok(match kind {
        HashKind::Multiplicative => {
            let m = vocab.size() as u128;
            window
                .iter()
                .fold(1u128 % m, |acc, &t| acc * (t as u128 + 2) % m) as u64
        }
        HashKind::MinToken => *window.iter().min().unwrap() as u64,
        HashKind::SkipLeftmost => window[0] as u64,
    })
}

/// Hash used when `n = 1`: a single fixed value per key. Tagged so it
/// never equals the `mix64(key)` state that rule derivation starts from.
#[inline]
pub fn global_hash(key: WatermarkKey) -> u64 {
    mix64(key.0 ^ label_hash("global"))
}

/// Number of green tokens for a given `gamma`; the epsilon keeps products
/// like `0.29 * 100` from flooring one short.
pub fn green_count(gamma: f64, vocab: Vocab) -> usize {
    ((gamma * vocab.size() as f64) + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreenPartition {
    bits: Vec<u64>,
    size: usize,
    count: usize,
}

impl GreenPartition {
    #[inline]
    pub fn is_green(&self, token: TokenId) -> bool {
        let t = token as usize;
        self.bits[t / 64] >> (t % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn vocab_size(&self) -> usize {
        self.size
    }

    /// Fraction of the vocabulary that is green.
    pub fn gamma(&self) -> f64 {
        self.count as f64 / self.size as f64
    }

    pub fn complement(&self) -> Self {
        let mut bits: Vec<u64> = self.bits.iter().map(|w| !w).collect();
        let tail = self.size % 64;
        if tail != 0 {
            *bits.last_mut().unwrap() &= (1u64 << tail) - 1;
        }
        Self {
            bits,
            size: self.size,
            count: self.size - self.count,
        }
    }

    pub fn green_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size as TokenId).filter(|&t| self.is_green(t))
    }
}

/// Exact-count keyed partition: the `floor(gamma |V|)` tokens with the
/// smallest `mix(key, h, id)` are green.
pub fn green_partition(
    h: u64,
    key: WatermarkKey,
    gamma: f64,
    vocab: Vocab,
) -> Result<GreenPartition> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::param("gamma", format!("{gamma} not in (0, 1)")));
    }
    let size = vocab.size();
    let count = green_count(gamma, vocab);
    let mut ranked: Vec<(u64, u32)> = (0..size as u32)
        .map(|id| (mix_words(key.0, &[h, id as u64]), id))
        .collect();
    let mut bits = vec![0u64; size.div_ceil(64)];
    if count > 0 {
        ranked.select_nth_unstable(count - 1);
        for &(_, id) in &ranked[..count] {
            bits[id as usize / 64] |= 1 << (id % 64);
        }
    }
    Ok(GreenPartition { bits, size, count })
}

/// Layer-`layer` g-function bit for `token` under hash `h`.
#[inline]
pub fn g_value(h: u64, key: WatermarkKey, layer: u32, token: TokenId) -> bool {
    mix_words(key.0, &[h, layer as u64, token as u64]) & 1 == 1
}

/// Bits `0..layers` hold `g_1..g_layers` for one token.
pub fn g_mask(h: u64, key: WatermarkKey, layers: u32, token: TokenId) -> u64 {
    (1..=layers).fold(0u64, |m, l| {
        m | (g_value(h, key, l, token) as u64) << (l - 1)
    })
}

/// What a watermark rule needs from the keyed PRF for a given hash value.
#[derive(Debug)]
pub enum RuleTables {
    Green(GreenPartition),
    /// One `g`-mask per token.
    Layers(Vec<u64>),
}

pub(crate) enum RuleKind {
    Green { gamma: f64, invert: bool },
    Layers { m: u32 },
}

/// Memo of per-hash rule tables. Hash values below `|V|` get a dedicated
/// slot; the global `n = 1` hash has its own; anything else is recomputed.
pub struct RuleCache {
    key: WatermarkKey,
    vocab: Vocab,
    kind: RuleKind,
    slots: Vec<OnceLock<RuleTables>>,
    global: OnceLock<RuleTables>,
}

impl RuleCache {
    pub(crate) fn new(key: WatermarkKey, vocab: Vocab, kind: RuleKind) -> Result<Self> {
        match kind {
            RuleKind::Green { gamma, .. } if !(gamma > 0.0 && gamma < 1.0) => {
                return Err(Error::param("gamma", format!("{gamma} not in (0, 1)")))
            }
            RuleKind::Layers { m } if m > 64 => {
                return Err(Error::param("layers", "at most 64 tournament layers"))
            }
            _ => {}
        }
        Ok(Self {
            key,
            vocab,
            kind,
            slots: (0..vocab.size()).map(|_| OnceLock::new()).collect(),
            global: OnceLock::new(),
        })
    }

    fn compute(&self, h: u64) -> RuleTables {
        match self.kind {
            RuleKind::Green { gamma, invert } => {
                let p = green_partition(h, self.key, gamma, self.vocab)
                    .expect("gamma validated at construction");
                RuleTables::Green(if invert { p.complement() } else { p })
            }
            RuleKind::Layers { m } => RuleTables::Layers(
                (0..self.vocab.size() as TokenId)
                    .map(|t| g_mask(h, self.key, m, t))
                    .collect(),
            ),
        }
    }

    /// Calls `f` with the tables for `h`, computing them if needed.
    pub fn with<R>(&self, h: u64, f: impl FnOnce(&RuleTables) -> R) -> R {
        if (h as usize) < self.slots.len() && h < u32::MAX as u64 {
            f(self.slots[h as usize].get_or_init(|| self.compute(h)))
        } else if h == global_hash(self.key) {
            f(self.global.get_or_init(|| self.compute(h)))
        } else {
            f(&self.compute(h))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(n: usize) -> Vocab {
        Vocab::new(n).unwrap()
    }

    #[test]
    fn global_rule_depends_on_key() {
        let v = Vocab::new(256).unwrap();
        let a = green_partition(global_hash(WatermarkKey(1)), WatermarkKey(1), 0.5, v).unwrap();
        let b = green_partition(global_hash(WatermarkKey(2)), WatermarkKey(2), 0.5, v).unwrap();
        assert!(a.green_tokens().ne(b.green_tokens()));
    }

    #[test]
    fn hash_examples() {
        assert_eq!(
            window_hash(&[3, 7], HashKind::Multiplicative, v(16)).unwrap(),
            13
        );
        assert_eq!(
            window_hash(&[9, 2, 5], HashKind::MinToken, v(16)).unwrap(),
            2
        );
        assert_eq!(
            window_hash(&[9, 2, 5], HashKind::SkipLeftmost, v(16)).unwrap(),
            9
        );
        assert!(matches!(
            window_hash(&[], HashKind::Multiplicative, v(16)),
            Err(Error::EmptyWindow)
        ));
    }

    #[test]
    fn zero_and_one_do_not_absorb() {
        let vocab = v(256);
        let a = window_hash(&[0, 5], HashKind::Multiplicative, vocab).unwrap();
        let b = window_hash(&[0, 6], HashKind::Multiplicative, vocab).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, 14);
    }

    #[test]
    fn partition_exact_count() {
        for (gamma, size) in [(0.5, 4), (0.25, 256), (0.29, 100), (0.1, 10), (0.75, 1000)] {
            let p = green_partition(11, WatermarkKey(5), gamma, v(size)).unwrap();
            assert_eq!(p.count(), green_count(gamma, v(size)));
            assert_eq!(p.green_tokens().count(), p.count());
        }
        assert_eq!(green_count(0.29, v(100)), 29);
        assert_eq!(green_count(0.5, v(4)), 2);
    }

    #[test]
    fn partition_deterministic_and_complementary() {
        let a = green_partition(3, WatermarkKey(77), 0.5, v(130)).unwrap();
        assert_eq!(
            a,
            green_partition(3, WatermarkKey(77), 0.5, v(130)).unwrap()
        );
        let c = a.complement();
        assert_eq!(c.count(), 130 - a.count());
        assert_eq!(c.green_tokens().count(), c.count());
        for t in 0..130 {
            assert_ne!(a.is_green(t), c.is_green(t));
        }
    }

    #[test]
    fn gamma_out_of_range() {
        assert!(green_partition(0, WatermarkKey(1), 1.5, v(8)).is_err());
        assert!(green_partition(0, WatermarkKey(1), 0.0, v(8)).is_err());
    }

    #[test]
    fn g_values_balanced() {
        // popcount over 4096 tokens within 3 sigma (sigma = 32) of 2048
        for layer in 1..=4 {
            let ones = (0..4096)
                .filter(|&t| g_value(9, WatermarkKey(1234), layer, t))
                .count();
            assert!((ones as i64 - 2048).abs() <= 96, "layer {layer}: {ones}");
        }
    }

    #[test]
    fn cache_matches_recomputation() {
        let vocab = v(64);
        let cache = RuleCache::new(WatermarkKey(8), vocab, RuleKind::Layers { m: 30 }).unwrap();
        for h in [0u64, 5, 63, 64, 1 << 40, global_hash(WatermarkKey(8))] {
            cache.with(h, |t| match t {
                RuleTables::Layers(masks) => {
                    for tok in 0..64 {
                        assert_eq!(masks[tok as usize], g_mask(h, WatermarkKey(8), 30, tok));
                    }
                }
                _ => unreachable!(),
            });
        }
        let green = RuleCache::new(
            WatermarkKey(8),
            vocab,
            RuleKind::Green {
                gamma: 0.5,
                invert: true,
            },
        )
        .unwrap();
        green.with(17, |t| match t {
            RuleTables::Green(p) => {
                assert_eq!(
                    *p,
                    green_partition(17, WatermarkKey(8), 0.5, vocab)
                        .unwrap()
                        .complement()
                )
            }
            _ => unreachable!(),
        });
    }
}
