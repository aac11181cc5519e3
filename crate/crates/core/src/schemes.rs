//! Watermark embedding: KGW logit bias, SynthID tournament sampling (exact
//! per-layer form and a Monte Carlo tournament), and repeated context masking.

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base::{sample, Dist, LogitVec, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::hashing::{
    global_hash, window_hash, HashKind, RuleCache, RuleKind, RuleTables, WatermarkKey,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    Kgw,
    SynthId,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Kgw => "kgw",
            SchemeKind::SynthId => "synthid",
        }
    }
}

/// Full description of one watermark instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSpec {
    pub kind: SchemeKind,
    /// Window size; the rule depends on the previous `n - 1` tokens.
    pub n: usize,
    pub key: WatermarkKey,
    pub hash_kind: HashKind,
    /// KGW green-logit bias.
    pub delta: f64,
    /// KGW green fraction.
    pub gamma: f64,
    /// SynthID tournament layers.
    pub layers: u32,
    /// Repeated-context masking capacity, if enabled.
    pub masking: Option<usize>,
    /// Use the complement of the keyed green list (KGW only).
    pub invert: bool,
}

impl WatermarkSpec {
    pub fn kgw(n: usize, key: u64, delta: f64, gamma: f64) -> Self {
        Self {
            kind: SchemeKind::Kgw,
            n,
            key: WatermarkKey(key),
            hash_kind: HashKind::Multiplicative,
            delta,
            gamma,
            layers: 30,
            masking: None,
            invert: false,
        }
    }

    pub fn synthid(n: usize, key: u64, layers: u32) -> Self {
        Self {
            kind: SchemeKind::SynthId,
            n,
            key: WatermarkKey(key),
            hash_kind: HashKind::Multiplicative,
            delta: 3.0,
            gamma: 0.5,
            layers,
            masking: None,
            invert: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param(
                "watermark.n",
                "window size must be at least 1",
            ));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::param("watermark.delta", "must be finite and >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::param(
                "watermark.gamma",
                format!("{} not in (0, 1)", self.gamma),
            ));
        }
        if self.layers > 64 {
            return Err(Error::param("watermark.layers", "at most 64"));
        }
        if self.masking == Some(0) {
            return Err(Error::param("watermark.masking", "capacity must be >= 1"));
        }
        Ok(())
    }

    /// Green fraction the detector should assume.
    pub fn effective_gamma(&self, vocab: Vocab) -> f64 {
        let g = crate::hashing::green_count(self.gamma, vocab) as f64 / vocab.size() as f64;
        if self.invert {
            1.0 - g
        } else {
            g
        }
    }

    /// Hash that seeds the rule at the position following `history`.
    pub fn rule_hash(&self, history: &[TokenId], vocab: Vocab) -> Result<u64> {
        if self.n == 1 {
            return Ok(global_hash(self.key));
        }
        let need = self.n - 1;
        if history.len() < need {
            return Err(Error::InsufficientContext {
                position: history.len(),
                available: history.len(),
                needed: need,
            });
        }
        window_hash(&history[history.len() - need..], self.hash_kind, vocab)
    }
}

/// KGW: add `delta` to the logits of green tokens.
pub fn kgw_process(
    logits: &LogitVec,
    prefix_window: &[TokenId],
    spec: &WatermarkSpec,
    vocab: Vocab,
) -> Result<LogitVec> {
    if spec.kind != SchemeKind::Kgw {
        return Err(Error::param(
            "watermark.scheme",
            "kgw_process requires a KGW spec",
        ));
    }
    if prefix_window.len() != spec.n - 1 {
        return Err(Error::LengthMismatch {
            expected: spec.n - 1,
            got: prefix_window.len(),
        });
    }
    if logits.len() != vocab.size() {
        return Err(Error::LengthMismatch {
            expected: vocab.size(),
            got: logits.len(),
        });
    }
    let h = spec.rule_hash(prefix_window, vocab)?;
    let mut partition = crate::hashing::green_partition(h, spec.key, spec.gamma, vocab)?;
    if spec.invert {
        partition = partition.complement();
    }
    let out = logits
        .logits()
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if partition.is_green(i as TokenId) {
                l + spec.delta
            } else {
                l
            }
        })
        .collect();
    LogitVec::new(out)
}

/// One tournament layer in closed form. With `q0` the mass on `g = 0`
/// tokens, a `g = 1` token's probability scales by `1 + q0` and a `g = 0`
/// token's by `q0`.
pub fn synthid_layer_exact(dist: &Dist, gbits: &[bool]) -> Result<Dist> {
    if gbits.len() != dist.len() {
        return Err(Error::LengthMismatch {
            expected: dist.len(),
            got: gbits.len(),
        });
    }
    let mut probs = dist.probs().to_vec();
    apply_layer(&mut probs, |i| gbits[i]);
    Dist::from_weights(probs)
}

#[inline]
fn apply_layer(probs: &mut [f64], g: impl Fn(usize) -> bool) {
    let q0: f64 = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| !g(*i))
        .map(|(_, p)| p)
        .sum();
    for (i, p) in probs.iter_mut().enumerate() {
        *p *= if g(i) { 1.0 + q0 } else { q0 };
    }
}

fn apply_layers(dist: Dist, masks: &[u64], layers: u32) -> Result<Dist> {
    let mut probs = dist.into_vec();
    for layer in 0..layers {
        apply_layer(&mut probs, |i| masks[i] >> layer & 1 == 1);
    }
    Dist::from_weights(probs)
}

/// Exact tournament sampling: run every layer's closed form, then sample once.
pub fn synthid_sample(
    dist: &Dist,
    prefix_window: &[TokenId],
    spec: &WatermarkSpec,
    vocab: Vocab,
    seed: u64,
) -> Result<TokenId> {
    let wm = Watermarker::new(spec.clone(), vocab)?;
    let h = wm.window_rule_hash(prefix_window)?;
    let out = wm.watermark_dist(dist.clone(), h)?;
    sample(&out, seed)
}

/// Literal tournament: draw `2^m` candidates from `dist`, then let pairs
/// compete layer by layer on `g_l` with uniform tie-breaking.
pub fn synthid_sample_mc(
    dist: &Dist,
    prefix_window: &[TokenId],
    spec: &WatermarkSpec,
    vocab: Vocab,
    seed: u64,
) -> Result<TokenId> {
    if spec.layers > 20 {
        return Err(Error::param(
            "watermark.layers",
            "Monte Carlo tournament limited to 20 layers",
        ));
    }
    let wm = Watermarker::new(spec.clone(), vocab)?;
    let h = wm.window_rule_hash(prefix_window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdf: Vec<f64> = dist
        .probs()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let draw = |rng: &mut ChaCha8Rng| -> TokenId {
        let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as TokenId
    };
    let mut round: Vec<TokenId> = (0..1usize << spec.layers).map(|_| draw(&mut rng)).collect();
    for layer in 1..=spec.layers {
        round = round
            .chunks(2)
            .map(|pair| {
                let (a, b) = (pair[0], pair[1]);
                let ga = wm.g_bit(h, layer, a);
                let gb = wm.g_bit(h, layer, b);
                match ga.cmp(&gb) {
                    std::cmp::Ordering::Greater => a,
                    std::cmp::Ordering::Less => b,
                    std::cmp::Ordering::Equal => {
                        if rng.random::<bool>() {
                            a
                        } else {
                            b
                        }
                    }
                }
            })
            .collect();
    }
    Ok(round[0])
}

/// Insertion-ordered set of `(key, window hash)` pairs, evicting the oldest
/// entry once `capacity` is exceeded.
#[derive(Debug, Clone)]
pub struct ContextMask {
    capacity: usize,
    order: VecDeque<(u64, u64)>,
    seen: HashSet<(u64, u64)>,
}

impl ContextMask {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("watermark.masking", "capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            order: VecDeque::with_capacity(capacity),
            seen: HashSet::with_capacity(capacity),
        })
    }

    pub fn contains(&self, key: WatermarkKey, h: u64) -> bool {
        self.seen.contains(&(key.0, h))
    }

    /// Records the context; returns `true` if it was not already present.
    pub fn insert(&mut self, key: WatermarkKey, h: u64) -> bool {
        let entry = (key.0, h);
        if self.seen.contains(&entry) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.order.push_back(entry);
        self.seen.insert(entry);
        true
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Transforms a next-token distribution at one generation step. Processors
/// run in chain order; each gets a per-sequence mask slot it may use.
pub trait TokenProcessor: Send + Sync {
    fn process(
        &self,
        dist: Dist,
        history: &[TokenId],
        mask: &mut Option<ContextMask>,
    ) -> Result<Dist>;
}

/// A watermark spec bound to a vocabulary, with memoized rule tables.
pub struct Watermarker {
    spec: WatermarkSpec,
    vocab: Vocab,
    cache: RuleCache,
}

impl Watermarker {
    pub fn new(spec: WatermarkSpec, vocab: Vocab) -> Result<Self> {
        spec.validate()?;
        let kind = match spec.kind {
            SchemeKind::Kgw => RuleKind::Green {
                gamma: spec.gamma,
                invert: spec.invert,
            },
            SchemeKind::SynthId => RuleKind::Layers { m: spec.layers },
        };
        let cache = RuleCache::new(spec.key, vocab, kind)?;
        Ok(Self { spec, vocab, cache })
    }

    pub fn spec(&self) -> &WatermarkSpec {
        &self.spec
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Rule hash for the next position after `history` (uses its last `n - 1` tokens).
    #[inline]
    pub fn rule_hash(&self, history: &[TokenId]) -> Result<u64> {
        self.spec.rule_hash(history, self.vocab)
    }

    /// Rule hash for an exact `n - 1` token window.
    pub fn window_rule_hash(&self, window: &[TokenId]) -> Result<u64> {
        if window.len() != self.spec.n - 1 {
            return Err(Error::LengthMismatch {
                expected: self.spec.n - 1,
                got: window.len(),
            });
        }
        self.spec.rule_hash(window, self.vocab)
    }

    pub fn is_green(&self, h: u64, token: TokenId) -> bool {
        self.cache.with(h, |t| match t {
            RuleTables::Green(p) => p.is_green(token),
            RuleTables::Layers(_) => false,
        })
    }

    /// Number of layers with `g = 1` for `token`.
    pub fn g_count(&self, h: u64, token: TokenId) -> u32 {
        self.cache.with(h, |t| match t {
            RuleTables::Layers(m) => m[token as usize].count_ones(),
            RuleTables::Green(_) => 0,
        })
    }

    pub fn g_bit(&self, h: u64, layer: u32, token: TokenId) -> bool {
        self.cache.with(h, |t| match t {
            RuleTables::Layers(m) => m[token as usize] >> (layer - 1) & 1 == 1,
            RuleTables::Green(_) => false,
        })
    }

    /// Green indicator over the vocabulary for hash `h` (KGW).
    pub fn green_mask(&self, h: u64) -> Vec<bool> {
        (0..self.vocab.size() as TokenId)
            .map(|t| self.is_green(h, t))
            .collect()
    }

    /// Applies the unmasked watermark transform for hash `h`.
    pub fn watermark_dist(&self, dist: Dist, h: u64) -> Result<Dist> {
        if dist.len() != self.vocab.size() {
            return Err(Error::LengthMismatch {
                expected: self.vocab.size(),
                got: dist.len(),
            });
        }
        match self.spec.kind {
            SchemeKind::Kgw => {
                let boost = self.spec.delta.exp();
                self.cache.with(h, |t| match t {
                    RuleTables::Green(p) => {
                        dist.reweight(|i| if p.is_green(i as TokenId) { boost } else { 1.0 })
                    }
                    RuleTables::Layers(_) => unreachable!("KGW cache holds partitions"),
                })
            }
            SchemeKind::SynthId => self.cache.with(h, |t| match t {
                RuleTables::Layers(masks) => apply_layers(dist, masks, self.spec.layers),
                RuleTables::Green(_) => unreachable!("SynthID cache holds layer masks"),
            }),
        }
    }
}

/// Watermarks only the first occurrence of each `(key, window hash)`;
/// repeats get the base distribution back unchanged.
pub fn masked_process(
    dist: Dist,
    prefix_window: &[TokenId],
    watermarker: &Watermarker,
    mask: &mut ContextMask,
) -> Result<Dist> {
    let h = watermarker.window_rule_hash(prefix_window)?;
    if mask.insert(watermarker.spec.key, h) {
        watermarker.watermark_dist(dist, h)
    } else {
        Ok(dist)
    }
}

impl TokenProcessor for Watermarker {
    fn process(
        &self,
        dist: Dist,
        history: &[TokenId],
        mask: &mut Option<ContextMask>,
    ) -> Result<Dist> {
        let h = self.rule_hash(history)?;
        match self.spec.masking {
            None => self.watermark_dist(dist, h),
            Some(capacity) => {
                if mask.is_none() {
                    *mask = Some(ContextMask::new(capacity)?);
                }
                let mask = mask.as_mut().unwrap();
                if mask.insert(self.spec.key, h) {
                    self.watermark_dist(dist, h)
                } else {
                    Ok(dist)
                }
            }
        }
    }
}
