//! Watermark stealing: prefix frequencies, distribution-shift scores between
//! a watermark-trained model and an original one, frequency weights, and
//! their aggregation into a [`RuleTable`].

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::base::{Dist, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::lm::{Corpus, Predictor};

#[inline]
fn pack(ctx: &[TokenId], v: u64) -> u64 {
    ctx.iter().fold(0u64, |acc, &t| acc * v + t as u64)
}

fn unpack(mut key: u64, len: usize, v: u64) -> Vec<TokenId> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = (key % v) as TokenId;
        key /= v;
    }
    out
}

fn packable(v: u64, len: usize) -> bool {
    v.checked_pow(len as u32).is_some_and(|x| x < u64::MAX / 2)
}

#[derive(Debug, Clone, PartialEq, Default)]
struct PrefixLevel {
    counts: HashMap<u64, u64>,
    total: u64,
    max_count: u64,
}

/// Relative frequencies of the `k`-token prefixes of continuation positions,
/// for `k = 1..n'-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixStats {
    vocab: Vocab,
    n_prime: usize,
    levels: Vec<PrefixLevel>,
}

impl PrefixStats {
    pub fn n_prime(&self) -> usize {
        self.n_prime
    }

    /// Positions with at least `k` preceding tokens.
    pub fn total(&self, k: usize) -> u64 {
        self.levels[k - 1].total
    }

    pub fn count(&self, prefix: &[TokenId]) -> u64 {
        let Some(level) = self.levels.get(prefix.len().wrapping_sub(1)) else {
            return 0;
        };
        level
            .counts
            .get(&pack(prefix, self.vocab.size() as u64))
            .copied()
            .unwrap_or(0)
    }

    /// `f(prefix)`; zero for prefixes never seen or longer than `n' - 1`.
    pub fn frequency(&self, prefix: &[TokenId]) -> f64 {
        match self.levels.get(prefix.len().wrapping_sub(1)) {
            Some(level) if level.total > 0 => self.count(prefix) as f64 / level.total as f64,
            _ => 0.0,
        }
    }

    pub fn max_freq(&self, k: usize) -> f64 {
        let level = &self.levels[k - 1];
        if level.total == 0 {
            0.0
        } else {
            level.max_count as f64 / level.total as f64
        }
    }

    /// `(prefix, f)` for every seen `k`-gram, sorted by prefix.
    pub fn entries(&self, k: usize) -> Vec<(Vec<TokenId>, f64)> {
        let level = &self.levels[k - 1];
        let v = self.vocab.size() as u64;
        let mut keys: Vec<(u64, u64)> = level.counts.iter().map(|(&k, &c)| (k, c)).collect();
        keys.sort_unstable();
        keys.into_iter()
            .map(|(key, c)| (unpack(key, k, v), c as f64 / level.total as f64))
            .collect()
    }
}

pub fn prefix_frequencies(corpus: &Corpus, vocab: Vocab, n_prime: usize) -> Result<PrefixStats> {
    if corpus.continuation_tokens() == 0 {
        return Err(Error::Empty("corpus"));
    }
    if n_prime == 0 {
        return Err(Error::param("steal.n_prime", "must be at least 1"));
    }
    corpus.validate(vocab)?;
    let v = vocab.size() as u64;
    if !packable(v, n_prime.saturating_sub(1)) {
        return Err(Error::param("steal.n_prime", "prefixes too long to index"));
    }
    let levels = (1..n_prime)
        .into_par_iter()
        .map(|k| {
            let mut level = PrefixLevel::default();
            for s in &corpus.sequences {
                for i in s.prompt_len.max(k)..s.len() {
                    *level
                        .counts
                        .entry(pack(&s.tokens[i - k..i], v))
                        .or_insert(0) += 1;
                    level.total += 1;
                }
            }
            level.max_count = level.counts.values().copied().max().unwrap_or(0);
            level
        })
        .collect();
    Ok(PrefixStats {
        vocab,
        n_prime,
        levels,
    })
}

/// Mean of `model.next_dist` over continuation positions whose preceding
/// tokens end with `prefix` (each position counted once).
pub fn avg_next_dist(model: &dyn Predictor, corpus: &Corpus, prefix: &[TokenId]) -> Result<Dist> {
    let v = model.vocab().size();
    let mut sum = vec![0.0; v];
    let mut n = 0u64;
    for s in &corpus.sequences {
        for i in s.prompt_len.max(prefix.len())..s.len() {
            if &s.tokens[i - prefix.len()..i] == prefix {
                let d = model.next_dist(&s.tokens[..i]);
                sum.iter_mut().zip(d.probs()).for_each(|(a, b)| *a += b);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::PrefixAbsent(prefix.to_vec()));
    }
    Dist::from_weights(sum.into_iter().map(|x| x / n as f64).collect())
}

/// `0.5 min(2, pW / pO)` when `pW > pO`, else 0.
#[inline]
pub fn d_score(p_w: f64, p_o: f64) -> f64 {
    if p_w > p_o {
        0.5 * (p_w / p_o).min(2.0)
    } else {
        0.0
    }
}

/// `(ln f / ln max_f)^(-alpha)` above the threshold, 0 at or below it.
pub fn weight(f: f64, max_f: f64, alpha: f64, theta: f64) -> Result<f64> {
    if max_f >= 1.0 {
        return Err(Error::param(
            "steal.theta",
            "a single prefix covers the whole corpus; frequency weights are undefined",
        ));
    }
    if !(f > 0.0 && f <= max_f) {
        return Err(Error::param(
            "f",
            format!("{f} not in (0, max_f = {max_f}]"),
        ));
    }
    if f <= theta {
        return Ok(0.0);
    }
    Ok((f.ln() / max_f.ln()).powf(-alpha))
}

/// Positions grouped by a `k`-token prefix; inside a group, positions that
/// look identical to both models are merged with a multiplicity.
struct Group {
    prefix: u64,
    contexts: Vec<(usize, usize, u64)>,
    positions: u64,
}

fn grouped_positions(
    corpus: &Corpus,
    v: u64,
    k: usize,
    ctx_len: usize,
    keep: impl Fn(u64) -> bool,
) -> Vec<Group> {
    let span = ctx_len.max(k);
    let dedupe = packable(v, span) && (span as u64 + 1).checked_mul(v.pow(span as u32)).is_some();
    let mut rows: Vec<(u64, u64, usize, usize)> = Vec::new();
    let mut serial = 0u64;
    for (si, s) in corpus.sequences.iter().enumerate() {
        for i in s.prompt_len.max(k)..s.len() {
            let prefix = pack(&s.tokens[i - k..i], v);
            if !keep(prefix) {
                continue;
            }
            let ctx = if dedupe {
                let avail = i.min(span);
                pack(&s.tokens[i - avail..i], v) * (span as u64 + 1) + avail as u64
            } else {
                serial += 1;
                serial
            };
            rows.push((prefix, ctx, si, i));
        }
    }
    rows.par_sort_unstable();
    rows.chunk_by(|a, b| a.0 == b.0)
        .map(|g| {
            let contexts = g
                .chunk_by(|a, b| a.1 == b.1)
                .map(|c| (c[0].2, c[0].3, c.len() as u64))
                .collect();
            Group {
                prefix: g[0].0,
                contexts,
                positions: g.len() as u64,
            }
        })
        .collect()
}

/// Position-averaged next-token distributions of both models over a group.
fn group_means(
    group: &Group,
    corpus: &Corpus,
    o: &dyn Predictor,
    w: &dyn Predictor,
) -> (Vec<f64>, Vec<f64>) {
    let v = o.vocab().size();
    let (mut so, mut sw) = (vec![0.0; v], vec![0.0; v]);
    for &(si, i, mult) in &group.contexts {
        let ctx = &corpus.sequences[si].tokens[..i];
        let m = mult as f64;
        for (a, b) in so.iter_mut().zip(o.next_dist(ctx).probs()) {
            *a += m * b;
        }
        for (a, b) in sw.iter_mut().zip(w.next_dist(ctx).probs()) {
            *a += m * b;
        }
    }
    let n = group.positions as f64;
    so.iter_mut().for_each(|x| *x /= n);
    sw.iter_mut().for_each(|x| *x /= n);
    (so, sw)
}

fn check_models(o: &dyn Predictor, w: &dyn Predictor) -> Result<Vocab> {
    if o.vocab() != w.vocab() {
        return Err(Error::LengthMismatch {
            expected: o.vocab().size(),
            got: w.vocab().size(),
        });
    }
    Ok(o.vocab())
}

/// Per-token `d(x)` from the averages over all continuation positions.
pub fn global_d(o: &dyn Predictor, w: &dyn Predictor, corpus: &Corpus) -> Result<Vec<f64>> {
    let vocab = check_models(o, w)?;
    if corpus.continuation_tokens() == 0 {
        return Err(Error::Empty("corpus"));
    }
    let ctx_len = o.context_len().max(w.context_len());
    let groups = grouped_positions(corpus, vocab.size() as u64, 0, ctx_len, |_| true);
    let (mo, mw) = group_means(&groups[0], corpus, o, w);
    Ok(mw
        .iter()
        .zip(&mo)
        .map(|(&pw, &po)| d_score(pw, po))
        .collect())
}

/// Stolen confidence scores. The global row holds `d(x)`; each windowed
/// entry holds one weighted term `w(prefix) d(x; prefix)`, so a full window
/// scores `D(x; window)` as the global row plus the entries of each of its
/// suffixes.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleTable {
    vocab: Vocab,
    pub n_prime: usize,
    pub theta: f64,
    pub alpha: f64,
    global: Vec<f64>,
    /// `windowed[k - 1]` maps a packed `k`-token prefix to sorted `(token, term)`.
    windowed: Vec<HashMap<u64, Vec<(TokenId, f64)>>>,
}

impl RuleTable {
    /// A table with no scores.
    pub fn zeros(vocab: Vocab, n_prime: usize, theta: f64, alpha: f64) -> Self {
        Self {
            vocab,
            n_prime,
            theta,
            alpha,
            global: vec![0.0; vocab.size()],
            windowed: vec![HashMap::new(); n_prime.saturating_sub(1)],
        }
    }

    /// Table whose global row is `scores` (no windowed entries).
    pub fn from_global(vocab: Vocab, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != vocab.size() {
            return Err(Error::LengthMismatch {
                expected: vocab.size(),
                got: scores.len(),
            });
        }
        if scores.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
            return Err(Error::param("D", "scores must be finite and non-negative"));
        }
        let mut t = Self::zeros(vocab, 1, 0.0, 0.0);
        t.global = scores;
        Ok(t)
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn global(&self) -> &[f64] {
        &self.global
    }

    pub fn windowed_entries(&self) -> usize {
        self.windowed
            .iter()
            .flat_map(|m| m.values())
            .map(Vec::len)
            .sum()
    }

    /// Whether every score is zero.
    pub fn is_zero(&self) -> bool {
        self.global.iter().all(|&d| d == 0.0) && self.windowed_entries() == 0
    }

    /// `D(x; window)` for every token `x`, using the last `k` tokens of
    /// `window` for each stored prefix length `k`.
    pub fn scores(&self, window: &[TokenId]) -> Vec<f64> {
        let mut out = self.global.clone();
        self.add_windowed(window, |t, s| out[t as usize] += s);
        out
    }

    pub fn score(&self, window: &[TokenId], token: TokenId) -> f64 {
        let mut d = self.global[token as usize];
        self.add_windowed(window, |t, s| {
            if t == token {
                d += s
            }
        });
        d
    }

    fn add_windowed(&self, window: &[TokenId], mut f: impl FnMut(TokenId, f64)) {
        let v = self.vocab.size() as u64;
        for (k, map) in self.windowed.iter().enumerate().map(|(i, m)| (i + 1, m)) {
            if window.len() < k {
                break;
            }
            if let Some(row) = map.get(&pack(&window[window.len() - k..], v)) {
                row.iter().for_each(|&(t, s)| f(t, s));
            }
        }
    }

    /// Rows `window_len,prefix_tokens,token,D`, sorted by window length,
    /// prefix, then token. Global rows have window length 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("window_len,prefix_tokens,token,D\n");
        for (t, &d) in self.global.iter().enumerate() {
            writeln!(out, "0,,{t},{d}").unwrap();
        }
        let v = self.vocab.size() as u64;
        for (k, map) in self.windowed.iter().enumerate().map(|(i, m)| (i + 1, m)) {
            let mut keys: Vec<&u64> = map.keys().collect();
            keys.sort_unstable();
            for key in keys {
                let prefix = unpack(*key, k, v)
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                for &(t, d) in &map[key] {
                    writeln!(out, "{k},{prefix},{t},{d}").unwrap();
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str, vocab: Vocab) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "window_len,prefix_tokens,token,D" => {}
            _ => {
                return Err(Error::parse(
                    "line 1",
                    "missing `window_len,prefix_tokens,token,D` header",
                ))
            }
        }
        let v = vocab.size() as u64;
        let mut table = Self::zeros(vocab, 1, 0.0, 0.0);
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let loc = format!("line {}", ln + 1);
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::parse(loc, "expected 4 fields"));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::parse(loc.clone(), format!("bad integer `{s}`")))
            };
            let k = num(fields[0])? as usize;
            let prefix: Vec<TokenId> = fields[1]
                .split_whitespace()
                .map(|t| num(t).map(|x| x as TokenId))
                .collect::<Result<_>>()?;
            let token = num(fields[2])? as TokenId;
            let d: f64 = fields[3]
                .trim()
                .parse()
                .map_err(|_| Error::parse(loc.clone(), format!("bad score `{}`", fields[3])))?;
            if prefix.len() != k {
                return Err(Error::parse(loc, "prefix length differs from window_len"));
            }
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::parse(loc, "scores must be finite and non-negative"));
            }
            vocab.check(token)?;
            prefix.iter().try_for_each(|&t| vocab.check(t))?;
            if k == 0 {
                table.global[token as usize] = d;
            } else {
                if table.windowed.len() < k {
                    table.windowed.resize(k, HashMap::new());
                }
                table.windowed[k - 1]
                    .entry(pack(&prefix, v))
                    .or_default()
                    .push((token, d));
            }
        }
        for row in table.windowed.iter_mut().flat_map(|m| m.values_mut()) {
            row.sort_by_key(|e| e.0);
        }
        table.n_prime = table.windowed.len() + 1;
        Ok(table)
    }

    pub fn load(path: &Path, vocab: Vocab) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, vocab)
    }
}

/// Builds the stolen table: global `d` plus, for each prefix length
/// `k = 1..n'-1` and each prefix with `f > theta`, the weighted shift
/// `w(f) d(x; prefix)`.
pub fn aggregate(
    o: &dyn Predictor,
    w: &dyn Predictor,
    corpus: &Corpus,
    n_prime: usize,
    theta: f64,
    alpha: f64,
) -> Result<RuleTable> {
    let vocab = check_models(o, w)?;
    if theta.is_nan() || theta < 0.0 {
        return Err(Error::param("steal.theta", "must be >= 0"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::param("steal.alpha", "must be finite and >= 0"));
    }
    let stats = prefix_frequencies(corpus, vocab, n_prime)?;
    let mut table = RuleTable::zeros(vocab, n_prime, theta, alpha);
    table.global = global_d(o, w, corpus)?;
    let v = vocab.size() as u64;
    let ctx_len = o.context_len().max(w.context_len());
    for k in 1..n_prime {
        let level = &stats.levels[k - 1];
        let max_f = stats.max_freq(k);
        let keep = |key: u64| {
            level
                .counts
                .get(&key)
                .is_some_and(|&c| c as f64 / level.total as f64 > theta)
        };
        let groups = grouped_positions(corpus, v, k, ctx_len, keep);
        let rows: Vec<(u64, Vec<(TokenId, f64)>)> = groups
            .par_iter()
            .map(|g| {
                let f = g.positions as f64 / level.total as f64;
                let wt = weight(f, max_f, alpha, theta)?;
                let (mo, mw) = group_means(g, corpus, o, w);
                let row: Vec<(TokenId, f64)> = mw
                    .iter()
                    .zip(&mo)
                    .enumerate()
                    .filter_map(|(t, (&pw, &po))| {
                        let d = d_score(pw, po);
                        (d > 0.0 && wt > 0.0).then_some((t as TokenId, wt * d))
                    })
                    .collect();
                Ok((g.prefix, row))
            })
            .collect::<Result<_>>()?;
        table.windowed[k - 1] = rows.into_iter().filter(|(_, r)| !r.is_empty()).collect();
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{fit, Provenance, Smoothing, UniformModel};

    fn corpus(text: &str) -> Corpus {
        Corpus::parse_text(text, Provenance::Generated).unwrap()
    }

    #[test]
    fn d_score_examples() {
        assert_eq!(d_score(0.2, 0.2), 0.0);
        assert_eq!(d_score(0.3, 0.1), 1.0);
        assert!((d_score(0.15, 0.1) - 0.75).abs() < 1e-15);
        assert_eq!(d_score(0.05, 0.1), 0.0);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(weight(1e-5, 1e-2, 0.3, 5e-5).unwrap(), 0.0);
        assert_eq!(weight(1e-2, 1e-2, 0.3, 5e-5).unwrap(), 1.0);
        assert!((weight(1e-3, 1e-2, 0.3, 5e-5).unwrap() - 1.5f64.powf(-0.3)).abs() < 1e-15);
        assert!((weight(1e-3, 1e-2, 0.3, 5e-5).unwrap() - 0.8855).abs() < 1e-4);
        assert!(weight(0.5, 1.0, 0.3, 5e-5).is_err());
    }

    #[test]
    fn prefix_frequency_hand_count() {
        // 10 continuation positions; token 3 precedes 4 of them
        let c = corpus("3 | 3 1 3 2 3 0 5 6 7 8");
        let s = prefix_frequencies(&c, Vocab::new(16).unwrap(), 3).unwrap();
        assert_eq!(s.total(1), 10);
        assert!((s.frequency(&[3]) - 0.4).abs() < 1e-15);
        for k in 1..3 {
            let sum: f64 = s.entries(k).iter().map(|e| e.1).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        assert_eq!(s.frequency(&[15]), 0.0);
    }

    #[test]
    fn identical_models_give_zero_table() {
        let vocab = Vocab::new(8).unwrap();
        let c = corpus("0 | 1 2 3 4 5 6 7 0 1 2 3\n1 | 2 2 3 3 4 4");
        let m = fit(&c, vocab, 3, 0.1, Smoothing::Backoff).unwrap();
        let t = aggregate(&m, &m, &c, 3, 0.0, 0.3).unwrap();
        assert!(t.is_zero());
        assert!(global_d(&m, &m, &c).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn avg_matches_brute_force() {
        let vocab = Vocab::new(6).unwrap();
        let c = corpus("0 1 | 2 3 2 1 2 3 4 5 2 3\n4 | 2 3 1 2 3 3 2");
        let m = fit(&c, vocab, 4, 0.2, Smoothing::Backoff).unwrap();
        let got = avg_next_dist(&m, &c, &[2]).unwrap();
        let mut want = vec![0.0; 6];
        let mut n = 0.0;
        for s in &c.sequences {
            for i in s.prompt_len.max(1)..s.len() {
                if s.tokens[i - 1] == 2 {
                    for (a, b) in want.iter_mut().zip(m.next_dist(&s.tokens[..i]).probs()) {
                        *a += b;
                    }
                    n += 1.0;
                }
            }
        }
        for (a, b) in got.probs().iter().zip(&want) {
            assert!((a - b / n).abs() < 1e-12);
        }
        assert!(matches!(
            avg_next_dist(&m, &c, &[0, 0]),
            Err(Error::PrefixAbsent(_))
        ));
    }

    #[test]
    fn windowed_terms_compose() {
        let vocab = Vocab::new(4).unwrap();
        let c = corpus("| 0 1 0 1 0 2 0 1 3 3 0 1");
        let w = fit(&c, vocab, 2, 0.1, Smoothing::Additive).unwrap();
        let t = aggregate(&UniformModel(vocab), &w, &c, 2, 0.0, 0.3).unwrap();
        let full = t.scores(&[0]);
        for x in 0..4 {
            assert_eq!(full[x as usize], t.score(&[0], x));
            assert!(full[x as usize] >= t.global()[x as usize]);
        }
        let back = RuleTable::from_csv(&t.to_csv(), vocab).unwrap();
        assert_eq!(back.scores(&[0]), full);
        assert_eq!(back.to_csv(), t.to_csv());
    }
}
