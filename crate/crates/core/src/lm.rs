//! Toy language-model substrate: an order-k Markov teacher, students fit by
//! smoothed counting, autoregressive generation through processor chains,
//! and the KL / cross-entropy knowledge metrics.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base::{sample, seed_step, unit_interval, Dist, SeedPath, TokenId, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::schemes::{ContextMask, TokenProcessor};

/// Anything that yields a next-token distribution from a context.
pub trait Predictor: Send + Sync {
    fn vocab(&self) -> Vocab;

    /// Number of trailing context tokens that can influence the output.
    fn context_len(&self) -> usize;

    fn next_dist(&self, context: &[TokenId]) -> Dist;
}

/// How a count-based model turns counts into probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Smoothing {
    /// `(C(c, x) + beta) / (C(c) + beta |V|)` on the longest context only.
    Additive,
    /// Same estimator, but the `beta |V|` pseudo-counts are spread by the
    /// next-shorter context's distribution instead of uniformly.
    Backoff,
}

impl Smoothing {
    pub fn name(&self) -> &'static str {
        match self {
            Smoothing::Additive => "additive",
            Smoothing::Backoff => "backoff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "additive" => Some(Smoothing::Additive),
            "backoff" => Some(Smoothing::Backoff),
            _ => None,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Smoothing::Additive => 0,
            Smoothing::Backoff => 1,
        }
    }
}

/// Counts for one context length, in CSR form sorted by packed context.
#[derive(Debug, Clone, PartialEq, Default)]
struct Level {
    keys: Vec<u64>,
    offsets: Vec<usize>,
    totals: Vec<u64>,
    tokens: Vec<TokenId>,
    counts: Vec<u64>,
}

impl Level {
    fn find(&self, key: u64) -> Option<usize> {
        self.keys.binary_search(&key).ok()
    }

    fn row(&self, i: usize) -> (&[TokenId], &[u64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.tokens[r.clone()], &self.counts[r])
    }

    /// Builds from sorted `(context key * |V| + token)` values.
    fn from_sorted(joint: &[u64], v: u64) -> Self {
        let runs = joint
            .chunk_by(|a, b| a == b)
            .map(|r| (r[0], r.len() as u64));
        Self::from_counted(runs, v)
    }

    /// Builds from strictly increasing `(joint key, count)` pairs.
    fn from_counted(records: impl IntoIterator<Item = (u64, u64)>, v: u64) -> Self {
        let mut level = Level::default();
        for (joint, count) in records {
            let ctx = joint / v;
            if level.keys.last() != Some(&ctx) {
                level.keys.push(ctx);
                level.offsets.push(level.tokens.len());
                level.totals.push(0);
            }
            level.tokens.push((joint % v) as TokenId);
            level.counts.push(count);
            *level.totals.last_mut().unwrap() += count;
        }
        level.offsets.push(level.tokens.len());
        level
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Store {
    /// One full row per `order - 1` context (teacher).
    Dense(Vec<f32>),
    /// `levels[j]` counts contexts of exactly `j` tokens.
    Counts(Vec<Level>),
}

/// Order-k categorical model over a flat vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    vocab: Vocab,
    order: usize,
    beta: f64,
    smoothing: Smoothing,
    store: Store,
}

/// Packs `ctx` as a base-`|V|` integer, oldest token most significant.
#[inline]
fn pack(ctx: &[TokenId], v: u64) -> u64 {
    ctx.iter().fold(0u64, |acc, &t| acc * v + t as u64)
}

fn check_packable(vocab: Vocab, tokens: usize) -> Result<()> {
    let fits = (vocab.size() as u64)
        .checked_pow(tokens as u32)
        .is_some_and(|x| x < u64::MAX / 2);
    if fits {
        Ok(())
    } else {
        Err(Error::param(
            "order",
            format!("|V|^{tokens} does not fit in 64 bits"),
        ))
    }
}

const MAX_DENSE_ENTRIES: u64 = 1 << 28;

impl NGramModel {
    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.store, Store::Dense(_))
    }

    /// Total training count for a context of any length below `order`.
    pub fn context_count(&self, ctx: &[TokenId]) -> u64 {
        match &self.store {
            Store::Counts(levels) if ctx.len() < levels.len() => {
                let level = &levels[ctx.len()];
                level
                    .find(pack(ctx, self.vocab.size() as u64))
                    .map_or(0, |i| level.totals[i])
            }
            _ => 0,
        }
    }

    /// Count of `token` after exactly `ctx`.
    pub fn count(&self, ctx: &[TokenId], token: TokenId) -> u64 {
        match &self.store {
            Store::Counts(levels) if ctx.len() < levels.len() => {
                let level = &levels[ctx.len()];
                level
                    .find(pack(ctx, self.vocab.size() as u64))
                    .map_or(0, |i| {
                        let (toks, counts) = level.row(i);
                        toks.binary_search(&token).map_or(0, |j| counts[j])
                    })
            }
            _ => 0,
        }
    }

    pub fn next_dist(&self, context: &[TokenId]) -> Dist {
        let v = self.vocab.size();
        let k = self.order - 1;
        let ctx = &context[context.len().saturating_sub(k)..];
        match &self.store {
            Store::Dense(rows) => {
                if ctx.len() < k {
                    return Dist::uniform(v);
                }
                let r = pack(ctx, v as u64) as usize;
                let row = &rows[r * v..(r + 1) * v];
                Dist::from_weights(row.iter().map(|&p| p as f64).collect())
                    .expect("teacher rows have mass")
            }
            Store::Counts(levels) => {
                let mut probs = vec![1.0 / v as f64; v];
                let prior = self.beta * v as f64;
                let first = match self.smoothing {
                    Smoothing::Additive => ctx.len(),
                    Smoothing::Backoff => 0,
                };
                for j in first..=ctx.len() {
                    let sub = &ctx[ctx.len() - j..];
                    let level = &levels[j];
                    let Some(i) = level.find(pack(sub, v as u64)) else {
                        break;
                    };
                    let denom = level.totals[i] as f64 + prior;
                    let keep = prior / denom;
                    probs.iter_mut().for_each(|p| *p *= keep);
                    let (toks, counts) = level.row(i);
                    for (&t, &c) in toks.iter().zip(counts) {
                        probs[t as usize] += c as f64 / denom;
                    }
                }
                Dist::from_weights(probs).expect("smoothed rows have mass")
            }
        }
    }

    /// Writes the `WMLM` snapshot.
    ///
    /// Layout (little-endian): magic `WMLM`, `u32` version, `u8` kind
    /// (0 counts, 1 dense), `u32` order, `u32 |V|`, `f64` beta, `u8`
    /// smoothing (0 additive, 1 backoff). Counts then follow as `u64` n
    /// and n records `u8` context length, that many `u32` context ids
    /// (oldest first), `u32` token, `u64` count, sorted by context length,
    /// then context, then token. Dense models follow with `u64` row count
    /// and `rows * |V|` `f32` probabilities.
    pub fn write_snapshot(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&[if self.is_dense() { 1 } else { 0 }])?;
        w.write_all(&(self.order as u32).to_le_bytes())?;
        w.write_all(&(self.vocab.size() as u32).to_le_bytes())?;
        w.write_all(&self.beta.to_le_bytes())?;
        w.write_all(&[self.smoothing.code()])?;
        let v = self.vocab.size() as u64;
        match &self.store {
            Store::Counts(levels) => {
                let n: usize = levels.iter().map(|l| l.tokens.len()).sum();
                w.write_all(&(n as u64).to_le_bytes())?;
                for (len, level) in levels.iter().enumerate() {
                    for (i, &key) in level.keys.iter().enumerate() {
                        let ctx = unpack(key, len, v);
                        let (toks, counts) = level.row(i);
                        for (&t, &c) in toks.iter().zip(counts) {
                            w.write_all(&[len as u8])?;
                            for &x in &ctx {
                                w.write_all(&x.to_le_bytes())?;
                            }
                            w.write_all(&t.to_le_bytes())?;
                            w.write_all(&c.to_le_bytes())?;
                        }
                    }
                }
            }
            Store::Dense(rows) => {
                w.write_all(&((rows.len() as u64) / v).to_le_bytes())?;
                for p in rows {
                    w.write_all(&p.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_snapshot(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::parse("model snapshot", m);
        let io = |e: std::io::Error| Error::parse("model snapshot", e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != SNAPSHOT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let kind = read_u8(&mut r).map_err(io)?;
        let order = read_u32(&mut r).map_err(io)? as usize;
        let vocab = Vocab::new(read_u32(&mut r).map_err(io)? as usize)?;
        let beta = f64::from_le_bytes(read_array(&mut r).map_err(io)?);
        let smoothing = match read_u8(&mut r).map_err(io)? {
            0 => Smoothing::Additive,
            1 => Smoothing::Backoff,
            s => return Err(bad(&format!("unknown smoothing code {s}"))),
        };
        if order == 0 {
            return Err(bad("order 0"));
        }
        check_packable(vocab, order)?;
        let v = vocab.size() as u64;
        let store = match kind {
            0 => {
                let n = u64::from_le_bytes(read_array(&mut r).map_err(io)?);
                let mut per_level: Vec<Vec<(u64, u64)>> = vec![Vec::new(); order];
                let mut last: Option<(usize, u64)> = None;
                for _ in 0..n {
                    let len = read_u8(&mut r).map_err(io)? as usize;
                    if len >= order {
                        return Err(bad("context longer than order - 1"));
                    }
                    let mut ctx = Vec::with_capacity(len);
                    for _ in 0..len {
                        let t = read_u32(&mut r).map_err(io)?;
                        vocab.check(t)?;
                        ctx.push(t);
                    }
                    let tok = read_u32(&mut r).map_err(io)?;
                    vocab.check(tok)?;
                    let count = u64::from_le_bytes(read_array(&mut r).map_err(io)?);
                    let joint = pack(&ctx, v) * v + tok as u64;
                    if last.is_some_and(|l| l >= (len, joint)) {
                        return Err(bad("records not strictly sorted"));
                    }
                    last = Some((len, joint));
                    per_level[len].push((joint, count));
                }
                Store::Counts(
                    per_level
                        .into_iter()
                        .map(|recs| Level::from_counted(recs, v))
                        .collect(),
                )
            }
            1 => {
                let rows = u64::from_le_bytes(read_array(&mut r).map_err(io)?);
                if rows != v.pow(order as u32 - 1) {
                    return Err(bad("dense row count does not match order"));
                }
                let mut probs = Vec::with_capacity((rows * v) as usize);
                for _ in 0..rows * v {
                    probs.push(f32::from_le_bytes(read_array(&mut r).map_err(io)?));
                }
                Store::Dense(probs)
            }
            k => return Err(bad(&format!("unknown kind {k}"))),
        };
        Ok(Self {
            vocab,
            order,
            beta,
            smoothing,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_snapshot(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_snapshot(std::io::BufReader::new(f))
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"WMLM";
const SNAPSHOT_VERSION: u32 = 1;

fn unpack(mut key: u64, len: usize, v: u64) -> Vec<TokenId> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = (key % v) as TokenId;
        key /= v;
    }
    out
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u8(r: &mut impl Read) -> std::io::Result<u8> {
    Ok(read_array::<1>(r)?[0])
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

impl Predictor for NGramModel {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn context_len(&self) -> usize {
        self.order - 1
    }

    fn next_dist(&self, context: &[TokenId]) -> Dist {
        NGramModel::next_dist(self, context)
    }
}

/// The uniform distribution, whatever the context.
#[derive(Debug, Clone, Copy)]
pub struct UniformModel(pub Vocab);

impl Predictor for UniformModel {
    fn vocab(&self) -> Vocab {
        self.0
    }

    fn context_len(&self) -> usize {
        0
    }

    fn next_dist(&self, _context: &[TokenId]) -> Dist {
        Dist::uniform(self.0.size())
    }
}

/// Teacher whose rows are independent symmetric Dirichlet(`skew`) draws;
/// small `skew` gives peaked rows.
pub fn make_teacher(vocab: Vocab, order: usize, seed: u64, skew: f64) -> Result<NGramModel> {
    if order == 0 {
        return Err(Error::param("teacher.order", "must be at least 1"));
    }
    if !(skew > 0.0 && skew.is_finite()) {
        return Err(Error::param("teacher.skew", "must be positive and finite"));
    }
    check_packable(vocab, order)?;
    let v = vocab.size();
    let rows = (v as u64).pow(order as u32 - 1);
    if rows * v as u64 > MAX_DENSE_ENTRIES {
        return Err(Error::param(
            "teacher.order",
            format!("{rows} rows of {v} entries exceed the dense teacher limit"),
        ));
    }
    let gamma = Gamma::new(skew, 1.0).map_err(|e| Error::param("teacher.skew", e.to_string()))?;
    let mut probs = vec![0f32; rows as usize * v];
    probs.par_chunks_mut(v).enumerate().for_each(|(r, row)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_step(seed, "row", r as u64));
        loop {
            let draws: Vec<f64> = (0..v).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if total > 0.0 {
                row.iter_mut()
                    .zip(&draws)
                    .for_each(|(p, d)| *p = (d / total) as f32);
                if row.iter().any(|&p| p > 0.0) {
                    break;
                }
            }
        }
    });
    Ok(NGramModel {
        vocab,
        order,
        beta: 0.0,
        smoothing: Smoothing::Additive,
        store: Store::Dense(probs),
    })
}

/// Where a corpus came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    TeacherWatermarked,
    TeacherClean,
    ParaphrasedUp,
    ParaphrasedTp,
    Mixed,
    Generated,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::TeacherWatermarked => "teacher-watermarked",
            Provenance::TeacherClean => "teacher-clean",
            Provenance::ParaphrasedUp => "paraphrased-up",
            Provenance::ParaphrasedTp => "paraphrased-tp",
            Provenance::Mixed => "mixed",
            Provenance::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Provenance::TeacherWatermarked,
            Provenance::TeacherClean,
            Provenance::ParaphrasedUp,
            Provenance::ParaphrasedTp,
            Provenance::Mixed,
            Provenance::Generated,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<TokenSeq>,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn new(sequences: Vec<TokenSeq>, provenance: Provenance) -> Self {
        Self {
            sequences,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Number of continuation (scored / trained-on) positions.
    pub fn continuation_tokens(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - s.prompt_len).sum()
    }

    pub fn validate(&self, vocab: Vocab) -> Result<()> {
        self.sequences.iter().try_for_each(|s| s.validate(vocab))
    }

    /// Parses the line format `5 17 3 | 9 12 4 4`; a line without `|` has
    /// no prompt.
    pub fn parse_text(text: &str, provenance: Provenance) -> Result<Self> {
        let mut sequences = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let loc = || format!("line {}", lineno + 1);
            let (prompt, cont) = match line.split_once('|') {
                Some((p, c)) => (p, c),
                None => ("", line),
            };
            if cont.contains('|') {
                return Err(Error::parse(loc(), "more than one `|`"));
            }
            let ids = |s: &str| -> Result<Vec<TokenId>> {
                s.split_whitespace()
                    .map(|w| {
                        w.parse::<TokenId>()
                            .map_err(|_| Error::parse(loc(), format!("`{w}` is not a token id")))
                    })
                    .collect()
            };
            let mut tokens = ids(prompt)?;
            let prompt_len = tokens.len();
            tokens.extend(ids(cont)?);
            sequences.push(TokenSeq { tokens, prompt_len });
        }
        Ok(Self::new(sequences, provenance))
    }

    pub fn load(path: &Path, provenance: Provenance) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text, provenance).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            e => e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for Corpus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.sequences {
            let join = |ts: &[TokenId]| {
                ts.iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            match (s.prompt().is_empty(), s.continuation().is_empty()) {
                (true, _) => writeln!(f, "| {}", join(s.continuation()))?,
                (false, true) => writeln!(f, "{} |", join(s.prompt()))?,
                (false, false) => writeln!(f, "{} | {}", join(s.prompt()), join(s.continuation()))?,
            }
        }
        Ok(())
    }
}

impl FromStr for Corpus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_text(s, Provenance::Generated)
    }
}

/// Fits a count model on the continuation positions of `corpus`; prompt
/// tokens serve as context only.
pub fn fit(
    corpus: &Corpus,
    vocab: Vocab,
    order: usize,
    beta: f64,
    smoothing: Smoothing,
) -> Result<NGramModel> {
    if corpus.is_empty() || corpus.continuation_tokens() == 0 {
        return Err(Error::Empty("training corpus"));
    }
    if order == 0 {
        return Err(Error::param("student.order", "must be at least 1"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::param("student.beta", "must be positive and finite"));
    }
    corpus.validate(vocab)?;
    check_packable(vocab, order)?;
    let v = vocab.size() as u64;
    let levels = (0..order)
        .into_par_iter()
        .map(|j| {
            let mut joint: Vec<u64> = corpus
                .sequences
                .iter()
                .flat_map(|s| {
                    (s.prompt_len.max(j)..s.len())
                        .map(move |i| pack(&s.tokens[i - j..i], v) * v + s.tokens[i] as u64)
                })
                .collect();
            joint.par_sort_unstable();
            Level::from_sorted(&joint, v)
        })
        .collect();
    Ok(NGramModel {
        vocab,
        order,
        beta,
        smoothing,
        store: Store::Counts(levels),
    })
}

/// Samples a prompt: tokens the model cannot yet condition on are uniform,
/// the rest come from the model.
pub fn sample_prompt(model: &dyn Predictor, len: usize, seed: u64) -> Vec<TokenId> {
    let v = model.vocab().size();
    let mut tokens = Vec::with_capacity(len);
    for i in 0..len {
        let step = seed_step(seed, "prompt", i as u64);
        let t = if i < model.context_len() {
            ((unit_interval(step) * v as f64) as usize).min(v - 1) as TokenId
        } else {
            sample(&model.next_dist(&tokens), step).expect("valid dist")
        };
        tokens.push(t);
    }
    tokens
}

/// Samples `count` prompts, redrawing any that appear in `exclude`.
pub fn sample_prompts(
    model: &dyn Predictor,
    count: usize,
    len: usize,
    seed: &SeedPath,
    exclude: &HashSet<Vec<TokenId>>,
) -> Vec<Vec<TokenId>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let base = seed.child("prompt", i as u64);
            (0u64..)
                .map(|attempt| sample_prompt(model, len, base.child("attempt", attempt).seed()))
                .find(|p| !exclude.contains(p))
                .expect("unbounded attempts")
        })
        .collect()
}

/// Autoregressive sampling of `length` tokens after `prompt`; each step's
/// distribution passes through `processors` in order.
pub fn generate(
    model: &dyn Predictor,
    prompt: &[TokenId],
    length: usize,
    processors: &[&dyn TokenProcessor],
    seed: u64,
) -> Result<TokenSeq> {
    if length == 0 {
        return Err(Error::param("length", "must be at least 1"));
    }
    let mut tokens = prompt.to_vec();
    tokens.reserve(length);
    let mut masks: Vec<Option<ContextMask>> = vec![None; processors.len()];
    for step in 0..length {
        let mut dist = model.next_dist(&tokens);
        for (p, mask) in processors.iter().zip(masks.iter_mut()) {
            dist = p.process(dist, &tokens, mask)?;
        }
        tokens.push(sample(&dist, seed_step(seed, "token", step as u64))?);
    }
    TokenSeq::new(tokens, prompt.len())
}

/// One generated sequence per prompt, seeded by `(seed, "seq", i)`.
pub fn generate_corpus(
    model: &dyn Predictor,
    prompts: &[Vec<TokenId>],
    length: usize,
    processors: &[&dyn TokenProcessor],
    seed: &SeedPath,
    provenance: Provenance,
) -> Result<Corpus> {
    let sequences = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            generate(
                model,
                p,
                length,
                processors,
                seed.child("seq", i as u64).seed(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(Corpus::new(sequences, provenance))
}

/// Mean over `contexts` of `-sum_x p(x) ln q(x)`, in nats.
pub fn cross_entropy(
    p: &dyn Predictor,
    q: &dyn Predictor,
    contexts: &[Vec<TokenId>],
) -> Result<f64> {
    mean_over(contexts, |ctx| {
        let (pd, qd) = (p.next_dist(ctx), q.next_dist(ctx));
        pd.probs()
            .iter()
            .zip(qd.probs())
            .filter(|(&a, _)| a > 0.0)
            .map(|(&a, &b)| {
                if b > 0.0 {
                    Ok(-a * b.ln())
                } else {
                    Err(Error::InvalidDist(
                        "q has zero mass where p does not".into(),
                    ))
                }
            })
            .sum()
    })
}

/// Mean over `contexts` of `KL(p || q)` in nats.
pub fn kl(p: &dyn Predictor, q: &dyn Predictor, contexts: &[Vec<TokenId>]) -> Result<f64> {
    mean_over(contexts, |ctx| {
        kl_dist(&p.next_dist(ctx), &q.next_dist(ctx))
    })
}

pub fn kl_dist(p: &Dist, q: &Dist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    p.probs()
        .iter()
        .zip(q.probs())
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| {
            if b > 0.0 {
                Ok(a * (a / b).ln())
            } else {
                Err(Error::InvalidDist(
                    "q has zero mass where p does not".into(),
                ))
            }
        })
        .sum()
}

fn mean_over(
    contexts: &[Vec<TokenId>],
    f: impl Fn(&[TokenId]) -> Result<f64> + Sync,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::Empty("context set"));
    }
    let per: Vec<f64> = contexts.par_iter().map(|c| f(c)).collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(n: usize) -> Vocab {
        Vocab::new(n).unwrap()
    }

    fn corpus(lines: &str) -> Corpus {
        Corpus::parse_text(lines, Provenance::Generated).unwrap()
    }

    #[test]
    fn mle_on_deterministic_pattern() {
        let m = fit(&corpus("| 0 1 0 1"), v(4), 2, 1e-12, Smoothing::Additive).unwrap();
        assert!((m.next_dist(&[0]).probs()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn additive_hand_count() {
        let m = fit(&corpus("| 0 1\n| 0 2"), v(4), 2, 1.0, Smoothing::Additive).unwrap();
        assert!((m.next_dist(&[0]).probs()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.next_dist(&[3]), Dist::uniform(4));
    }

    #[test]
    fn prompt_positions_are_context_only() {
        let m = fit(&corpus("0 1 | 2"), v(4), 2, 0.5, Smoothing::Additive).unwrap();
        assert_eq!(m.count(&[1], 2), 1);
        assert_eq!(m.count(&[0], 1), 0);
        assert_eq!(m.context_count(&[]), 1);
    }

    #[test]
    fn backoff_uses_shorter_context() {
        let m = fit(
            &corpus("| 0 1 2 1 2 1 3"),
            v(4),
            3,
            0.25,
            Smoothing::Backoff,
        )
        .unwrap();
        // unseen bigram context backs off to the unigram estimate
        let unigram = m.next_dist(&[]);
        assert_eq!(m.next_dist(&[3, 3]), m.next_dist(&[3]));
        assert_eq!(m.next_dist(&[3]), unigram);
        let seen = m.next_dist(&[1, 2]);
        assert!(seen.probs()[1] > unigram.probs()[1]);
    }

    #[test]
    fn markov_truncation() {
        let m = fit(
            &corpus("| 0 1 2 3 0 1 2 3 1 1"),
            v(4),
            3,
            0.1,
            Smoothing::Backoff,
        )
        .unwrap();
        assert_eq!(m.next_dist(&[3, 2, 0, 1]), m.next_dist(&[0, 1]));
    }

    #[test]
    fn fit_rejects_empty() {
        assert!(fit(&corpus(""), v(4), 2, 0.1, Smoothing::Additive).is_err());
        assert!(fit(&corpus("1 2 |"), v(4), 2, 0.1, Smoothing::Additive).is_err());
    }

    #[test]
    fn corpus_text_round_trip() {
        let c = corpus("5 17 3 | 9 12 4 4\n| 1 2\n");
        assert_eq!(c.sequences[0].prompt_len, 3);
        assert_eq!(c.sequences[1].prompt_len, 0);
        assert_eq!(c.to_string(), "5 17 3 | 9 12 4 4\n| 1 2\n");
        assert!(Corpus::parse_text("1 x | 2", Provenance::Generated).is_err());
        assert!(Corpus::parse_text("1 | 2 | 3", Provenance::Generated).is_err());
    }

    #[test]
    fn teacher_deterministic_and_peaked() {
        let a = make_teacher(v(32), 2, 9, 0.3).unwrap();
        assert_eq!(a, make_teacher(v(32), 2, 9, 0.3).unwrap());
        assert_ne!(a, make_teacher(v(32), 2, 10, 0.3).unwrap());
        let flat = make_teacher(v(64), 2, 1, 1e6).unwrap();
        for c in 0..64 {
            let d = flat.next_dist(&[c]);
            let (lo, hi) = d
                .probs()
                .iter()
                .fold((1.0f64, 0.0f64), |(l, h), &p| (l.min(p), h.max(p)));
            assert!(hi - lo < 0.01);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let t = make_teacher(v(16), 2, 3, 0.5).unwrap();
        let a = generate(&t, &[1], 20, &[], 42).unwrap();
        assert_eq!(a, generate(&t, &[1], 20, &[], 42).unwrap());
        assert_eq!(a.prompt_len, 1);
        assert_eq!(a.len(), 21);
        assert!(generate(&t, &[1], 0, &[], 42).is_err());
    }

    #[test]
    fn kl_identity_and_sign() {
        let p = make_teacher(v(16), 2, 1, 0.5).unwrap();
        let q = make_teacher(v(16), 2, 2, 0.5).unwrap();
        let ctxs: Vec<Vec<TokenId>> = (0..16).map(|c| vec![c]).collect();
        assert_eq!(kl(&p, &p, &ctxs).unwrap(), 0.0);
        assert!(kl(&p, &UniformModel(v(16)), &ctxs).unwrap() > 0.0);
        let h = cross_entropy(&p, &p, &ctxs).unwrap();
        let ce = cross_entropy(&p, &UniformModel(v(16)), &ctxs).unwrap();
        assert!((ce - 16f64.ln()).abs() < 1e-12 && h < ce);
        assert!(kl(&p, &q, &ctxs).unwrap() > 0.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let m = fit(
            &corpus("3 | 0 1 0 2\n| 2 2 1"),
            v(4),
            3,
            0.5,
            Smoothing::Backoff,
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_snapshot(&mut buf).unwrap();
        assert_eq!(NGramModel::read_snapshot(&buf[..]).unwrap(), m);
        let t = make_teacher(v(8), 2, 1, 0.3).unwrap();
        let mut buf = Vec::new();
        t.write_snapshot(&mut buf).unwrap();
        assert_eq!(NGramModel::read_snapshot(&buf[..]).unwrap(), t);
        assert!(NGramModel::read_snapshot(&b"WMLX"[..]).is_err());
    }
}
