//! Removal attacks (untargeted and targeted paraphrasing, decode-time
//! neutralization) and multi-source corpus mixing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::base::{sample, seed_step, Dist, LogitVec, SeedPath, TokenId, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::lm::{Corpus, Predictor, Provenance};
use crate::schemes::{ContextMask, TokenProcessor};
use crate::steal::RuleTable;

/// Inverse watermark: `l'(x) = l(x) - D(x; window) delta'`.
pub fn wn_process(
    logits: &LogitVec,
    window: &[TokenId],
    rules: &RuleTable,
    delta_prime: f64,
) -> Result<LogitVec> {
    check_delta_prime(delta_prime)?;
    if logits.len() != rules.vocab().size() {
        return Err(Error::LengthMismatch {
            expected: rules.vocab().size(),
            got: logits.len(),
        });
    }
    let d = rules.scores(window);
    LogitVec::new(
        logits
            .logits()
            .iter()
            .zip(&d)
            .map(|(&l, &s)| l - s * delta_prime)
            .collect(),
    )
}

fn check_delta_prime(delta_prime: f64) -> Result<()> {
    if delta_prime >= 0.0 && delta_prime.is_finite() {
        Ok(())
    } else {
        Err(Error::param(
            "attack.delta_prime",
            "must be finite and >= 0",
        ))
    }
}

/// Probability-domain form of [`wn_process`].
fn neutralize(dist: Dist, window: &[TokenId], rules: &RuleTable, delta_prime: f64) -> Result<Dist> {
    if delta_prime == 0.0 {
        return Ok(dist);
    }
    let d = rules.scores(window);
    dist.reweight(|i| (-d[i] * delta_prime).exp())
}

/// [`wn_process`] as a generation-time processor.
pub struct Neutralizer<'a> {
    pub rules: &'a RuleTable,
    pub delta_prime: f64,
}

impl<'a> Neutralizer<'a> {
    pub fn new(rules: &'a RuleTable, delta_prime: f64) -> Result<Self> {
        check_delta_prime(delta_prime)?;
        Ok(Self { rules, delta_prime })
    }
}

impl TokenProcessor for Neutralizer<'_> {
    fn process(
        &self,
        dist: Dist,
        history: &[TokenId],
        _mask: &mut Option<ContextMask>,
    ) -> Result<Dist> {
        neutralize(dist, history, self.rules, self.delta_prime)
    }
}

/// A model followed by a neutralizer, evaluated in closed form.
pub struct Neutralized<'a> {
    pub base: &'a dyn Predictor,
    pub rules: &'a RuleTable,
    pub delta_prime: f64,
}

impl Predictor for Neutralized<'_> {
    fn vocab(&self) -> Vocab {
        self.base.vocab()
    }

    fn context_len(&self) -> usize {
        self.base
            .context_len()
            .max(self.rules.n_prime.saturating_sub(1))
    }

    fn next_dist(&self, context: &[TokenId]) -> Dist {
        neutralize(
            self.base.next_dist(context),
            context,
            self.rules,
            self.delta_prime,
        )
        .expect("finite non-negative scores keep mass")
    }
}

/// A paraphraser plus fidelity `lambda`, optionally with an inverse
/// watermark applied to its output.
pub struct ParaphraseSpec<'a> {
    pub paraphraser: &'a dyn Predictor,
    pub lambda: f64,
    pub inverse: Option<(&'a RuleTable, f64)>,
}

impl ParaphraseSpec<'_> {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param(
                "attack.lambda",
                format!("{} not in [0, 1]", self.lambda),
            ));
        }
        if let Some((rules, dp)) = self.inverse {
            check_delta_prime(dp)?;
            if rules.vocab() != self.paraphraser.vocab() {
                return Err(Error::param(
                    "attack.rule_table",
                    "vocabulary differs from the paraphraser's",
                ));
            }
        }
        Ok(())
    }
}

fn paraphrase_one(seq: &TokenSeq, spec: &ParaphraseSpec, seed: u64) -> Result<TokenSeq> {
    let v = spec.paraphraser.vocab().size();
    let mut tokens = seq.prompt().to_vec();
    for (step, &orig) in seq.continuation().iter().enumerate() {
        let r = spec.paraphraser.next_dist(&tokens);
        let mut mix: Vec<f64> = r.probs().iter().map(|p| (1.0 - spec.lambda) * p).collect();
        mix[orig as usize] += spec.lambda;
        let mut dist = Dist::from_weights(mix)?;
        if let Some((rules, dp)) = spec.inverse {
            dist = neutralize(dist, &tokens, rules, dp)?;
        }
        debug_assert_eq!(dist.len(), v);
        tokens.push(sample(&dist, seed_step(seed, "token", step as u64))?);
    }
    TokenSeq::new(tokens, seq.prompt_len)
}

/// Rewrites every continuation position by position from
/// `lambda * pointmass(original) + (1 - lambda) * R(generated context)`,
/// inverse-watermarked when the spec carries a rule table. Prompts are kept.
pub fn paraphrase(corpus: &Corpus, spec: &ParaphraseSpec, seed: &SeedPath) -> Result<Corpus> {
    spec.validate()?;
    corpus.validate(spec.paraphraser.vocab())?;
    let sequences = corpus
        .sequences
        .par_iter()
        .enumerate()
        .map(|(i, s)| paraphrase_one(s, spec, seed.child("seq", i as u64).seed()))
        .collect::<Result<_>>()?;
    let provenance = if spec.inverse.is_some() {
        Provenance::ParaphrasedTp
    } else {
        Provenance::ParaphrasedUp
    };
    Ok(Corpus::new(sequences, provenance))
}

/// Corpus shares of each source in a mix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub shares: Vec<f64>,
}

impl MixSpec {
    pub fn equal(k: usize) -> Self {
        Self {
            shares: vec![1.0 / k as f64; k],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shares.is_empty() {
            return Err(Error::Empty("mix shares"));
        }
        if self.shares.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::param("mix.shares", "each share must lie in [0, 1]"));
        }
        let total: f64 = self.shares.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(
                "mix.shares",
                format!("shares sum to {total}, not 1"),
            ));
        }
        Ok(())
    }

    /// Per-source sequence counts summing to `total` (largest remainder).
    pub fn counts(&self, total: usize) -> Vec<usize> {
        let raw: Vec<f64> = self.shares.iter().map(|s| s * total as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| {
            (raw[b] - raw[b].floor())
                .total_cmp(&(raw[a] - raw[a].floor()))
                .then(a.cmp(&b))
        });
        let missing = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        counts
    }
}

/// Stratified sampling without replacement: source `i` contributes
/// `share_i * total` sequences, in source order.
pub fn mix_corpora(
    sources: &[Corpus],
    spec: &MixSpec,
    total: usize,
    seed: &SeedPath,
) -> Result<Corpus> {
    spec.validate()?;
    if sources.len() != spec.shares.len() {
        return Err(Error::LengthMismatch {
            expected: spec.shares.len(),
            got: sources.len(),
        });
    }
    let mut sequences = Vec::with_capacity(total);
    for (i, (src, want)) in sources.iter().zip(spec.counts(total)).enumerate() {
        if want > src.len() {
            return Err(Error::param(
                "mix.shares",
                format!("source {i} has {} sequences, {want} requested", src.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.child("source", i as u64).seed());
        let mut picked = index::sample(&mut rng, src.len(), want).into_vec();
        picked.sort_unstable();
        sequences.extend(picked.into_iter().map(|j| src.sequences[j].clone()));
    }
    Ok(Corpus::new(sequences, Provenance::Mixed))
}

/// Sidecar `key=value` metadata written next to an attacked corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackMeta {
    pub attack: String,
    pub lambda: Option<f64>,
    pub delta_prime: Option<f64>,
    pub rule_table: Option<PathBuf>,
}

impl AttackMeta {
    pub fn to_text(&self) -> String {
        let mut out = format!("attack={}\n", self.attack);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(out, "lambda={}", opt(self.lambda)).unwrap();
        writeln!(out, "delta_prime={}", opt(self.delta_prime)).unwrap();
        let path = self
            .rule_table
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        writeln!(out, "rule_table={path}").unwrap();
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = AttackMeta {
            attack: String::new(),
            lambda: None,
            delta_prime: None,
            rule_table: None,
        };
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let loc = || format!("line {}", ln + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(loc(), "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<Option<f64>> {
                if v.is_empty() {
                    Ok(None)
                } else {
                    v.parse()
                        .map(Some)
                        .map_err(|_| Error::parse(loc(), format!("`{v}` is not a number")))
                }
            };
            match k {
                "attack" => meta.attack = v.to_string(),
                "lambda" => meta.lambda = num(v)?,
                "delta_prime" => meta.delta_prime = num(v)?,
                "rule_table" => meta.rule_table = (!v.is_empty()).then(|| PathBuf::from(v)),
                _ => return Err(Error::parse(loc(), format!("unknown key `{k}`"))),
            }
        }
        Ok(meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
