//! Experiment configuration: the flat `section.key = value` key set, its
//! defaults (the standard toy configuration), and validation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::base::Vocab;
use crate::error::{Error, Result};
use crate::hashing::{HashKind, WatermarkKey};
use crate::lm::Smoothing;
use crate::schemes::{SchemeKind, WatermarkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    None,
    Up,
    Tp,
    Wn,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Up => "up",
            AttackKind::Tp => "tp",
            AttackKind::Wn => "wn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(AttackKind::None),
            "up" => Some(AttackKind::Up),
            "tp" => Some(AttackKind::Tp),
            "wn" => Some(AttackKind::Wn),
            _ => None,
        }
    }
}

/// What the stealing step compares the watermark-trained student against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OriginalModel {
    /// A student fit on clean teacher text over held-apart prompts.
    Teacher,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub vocab_size: usize,
    pub teacher_order: usize,
    pub teacher_skew: f64,
    pub corpus_sequences: usize,
    pub corpus_length: usize,
    pub corpus_prompt_len: usize,
    pub student_order: usize,
    pub student_beta: f64,
    pub student_smoothing: Smoothing,
    /// `None` means the teacher is not watermarked.
    pub scheme: Option<SchemeKind>,
    pub wm_n: usize,
    pub wm_key: u64,
    pub wm_hash: HashKind,
    pub wm_delta: f64,
    pub wm_gamma: f64,
    pub wm_layers: u32,
    pub wm_masking: usize,
    pub wm_invert: bool,
    pub attack: AttackKind,
    pub attack_lambda: f64,
    pub attack_delta_prime: f64,
    pub steal_n_prime: usize,
    pub steal_theta: f64,
    pub steal_alpha: f64,
    pub steal_original: OriginalModel,
    pub detect_group_sizes: Vec<usize>,
    pub detect_groups: usize,
    pub eval_length: usize,
    pub eval_contexts: usize,
    pub exp_n_list: Vec<usize>,
    pub exp_attack_n: Vec<usize>,
    pub exp_fig2_n: Vec<usize>,
    pub exp_delta_primes: Vec<f64>,
    pub exp_sources: Vec<usize>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            teacher_order: 3,
            teacher_skew: 0.3,
            corpus_sequences: 20_000,
            corpus_length: 64,
            corpus_prompt_len: 8,
            student_order: 4,
            student_beta: 0.01,
            student_smoothing: Smoothing::Backoff,
            scheme: Some(SchemeKind::Kgw),
            wm_n: 1,
            wm_key: 15_485_863,
            wm_hash: HashKind::Multiplicative,
            wm_delta: 3.0,
            wm_gamma: 0.5,
            wm_layers: 30,
            wm_masking: 0,
            wm_invert: false,
            attack: AttackKind::None,
            attack_lambda: 0.5,
            attack_delta_prime: 2.5,
            steal_n_prime: 3,
            steal_theta: 5e-5,
            steal_alpha: 0.3,
            steal_original: OriginalModel::Teacher,
            detect_group_sizes: vec![1000, 3000, 10_000],
            detect_groups: 10,
            eval_length: 64,
            eval_contexts: 2000,
            exp_n_list: vec![1, 2, 3, 4],
            exp_attack_n: vec![1, 2],
            exp_fig2_n: vec![3, 4],
            exp_delta_primes: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0],
            exp_sources: vec![1, 2, 4, 8],
            seed: 0,
            workers: 1,
        }
    }
}

/// One documented configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    pub kind: &'static str,
    pub doc: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc {
        key: "vocab.size",
        kind: "integer >= 2",
        doc: "vocabulary size |V|",
    },
    KeyDoc {
        key: "teacher.order",
        kind: "integer >= 1",
        doc: "teacher Markov order (conditions on order-1 tokens)",
    },
    KeyDoc {
        key: "teacher.skew",
        kind: "real > 0",
        doc: "Dirichlet concentration of teacher rows; small is peaked",
    },
    KeyDoc {
        key: "corpus.sequences",
        kind: "integer >= 1",
        doc: "training sequences generated by the teacher",
    },
    KeyDoc {
        key: "corpus.length",
        kind: "integer >= 1",
        doc: "continuation tokens per sequence",
    },
    KeyDoc {
        key: "corpus.prompt_len",
        kind: "integer >= 0",
        doc: "prompt tokens per sequence (context only)",
    },
    KeyDoc {
        key: "student.order",
        kind: "integer >= 1",
        doc: "student n-gram order",
    },
    KeyDoc {
        key: "student.beta",
        kind: "real > 0",
        doc: "additive smoothing pseudo-count per token",
    },
    KeyDoc {
        key: "student.smoothing",
        kind: "additive|backoff",
        doc: "spread pseudo-counts uniformly or by the shorter context",
    },
    KeyDoc {
        key: "watermark.scheme",
        kind: "kgw|synthid|none",
        doc: "teacher watermark",
    },
    KeyDoc {
        key: "watermark.n",
        kind: "integer >= 1",
        doc: "window size; the rule depends on n-1 previous tokens",
    },
    KeyDoc {
        key: "watermark.key",
        kind: "integer",
        doc: "watermark key",
    },
    KeyDoc {
        key: "watermark.hash",
        kind: "multiplicative|min|skip",
        doc: "window hash",
    },
    KeyDoc {
        key: "watermark.delta",
        kind: "real >= 0",
        doc: "KGW green-logit bias",
    },
    KeyDoc {
        key: "watermark.gamma",
        kind: "real in (0,1)",
        doc: "KGW green fraction",
    },
    KeyDoc {
        key: "watermark.layers",
        kind: "integer in 0..=64",
        doc: "SynthID tournament layers",
    },
    KeyDoc {
        key: "watermark.masking",
        kind: "integer >= 0",
        doc: "repeated-context mask capacity; 0 disables masking",
    },
    KeyDoc {
        key: "watermark.invert",
        kind: "bool",
        doc: "use the complement of the keyed green list",
    },
    KeyDoc {
        key: "attack.kind",
        kind: "none|up|tp|wn",
        doc: "removal attack for `distill`",
    },
    KeyDoc {
        key: "attack.lambda",
        kind: "real in [0,1]",
        doc: "paraphrase fidelity",
    },
    KeyDoc {
        key: "attack.delta_prime",
        kind: "real >= 0",
        doc: "inverse watermark strength",
    },
    KeyDoc {
        key: "steal.n_prime",
        kind: "integer >= 1",
        doc: "largest window considered when stealing",
    },
    KeyDoc {
        key: "steal.theta",
        kind: "real >= 0",
        doc: "prefix frequency threshold",
    },
    KeyDoc {
        key: "steal.alpha",
        kind: "real >= 0",
        doc: "frequency weight exponent",
    },
    KeyDoc {
        key: "steal.original",
        kind: "teacher|uniform",
        doc: "reference model for stealing",
    },
    KeyDoc {
        key: "detect.group_sizes",
        kind: "list of integers",
        doc: "tokens per detection group",
    },
    KeyDoc {
        key: "detect.groups",
        kind: "integer >= 1",
        doc: "groups per group size",
    },
    KeyDoc {
        key: "eval.length",
        kind: "integer >= 1",
        doc: "tokens generated per held-out prompt",
    },
    KeyDoc {
        key: "eval.contexts",
        kind: "integer >= 1",
        doc: "held-out contexts for the KL knowledge proxy",
    },
    KeyDoc {
        key: "exp.n_list",
        kind: "list of integers",
        doc: "window sizes for table1 and fig4",
    },
    KeyDoc {
        key: "exp.attack_n",
        kind: "list of integers",
        doc: "window sizes for table2",
    },
    KeyDoc {
        key: "exp.fig2_n",
        kind: "list of integers >= 2",
        doc: "window sizes for fig2",
    },
    KeyDoc {
        key: "exp.delta_primes",
        kind: "list of reals",
        doc: "inverse strengths for delta-sweep",
    },
    KeyDoc {
        key: "exp.sources",
        kind: "list of integers",
        doc: "teacher counts for the multi-source key sweep",
    },
    KeyDoc {
        key: "run.seed",
        kind: "integer",
        doc: "master seed",
    },
    KeyDoc {
        key: "run.workers",
        kind: "integer >= 1",
        doc: "worker threads (never changes results)",
    },
];

fn parse_num<T: std::str::FromStr>(key: &'static str, value: &str, kind: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::param(key, format!("`{value}` is not a valid {kind}")))
}

fn parse_list<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s, "list element"))
        .collect()
}

fn parse_bool(key: &'static str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::param(key, format!("`{value}` is not true or false"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key from its text value (type and range checked later by
    /// [`ExperimentConfig::validate`], enumerations here).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let Some(doc) = KEYS.iter().find(|d| d.key == key) else {
            return Err(Error::parse(
                format!("key `{key}`"),
                "unknown configuration key",
            ));
        };
        let k = doc.key;
        match k {
            "vocab.size" => self.vocab_size = parse_num(k, value, "integer")?,
            "teacher.order" => self.teacher_order = parse_num(k, value, "integer")?,
            "teacher.skew" => self.teacher_skew = parse_num(k, value, "real")?,
            "corpus.sequences" => self.corpus_sequences = parse_num(k, value, "integer")?,
            "corpus.length" => self.corpus_length = parse_num(k, value, "integer")?,
            "corpus.prompt_len" => self.corpus_prompt_len = parse_num(k, value, "integer")?,
            "student.order" => self.student_order = parse_num(k, value, "integer")?,
            "student.beta" => self.student_beta = parse_num(k, value, "real")?,
            "student.smoothing" => {
                self.student_smoothing = Smoothing::parse(value).ok_or_else(|| {
                    Error::param(k, format!("`{value}` is not additive or backoff"))
                })?
            }
            "watermark.scheme" => {
                self.scheme = match value {
                    "kgw" => Some(SchemeKind::Kgw),
                    "synthid" => Some(SchemeKind::SynthId),
                    "none" => None,
                    _ => {
                        return Err(Error::param(
                            k,
                            format!("`{value}` is not kgw, synthid or none"),
                        ))
                    }
                }
            }
            "watermark.n" => self.wm_n = parse_num(k, value, "integer")?,
            "watermark.key" => self.wm_key = parse_num(k, value, "integer")?,
            "watermark.hash" => {
                self.wm_hash = HashKind::parse(value).ok_or_else(|| {
                    Error::param(k, format!("`{value}` is not multiplicative, min or skip"))
                })?
            }
            "watermark.delta" => self.wm_delta = parse_num(k, value, "real")?,
            "watermark.gamma" => self.wm_gamma = parse_num(k, value, "real")?,
            "watermark.layers" => self.wm_layers = parse_num(k, value, "integer")?,
            "watermark.masking" => self.wm_masking = parse_num(k, value, "integer")?,
            "watermark.invert" => self.wm_invert = parse_bool(k, value)?,
            "attack.kind" => {
                self.attack = AttackKind::parse(value).ok_or_else(|| {
                    Error::param(k, format!("`{value}` is not none, up, tp or wn"))
                })?
            }
            "attack.lambda" => self.attack_lambda = parse_num(k, value, "real")?,
            "attack.delta_prime" => self.attack_delta_prime = parse_num(k, value, "real")?,
            "steal.n_prime" => self.steal_n_prime = parse_num(k, value, "integer")?,
            "steal.theta" => self.steal_theta = parse_num(k, value, "real")?,
            "steal.alpha" => self.steal_alpha = parse_num(k, value, "real")?,
            "steal.original" => {
                self.steal_original = match value {
                    "teacher" => OriginalModel::Teacher,
                    "uniform" => OriginalModel::Uniform,
                    _ => {
                        return Err(Error::param(
                            k,
                            format!("`{value}` is not teacher or uniform"),
                        ))
                    }
                }
            }
            "detect.group_sizes" => self.detect_group_sizes = parse_list(k, value)?,
            "detect.groups" => self.detect_groups = parse_num(k, value, "integer")?,
            "eval.length" => self.eval_length = parse_num(k, value, "integer")?,
            "eval.contexts" => self.eval_contexts = parse_num(k, value, "integer")?,
            "exp.n_list" => self.exp_n_list = parse_list(k, value)?,
            "exp.attack_n" => self.exp_attack_n = parse_list(k, value)?,
            "exp.fig2_n" => self.exp_fig2_n = parse_list(k, value)?,
            "exp.delta_primes" => self.exp_delta_primes = parse_list(k, value)?,
            "exp.sources" => self.exp_sources = parse_list(k, value)?,
            "run.seed" => self.seed = parse_num(k, value, "integer")?,
            "run.workers" => self.workers = parse_num(k, value, "integer")?,
            _ => unreachable!("every documented key is handled"),
        }
        Ok(())
    }

    /// Current value of a key in the same text form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "vocab.size" => self.vocab_size.to_string(),
            "teacher.order" => self.teacher_order.to_string(),
            "teacher.skew" => self.teacher_skew.to_string(),
            "corpus.sequences" => self.corpus_sequences.to_string(),
            "corpus.length" => self.corpus_length.to_string(),
            "corpus.prompt_len" => self.corpus_prompt_len.to_string(),
            "student.order" => self.student_order.to_string(),
            "student.beta" => self.student_beta.to_string(),
            "student.smoothing" => self.student_smoothing.name().to_string(),
            "watermark.scheme" => self.scheme.map_or("none", |s| s.name()).to_string(),
            "watermark.n" => self.wm_n.to_string(),
            "watermark.key" => self.wm_key.to_string(),
            "watermark.hash" => self.wm_hash.name().to_string(),
            "watermark.delta" => self.wm_delta.to_string(),
            "watermark.gamma" => self.wm_gamma.to_string(),
            "watermark.layers" => self.wm_layers.to_string(),
            "watermark.masking" => self.wm_masking.to_string(),
            "watermark.invert" => self.wm_invert.to_string(),
            "attack.kind" => self.attack.name().to_string(),
            "attack.lambda" => self.attack_lambda.to_string(),
            "attack.delta_prime" => self.attack_delta_prime.to_string(),
            "steal.n_prime" => self.steal_n_prime.to_string(),
            "steal.theta" => self.steal_theta.to_string(),
            "steal.alpha" => self.steal_alpha.to_string(),
            "steal.original" => match self.steal_original {
                OriginalModel::Teacher => "teacher",
                OriginalModel::Uniform => "uniform",
            }
            .to_string(),
            "detect.group_sizes" => join(&self.detect_group_sizes),
            "detect.groups" => self.detect_groups.to_string(),
            "eval.length" => self.eval_length.to_string(),
            "eval.contexts" => self.eval_contexts.to_string(),
            "exp.n_list" => join(&self.exp_n_list),
            "exp.attack_n" => join(&self.exp_attack_n),
            "exp.fig2_n" => join(&self.exp_fig2_n),
            "exp.delta_primes" => join(&self.exp_delta_primes),
            "exp.sources" => join(&self.exp_sources),
            "run.seed" => self.seed.to_string(),
            "run.workers" => self.workers.to_string(),
            _ => return None,
        })
    }

    /// Range checks; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &'static str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::param(key, reason))
            }
        };
        Vocab::new(self.vocab_size)
            .map_err(|_| Error::param("vocab.size", "must be at least 2"))?;
        check(
            self.teacher_order >= 1,
            "teacher.order",
            "must be at least 1",
        )?;
        check(
            self.teacher_skew > 0.0 && self.teacher_skew.is_finite(),
            "teacher.skew",
            "must be positive",
        )?;
        check(
            self.corpus_sequences >= 1,
            "corpus.sequences",
            "must be at least 1",
        )?;
        check(
            self.corpus_length >= 1,
            "corpus.length",
            "must be at least 1",
        )?;
        check(
            self.student_order >= 1,
            "student.order",
            "must be at least 1",
        )?;
        check(
            self.student_beta > 0.0 && self.student_beta.is_finite(),
            "student.beta",
            "must be positive",
        )?;
        check(self.wm_n >= 1, "watermark.n", "must be at least 1")?;
        check(
            self.corpus_prompt_len + 1 >= self.wm_n,
            "corpus.prompt_len",
            "must be at least watermark.n - 1 so every scored token has a full window",
        )?;
        check(
            self.wm_delta >= 0.0 && self.wm_delta.is_finite(),
            "watermark.delta",
            "must be >= 0",
        )?;
        check(
            self.wm_gamma > 0.0 && self.wm_gamma < 1.0,
            "watermark.gamma",
            "must lie in (0, 1)",
        )?;
        check(self.wm_layers <= 64, "watermark.layers", "at most 64")?;
        check(
            (0.0..=1.0).contains(&self.attack_lambda),
            "attack.lambda",
            "must lie in [0, 1]",
        )?;
        check(
            self.attack_delta_prime >= 0.0 && self.attack_delta_prime.is_finite(),
            "attack.delta_prime",
            "must be >= 0",
        )?;
        check(
            self.steal_n_prime >= 1,
            "steal.n_prime",
            "must be at least 1",
        )?;
        check(self.steal_theta >= 0.0, "steal.theta", "must be >= 0")?;
        check(
            self.steal_alpha >= 0.0 && self.steal_alpha.is_finite(),
            "steal.alpha",
            "must be >= 0",
        )?;
        check(
            !self.detect_group_sizes.is_empty() && self.detect_group_sizes.iter().all(|&g| g > 0),
            "detect.group_sizes",
            "must be a non-empty list of positive sizes",
        )?;
        check(
            self.detect_groups >= 1,
            "detect.groups",
            "must be at least 1",
        )?;
        check(self.eval_length >= 1, "eval.length", "must be at least 1")?;
        check(
            self.eval_contexts >= 1,
            "eval.contexts",
            "must be at least 1",
        )?;
        check(
            !self.exp_n_list.is_empty()
                && self
                    .exp_n_list
                    .iter()
                    .all(|&n| n >= 1 && n <= self.corpus_prompt_len + 1),
            "exp.n_list",
            "window sizes must lie in 1..=corpus.prompt_len+1",
        )?;
        check(
            self.exp_attack_n
                .iter()
                .all(|&n| n >= 1 && n <= self.corpus_prompt_len + 1),
            "exp.attack_n",
            "window sizes must lie in 1..=corpus.prompt_len+1",
        )?;
        check(
            !self.exp_fig2_n.is_empty()
                && self
                    .exp_fig2_n
                    .iter()
                    .all(|&n| n >= 2 && n <= self.corpus_prompt_len + 1),
            "exp.fig2_n",
            "window sizes must lie in 2..=corpus.prompt_len+1",
        )?;
        check(
            self.exp_delta_primes
                .iter()
                .all(|&d| d >= 0.0 && d.is_finite()),
            "exp.delta_primes",
            "must be finite and >= 0",
        )?;
        check(
            !self.exp_sources.is_empty()
                && self
                    .exp_sources
                    .iter()
                    .all(|&k| k >= 1 && k <= self.corpus_sequences),
            "exp.sources",
            "counts must lie in 1..=corpus.sequences",
        )?;
        check(self.workers >= 1, "run.workers", "must be at least 1")?;
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    /// The configured watermark, or `None` for a clean teacher.
    pub fn watermark(&self) -> Option<WatermarkSpec> {
        self.scheme.map(|kind| self.watermark_as(kind))
    }

    /// The configured watermark parameters under a given scheme.
    pub fn watermark_as(&self, kind: SchemeKind) -> WatermarkSpec {
        WatermarkSpec {
            kind,
            n: self.wm_n,
            key: WatermarkKey(self.wm_key),
            hash_kind: self.wm_hash,
            delta: self.wm_delta,
            gamma: self.wm_gamma,
            layers: self.wm_layers,
            masking: (self.wm_masking > 0).then_some(self.wm_masking),
            invert: self.wm_invert,
        }
    }

    /// Every key as `key = value`, each preceded by its documentation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for d in KEYS {
            writeln!(out, "# {} ({})", d.doc, d.kind).unwrap();
            writeln!(
                out,
                "{} = {}",
                d.key,
                self.get(d.key).expect("documented key")
            )
            .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("watermark.delta", "5.0").unwrap();
        c.set("detect.group_sizes", "100, 200").unwrap();
        let mut back = ExperimentConfig::default();
        for line in c.to_text().lines().filter(|l| !l.starts_with('#')) {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k.trim(), v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_key() {
        let mut c = ExperimentConfig::default();
        c.set("watermark.gamma", "1.5").unwrap();
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("watermark.gamma"), "{e}");
        let e = c.set("watermark.delta", "abc").unwrap_err().to_string();
        assert!(e.contains("watermark.delta"), "{e}");
        assert!(c.set("watermark.colour", "red").is_err());
    }

    #[test]
    fn every_key_documented_and_readable() {
        let c = ExperimentConfig::default();
        for d in KEYS {
            assert!(c.get(d.key).is_some(), "{}", d.key);
        }
        c.validate().unwrap();
    }
}
