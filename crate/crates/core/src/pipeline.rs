//! End-to-end experiments: teacher, watermarked corpus, optional attack,
//! student fit, held-out generation, grouped detection and the KL proxy,
//! plus the sweeps built on them.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::attacks::{mix_corpora, paraphrase, MixSpec, Neutralized, ParaphraseSpec};
use crate::base::{seed_step, unit_interval, SeedPath, TokenId, TokenSeq, Vocab};
use crate::config::{AttackKind, ExperimentConfig, OriginalModel};
use crate::detect::{DetectionReport, Detector};
use crate::error::{Error, Result};
use crate::hashing::WatermarkKey;
use crate::lm::{
    cross_entropy, fit, generate, generate_corpus, kl, make_teacher, sample_prompts, Corpus,
    NGramModel, Predictor, Provenance, UniformModel,
};
use crate::schemes::{SchemeKind, TokenProcessor, WatermarkSpec, Watermarker};
use crate::steal::{aggregate, prefix_frequencies, RuleTable};

/// Detection and knowledge numbers for one trained (or neutralized) student.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionResult {
    pub condition: String,
    pub scheme: String,
    pub n: usize,
    pub reports: Vec<DetectionReport>,
    /// z-score over every scored token of the held-out generation.
    pub z: f64,
    pub scored_tokens: usize,
    /// `KL(clean teacher || student)` on held-out contexts, nats.
    pub kl: f64,
    pub cross_entropy: f64,
}

impl ConditionResult {
    pub fn report(&self, group_size: usize) -> Option<&DetectionReport> {
        self.reports.iter().find(|r| r.group_size == group_size)
    }

    pub fn median(&self, group_size: usize) -> f64 {
        self.report(group_size)
            .map_or(f64::NAN, |r| r.median_log10_p)
    }
}

/// A condition plus the text behind it.
pub struct Run {
    pub result: ConditionResult,
    pub train: Corpus,
    pub text: Corpus,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub conditions: Vec<ConditionResult>,
    pub summary: serde_json::Value,
    /// `(file name, contents)` of every table.
    #[serde(skip)]
    pub tables: Vec<(String, String)>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ExperimentResult {
    pub fn table(&self, name: &str) -> Option<&str> {
        self.tables
            .iter()
            .find(|t| t.0 == name)
            .map(|t| t.1.as_str())
    }

    /// Writes each table, `summary.json` and `timing.txt` into `dir`.
    /// Everything but `timing.txt` is a pure function of the config.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in &self.tables {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))?;
        }
        let p = dir.join("summary.json");
        let json = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(&p, json + "\n").map_err(|e| Error::io(p, e))?;
        let p = dir.join("timing.txt");
        std::fs::write(&p, format!("wall_clock_secs={}\n", self.wall_clock_secs))
            .map_err(|e| Error::io(p, e))
    }
}

/// Runs `f` on a pool of exactly `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::param("run.workers", e.to_string()))?;
    Ok(pool.install(f))
}

/// Shared artifacts of one configuration: teacher, prompt sets, held-out
/// contexts, and the lazily built reference student and clean student.
pub struct Lab {
    cfg: ExperimentConfig,
    vocab: Vocab,
    root: SeedPath,
    teacher: NGramModel,
    train_prompts: Vec<Vec<TokenId>>,
    eval_prompts: Vec<Vec<TokenId>>,
    contexts: Vec<Vec<TokenId>>,
    uniform: UniformModel,
    reference: OnceLock<NGramModel>,
    clean: OnceLock<(Corpus, NGramModel)>,
}

impl Lab {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let teacher = make_teacher(
            cfg.vocab()?,
            cfg.teacher_order,
            SeedPath::new(cfg.seed).child("teacher", 0).seed(),
            cfg.teacher_skew,
        )?;
        Self::with_teacher(cfg, teacher)
    }

    /// Like [`Lab::new`] with a given teacher in place of the seeded one.
    pub fn with_teacher(cfg: ExperimentConfig, teacher: NGramModel) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.vocab()?;
        if teacher.vocab() != vocab {
            return Err(Error::param(
                "vocab.size",
                format!("teacher has |V| = {}", teacher.vocab().size()),
            ));
        }
        let root = SeedPath::new(cfg.seed);
        let train_prompts = sample_prompts(
            &teacher,
            cfg.corpus_sequences,
            cfg.corpus_prompt_len,
            &root.child("train-prompts", 0),
            &HashSet::new(),
        );
        let seen: HashSet<Vec<TokenId>> = train_prompts.iter().cloned().collect();
        let budget = cfg.detect_groups * cfg.detect_group_sizes.iter().max().expect("validated");
        let eval_prompts = sample_prompts(
            &teacher,
            budget.div_ceil(cfg.eval_length),
            cfg.corpus_prompt_len,
            &root.child("eval-prompts", 0),
            &seen,
        );
        let ctx_prompts = sample_prompts(
            &teacher,
            cfg.eval_contexts,
            cfg.corpus_prompt_len,
            &root.child("kl-prompts", 0),
            &seen,
        );
        let ctx_seed = root.child("kl-contexts", 0);
        let contexts = ctx_prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let s = ctx_seed.child("seq", i as u64).seed();
                let seq = generate(&teacher, p, cfg.eval_length, &[], s)?;
                let cut = (unit_interval(seed_step(s, "cut", 0)) * cfg.eval_length as f64) as usize;
                Ok(seq.tokens[..p.len() + cut.min(cfg.eval_length - 1)].to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            vocab,
            root,
            teacher,
            train_prompts,
            eval_prompts,
            contexts,
            uniform: UniformModel(vocab),
            reference: OnceLock::new(),
            clean: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn teacher(&self) -> &NGramModel {
        &self.teacher
    }

    pub fn root(&self) -> &SeedPath {
        &self.root
    }

    pub fn train_prompts(&self) -> &[Vec<TokenId>] {
        &self.train_prompts
    }

    pub fn eval_prompts(&self) -> &[Vec<TokenId>] {
        &self.eval_prompts
    }

    pub fn contexts(&self) -> &[Vec<TokenId>] {
        &self.contexts
    }

    /// Student fit on clean teacher text over prompts disjoint from the
    /// training prompts: the pre-distillation reference for stealing and
    /// the paraphraser.
    pub fn reference(&self) -> &NGramModel {
        self.reference.get_or_init(|| {
            let c = &self.cfg;
            let seed = self.root.child("reference", 0);
            let seen: HashSet<Vec<TokenId>> = self.train_prompts.iter().cloned().collect();
            let prompts = sample_prompts(
                &self.teacher,
                c.corpus_sequences,
                c.corpus_prompt_len,
                &seed.child("prompts", 0),
                &seen,
            );
            let corpus = generate_corpus(
                &self.teacher,
                &prompts,
                c.corpus_length,
                &[],
                &seed.child("corpus", 0),
                Provenance::TeacherClean,
            )
            .expect("config validated");
            self.fit_student(&corpus).expect("non-empty corpus")
        })
    }

    /// Reference model the stealing step compares against.
    pub fn original(&self) -> &dyn Predictor {
        match self.cfg.steal_original {
            OriginalModel::Teacher => self.reference(),
            OriginalModel::Uniform => &self.uniform,
        }
    }

    /// Unwatermarked teacher corpus and the student fit on it.
    pub fn clean(&self) -> &(Corpus, NGramModel) {
        self.clean.get_or_init(|| {
            let corpus = self.teacher_corpus(None).expect("config validated");
            let student = self.fit_student(&corpus).expect("non-empty corpus");
            (corpus, student)
        })
    }

    pub fn fit_student(&self, corpus: &Corpus) -> Result<NGramModel> {
        fit(
            corpus,
            self.vocab,
            self.cfg.student_order,
            self.cfg.student_beta,
            self.cfg.student_smoothing,
        )
    }

    /// Teacher corpus over all training prompts, watermarked by `spec`.
    pub fn teacher_corpus(&self, spec: Option<&WatermarkSpec>) -> Result<Corpus> {
        self.teacher_corpus_range(spec, 0..self.train_prompts.len())
    }

    /// Teacher text for a slice of the training prompts. Sequence seeds
    /// depend on the global prompt index only, so slices compose.
    pub fn teacher_corpus_range(
        &self,
        spec: Option<&WatermarkSpec>,
        range: std::ops::Range<usize>,
    ) -> Result<Corpus> {
        let wm = spec
            .map(|s| Watermarker::new(s.clone(), self.vocab))
            .transpose()?;
        let procs: Vec<&dyn TokenProcessor> = wm.iter().map(|w| w as &dyn TokenProcessor).collect();
        let seed = self.root.child("corpus", 0);
        let sequences = range
            .into_par_iter()
            .map(|i| {
                generate(
                    &self.teacher,
                    &self.train_prompts[i],
                    self.cfg.corpus_length,
                    &procs,
                    seed.child("seq", i as u64).seed(),
                )
            })
            .collect::<Result<Vec<TokenSeq>>>()?;
        let provenance = if spec.is_some() {
            Provenance::TeacherWatermarked
        } else {
            Provenance::TeacherClean
        };
        Ok(Corpus::new(sequences, provenance))
    }

    /// Stolen rule table for a student trained on `corpus`.
    pub fn steal(&self, student: &NGramModel, corpus: &Corpus) -> Result<RuleTable> {
        let c = &self.cfg;
        aggregate(
            self.original(),
            student,
            corpus,
            c.steal_n_prime,
            c.steal_theta,
            c.steal_alpha,
        )
    }

    /// Paraphrases `corpus` with the reference model, optionally targeted.
    pub fn paraphrase(
        &self,
        corpus: &Corpus,
        inverse: Option<(&RuleTable, f64)>,
    ) -> Result<Corpus> {
        let spec = ParaphraseSpec {
            paraphraser: self.reference(),
            lambda: self.cfg.attack_lambda,
            inverse,
        };
        let label = if inverse.is_some() { "tp" } else { "up" };
        paraphrase(corpus, &spec, &self.root.child(label, 0))
    }

    /// Held-out generation from `model`, then detection under `spec` and
    /// the knowledge proxy.
    pub fn evaluate(
        &self,
        model: &dyn Predictor,
        spec: &WatermarkSpec,
        condition: &str,
    ) -> Result<(ConditionResult, Corpus)> {
        let text = generate_corpus(
            model,
            &self.eval_prompts,
            self.cfg.eval_length,
            &[],
            &self.root.child("eval-gen", 0),
            Provenance::Generated,
        )?;
        let result = self.score(&text, model, spec, condition)?;
        Ok((result, text))
    }

    fn score(
        &self,
        text: &Corpus,
        model: &dyn Predictor,
        spec: &WatermarkSpec,
        condition: &str,
    ) -> Result<ConditionResult> {
        let det = Detector::new(spec.clone(), self.vocab)?;
        let scores = det.token_scores(&text.sequences)?;
        let budget =
            self.cfg.detect_groups * self.cfg.detect_group_sizes.iter().max().expect("validated");
        let scores = &scores[..budget.min(scores.len())];
        let reports = self
            .cfg
            .detect_group_sizes
            .iter()
            .map(|&g| {
                let used = (g * self.cfg.detect_groups).min(scores.len());
                crate::detect::group_and_report(&scores[..used], g, &det)
            })
            .collect::<Result<_>>()?;
        Ok(ConditionResult {
            condition: condition.to_string(),
            scheme: spec.kind.name().to_string(),
            n: spec.n,
            reports,
            z: det.stream_z(scores)?,
            scored_tokens: scores.len(),
            kl: kl(&self.teacher, model, &self.contexts)?,
            cross_entropy: cross_entropy(&self.teacher, model, &self.contexts)?,
        })
    }

    /// Teacher watermarked with `spec` (or clean), attacked, distilled and
    /// evaluated under `spec`'s detector.
    pub fn run_condition(
        &self,
        spec: &WatermarkSpec,
        watermarked: bool,
        attack: AttackKind,
    ) -> Result<Run> {
        if !watermarked {
            let (train, student) = self.clean();
            let (result, text) = self.evaluate(student, spec, "unw")?;
            return Ok(Run {
                result,
                train: train.clone(),
                text,
            });
        }
        let corpus = self.teacher_corpus(Some(spec))?;
        let mut runs = self.run_attacks(spec, corpus, &[attack])?;
        Ok(runs.pop().expect("one attack"))
    }

    /// Shares the watermarked student and stolen table across attacks.
    pub fn run_attacks(
        &self,
        spec: &WatermarkSpec,
        corpus: Corpus,
        attacks: &[AttackKind],
    ) -> Result<Vec<Run>> {
        let student = self.fit_student(&corpus)?;
        let needs_rules = attacks
            .iter()
            .any(|a| matches!(a, AttackKind::Tp | AttackKind::Wn));
        let rules = if needs_rules {
            Some(self.steal(&student, &corpus)?)
        } else {
            None
        };
        let dp = self.cfg.attack_delta_prime;
        attacks
            .iter()
            .map(|&attack| {
                let name = attack.name();
                match attack {
                    AttackKind::None => {
                        let (result, text) = self.evaluate(&student, spec, name)?;
                        Ok(Run {
                            result,
                            train: corpus.clone(),
                            text,
                        })
                    }
                    AttackKind::Wn => {
                        let model = Neutralized {
                            base: &student,
                            rules: rules.as_ref().expect("stolen"),
                            delta_prime: dp,
                        };
                        let (result, text) = self.evaluate(&model, spec, name)?;
                        Ok(Run {
                            result,
                            train: corpus.clone(),
                            text,
                        })
                    }
                    AttackKind::Up | AttackKind::Tp => {
                        let inverse = (attack == AttackKind::Tp)
                            .then(|| (rules.as_ref().expect("stolen"), dp));
                        let train = self.paraphrase(&corpus, inverse)?;
                        let attacked = self.fit_student(&train)?;
                        let (result, text) = self.evaluate(&attacked, spec, name)?;
                        Ok(Run {
                            result,
                            train,
                            text,
                        })
                    }
                }
            })
            .collect()
    }

    fn spec_for(&self, n: usize) -> WatermarkSpec {
        let kind = self.cfg.scheme.unwrap_or(SchemeKind::Kgw);
        WatermarkSpec {
            n,
            ..self.cfg.watermark_as(kind)
        }
    }

    /// No-attack student per window size.
    pub fn window_runs(&self, n_list: &[usize]) -> Result<Vec<Run>> {
        let mut ns = n_list.to_vec();
        ns.sort_unstable();
        ns.dedup();
        ns.iter()
            .map(|&n| self.run_condition(&self.spec_for(n), true, AttackKind::None))
            .collect()
    }

    pub fn window_size_table(&self, runs: &[Run]) -> Vec<WindowRow> {
        runs.iter()
            .flat_map(|r| {
                r.result.reports.iter().map(|rep| WindowRow {
                    n: r.result.n,
                    group_size: rep.group_size,
                    median_log10_p: rep.median_log10_p,
                })
            })
            .collect()
    }

    /// High-frequency / seen-rare / unseen shares of the student's prefixes.
    pub fn prefix_coverage(&self, runs: &[Run]) -> Result<Vec<CoverageRow>> {
        runs.iter()
            .map(|r| {
                let n = r.result.n;
                if n == 1 {
                    return Ok(CoverageRow {
                        n,
                        high_share: 1.0,
                        low_share: 0.0,
                        unseen_share: 0.0,
                    });
                }
                let stats = prefix_frequencies(&r.train, self.vocab, n)?;
                let (mut high, mut low, mut unseen) = (0u64, 0u64, 0u64);
                for s in &r.text.sequences {
                    for i in s.prompt_len..s.len() {
                        let f = stats.frequency(&s.tokens[i + 1 - n..i]);
                        if f > self.cfg.steal_theta {
                            high += 1;
                        } else if f > 0.0 {
                            low += 1;
                        } else {
                            unseen += 1;
                        }
                    }
                }
                let total = (high + low + unseen) as f64;
                Ok(CoverageRow {
                    n,
                    high_share: high as f64 / total,
                    low_share: low as f64 / total,
                    unseen_share: unseen as f64 / total,
                })
            })
            .collect()
    }

    /// Student watermark-token rate bucketed by training frequency of the
    /// prefix that seeds each token's rule.
    pub fn frequency_radioactivity(&self, n: usize) -> Result<(FrequencyTable, Run)> {
        let spec = self.spec_for(n);
        let run = self.run_condition(&spec, true, AttackKind::None)?;
        let stats = prefix_frequencies(&run.train, self.vocab, n)?;
        let det = Detector::new(spec.clone(), self.vocab)?;
        let (max_score, null_rate) = match spec.kind {
            SchemeKind::Kgw => (1.0, spec.effective_gamma(self.vocab)),
            SchemeKind::SynthId => (spec.layers as f64, 0.5),
        };
        let theta = self.cfg.steal_theta;
        let steps = BUCKET_OCTAVES * BUCKETS_PER_OCTAVE;
        let edges: Vec<f64> = (-steps..=steps)
            .map(|j| theta * 2f64.powf(j as f64 / BUCKETS_PER_OCTAVE as f64))
            .collect();
        let mut buckets: Vec<Bucket> = std::iter::once(Bucket::new("unseen", 0.0, 0.0))
            .chain((0..=edges.len()).map(|b| {
                let lo = if b == 0 { 0.0 } else { edges[b - 1] };
                let hi = edges.get(b).copied().unwrap_or(1.0);
                Bucket::new(&format!("b{:02}", b + 1), lo, hi)
            }))
            .collect();
        let mut sums = vec![0.0; buckets.len()];
        for s in &run.text.sequences {
            let scores = det.sequence_scores(s)?;
            for (i, score) in (s.prompt_len..s.len()).zip(scores) {
                let f = stats.frequency(&s.tokens[i + 1 - n..i]);
                let b = if f == 0.0 {
                    0
                } else {
                    1 + edges.iter().take_while(|&&e| f > e).count()
                };
                buckets[b].tokens += 1;
                sums[b] += score as f64 / max_score;
            }
        }
        for (b, s) in buckets.iter_mut().zip(&sums) {
            b.rate = if b.tokens > 0 {
                s / b.tokens as f64
            } else {
                f64::NAN
            };
        }
        let used: Vec<(f64, f64)> = buckets
            .iter()
            .enumerate()
            .filter(|(_, b)| b.tokens >= MIN_BUCKET_TOKENS)
            .map(|(i, b)| (i as f64, b.rate))
            .collect();
        let (rho, p) = spearman(
            &used.iter().map(|u| u.0).collect::<Vec<_>>(),
            &used.iter().map(|u| u.1).collect::<Vec<_>>(),
        );
        Ok((
            FrequencyTable {
                n,
                null_rate,
                buckets,
                spearman_rho: rho,
                spearman_p: p,
            },
            run,
        ))
    }

    /// Table-2 analogue: every condition per scheme and window size.
    pub fn attack_table(
        &self,
        schemes: &[SchemeKind],
        ns: &[usize],
    ) -> Result<Vec<ConditionResult>> {
        let mut out = Vec::new();
        for &kind in schemes {
            for &n in ns {
                let spec = WatermarkSpec {
                    n,
                    ..self.cfg.watermark_as(kind)
                };
                out.push(self.run_condition(&spec, false, AttackKind::None)?.result);
                let corpus = self.teacher_corpus(Some(&spec))?;
                let runs = self.run_attacks(
                    &spec,
                    corpus,
                    &[
                        AttackKind::None,
                        AttackKind::Up,
                        AttackKind::Tp,
                        AttackKind::Wn,
                    ],
                )?;
                out.extend(runs.into_iter().map(|r| r.result));
            }
        }
        Ok(out)
    }

    /// Multi-source mixes: complementary keys at 50/50, then `k` random keys
    /// with equal shares for each `k` in `exp.sources`.
    pub fn multi_source(&self) -> Result<Vec<MultiRow>> {
        let base = self
            .cfg
            .watermark_as(self.cfg.scheme.unwrap_or(SchemeKind::Kgw));
        let total = self.cfg.corpus_sequences;
        let mut rows = Vec::new();

        let mut complement = base.clone();
        complement.invert = !base.invert;
        let specs = vec![base.clone(), complement];
        rows.extend(self.mix_case("complementary", &specs, total)?);

        for &k in &self.cfg.exp_sources {
            let specs: Vec<WatermarkSpec> = (0..k)
                .map(|i| {
                    let key = if i == 0 {
                        base.key
                    } else {
                        WatermarkKey(self.root.child("source-key", i as u64).seed())
                    };
                    WatermarkSpec {
                        key,
                        ..base.clone()
                    }
                })
                .collect();
            rows.extend(self.mix_case("random-keys", &specs, total)?);
        }
        Ok(rows)
    }

    fn mix_case(&self, case: &str, specs: &[WatermarkSpec], total: usize) -> Result<Vec<MultiRow>> {
        let mix = MixSpec::equal(specs.len());
        let counts = mix.counts(total);
        let mut start = 0;
        let mut sources = Vec::with_capacity(specs.len());
        for (spec, &count) in specs.iter().zip(&counts) {
            sources.push(self.teacher_corpus_range(Some(spec), start..start + count)?);
            start += count;
        }
        let corpus = mix_corpora(&sources, &mix, total, &self.root.child("mix", 0))?;
        let student = self.fit_student(&corpus)?;
        let mut rows = Vec::new();
        for (d, spec) in specs.iter().enumerate() {
            let (res, _) = self.evaluate(&student, spec, case)?;
            for rep in &res.reports {
                rows.push(MultiRow {
                    case: case.to_string(),
                    sources: specs.len(),
                    detector: d,
                    group_size: rep.group_size,
                    median_log10_p: rep.median_log10_p,
                    mean_neg_log10_p: rep.mean_neg_log10_p(),
                    kl: res.kl,
                });
            }
        }
        Ok(rows)
    }

    /// WN at each inverse strength; one student and one stolen table.
    pub fn delta_sweep(&self, deltas: &[f64]) -> Result<(Vec<SweepRow>, Vec<ConditionResult>)> {
        let spec = self
            .cfg
            .watermark()
            .unwrap_or_else(|| self.spec_for(self.cfg.wm_n));
        let corpus = self.teacher_corpus(Some(&spec))?;
        let student = self.fit_student(&corpus)?;
        let rules = self.steal(&student, &corpus)?;
        let mut rows = Vec::new();
        let mut results = Vec::new();
        for &dp in deltas {
            let model = Neutralized {
                base: &student,
                rules: &rules,
                delta_prime: dp,
            };
            let (res, _) = self.evaluate(&model, &spec, &format!("wn:{dp}"))?;
            for rep in &res.reports {
                rows.push(SweepRow {
                    delta_prime: dp,
                    group_size: rep.group_size,
                    median_log10_p: rep.median_log10_p,
                    kl: res.kl,
                });
            }
            results.push(res);
        }
        Ok((rows, results))
    }
}

/// Frequency bucket edges run from `theta / 2^k` to `theta * 2^k`.
pub const BUCKET_OCTAVES: i32 = 8;

/// Log-spaced bucket edges per doubling of frequency.
pub const BUCKETS_PER_OCTAVE: i32 = 4;

/// Buckets with fewer tokens are reported but left out of the correlation.
pub const MIN_BUCKET_TOKENS: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowRow {
    pub n: usize,
    pub group_size: usize,
    pub median_log10_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub n: usize,
    pub high_share: f64,
    pub low_share: f64,
    pub unseen_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub tokens: u64,
    pub rate: f64,
}

impl Bucket {
    fn new(label: &str, lo: f64, hi: f64) -> Self {
        Self {
            label: label.to_string(),
            lo,
            hi,
            tokens: 0,
            rate: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyTable {
    pub n: usize,
    pub null_rate: f64,
    pub buckets: Vec<Bucket>,
    pub spearman_rho: f64,
    pub spearman_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiRow {
    pub case: String,
    pub sources: usize,
    pub detector: usize,
    pub group_size: usize,
    pub median_log10_p: f64,
    pub mean_neg_log10_p: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta_prime: f64,
    pub group_size: usize,
    pub median_log10_p: f64,
    pub kl: f64,
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Largest sample scored by exact permutation; beyond it the
/// t-approximation is used.
pub const EXACT_SPEARMAN_MAX: usize = 9;

fn rank_corr(rx: &[f64], ry: &[f64]) -> f64 {
    let n = rx.len();
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    sxy / (sxx * syy).sqrt()
}

/// Visits every permutation of `items` (Heap's algorithm).
fn permutations(items: &mut [f64], k: usize, f: &mut impl FnMut(&[f64])) {
    if k <= 1 {
        f(items);
        return;
    }
    for i in 0..k - 1 {
        permutations(items, k - 1, f);
        let j = if k.is_multiple_of(2) { i } else { 0 };
        items.swap(j, k - 1);
    }
    permutations(items, k - 1, f);
}

/// Spearman rank correlation with average ranks for ties, and its
/// two-sided p-value: exact over all permutations up to
/// [`EXACT_SPEARMAN_MAX`] points, otherwise from Student's t with
/// `len - 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n < 3 || n != y.len() {
        return (f64::NAN, f64::NAN);
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let rho = rank_corr(&rx, &ry);
    if n <= EXACT_SPEARMAN_MAX {
        let (mut hits, mut total) = (0u64, 0u64);
        let mut perm = ry.clone();
        permutations(&mut perm, n, &mut |p| {
            total += 1;
            if rank_corr(&rx, p).abs() >= rho.abs() - 1e-12 {
                hits += 1;
            }
        });
        return (rho, hits as f64 / total as f64);
    }
    if rho.abs() >= 1.0 {
        return (rho.signum(), 0.0);
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (rho, 2.0 * (1.0 - dist.cdf(t.abs())))
}

fn csv<T>(header: &str, rows: &[T], line: impl Fn(&T) -> String) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        writeln!(out, "{}", line(r)).unwrap();
    }
    out
}

fn timed(
    name: &str,
    cfg: &ExperimentConfig,
    f: impl FnOnce(
            &Lab,
        ) -> Result<(
            Vec<ConditionResult>,
            serde_json::Value,
            Vec<(String, String)>,
        )> + Send,
) -> Result<ExperimentResult> {
    let start = Instant::now();
    let cfg = cfg.clone();
    let workers = cfg.workers;
    with_workers(workers, move || {
        let lab = Lab::new(cfg.clone())?;
        let (conditions, summary, tables) = f(&lab)?;
        Ok(ExperimentResult {
            experiment: name.to_string(),
            config: cfg,
            conditions,
            summary,
            tables,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        })
    })?
}

fn condition_csv(conds: &[ConditionResult]) -> String {
    let mut out = String::from("scheme,n,condition,group_size,median_log10_p,z,kl\n");
    for c in conds {
        for r in &c.reports {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.scheme, c.n, c.condition, r.group_size, r.median_log10_p, c.z, c.kl
            )
            .unwrap();
        }
    }
    out
}

/// Teacher, optional attack (`attack.kind`), student, detection.
pub fn run_distill_detect(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    timed("distill", cfg, |lab| {
        let c = lab.config();
        let (spec, watermarked) = match c.watermark() {
            Some(s) => (s, true),
            None => (lab.spec_for(c.wm_n), false),
        };
        let run = lab.run_condition(
            &spec,
            watermarked,
            if watermarked {
                c.attack
            } else {
                AttackKind::None
            },
        )?;
        let mut tables = vec![(
            "conditions.csv".to_string(),
            condition_csv(std::slice::from_ref(&run.result)),
        )];
        for rep in &run.result.reports {
            tables.push((format!("detection_g{}.csv", rep.group_size), rep.to_csv()));
        }
        Ok((vec![run.result], serde_json::Value::Null, tables))
    })
}

pub fn run_window_size_table(cfg: &ExperimentConfig, n_list: &[usize]) -> Result<ExperimentResult> {
    let n_list = n_list.to_vec();
    timed("table1", cfg, move |lab| {
        let runs = lab.window_runs(&n_list)?;
        let rows = lab.window_size_table(&runs);
        let table = csv("n,group_size,median_log10_p", &rows, |r| {
            format!("{},{},{}", r.n, r.group_size, r.median_log10_p)
        });
        let summary = serde_json::to_value(&rows).expect("serializable");
        Ok((
            runs.into_iter().map(|r| r.result).collect(),
            summary,
            vec![("table1.csv".into(), table)],
        ))
    })
}

pub fn run_prefix_coverage(cfg: &ExperimentConfig, n_list: &[usize]) -> Result<ExperimentResult> {
    let n_list = n_list.to_vec();
    timed("fig4", cfg, move |lab| {
        let runs = lab.window_runs(&n_list)?;
        let rows = lab.prefix_coverage(&runs)?;
        let table = csv(
            "n,high_freq_share,low_freq_share,unseen_share",
            &rows,
            |r| {
                format!(
                    "{},{},{},{}",
                    r.n, r.high_share, r.low_share, r.unseen_share
                )
            },
        );
        let summary = serde_json::to_value(&rows).expect("serializable");
        Ok((
            runs.into_iter().map(|r| r.result).collect(),
            summary,
            vec![("fig4.csv".into(), table)],
        ))
    })
}

pub fn run_frequency_radioactivity(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    timed("fig2", cfg, |lab| {
        let mut tables = Vec::new();
        let mut conds = Vec::new();
        for &n in &lab.config().exp_fig2_n {
            let (t, run) = lab.frequency_radioactivity(n)?;
            tables.push(t);
            conds.push(run.result);
        }
        let mut table = String::from("n,bucket,freq_lo,freq_hi,tokens,rate\n");
        let mut corr = String::from("n,null_rate,spearman_rho,spearman_p\n");
        for t in &tables {
            for b in &t.buckets {
                writeln!(
                    table,
                    "{},{},{},{},{},{}",
                    t.n, b.label, b.lo, b.hi, b.tokens, b.rate
                )
                .unwrap();
            }
            writeln!(
                corr,
                "{},{},{},{}",
                t.n, t.null_rate, t.spearman_rho, t.spearman_p
            )
            .unwrap();
        }
        let summary = serde_json::to_value(&tables).expect("serializable");
        Ok((
            conds,
            summary,
            vec![
                ("fig2.csv".into(), table),
                ("fig2_spearman.csv".into(), corr),
            ],
        ))
    })
}

pub fn run_attack_table(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    timed("table2", cfg, |lab| {
        let ns = lab.config().exp_attack_n.clone();
        let conds = lab.attack_table(&[SchemeKind::Kgw, SchemeKind::SynthId], &ns)?;
        let mut table = String::from("scheme,n,group_size,condition,median_log10_p\n");
        for c in &conds {
            for r in &c.reports {
                writeln!(
                    table,
                    "{},{},{},{},{}",
                    c.scheme, c.n, r.group_size, c.condition, r.median_log10_p
                )
                .unwrap();
            }
        }
        let knowledge = csv("scheme,n,condition,z,kl,cross_entropy", &conds, |c| {
            format!(
                "{},{},{},{},{},{}",
                c.scheme, c.n, c.condition, c.z, c.kl, c.cross_entropy
            )
        });
        Ok((
            conds,
            serde_json::Value::Null,
            vec![
                ("table2.csv".into(), table),
                ("table2_knowledge.csv".into(), knowledge),
            ],
        ))
    })
}

pub fn run_multi_source(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    timed("multisource", cfg, |lab| {
        let rows = lab.multi_source()?;
        let table = csv(
            "case,sources,detector,group_size,median_log10_p,mean_neg_log10_p,kl",
            &rows,
            |r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.case,
                    r.sources,
                    r.detector,
                    r.group_size,
                    r.median_log10_p,
                    r.mean_neg_log10_p,
                    r.kl
                )
            },
        );
        let summary = serde_json::to_value(&rows).expect("serializable");
        Ok((Vec::new(), summary, vec![("multisource.csv".into(), table)]))
    })
}

pub fn run_delta_sweep(cfg: &ExperimentConfig, deltas: &[f64]) -> Result<ExperimentResult> {
    let deltas = deltas.to_vec();
    timed("delta-sweep", cfg, move |lab| {
        let (rows, conds) = lab.delta_sweep(&deltas)?;
        let table = csv("delta_prime,group_size,median_log10_p,kl", &rows, |r| {
            format!(
                "{},{},{},{}",
                r.delta_prime, r.group_size, r.median_log10_p, r.kl
            )
        });
        let summary = serde_json::to_value(&rows).expect("serializable");
        Ok((conds, summary, vec![("delta_sweep.csv".into(), table)]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (rho, p) = spearman(&x, &[2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(rho, 1.0);
        assert!((p - 2.0 / 120.0).abs() < 1e-15);
        assert_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).0, -1.0);
        let (rho, p) = spearman(&x, &[1.0, 3.0, 2.0, 5.0, 4.0]);
        assert!((rho - 0.8).abs() < 1e-12);
        assert!((p - 0.1333333333333333).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn spearman_t_approximation() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let y = [0.0, 2.0, 1.0, 3.0, 5.0, 4.0, 6.0, 8.0, 7.0, 9.0, 11.0, 10.0];
        let (rho, p) = spearman(&x, &y);
        assert!((rho - 0.972027972027972).abs() < 1e-12);
        assert!((p / 1.2868115751495013e-07 - 1.0).abs() < 1e-6);
    }
}
