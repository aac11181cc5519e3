//! Command-line front end: config parsing, subcommand dispatch, artifact
//! files and exit codes.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use wmlab::attacks::{AttackMeta, Neutralized};
use wmlab::config::{ExperimentConfig, KEYS};
use wmlab::detect::{group_and_report, Detector};
use wmlab::lm::{fit, Corpus, NGramModel, Provenance};
use wmlab::pipeline::{self, ExperimentResult, Lab};
use wmlab::steal::{aggregate, RuleTable};

/// Environment variable that may supply the master seed.
pub const SEED_ENV: &str = "WMLAB_SEED";

/// Name of the effective-config copy written next to every output.
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or arguments: exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Anything that failed while running: exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<wmlab::Error> for CliError {
    fn from(e: wmlab::Error) -> Self {
        match e {
            wmlab::Error::InvalidParameter { .. } | wmlab::Error::Parse { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Where each key was last set in a config file.
struct Origins {
    source: String,
    lines: HashMap<String, usize>,
}

impl Origins {
    fn locate(&self, e: wmlab::Error) -> CliError {
        match &e {
            wmlab::Error::InvalidParameter { name, .. } if self.lines.contains_key(*name) => {
                CliError::Validation(format!("{}:{}: {e}", self.source, self.lines[*name]))
            }
            _ => e.into(),
        }
    }
}

fn parse_lines(text: &str, source: &str) -> Result<(ExperimentConfig, Origins)> {
    let mut cfg = ExperimentConfig::default();
    let mut origins = Origins {
        source: source.to_string(),
        lines: HashMap::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Validation(format!(
                "{source}:{}: expected `key = value`",
                i + 1
            )));
        };
        cfg.set(key.trim(), value)
            .map_err(|e| CliError::Validation(format!("{source}:{}: {e}", i + 1)))?;
        origins.lines.insert(key.trim().to_string(), i + 1);
    }
    Ok((cfg, origins))
}

/// Parses config text: one `section.key = value` per line, `#` starts a
/// comment, blank lines are ignored. Errors name the key and line.
pub fn parse_config_text(text: &str, source: &str) -> Result<ExperimentConfig> {
    let (cfg, origins) = parse_lines(text, source)?;
    cfg.validate().map_err(|e| origins.locate(e))?;
    Ok(cfg)
}

/// Reads the config file (defaults when absent), applies `key=value`
/// overrides in order, and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let (mut cfg, mut origins) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", p.display()))
            })?;
            parse_lines(&text, &p.display().to_string())?
        }
        None => parse_lines("", "")?,
    };
    for o in overrides {
        let Some((key, value)) = o.split_once('=') else {
            return Err(CliError::Validation(format!(
                "override `{o}`: expected key=value"
            )));
        };
        cfg.set(key.trim(), value)
            .map_err(|e| CliError::Validation(format!("override `{o}`: {e}")))?;
        origins.lines.remove(key.trim());
    }
    cfg.validate().map_err(|e| origins.locate(e))?;
    Ok(cfg)
}

/// Every accepted key with its type and meaning, for `--help`.
pub fn keys_help() -> String {
    let defaults = ExperimentConfig::default();
    let mut out = String::from(
        "Configuration keys (`section.key = value` in --config, or --set key=value):\n",
    );
    for d in KEYS {
        let v = defaults.get(d.key).unwrap_or_default();
        out.push_str(&format!(
            "  {:<22} {} [{}; default {}]\n",
            d.key, d.doc, d.kind, v
        ));
    }
    out
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Config file (`section.key = value` lines)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, applied after the file (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Master seed (beats WMLAB_SEED and run.seed)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (never changes results)
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(
    name = "wmlab",
    version,
    about = "Watermark radioactivity, stealing and removal on toy n-gram models"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the seeded teacher and write teacher.wmlm
    GenTeacher,
    /// Generate the (watermarked) teacher corpus and write corpus.txt
    GenCorpus {
        /// Teacher snapshot; built from the config when absent
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Fit a student on --corpus and write student.wmlm; without --corpus,
    /// run the end-to-end teacher, attack.kind, student, detection pipeline
    Distill {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Detect the configured watermark in a corpus, or in text generated
    /// from a model on held-out prompts
    Detect {
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Steal watermark rules from a student and its training corpus and
    /// write rules.csv
    Steal {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Removal attacks
    Attack {
        #[command(subcommand)]
        kind: AttackCommand,
    },
    /// Experiments behind each table and figure
    Exp {
        #[command(subcommand)]
        name: ExpCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum AttackCommand {
    /// Untargeted paraphrase of a corpus
    Up {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Paraphrase with the stolen rules inverted
    Tp {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        rules: PathBuf,
    },
    /// Generate held-out text from a student with the stolen rules
    /// neutralized at decode time
    Wn {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        rules: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum ExpCommand {
    /// Median log10 p per window size and group size
    Table1,
    /// Student watermark rate by training prefix frequency
    Fig2,
    /// High-frequency, rare and unseen prefix shares per window size
    Fig4,
    /// Every scheme, window size and attack condition
    Table2,
    /// Complementary-key and multi-key teacher mixes
    Multisource,
    /// Decode-time neutralization across inverse strengths
    DeltaSweep,
}

fn command_with_keys() -> clap::Command {
    fn attach(cmd: clap::Command, help: &str) -> clap::Command {
        let cmd = cmd.after_help(help.to_string());
        let names: Vec<String> = cmd
            .get_subcommands()
            .map(|s| s.get_name().to_string())
            .collect();
        names
            .iter()
            .fold(cmd, |c, n| c.mut_subcommand(n, |s| attach(s, help)))
    }
    attach(Cli::command(), &keys_help())
}

/// Effective config: file, overrides, then seed by flag > env > config.
pub fn resolve_config(common: &Common, env_seed: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = env_seed.filter(|s| !s.trim().is_empty()) {
        cfg.seed = s.trim().parse().map_err(|_| {
            CliError::Validation(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))
        })?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    Ok(Corpus::load(path, Provenance::Generated)?)
}

fn load_model(path: &Path) -> Result<NGramModel> {
    Ok(NGramModel::load(path)?)
}

fn write_result(out: &Path, result: &ExperimentResult) -> Result<Vec<PathBuf>> {
    result.write(out)?;
    let mut files: Vec<PathBuf> = result.tables.iter().map(|t| out.join(&t.0)).collect();
    files.push(out.join("summary.json"));
    Ok(files)
}

fn run_command(cmd: &Command, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let vocab = cfg.vocab()?;
    match cmd {
        Command::GenTeacher => {
            let lab = Lab::new(cfg.clone())?;
            let p = out.join("teacher.wmlm");
            lab.teacher().save(&p)?;
            Ok(vec![p])
        }
        Command::GenCorpus { teacher } => {
            let lab = match teacher {
                Some(t) => Lab::with_teacher(cfg.clone(), load_model(t)?)?,
                None => Lab::new(cfg.clone())?,
            };
            let corpus = lab.teacher_corpus(cfg.watermark().as_ref())?;
            let p = out.join("corpus.txt");
            corpus.save(&p)?;
            Ok(vec![p])
        }
        Command::Distill { corpus: Some(c) } => {
            let corpus = load_corpus(c)?;
            let student = fit(
                &corpus,
                vocab,
                cfg.student_order,
                cfg.student_beta,
                cfg.student_smoothing,
            )?;
            let p = out.join("student.wmlm");
            student.save(&p)?;
            Ok(vec![p])
        }
        Command::Distill { corpus: None } => write_result(out, &pipeline::run_distill_detect(cfg)?),
        Command::Detect { corpus, model } => {
            let spec = cfg.watermark().ok_or_else(|| {
                CliError::Validation("watermark.scheme: detection needs kgw or synthid".into())
            })?;
            let mut files = Vec::new();
            let text = match (corpus, model) {
                (Some(c), _) => load_corpus(c)?,
                (None, Some(m)) => {
                    let model = load_model(m)?;
                    let lab = Lab::new(cfg.clone())?;
                    let (result, text) = lab.evaluate(&model, &spec, "detect")?;
                    let p = out.join("summary.json");
                    write_file(
                        &p,
                        serde_json::to_string_pretty(&result).expect("serializable") + "\n",
                    )?;
                    files.push(p);
                    text
                }
                (None, None) => unreachable!("clap requires one of --corpus, --model"),
            };
            let det = Detector::new(spec, vocab)?;
            let scores = det.token_scores(&text.sequences)?;
            for &g in &cfg.detect_group_sizes {
                let used = (g * cfg.detect_groups).min(scores.len());
                let report = group_and_report(&scores[..used], g, &det)?;
                let p = out.join(format!("detection_g{g}.csv"));
                write_file(&p, report.to_csv())?;
                files.push(p);
            }
            Ok(files)
        }
        Command::Steal { student, corpus } => {
            let student = load_model(student)?;
            let corpus = load_corpus(corpus)?;
            let lab = Lab::new(cfg.clone())?;
            let rules = aggregate(
                lab.original(),
                &student,
                &corpus,
                cfg.steal_n_prime,
                cfg.steal_theta,
                cfg.steal_alpha,
            )?;
            let p = out.join("rules.csv");
            write_file(&p, rules.to_csv())?;
            Ok(vec![p])
        }
        Command::Attack { kind } => {
            let lab = Lab::new(cfg.clone())?;
            let dp = cfg.attack_delta_prime;
            let (corpus, meta) = match kind {
                AttackCommand::Up { corpus } => {
                    let c = lab.paraphrase(&load_corpus(corpus)?, None)?;
                    (c, meta("up", Some(cfg.attack_lambda), None, None))
                }
                AttackCommand::Tp { corpus, rules } => {
                    let table = RuleTable::load(rules, vocab)?;
                    let c = lab.paraphrase(&load_corpus(corpus)?, Some((&table, dp)))?;
                    (
                        c,
                        meta("tp", Some(cfg.attack_lambda), Some(dp), Some(rules)),
                    )
                }
                AttackCommand::Wn { student, rules } => {
                    let table = RuleTable::load(rules, vocab)?;
                    let base = load_model(student)?;
                    let model = Neutralized {
                        base: &base,
                        rules: &table,
                        delta_prime: dp,
                    };
                    let spec = cfg
                        .watermark()
                        .unwrap_or_else(|| cfg.watermark_as(wmlab::schemes::SchemeKind::Kgw));
                    let (_, text) = lab.evaluate(&model, &spec, "wn")?;
                    (text, meta("wn", None, Some(dp), Some(rules)))
                }
            };
            let p = out.join("corpus.txt");
            corpus.save(&p)?;
            let m = out.join("attack.meta");
            meta.save(&m)?;
            Ok(vec![p, m])
        }
        Command::Exp { name } => {
            let result = match name {
                ExpCommand::Table1 => pipeline::run_window_size_table(cfg, &cfg.exp_n_list)?,
                ExpCommand::Fig2 => pipeline::run_frequency_radioactivity(cfg)?,
                ExpCommand::Fig4 => pipeline::run_prefix_coverage(cfg, &cfg.exp_n_list)?,
                ExpCommand::Table2 => pipeline::run_attack_table(cfg)?,
                ExpCommand::Multisource => pipeline::run_multi_source(cfg)?,
                ExpCommand::DeltaSweep => pipeline::run_delta_sweep(cfg, &cfg.exp_delta_primes)?,
            };
            write_result(out, &result)
        }
    }
}

fn meta(
    attack: &str,
    lambda: Option<f64>,
    delta_prime: Option<f64>,
    rules: Option<&PathBuf>,
) -> AttackMeta {
    AttackMeta {
        attack: attack.to_string(),
        lambda,
        delta_prime,
        rule_table: rules.cloned(),
    }
}

/// Runs one parsed invocation; returns the files written.
pub fn dispatch(cli: &Cli, env_seed: Option<&str>) -> Result<Vec<PathBuf>> {
    let cfg = resolve_config(&cli.common, env_seed)?;
    let out = &cli.common.out;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let cfg_path = out.join(CONFIG_FILE);
    write_file(&cfg_path, cfg.to_text())?;
    let mut files = pipeline::with_workers(cfg.workers, || run_command(&cli.command, &cfg, out))
        .map_err(CliError::from)??;
    files.insert(0, cfg_path);
    Ok(files)
}

/// Full entry point: parses `args`, dispatches, reports, and returns the
/// process exit code.
pub fn run<I, T>(
    args: I,
    env_seed: Option<&str>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command_with_keys().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(stdout, "{text}")
            } else {
                write!(stderr, "{text}")
            };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return 1;
        }
    };
    match dispatch(&cli, env_seed) {
        Ok(files) => {
            for f in files {
                let _ = writeln!(stdout, "wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
