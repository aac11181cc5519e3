use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use wmlab::config::{ExperimentConfig, KEYS};
use wmlab_cli::{parse_config, run};

const TINY: &str = "\
# tiny run
vocab.size = 64
corpus.sequences = 300   # inline comment
corpus.length = 24
student.order = 3
detect.group_sizes = 100,200
detect.groups = 3
eval.length = 24
eval.contexts = 50
exp.sources = 1,2
";

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn wmlab(args: &[&str], env_seed: Option<&str>) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("wmlab").chain(args.iter().copied());
    let code = run(argv, env_seed, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path, keep: impl Fn(&str) -> bool) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| keep(p.file_name().unwrap().to_str().unwrap()))
        .map(|p| {
            (
                p.file_name().unwrap().to_str().unwrap().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn csv(name: &str) -> bool {
    name.ends_with(".csv")
}

#[test]
fn empty_file_gives_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "empty.txt", "");
    assert_eq!(
        parse_config(Some(&cfg), &[]).unwrap(),
        ExperimentConfig::default()
    );
}

#[test]
fn override_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.txt", "watermark.delta = 2.0\n");
    let c = parse_config(Some(&cfg), &["watermark.delta=5.0".to_string()]).unwrap();
    assert_eq!(c.wm_delta, 5.0);
    assert_eq!(parse_config(Some(&cfg), &[]).unwrap().wm_delta, 2.0);
}

#[test]
fn bad_gamma_is_a_validation_error() {
    let o = wmlab(&["gen-teacher", "--set", "watermark.gamma=1.5"], None);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("watermark.gamma"), "{}", o.stderr);

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.txt",
        "vocab.size = 64\nwatermark.gamma = 1.5\n",
    );
    let o = wmlab(
        &["gen-teacher", "--config", s(&cfg), "--out", s(dir.path())],
        None,
    );
    assert_eq!(o.code, 1);
    assert!(
        o.stderr.contains("watermark.gamma") && o.stderr.contains(":2"),
        "{}",
        o.stderr
    );
}

#[test]
fn unknown_key_and_type_mismatch_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.txt",
        "# header\nwatermark.delta = 3\nwatermark.colour = red\n",
    );
    let o = wmlab(
        &["gen-teacher", "--config", s(&cfg), "--out", s(dir.path())],
        None,
    );
    assert_eq!(o.code, 1);
    assert!(
        o.stderr.contains("watermark.colour") && o.stderr.contains(":3"),
        "{}",
        o.stderr
    );

    let cfg = write(dir.path(), "d.txt", "corpus.length = many\n");
    let o = wmlab(
        &["gen-teacher", "--config", s(&cfg), "--out", s(dir.path())],
        None,
    );
    assert_eq!(o.code, 1);
    assert!(
        o.stderr.contains("corpus.length") && o.stderr.contains(":1"),
        "{}",
        o.stderr
    );
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let o = wmlab(
        &[
            "detect",
            "--corpus",
            s(&missing),
            "--set",
            "vocab.size=64",
            "--out",
            s(dir.path()),
        ],
        None,
    );
    assert_eq!(o.code, 2, "{}", o.stderr);
}

#[test]
fn every_help_lists_every_key() {
    for args in [
        vec!["--help"],
        vec!["gen-teacher", "--help"],
        vec!["steal", "--help"],
        vec!["attack", "tp", "--help"],
        vec!["exp", "delta-sweep", "--help"],
    ] {
        let o = wmlab(&args, None);
        assert_eq!(o.code, 0);
        for k in KEYS {
            assert!(o.stdout.contains(k.key), "{args:?} missing {}", k.key);
        }
    }
}

#[test]
fn seed_precedence_flag_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.txt", "run.seed = 7\nvocab.size = 16\n");
    let seed_of = |args: &[&str], env: Option<&str>| {
        let out = dir.path().join("o");
        let mut full = vec!["gen-teacher", "--config", s(&cfg), "--out", s(&out)];
        full.extend_from_slice(args);
        assert_eq!(wmlab(&full, env).code, 0);
        let text = std::fs::read_to_string(out.join("config.txt")).unwrap();
        text.lines()
            .find_map(|l| l.strip_prefix("run.seed = ").map(str::to_string))
            .unwrap()
    };
    assert_eq!(seed_of(&[], None), "7");
    assert_eq!(seed_of(&[], Some("11")), "11");
    assert_eq!(seed_of(&["--seed", "13"], Some("11")), "13");
    assert_eq!(
        wmlab(
            &[
                "gen-teacher",
                "--set",
                "vocab.size=16",
                "--out",
                s(dir.path())
            ],
            Some("x")
        )
        .code,
        1
    );
}

#[test]
fn artifact_chain_and_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "tiny.txt", TINY);
    let step = |args: &[&str], out: &str| {
        let out = d.join(out);
        let mut full = vec!["--config", s(&cfg), "--out", s(&out)];
        full.extend_from_slice(args);
        let o = wmlab(&full, None);
        assert_eq!(o.code, 0, "{args:?}: {}", o.stderr);
        assert!(out.join("config.txt").exists());
        out
    };
    let t = step(&["gen-teacher"], "t");
    let c = step(
        &["gen-corpus", "--teacher", s(&t.join("teacher.wmlm"))],
        "c",
    );
    let corpus = c.join("corpus.txt");
    let text = std::fs::read_to_string(&corpus).unwrap();
    assert_eq!(text.lines().count(), 300);
    assert!(text.lines().all(|l| l.contains(" | ")));
    let st = step(&["distill", "--corpus", s(&corpus)], "s");
    let student = st.join("student.wmlm");
    assert_eq!(&std::fs::read(&student).unwrap()[..4], b"WMLM");
    let r = step(
        &["steal", "--student", s(&student), "--corpus", s(&corpus)],
        "r",
    );
    let rules = std::fs::read_to_string(r.join("rules.csv")).unwrap();
    assert_eq!(
        rules.lines().next(),
        Some("window_len,prefix_tokens,token,D")
    );
    assert_eq!(rules.lines().filter(|l| l.starts_with("0,,")).count(), 64);
    assert!(rules.lines().any(|l| l.starts_with("1,")));

    let rules = r.join("rules.csv");
    let tp = step(
        &["attack", "tp", "--corpus", s(&corpus), "--rules", s(&rules)],
        "tp",
    );
    let meta = std::fs::read_to_string(tp.join("attack.meta")).unwrap();
    assert!(
        meta.contains("attack=tp")
            && meta.contains("delta_prime=2.5")
            && meta.contains("rule_table="),
        "{meta}"
    );
    let up = step(&["attack", "up", "--corpus", s(&corpus)], "up");
    assert!(std::fs::read_to_string(up.join("attack.meta"))
        .unwrap()
        .contains("attack=up"));
    let wn = step(
        &[
            "attack",
            "wn",
            "--student",
            s(&student),
            "--rules",
            s(&rules),
        ],
        "wn",
    );
    let det = step(&["detect", "--corpus", s(&wn.join("corpus.txt"))], "dw");
    assert!(det.join("detection_g100.csv").exists() && det.join("detection_g200.csv").exists());
    let det = step(&["detect", "--corpus", s(&corpus)], "dc");
    let report = std::fs::read_to_string(det.join("detection_g200.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("group_index,statistic,log10_p"));
    let median: f64 = report
        .lines()
        .last()
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(median < -10.0, "teacher corpus median {median}");
}

#[test]
fn table2_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.txt", TINY);
    let out = dir.path().join("t2");
    let o = wmlab(
        &["exp", "table2", "--config", s(&cfg), "--out", s(&out)],
        None,
    );
    assert_eq!(o.code, 0, "{}", o.stderr);
    let table = std::fs::read_to_string(out.join("table2.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next(),
        Some("scheme,n,group_size,condition,median_log10_p")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2 * 5);
    for cond in ["unw", "none", "up", "tp", "wn"] {
        assert_eq!(rows.iter().filter(|r| r[3] == cond).count(), 8);
    }
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap() <= 0.0));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["experiment"], "table2");
}

#[test]
fn worker_count_and_rerun_do_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.txt", TINY);
    let runs: Vec<PathBuf> = ["1", "8"]
        .iter()
        .map(|w| {
            let out = dir.path().join(format!("w{w}"));
            let o = wmlab(
                &[
                    "exp",
                    "multisource",
                    "--config",
                    s(&cfg),
                    "--workers",
                    w,
                    "--out",
                    s(&out),
                ],
                None,
            );
            assert_eq!(o.code, 0, "{}", o.stderr);
            out
        })
        .collect();
    let a = files(&runs[0], csv);
    assert!(!a.is_empty());
    assert_eq!(a, files(&runs[1], csv));

    let again = dir.path().join("again");
    let echoed = runs[0].join("config.txt");
    let o = wmlab(
        &[
            "exp",
            "multisource",
            "--config",
            s(&echoed),
            "--out",
            s(&again),
        ],
        None,
    );
    assert_eq!(o.code, 0, "{}", o.stderr);
    let every = |n: &str| n != "timing.txt";
    assert_eq!(files(&runs[0], every), files(&again, every));
}
