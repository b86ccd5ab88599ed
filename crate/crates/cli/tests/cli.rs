use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn natctc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_natctc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = natctc(args);
    assert!(
        out.status.success(),
        "natctc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, task: &str, n: usize, seed: u64) {
    ok(&[
        "gen-data",
        "--task",
        task,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--out-dir",
        s(dir),
    ]);
}

/// Field `key` of a `key value` line.
fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
}

#[test]
fn gen_data_copy_is_line_aligned_and_seeded() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "copy", 1000, 7);
    gen(&b, "copy", 1000, 7);
    let src = fs::read_to_string(a.join("src.txt")).unwrap();
    assert_eq!(src.lines().count(), 1000);
    assert_eq!(src, fs::read_to_string(a.join("tgt.txt")).unwrap());
    for f in ["src.txt", "tgt.txt", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn gen_data_holds_out_pairs_from_the_same_generator() {
    let tmp = TempDir::new().unwrap();
    let (all, split) = (tmp.path().join("all"), tmp.path().join("split"));
    gen(&all, "toy_grammar", 60, 4);
    let out = ok(&[
        "gen-data",
        "--task",
        "toy_grammar",
        "--n",
        "50",
        "--valid",
        "10",
        "--seed",
        "4",
        "--out-dir",
        s(&split),
    ]);
    assert_eq!(out, "pairs 50\nvalid_pairs 10\n");
    for f in ["src.txt", "tgt.txt"] {
        let whole = fs::read_to_string(all.join(f)).unwrap();
        let lines: Vec<&str> = whole.lines().collect();
        let head = fs::read_to_string(split.join(f)).unwrap();
        let tail = fs::read_to_string(split.join("valid").join(f)).unwrap();
        assert_eq!(head.lines().collect::<Vec<_>>(), lines[..50]);
        assert_eq!(tail.lines().collect::<Vec<_>>(), lines[50..]);
    }
}

#[test]
fn gen_data_rejects_inverted_lengths() {
    let tmp = TempDir::new().unwrap();
    let out = natctc(&[
        "gen-data",
        "--task",
        "copy",
        "--n",
        "5",
        "--len-min",
        "8",
        "--len-max",
        "3",
        "--out-dir",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("len-min"));
}

#[test]
fn eval_of_reference_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    gen(tmp.path(), "toy_grammar", 50, 3);
    let tgt = tmp.path().join("tgt.txt");
    let report = ok(&["eval", "--hyp", s(&tgt), "--ref", s(&tgt)]);
    assert_eq!(field(&report, "bleu"), "100.0000");
    assert_eq!(field(&report, "sequence_accuracy"), "1.000000");
    assert_eq!(field(&report, "brevity_penalty"), "1.000000");
}

#[test]
fn eval_line_mismatch_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let (h, r) = (tmp.path().join("h"), tmp.path().join("r"));
    fs::write(&h, "a b\n").unwrap();
    fs::write(&r, "a b\nc d\n").unwrap();
    assert_eq!(
        natctc(&["eval", "--hyp", s(&h), "--ref", s(&r)])
            .status
            .code(),
        Some(3)
    );
}

struct Workspace {
    tmp: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }
}

const CONFIG: &str = r#"
seed = 5

[data]
vocab = "train/vocab.txt"
train_src = "train/src.txt"
train_tgt = "train/tgt.txt"
valid_src = "valid/src.txt"
valid_tgt = "valid/tgt.txt"

[encoder]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_positions = 64

[pretrain]
steps = 20
batch_sentences = 8
log_every = 10

[train]
lr = 1e-3
batch_tokens = 120
steps = 12
valid_every = 4
keep_best = 2

[ed]
start_step = 4
"#;

fn workspace(extra: &str) -> Workspace {
    let tmp = TempDir::new().unwrap();
    gen(&tmp.path().join("train"), "copy", 120, 1);
    gen(&tmp.path().join("valid"), "copy", 20, 2);
    let config = tmp.path().join("run.toml");
    fs::write(&config, format!("{CONFIG}{extra}")).unwrap();
    Workspace { tmp, config }
}

fn pretrain(ws: &Workspace) -> PathBuf {
    let out = ws.path("pre");
    ok(&["pretrain", "--config", s(&ws.config), "--out", s(&out)]);
    out.join("model.natc")
}

fn train(ws: &Workspace, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--config", s(&ws.config)];
    let out = ws.path(out);
    args.extend(["--out", s(&out)]);
    args.extend(extra);
    ok(&args)
}

fn log_records(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(' ').map(str::to_string).collect())
        .collect()
}

#[test]
fn pipeline_end_to_end() {
    let ws = workspace("");
    let pre = pretrain(&ws);
    assert_eq!(log_records(&ws.path("pre/pretrain.log")).len(), 20);

    let summary = train(&ws, "ed", &["--init-from", s(&pre)]);
    assert!(summary.contains("averaged 2 checkpoints"), "{summary}");
    let log = log_records(&ws.path("ed/train.log"));
    assert_eq!(log.len(), 12);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.len(), 6, "{r:?}");
        assert_eq!(r[0], i.to_string());
        assert!(r[1].parse::<f64>().unwrap().is_finite());
        let lambda: u8 = r[3].parse().unwrap();
        assert_eq!(lambda, u8::from(i >= 4));
        assert_eq!(r[2] == "-", lambda == 0);
        assert!(r[5].parse::<usize>().unwrap() <= 64);
    }
    let valid = log_records(&ws.path("ed/valid.log"));
    let steps: Vec<&str> = valid.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(steps, ["4", "8", "12"]);
    let kept: Vec<_> = fs::read_dir(ws.path("ed"))
        .unwrap()
        .filter_map(|e| {
            let n = e.unwrap().file_name().into_string().unwrap();
            n.starts_with("ckpt-").then_some(n)
        })
        .collect();
    assert_eq!(kept.len(), 2, "{kept:?}");
    let echoed = fs::read_to_string(ws.path("ed/config.toml")).unwrap();
    assert!(echoed.contains("init_from"), "{echoed}");

    let model = ws.path("ed/model.natc");
    let input = ws.path("valid/src.txt");
    let greedy = ok(&["decode", "--model", s(&model), "--input", s(&input)]);
    assert_eq!(greedy.lines().count(), 20);
    let again = ok(&["decode", "--model", s(&model), "--input", s(&input)]);
    assert_eq!(greedy, again);

    let no_lm = natctc(&[
        "decode",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--mode",
        "beam",
    ]);
    assert_eq!(no_lm.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_lm.stderr).contains("--lm"));
    let beam0 = ok(&[
        "decode",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--mode",
        "beam",
        "--alpha",
        "0",
        "--beta",
        "0",
    ]);
    assert_eq!(beam0.lines().count(), 20);

    let arpa = ws.path("lm.arpa");
    let lm = ok(&[
        "lm-train",
        "--tgt",
        s(&ws.path("train/tgt.txt")),
        "--vocab",
        s(&ws.path("train/vocab.txt")),
        "--out-arpa",
        s(&arpa),
    ]);
    assert!(lm.starts_with("order 4 ngrams "), "{lm}");
    let fused = [
        "decode",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--mode",
        "beam",
        "--lm",
        s(&arpa),
    ];
    let first = ok(&fused);
    assert_eq!(first.lines().count(), 20);
    assert_eq!(first, ok(&fused));
}

#[test]
fn no_ed_never_distills_and_dr_respects_positions() {
    let ws = workspace("");
    let summary = train(
        &ws,
        "plain",
        &[
            "--no-pretrain",
            "--no-ed",
            "--ratio",
            "4",
            "--ratio-mode",
            "dr",
        ],
    );
    assert!(summary.contains("averaged"), "{summary}");
    for r in log_records(&ws.path("plain/train.log")) {
        assert_eq!((r[2].as_str(), r[3].as_str()), ("-", "0"));
        assert!(r[5].parse::<usize>().unwrap() <= 64);
    }
    for r in log_records(&ws.path("plain/valid.log")) {
        assert_eq!(r[2], "-");
    }
}

#[test]
fn ed_without_teacher_is_a_usage_error() {
    let ws = workspace("");
    let out = natctc(&[
        "train",
        "--config",
        s(&ws.config),
        "--out",
        s(&ws.path("x")),
        "--no-pretrain",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error_naming_the_key() {
    let ws = workspace("\n[upsample]\nfactor = 3\n");
    let out = natctc(&[
        "train",
        "--config",
        s(&ws.config),
        "--out",
        s(&ws.path("x")),
        "--no-pretrain",
        "--no-ed",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("upsample") && err.contains("factor"), "{err}");
}

#[test]
fn missing_data_path_is_a_usage_error() {
    let ws = workspace("");
    fs::remove_file(ws.path("valid/tgt.txt")).unwrap();
    let out = natctc(&[
        "pretrain",
        "--config",
        s(&ws.config),
        "--out",
        s(&ws.path("p")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resume_continues_step_numbering() {
    let ws = workspace("");
    let flags = ["--no-pretrain", "--no-ed"];
    train(&ws, "full", &[&flags[..], &["--steps", "12"]].concat());
    train(&ws, "split", &[&flags[..], &["--steps", "8"]].concat());
    train(
        &ws,
        "split",
        &[&flags[..], &["--steps", "12", "--resume"]].concat(),
    );
    let full = fs::read_to_string(ws.path("full/train.log")).unwrap();
    let split = fs::read_to_string(ws.path("split/train.log")).unwrap();
    assert_eq!(full, split);
    let steps: Vec<String> = log_records(&ws.path("split/valid.log"))
        .into_iter()
        .map(|r| r[0].clone())
        .collect();
    assert_eq!(steps, ["4", "8", "12"]);
    assert_eq!(
        fs::read(ws.path("full/last.natc")).unwrap(),
        fs::read(ws.path("split/last.natc")).unwrap()
    );

    let out = natctc(&[
        "train",
        "--config",
        s(&ws.config),
        "--out",
        s(&ws.path("split")),
        "--no-pretrain",
        "--no-ed",
        "--lr",
        "0.5",
        "--resume",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resume mismatch"));
}

#[test]
fn prune_keeps_sizes_on_full_coverage_and_drops_unseen_types() {
    let ws = workspace("");
    train(&ws, "m", &["--no-pretrain", "--no-ed", "--steps", "4"]);
    let model = ws.path("m/model.natc");
    let full = ok(&[
        "prune-vocab",
        "--model",
        s(&model),
        "--corpus",
        s(&ws.path("train")),
        "--out",
        s(&ws.path("p1")),
    ]);
    assert_eq!(field(&full, "vocab_old"), field(&full, "vocab_new"));
    assert_eq!(field(&full, "params_delta"), "0");

    // A corpus using only three content types.
    let small = ws.path("small");
    fs::create_dir_all(&small).unwrap();
    let vocab = fs::read_to_string(ws.path("train/vocab.txt")).unwrap();
    let content: Vec<&str> = vocab.lines().skip(6).take(3).collect();
    let line = content.join(" ");
    fs::write(small.join("src.txt"), format!("{line}\n")).unwrap();
    fs::write(small.join("tgt.txt"), format!("{line}\n")).unwrap();
    let pruned = ok(&[
        "prune-vocab",
        "--model",
        s(&model),
        "--corpus",
        s(&small),
        "--out",
        s(&ws.path("p2")),
    ]);
    assert_eq!(field(&pruned, "vocab_new"), "9");
    let d_model = 16;
    // Each dropped type removes an embedding row, a projection row and a bias.
    let dropped = vocab.lines().count() as i64 - 9;
    assert_eq!(
        field(&pruned, "params_delta").parse::<i64>().unwrap(),
        -dropped * (2 * d_model + 1)
    );

    let input = small.join("src.txt");
    let before = ok(&["decode", "--model", s(&model), "--input", s(&input)]);
    let after = ok(&[
        "decode",
        "--model",
        s(&ws.path("p2/model.natc")),
        "--input",
        s(&input),
    ]);
    assert_eq!(
        fs::read_to_string(ws.path("p2/vocab.txt"))
            .unwrap()
            .lines()
            .count(),
        9
    );
    assert_eq!(before.lines().count(), after.lines().count());
}

#[test]
fn bench_reports_the_same_fields_for_any_repeat() {
    let ws = workspace("");
    train(&ws, "m", &["--no-pretrain", "--no-ed", "--steps", "4"]);
    let model = ws.path("m/model.natc");
    let input = ws.path("valid/src.txt");
    let keys = |text: &str| -> Vec<Vec<String>> {
        text.lines()
            .map(|l| {
                l.split(' ')
                    .map(|kv| kv.split('=').next().unwrap().to_string())
                    .collect()
            })
            .collect()
    };
    let one = ok(&[
        "bench",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--repeat",
        "1",
    ]);
    let many = ok(&[
        "bench",
        "--model",
        s(&model),
        "--input",
        s(&input),
        "--repeat",
        "100",
    ]);
    assert_eq!(keys(&one), keys(&many));
    assert_eq!(one.lines().count(), 3);
    assert!(one
        .lines()
        .last()
        .unwrap()
        .starts_with("ratio beam_over_greedy="));
    for l in one.lines().take(2) {
        for kv in l.split(' ').skip(1) {
            let (_, v) = kv.split_once('=').unwrap();
            assert!(v.parse::<f64>().is_ok(), "{l}");
        }
    }
}

#[test]
fn beam_is_not_faster_than_greedy() {
    let tmp = TempDir::new().unwrap();
    let ws = workspace("");
    train(&ws, "m", &["--no-pretrain", "--no-ed", "--steps", "4"]);
    gen(tmp.path(), "copy", 100, 9);
    let out = ok(&[
        "bench",
        "--model",
        s(&ws.path("m/model.natc")),
        "--input",
        s(&tmp.path().join("src.txt")),
        "--repeat",
        "3",
    ]);
    let ratio: f64 = out
        .lines()
        .last()
        .unwrap()
        .strip_prefix("ratio beam_over_greedy=")
        .unwrap()
        .parse()
        .unwrap();
    assert!(ratio >= 1.0, "{out}");
}
