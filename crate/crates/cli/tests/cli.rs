use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use longform_rnnt::checkpoint::Checkpoint;
use longform_rnnt::corpus::load_corpus;
use longform_rnnt::decoder::{greedy_decode, DecodeRecord};

const TINY: &str = "\
[train]
batch_size = 4
steps = 30
eval_every = 10
train_domains = search

[data]
domains = search,telephony
train_utts_per_domain = 40
test_utts_per_domain = 20
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfrnnt"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn lfrnnt")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "lfrnnt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.ini"), config).unwrap();
        Self { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn file(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn datagen(&self, out: &str) {
        ok(self.path(), &["datagen", "--config", "tiny.ini", "--out", out]);
    }

    fn train(&self, out: &str, extra: &[&str]) {
        let mut args = vec!["train", "--config", "tiny.ini", "--data", "data", "--out", out];
        args.extend_from_slice(extra);
        ok(self.path(), &args);
    }
}

fn read_records(path: &Path) -> Vec<DecodeRecord> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn write_records(path: &Path, records: &[DecodeRecord]) {
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    fs::write(path, text).unwrap();
}

fn csv_field(csv: &str, row: usize, column: &str) -> f64 {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap();
    lines.nth(row).unwrap().split(',').nth(idx).unwrap().parse().unwrap()
}

#[test]
fn datagen_is_seeded_and_refuses_to_overwrite() {
    let ws = Workspace::new(TINY);
    ws.datagen("a");
    ws.datagen("b");
    for set in ["train", "test_search", "test_telephony", "longform_x5"] {
        let a = fs::read(ws.file(&format!("a/{set}/manifest.jsonl"))).unwrap();
        let b = fs::read(ws.file(&format!("b/{set}/manifest.jsonl"))).unwrap();
        assert_eq!(a, b, "{set}");
    }
    assert_eq!(
        fs::read_to_string(ws.file("a/test_sets.txt")).unwrap(),
        "test_search\ntest_telephony\nlongform_x1\nlongform_x5\nlongform_x20\n"
    );
    let out = run(ws.path(), &["datagen", "--config", "tiny.ini", "--out", "a"]);
    assert_eq!(out.status.code(), Some(2));
    ok(ws.path(), &["datagen", "--config", "tiny.ini", "--out", "a", "--force", "--seed", "7"]);
    assert_ne!(
        fs::read(ws.file("a/train/manifest.jsonl")).unwrap(),
        fs::read(ws.file("b/train/manifest.jsonl")).unwrap()
    );
}

#[test]
fn datagen_with_zero_utterances_writes_empty_manifests() {
    let ws = Workspace::new("[data]\ntrain_utts_per_domain = 0\ntest_utts_per_domain = 0\n");
    ws.datagen("data");
    assert_eq!(fs::read_to_string(ws.file("data/train/manifest.jsonl")).unwrap(), "");
    assert_eq!(fs::read_to_string(ws.file("data/longform_x20/manifest.jsonl")).unwrap(), "");
}

#[test]
fn default_recipe_has_one_dominant_and_one_tiny_domain() {
    let ws = Workspace::new("");
    let out = ok(ws.path(), &["inspect", "--defaults"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("domains = search,farfield,telephony,youtube"));
    let domains = longform_rnnt::recipe::DataConfig::default().build_domains().unwrap();
    let total: f64 = domains.iter().map(|d| d.weight_hours).sum();
    let share = |n: &str| domains.iter().find(|d| d.name == n).unwrap().weight_hours / total;
    assert!(share("youtube") > 0.5);
    assert!(share("telephony") < 0.02);
}

#[test]
fn zero_steps_writes_only_the_initial_evaluation() {
    let ws = Workspace::new(TINY);
    ws.datagen("data");
    ws.train("run", &["--steps", "0"]);
    let csv = fs::read_to_string(ws.file("run/metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.starts_with("0,,")));
}

#[test]
fn resume_continues_step_numbering_exactly() {
    let ws = Workspace::new(TINY);
    ws.datagen("data");
    ws.train("full", &["--state-strategy", "rsp"]);
    ws.train("split", &["--state-strategy", "rsp", "--steps", "10"]);
    ok(
        ws.path(),
        &["train", "--resume", "split/checkpoint.bin", "--steps", "30", "--data", "data", "--out", "split"],
    );
    assert_eq!(
        fs::read_to_string(ws.file("full/metrics.csv")).unwrap(),
        fs::read_to_string(ws.file("split/metrics.csv")).unwrap()
    );
    assert!(fs::read(ws.file("full/checkpoint.bin")).unwrap() == fs::read(ws.file("split/checkpoint.bin")).unwrap());
    let out = ok(ws.path(), &["inspect", "split/checkpoint.bin"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("step 30"));
    assert!(text.contains("strategy rsp"));
}

#[test]
fn decode_and_eval_round_trip() {
    let ws = Workspace::new(TINY);
    ws.datagen("data");
    ws.train("run", &[]);
    let decode = |out: &str, beam: &str| {
        ok(
            ws.path(),
            &["decode", "--checkpoint", "run/checkpoint.bin", "--manifest", "data/test_search", "--beam", beam, "--out", out],
        );
    };
    decode("b1.jsonl", "1");
    decode("b1_again.jsonl", "1");
    decode("b4.jsonl", "4");
    assert_eq!(fs::read(ws.file("b1.jsonl")).unwrap(), fs::read(ws.file("b1_again.jsonl")).unwrap());

    // Beam 1 reproduces greedy decoding.
    let ckpt = Checkpoint::load(&ws.file("run/checkpoint.bin")).unwrap();
    let utts = load_corpus(&ws.file("data/test_search")).unwrap();
    let records = read_records(&ws.file("b1.jsonl"));
    assert_eq!(records.len(), utts.len());
    for (r, u) in records.iter().zip(&utts) {
        let g = greedy_decode(&ckpt.model, &u.features, &ckpt.model.zero_state()).unwrap();
        assert_eq!(r.utterance_id, u.id);
        assert_eq!(r.tokens, g.tokens);
    }

    // A barely trained model collapses to blanks: deletions dominate.
    ok(
        ws.path(),
        &["eval", "--hyps", "b4.jsonl", "--manifest", "data/test_search", "--name", "test_search", "--out", "wer.csv"],
    );
    let csv = fs::read_to_string(ws.file("wer.csv")).unwrap();
    let del = csv_field(&csv, 0, "del_rate");
    assert!(del > csv_field(&csv, 0, "ins_rate") + csv_field(&csv, 0, "sub_rate"), "{csv}");

    // Perfect and empty hypotheses.
    let perfect: Vec<DecodeRecord> = utts
        .iter()
        .map(|u| DecodeRecord {
            utterance_id: u.id.clone(),
            tokens: u.tokens.clone(),
            text: String::new(),
            log_prob: 0.0,
            frames: 0,
        })
        .collect();
    write_records(&ws.file("perfect.jsonl"), &perfect);
    ok(ws.path(), &["eval", "--hyps", "perfect.jsonl", "--manifest", "data/test_search", "--out", "p.csv"]);
    let csv = fs::read_to_string(ws.file("p.csv")).unwrap();
    for col in ["wer", "del_rate", "ins_rate", "sub_rate"] {
        assert_eq!(csv_field(&csv, 0, col), 0.0);
    }
    let empty: Vec<DecodeRecord> = perfect
        .iter()
        .map(|r| DecodeRecord {
            tokens: vec![],
            ..r.clone()
        })
        .collect();
    write_records(&ws.file("empty.jsonl"), &empty);
    ok(ws.path(), &["eval", "--hyps", "empty.jsonl", "--manifest", "data/test_search", "--out", "e.csv"]);
    let csv = fs::read_to_string(ws.file("e.csv")).unwrap();
    assert_eq!(csv_field(&csv, 0, "wer"), 1.0);
    assert_eq!(csv_field(&csv, 0, "del_rate"), 1.0);

    // Missing ids are listed and the command fails.
    write_records(&ws.file("partial.jsonl"), &perfect[..perfect.len() - 2]);
    let out = run(ws.path(), &["eval", "--hyps", "partial.jsonl", "--manifest", "data/test_search"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains(&utts[utts.len() - 1].id) && stderr.contains(&utts[utts.len() - 2].id));
}

#[test]
fn decode_refuses_a_vocabulary_mismatch() {
    let ws = Workspace::new(TINY);
    ws.datagen("data");
    fs::write(ws.file("small.ini"), "[data]\nvocab_size = 4\n[train]\nsteps = 0\n").unwrap();
    fs::create_dir_all(ws.file("small_data")).unwrap();
    ok(ws.path(), &["datagen", "--config", "small.ini", "--out", "small_data", "--force"]);
    ok(ws.path(), &["train", "--config", "small.ini", "--data", "small_data", "--out", "small_run"]);
    let out = run(
        ws.path(),
        &["decode", "--checkpoint", "small_run/checkpoint.bin", "--manifest", "data/test_search"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("vocab mismatch"));
}

#[test]
fn error_exit_codes() {
    let ws = Workspace::new("[train]\nbatchsize = 3\n");
    assert_eq!(run(ws.path(), &["datagen", "--config", "tiny.ini", "--out", "d"]).status.code(), Some(2));
    assert_eq!(run(ws.path(), &["inspect", "missing.bin"]).status.code(), Some(3));
    fs::write(ws.file("garbage.bin"), b"not a checkpoint").unwrap();
    assert_eq!(run(ws.path(), &["inspect", "garbage.bin"]).status.code(), Some(3));
}
