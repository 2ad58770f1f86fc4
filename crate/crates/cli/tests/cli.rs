use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ivqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivqa"))
        .args(args)
        .output()
        .expect("spawn ivqa")
}

fn ok(args: &[&str]) -> String {
    let out = ivqa(args);
    assert!(
        out.status.success(),
        "ivqa {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data, its vocabulary and a briefly trained checkpoint.
struct Run {
    dir: TempDir,
}

impl Run {
    fn new(extra: &[&str]) -> Self {
        let dir = TempDir::new().unwrap();
        let run = Self { dir };
        ok(&["synth", "--out-dir", s(run.dir.path())]);
        ok(&[
            "build-vocab",
            "--data",
            s(&run.path("dataset.jsonl")),
            "--out",
            s(run.dir.path()),
        ]);
        let mut args = vec![
            "train",
            "--data",
            "DATA",
            "--features",
            "FEAT",
            "--vocab",
            "VOCAB",
            "--out",
            "OUT",
            "--epochs",
            "3",
            "--lr",
            "5e-3",
        ];
        args.extend_from_slice(extra);
        let (data, feat, vocab, out) = (
            run.path("dataset.filtered.jsonl"),
            run.path("features.jsonl"),
            run.path("vocab.txt"),
            run.path("run"),
        );
        let args: Vec<&str> = args
            .into_iter()
            .map(|a| match a {
                "DATA" => s(&data),
                "FEAT" => s(&feat),
                "VOCAB" => s(&vocab),
                "OUT" => s(&out),
                other => other,
            })
            .collect();
        let stdout = ok(&args);
        assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 3);
        run.write_inputs();
        run
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write_inputs(&self) {
        let data = fs::read_to_string(self.path("dataset.jsonl")).unwrap();
        let lines: Vec<String> = data
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                serde_json::json!({"image_id": v["image_id"], "answer": v["answer"]}).to_string()
            })
            .collect();
        fs::write(self.path("inputs.jsonl"), lines.join("\n") + "\n").unwrap();
    }

    fn generate(&self, out: &str, extra: &[&str]) -> Vec<serde_json::Value> {
        let (ckpt, feat, input, out) = (
            self.path("run/model.ckpt"),
            self.path("features.jsonl"),
            self.path("inputs.jsonl"),
            self.path(out),
        );
        let mut args = vec![
            "generate",
            "--ckpt",
            s(&ckpt),
            "--features",
            s(&feat),
            "--input",
            s(&input),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        read_jsonl(&out)
    }
}

fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn build_vocab_is_idempotent_and_reserves_first_lines() {
    let dir = TempDir::new().unwrap();
    ok(&["synth", "--out-dir", s(dir.path())]);
    let data = dir.path().join("dataset.jsonl");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["build-vocab", "--data", s(&data), "--out", s(&a)]);
    ok(&["build-vocab", "--data", s(&data), "--out", s(&b)]);
    for f in ["vocab.txt", "dataset.filtered.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let vocab = fs::read_to_string(a.join("vocab.txt")).unwrap();
    let head: Vec<&str> = vocab.lines().take(3).collect();
    assert_eq!(head, ["<pad>", "<start>", "<unk>"]);
}

#[test]
fn answer_top_one_keeps_the_modal_answer() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d.jsonl");
    let rows = [
        ("a", "red", "what color ?"),
        ("b", "red", "which color ?"),
        ("c", "two", "how many ?"),
    ];
    let text: String = rows
        .iter()
        .map(|(i, a, q)| format!("{}\n", serde_json::json!({"image_id": i, "answer": a, "question": q})))
        .collect();
    fs::write(&data, text).unwrap();
    ok(&["build-vocab", "--data", s(&data), "--answer-top", "1", "--out", s(dir.path())]);
    let kept = read_jsonl(&dir.path().join("dataset.filtered.jsonl"));
    assert_eq!(kept.len(), 2);
    assert!(kept.iter().all(|r| r["answer"] == "red"));
}

#[test]
fn missing_features_exits_2_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("no_such_features.jsonl");
    let out_dir = dir.path().join("out");
    let out = ivqa(&[
        "train",
        "--data",
        "d.jsonl",
        "--features",
        s(&missing),
        "--vocab",
        "v.txt",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("no_such_features.jsonl"), "{err}");
    assert!(!out_dir.exists(), "nothing may be written before inputs validate");
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs = 2\nhiden = 8\n").unwrap();
    let out = ivqa(&["train", "--config", s(&cfg), "--print-config"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run.cfg:2") && err.contains("hiden"), "{err}");
}

#[test]
fn full_preset_echo() {
    let text = ok(&["train", "--preset", "full", "--print-config"]);
    for line in [
        "hidden = 1280",
        "att_hidden = 512",
        "k = 36",
        "lr_initial = 0.00099",
        "lr_after = 0.000099",
        "epochs = 14",
        "batch_size = 1000",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line:?}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs = 2\nbatch_size = 4 # small\n").unwrap();
    let text = ok(&["train", "--config", s(&cfg), "--epochs", "7", "--print-config"]);
    assert!(text.contains("epochs = 7\n"));
    assert!(text.contains("batch_size = 4\n"));
}

#[test]
fn ablated_training_and_decoding_complete() {
    let run = Run::new(&["--ablate"]);
    let rows = run.generate("gen.jsonl", &[]);
    assert_eq!(rows.len(), 8);
    let csv = fs::read_to_string(run.path("run/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn generation_modes() {
    let run = Run::new(&[]);

    let a = run.generate("a.jsonl", &["--beam", "1"]);
    run.generate("b.jsonl", &["--beam", "1", "--workers", "3"]);
    assert_eq!(fs::read(run.path("a.jsonl")).unwrap(), fs::read(run.path("b.jsonl")).unwrap());
    assert_eq!(a.len(), 8);
    assert!(a
        .iter()
        .all(|r| r["question"].is_string() && r["logprob"].as_f64().unwrap() <= 0.0));

    let ranked = run.generate("beam.jsonl", &["--beam", "4", "--top", "3"]);
    assert_eq!(ranked.len(), 3 * 8);
    for group in ranked.chunks(3) {
        assert!(group.iter().all(|r| r["image_id"] == group[0]["image_id"]));
        let lp: Vec<f64> = group.iter().map(|r| r["logprob"].as_f64().unwrap()).collect();
        assert!(lp[0] >= lp[1] && lp[1] >= lp[2], "{lp:?}");
    }

    let trace = run.path("trace.jsonl");
    let greedy = run.generate("t.jsonl", &["--trace", s(&trace)]);
    let rows = read_jsonl(&trace);
    let words: usize = greedy
        .iter()
        .map(|r| r["question"].as_str().unwrap().split_whitespace().count())
        .sum();
    assert_eq!(rows.len(), words);
    for r in &rows {
        let beta: Vec<f64> = r["beta"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(beta.len(), 4);
        assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    let report = ok(&[
        "evaluate",
        "--generated",
        s(&run.path("a.jsonl")),
        "--gold",
        s(&run.path("dataset.jsonl")),
    ]);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["n_pairs"], 8);
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"] {
        assert!(report[key].as_f64().unwrap() >= 0.0, "{key}");
    }
}

#[test]
fn generate_rejects_features_of_another_shape() {
    let run = Run::new(&[]);
    let other = run.path("other");
    ok(&["synth", "--dv", "7", "--out-dir", s(&other)]);
    let out_file = run.path("never.jsonl");
    let out = ivqa(&[
        "generate",
        "--ckpt",
        s(&run.path("run/model.ckpt")),
        "--features",
        s(&other.join("features.jsonl")),
        "--input",
        s(&run.path("inputs.jsonl")),
        "--out",
        s(&out_file),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_file.exists());
}

#[test]
fn gradcheck_exit_codes() {
    let pass = ivqa(&["gradcheck", "--seed", "42"]);
    assert_eq!(pass.status.code(), Some(0), "{}", String::from_utf8_lossy(&pass.stdout));
    let stdout = String::from_utf8_lossy(&pass.stdout);
    for group in [
        "answer_gru",
        "visual_attention",
        "semantic_attention",
        "mfb",
        "encoder_gru",
        "output",
    ] {
        assert!(stdout.lines().any(|l| l.starts_with(group)), "{group} missing from\n{stdout}");
    }

    let fail = ivqa(&["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(fail.status.code(), Some(1));
}
