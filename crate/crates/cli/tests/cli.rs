use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const HEB: [&str; 12] = [
    "שלום", "עולם", "ספר", "בית", "ילד", "ים", "שמש", "עיר", "דרך", "לחם", "מים", "אור",
];

fn text(seed: usize, n: usize) -> String {
    (0..n)
        .map(|i| format!("{}{}", HEB[(i * 7 + seed) % HEB.len()], (i * 31 + seed * 1009) % 997))
        .collect::<Vec<_>>()
        .join(" ")
}

fn write_docs(path: &Path, docs: &[(&str, String)]) {
    let body: String = docs
        .iter()
        .map(|(id, t)| serde_json::json!({ "id": id, "text": t }).to_string() + "\n")
        .collect();
    fs::write(path, body).unwrap();
}

fn corpuskit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corpuskit"))
        .current_dir(dir)
        .env_remove("CORPUSKIT_SEED")
        .env_remove("CORPUSKIT_WORKERS")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stats_prints_one_row_per_input() {
    let dir = tempfile::tempdir().unwrap();
    write_docs(&dir.path().join("a.jsonl"), &[("1", "שלום עולם".into()), ("2", "a b c".into())]);
    let out = corpuskit(dir.path(), &["stats", "--input", "mc4=a.jsonl"]);
    assert!(out.status.success());
    let s = stdout(&out);
    assert_eq!(s.lines().count(), 2);
    assert!(s.lines().nth(1).unwrap().split_whitespace().eq(["mc4", "22", "2", "5"]));
}

#[test]
fn exit_codes_distinguish_usage_input_and_stage() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(corpuskit(dir.path(), &["stats"]).status.code(), Some(2));
    assert_eq!(corpuskit(dir.path(), &["stats", "--nope"]).status.code(), Some(2));
    assert_eq!(corpuskit(dir.path(), &["stats", "--input", "nolabel"]).status.code(), Some(2));
    assert_eq!(corpuskit(dir.path(), &["stats", "--input", "a=missing.jsonl"]).status.code(), Some(3));

    write_docs(&dir.path().join("a.jsonl"), &[("1", text(1, 30))]);
    fs::write(dir.path().join("blocker"), "").unwrap();
    let out = corpuskit(dir.path(), &["pipeline", "--input", "a=a.jsonl", "--output", "blocker"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn duplicate_ids_across_inputs_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_docs(&dir.path().join("a.jsonl"), &[("x", "one".into())]);
    write_docs(&dir.path().join("b.jsonl"), &[("x", "two".into())]);
    let out = corpuskit(dir.path(), &["stats", "-i", "a=a.jsonl", "-i", "b=b.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("a.jsonl:1"));
}

#[test]
fn dedup_two_inputs_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let shared = text(5, 80);
    write_docs(&dir.path().join("a.jsonl"), &[("a1", shared.clone()), ("a2", text(6, 80)), ("a3", text(6, 80))]);
    write_docs(&dir.path().join("b.jsonl"), &[("b1", shared), ("b2", text(7, 80))]);
    let out = corpuskit(dir.path(), &["dedup", "-i", "a=a.jsonl", "-i", "b=b.jsonl", "-o", "out"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["within"][0]["report"]["exact_removed"], 1);
    assert_eq!(report["across"]["removed"], 1);
    let corpus = fs::read_to_string(dir.path().join("out/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 3);
    assert!(dir.path().join("out/merged.signatures.bin").exists());
}

#[test]
fn clean_respects_config_file() {
    let dir = tempfile::tempdir().unwrap();
    write_docs(&dir.path().join("a.jsonl"), &[("ok", text(1, 40)), ("short", text(2, 5))]);
    fs::write(dir.path().join("c.toml"), "[filters]\nmin_words = 10\n").unwrap();
    let out = corpuskit(
        dir.path(),
        &["clean", "-i", "a=a.jsonl", "--config", "c.toml", "-o", "kept.jsonl", "--report", "r.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("kept.jsonl")).unwrap().lines().count(), 1);
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["rejected"]["too_few_words"], 1);

    fs::write(dir.path().join("bad.toml"), "[filters]\nmin_wordz = 10\n").unwrap();
    let out = corpuskit(dir.path(), &["clean", "-i", "a=a.jsonl", "--config", "bad.toml", "-o", "k.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_tokenize_longshare_chain() {
    let dir = tempfile::tempdir().unwrap();
    write_docs(&dir.path().join("a.jsonl"), &[("1", text(1, 200)), ("2", "קצר".into())]);
    let out = corpuskit(dir.path(), &["train-bpe", "-i", "a=a.jsonl", "--vocab-size", "300", "-o", "vocab"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("vocab/merges.txt").exists());

    let out = corpuskit(dir.path(), &["tokenize", "-i", "a=a.jsonl", "--vocab", "vocab", "-o", "tok.jsonl"]);
    assert!(out.status.success());
    let toks = fs::read_to_string(dir.path().join("tok.jsonl")).unwrap();
    let first: Value = serde_json::from_str(toks.lines().next().unwrap()).unwrap();
    assert_eq!(first["doc_id"], "1");

    let out = corpuskit(
        dir.path(),
        &["longshare", "-i", "a=a.jsonl", "--vocab", "vocab", "--limit", "10", "--report", "ls.json"],
    );
    assert!(out.status.success());
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ls.json")).unwrap()).unwrap();
    assert_eq!(r["long_documents"], 1);
    assert_eq!(r["fraction"], 0.5);
}

#[test]
fn eval_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("qa.jsonl"), "{\"pred\":\"the  cat!\",\"answers\":[\"the cat\",\"a dog\"]}\n").unwrap();
    let out = corpuskit(p, &["eval", "--task", "qa", "--input", "qa.jsonl", "--report", "qa.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(p.join("qa.json")).unwrap()).unwrap();
    assert_eq!(r["exact_match"], 1.0);

    fs::write(
        p.join("ner.jsonl"),
        "{\"pred\":[\"B-PER\",\"I-PER\",\"O\"],\"gold\":[\"B-PER\",\"I-PER\",\"B-LOC\"]}\n",
    )
    .unwrap();
    let out = corpuskit(p, &["eval", "--task", "ner", "--input", "ner.jsonl"]);
    let r: Value = serde_json::from_str(&stdout(&out).lines().skip(1).collect::<String>()).unwrap();
    assert_eq!(r["precision"], 1.0);
    assert_eq!(r["recall"], 0.5);

    let cls: String = [("pos", "pos", 0), ("neg", "pos", 0), ("pos", "pos", 1), ("neg", "neg", 1), ("pos", "pos", 2)]
        .iter()
        .map(|(pr, g, s)| serde_json::json!({"pred": pr, "gold": g, "split": s}).to_string() + "\n")
        .collect();
    fs::write(p.join("cls.jsonl"), cls).unwrap();
    let out = corpuskit(
        p,
        &["eval", "--task", "cls", "--input", "cls.jsonl", "--positive", "pos", "--split-field", "split", "--report", "cls.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(p.join("cls.json")).unwrap()).unwrap();
    let mean = r["mean"].as_f64().unwrap();
    assert!((mean - (2.0 / 3.0 + 1.0 + 1.0) / 3.0).abs() < 1e-12);

    assert_eq!(corpuskit(p, &["eval", "--task", "cls", "--input", "cls.jsonl"]).status.code(), Some(2));
    assert_eq!(corpuskit(p, &["eval", "--task", "qa"]).status.code(), Some(2));
}

#[test]
fn pipeline_from_config_with_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_docs(&p.join("a.jsonl"), &[("a1", text(1, 60)), ("a2", text(1, 60)), ("a3", text(2, 60))]);
    write_docs(&p.join("b.jsonl"), &[("b1", text(2, 60)), ("b2", text(3, 60)), ("b3", "x y".into())]);
    fs::write(
        p.join("run.toml"),
        "output_dir = \"run\"\n[[sources]]\nlabel = \"a\"\npath = \"a.jsonl\"\n[[sources]]\nlabel = \"b\"\npath = \"b.jsonl\"\n[tokenizer]\nvocab_size = 280\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_corpuskit"))
        .current_dir(p)
        .env("CORPUSKIT_SEED", "9")
        .env("CORPUSKIT_WORKERS", "2")
        .args(["pipeline", "--config", "run.toml"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = stdout(&out);
    assert!(table.contains("merged/deduplicated") && table.contains("cleaned"));
    let report: Value = serde_json::from_str(&fs::read_to_string(p.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 9);
    let docs: Vec<u64> = report["stages"].as_array().unwrap().iter().map(|s| s["documents"].as_u64().unwrap()).collect();
    assert_eq!(docs, [3, 3, 2, 3, 4, 3]);
    assert!(p.join("run/tokenizer/vocab.txt").exists());
    let resolved = fs::read_to_string(p.join("run/config.toml")).unwrap();
    assert!(resolved.contains("seed = 9"));
}
