use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use corpuskit::bpe::{self, BpeVocab};
use corpuskit::clean::clean_corpus;
use corpuskit::corpus::{read_corpus, stage_stats, write_jsonl, IdRegistry, SourceSpec};
use corpuskit::dedup::{dedup_across, dedup_corpus};
use corpuskit::metrics::{self, MetricReport, NerExample, QaExample};
use corpuskit::minhash::write_signatures;
use corpuskit::pipeline::{run_pipeline, PipelineConfig};
use corpuskit::{Document, Error, StageStats};

const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_STAGE: u8 = 4;

#[derive(Parser)]
#[command(name = "corpuskit", version, about = "Corpus deduplication, cleaning, tokenizer training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Input corpus as label=path (repeatable). `eval` also takes a bare path.
    #[arg(long = "input", short = 'i')]
    inputs: Vec<String>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    #[arg(long, env = "CORPUSKIT_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, env = "CORPUSKIT_WORKERS")]
    workers: Option<usize>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Size table for each input.
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Near-duplicate removal within each input, then across inputs.
    Dedup {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Quality filters.
    Clean {
        #[command(flatten)]
        common: Common,
    },
    /// Train a byte-level BPE vocabulary.
    TrainBpe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Encode documents into token ids.
    Tokenize {
        #[command(flatten)]
        common: Common,
        /// Directory holding vocab.txt and merges.txt.
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Share of documents longer than a token limit.
    Longshare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score predictions against gold labels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Positive label for `cls`.
        #[arg(long)]
        positive: Option<String>,
        /// Record field naming the split; scores are averaged over splits.
        #[arg(long)]
        split_field: Option<String>,
    },
    /// Full build: ingest, dedup, cross-dedup, clean, tokenizer, long-doc share.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Sa,
    Ner,
    Qa,
    Cls,
}

enum Failure {
    Usage(anyhow::Error),
    Input(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.into()),
            e if e.is_input_error() => Failure::Input(e.into()),
            e => Failure::Stage(e.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn input_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Input(e.into())
}

fn stage_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Stage(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind, err) = match f {
                Failure::Usage(e) => (EXIT_USAGE, "usage", e),
                Failure::Input(e) => (EXIT_INPUT, "input", e),
                Failure::Stage(e) => (EXIT_STAGE, "stage", e),
            };
            eprintln!("corpuskit: {kind} error: {}", describe(&err));
            ExitCode::from(code)
        }
    }
}

/// Error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Stats { common } => {
            init_pool(&common, None)?;
            cmd_stats(&common)
        }
        Command::Dedup { common, threshold } => {
            let cfg = load_config(&common)?;
            init_pool(&common, Some(&cfg))?;
            cmd_dedup(&common, cfg, threshold)
        }
        Command::Clean { common } => {
            let cfg = load_config(&common)?;
            init_pool(&common, Some(&cfg))?;
            cmd_clean(&common, &cfg)
        }
        Command::TrainBpe { common, vocab_size } => {
            let cfg = load_config(&common)?;
            init_pool(&common, Some(&cfg))?;
            cmd_train(&common, &cfg, vocab_size)
        }
        Command::Tokenize { common, vocab } => {
            init_pool(&common, None)?;
            cmd_tokenize(&common, &vocab)
        }
        Command::Longshare { common, vocab, limit } => {
            let cfg = load_config(&common)?;
            init_pool(&common, Some(&cfg))?;
            cmd_longshare(&common, &vocab, limit.unwrap_or(cfg.long_doc_limit))
        }
        Command::Eval {
            common,
            task,
            positive,
            split_field,
        } => cmd_eval(&common, task, positive, split_field),
        Command::Pipeline { common } => cmd_pipeline(&common),
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::from_path(path).map_err(|e| match e {
            Error::Io { .. } => Failure::from(e),
            e => usage(e.to_string()),
        })?,
        None => PipelineConfig::new(Vec::new(), "out"),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if !common.inputs.is_empty() {
        cfg.sources = sources(common)?;
    }
    if let Some(out) = &common.output {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn init_pool(common: &Common, cfg: Option<&PipelineConfig>) -> Outcome {
    let workers = common.workers.or(cfg.map(|c| c.workers)).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

fn sources(common: &Common) -> Result<Vec<SourceSpec>, Failure> {
    if common.inputs.is_empty() {
        return Err(usage("at least one --input label=path is required"));
    }
    common
        .inputs
        .iter()
        .map(|s| s.parse::<SourceSpec>().map_err(|e| usage(e.to_string())))
        .collect()
}

/// Reads every source through one id registry, logging skipped lines.
fn load_sources(specs: &[SourceSpec]) -> Result<Vec<(String, Vec<Document>)>, Failure> {
    if specs.is_empty() {
        return Err(usage("no inputs: pass --input label=path or list sources in --config"));
    }
    let mut registry = IdRegistry::new();
    let mut out = Vec::new();
    for s in specs {
        let loaded = read_corpus(&s.path, &s.label, &mut registry)?;
        for e in &loaded.errors {
            log::warn!("{}:{}: {}", e.path.display(), e.line, e.message);
        }
        out.push((s.label.clone(), loaded.docs));
    }
    Ok(out)
}

fn load_all(common: &Common) -> Result<Vec<Document>, Failure> {
    Ok(load_sources(&sources(common)?)?.into_iter().flat_map(|(_, d)| d).collect())
}

fn write_report<T: serde::Serialize>(common: &Common, value: &T) -> Outcome {
    let json = serde_json::to_string_pretty(value).map_err(stage_err)?;
    match &common.report {
        Some(path) => fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display())).map_err(stage_err),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn require_output(common: &Common) -> Result<&Path, Failure> {
    common.output.as_deref().ok_or_else(|| usage("--output is required"))
}

fn cmd_stats(common: &Common) -> Outcome {
    let rows: Vec<StageStats> = load_sources(&sources(common)?)?
        .iter()
        .map(|(label, docs)| stage_stats(docs, label))
        .collect();
    print!("{}", corpuskit::corpus::render_table(&rows));
    if common.report.is_some() {
        write_report(common, &rows)?;
    }
    Ok(())
}

fn cmd_dedup(common: &Common, cfg: PipelineConfig, threshold: Option<f64>) -> Outcome {
    let out = require_output(common)?;
    let mut params = cfg.minhash_params();
    if let Some(t) = threshold {
        params.threshold = t;
    }
    params.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let corpora = load_sources(&cfg.sources)?;
    let mut within = Vec::new();
    let mut deduped = Vec::new();
    for (label, docs) in corpora {
        let outcome = dedup_corpus(docs, &params)?;
        write_signatures(out.join(format!("{label}.signatures.bin")), &outcome.signatures)?;
        within.push((label.clone(), outcome.report));
        deduped.push((label, outcome.survivors));
    }
    let (survivors, cross) = if deduped.len() >= 2 {
        let outcome = dedup_across(deduped, &params)?;
        write_signatures(out.join("merged.signatures.bin"), &outcome.signatures)?;
        (outcome.survivors, Some(outcome.report))
    } else {
        (deduped.into_iter().flat_map(|(_, d)| d).collect(), None)
    };
    write_jsonl(out.join("corpus.jsonl"), &survivors)?;
    let mut rows: Vec<StageStats> = within.iter().map(|(label, r)| renamed(&r.after, label)).collect();
    rows.push(stage_stats(&survivors, "merged"));
    print!("{}", corpuskit::corpus::render_table(&rows));
    let within: Vec<Value> = within
        .into_iter()
        .map(|(source, report)| serde_json::json!({ "source": source, "report": report }))
        .collect();
    let report = serde_json::json!({ "within": within, "across": cross });
    let common = Common {
        report: Some(common.report.clone().unwrap_or_else(|| out.join("report.json"))),
        ..common.clone()
    };
    write_report(&common, &report)
}

fn renamed(s: &StageStats, stage: &str) -> StageStats {
    StageStats {
        stage: stage.to_string(),
        ..s.clone()
    }
}

fn cmd_clean(common: &Common, cfg: &PipelineConfig) -> Outcome {
    let out = require_output(common)?;
    let docs = load_sources(&cfg.sources)?.into_iter().flat_map(|(_, d)| d).collect();
    let (kept, report) = clean_corpus(docs, &cfg.filters)?;
    write_jsonl(out, &kept)?;
    print!("{}", corpuskit::corpus::render_table(&[report.before.clone(), report.after.clone()]));
    if common.report.is_some() {
        write_report(common, &report)?;
    }
    Ok(())
}

fn cmd_train(common: &Common, cfg: &PipelineConfig, vocab_size: Option<usize>) -> Outcome {
    let out = require_output(common)?;
    let size = vocab_size
        .or(cfg.tokenizer.vocab_size)
        .ok_or_else(|| usage("--vocab-size is required"))?;
    let docs: Vec<Document> = load_sources(&cfg.sources)?.into_iter().flat_map(|(_, d)| d).collect();
    let vocab = bpe::train_bpe(&docs, size, cfg.tokenizer.specials.clone())?;
    vocab.save(out)?;
    let summary = serde_json::json!({
        "vocab_size": vocab.vocab_size(),
        "merges": vocab.merges().len(),
        "specials": vocab.specials(),
    });
    println!("trained {} merges, vocabulary size {}", vocab.merges().len(), vocab.vocab_size());
    if common.report.is_some() {
        write_report(common, &summary)?;
    }
    Ok(())
}

fn cmd_tokenize(common: &Common, vocab_dir: &Path) -> Outcome {
    let vocab = BpeVocab::load(vocab_dir)?;
    let docs = load_all(common)?;
    let seqs: Vec<bpe::TokenSequence> = {
        use rayon::prelude::*;
        docs.par_iter().map(|d| bpe::encode(d.id(), d.text(), &vocab)).collect()
    };
    let write = |w: &mut dyn Write| -> std::io::Result<()> {
        for s in &seqs {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    match &common.output {
        Some(path) => {
            let f = fs::File::create(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            write(&mut BufWriter::new(f)).map_err(stage_err)
        }
        None => write(&mut std::io::stdout().lock()).map_err(stage_err),
    }
}

fn cmd_longshare(common: &Common, vocab_dir: &Path, limit: usize) -> Outcome {
    let vocab = BpeVocab::load(vocab_dir)?;
    let docs = load_all(common)?;
    let share = bpe::long_doc_share(&docs, &vocab, limit);
    println!(
        "{} of {} documents exceed {} tokens ({:.3})",
        share.long_documents, share.documents, share.limit, share.fraction
    );
    if common.report.is_some() {
        write_report(common, &share)?;
    }
    Ok(())
}

fn eval_path(common: &Common) -> Result<PathBuf, Failure> {
    match common.inputs.as_slice() {
        [one] => Ok(match one.split_once('=') {
            Some((_, p)) if !Path::new(one).exists() => PathBuf::from(p),
            _ => PathBuf::from(one),
        }),
        [] => Err(usage("eval needs --input with a predictions file")),
        _ => Err(usage("eval takes exactly one --input")),
    }
}

fn read_records(path: &Path) -> Result<Vec<Value>, Failure> {
    let f = fs::File::open(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::Io { path: path.into(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| input_err(anyhow!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

fn label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn score(task: TaskArg, records: &[Value], positive: Option<&str>) -> Result<MetricReport, Failure> {
    let bad = |e: serde_json::Error| input_err(anyhow!("malformed record: {e}"));
    let pairs = || -> Result<Vec<(String, String)>, Failure> {
        records
            .iter()
            .map(|r| match (r.get("pred"), r.get("gold")) {
                (Some(p), Some(g)) => Ok((label(p), label(g))),
                _ => Err(input_err(anyhow!("record lacks `pred` or `gold`"))),
            })
            .collect()
    };
    Ok(match task {
        TaskArg::Sa => metrics::accuracy_report(&pairs()?)?,
        TaskArg::Cls => {
            let pos = positive.ok_or_else(|| usage("--positive is required for cls"))?;
            metrics::binary_f1(&pairs()?, &pos.to_string())?
        }
        TaskArg::Ner => {
            let ex: Vec<NerExample> = records.iter().map(|r| serde_json::from_value(r.clone())).collect::<Result<_, _>>().map_err(bad)?;
            metrics::span_f1(&ex)?
        }
        TaskArg::Qa => {
            let ex: Vec<QaExample> = records
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    if let Some(obj) = r.as_object_mut() {
                        obj.retain(|k, _| matches!(k.as_str(), "pred" | "gold" | "answers"));
                    }
                    serde_json::from_value(r)
                })
                .collect::<Result<_, _>>()
                .map_err(bad)?;
            metrics::squad_f1_em(&ex)?
        }
    })
}

fn headline(r: &MetricReport) -> f64 {
    r.f1.or(r.accuracy).unwrap_or(0.0)
}

fn cmd_eval(common: &Common, task: TaskArg, positive: Option<String>, split_field: Option<String>) -> Outcome {
    let path = eval_path(common)?;
    let mut records = read_records(&path)?;
    if matches!(task, TaskArg::Ner) {
        for r in &mut records {
            if let Some(obj) = r.as_object_mut() {
                obj.retain(|k, _| k == "pred" || k == "gold");
            }
        }
    }
    let Some(field) = split_field else {
        let report = score(task, &records, positive.as_deref())?;
        println!("{}", report.table_row());
        return write_report(common, &report);
    };
    let mut groups: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    for r in records {
        let key = r.get(&field).map(label).ok_or_else(|| input_err(anyhow!("record lacks split field `{field}`")))?;
        groups.entry(key).or_default().push(r);
    }
    let mut per_split = BTreeMap::new();
    for (name, recs) in &groups {
        let rep = score(task, recs, positive.as_deref())?;
        println!("{name}: {}", rep.table_row());
        per_split.insert(name.clone(), rep);
    }
    let summary = metrics::mean_over_splits(&per_split.values().map(headline).collect::<Vec<_>>())?;
    println!("mean over {} splits: {:.2}", per_split.len(), summary.mean * 100.0);
    write_report(common, &serde_json::json!({ "splits": per_split, "mean": summary.mean }))
}

fn cmd_pipeline(common: &Common) -> Outcome {
    if common.config.is_none() && (common.inputs.is_empty() || common.output.is_none()) {
        return Err(usage("pipeline needs --config, or --input and --output"));
    }
    let cfg = load_config(common)?;
    let report = run_pipeline(&cfg).map_err(|e| {
        let fail = match e.stage.as_str() {
            "config" | "ingest" => Failure::from(e.error),
            _ => stage_err(e.error),
        };
        let msg = format!(
            "stage `{}` failed after {} completed stage rows",
            e.stage,
            e.partial.stages.len()
        );
        match fail {
            Failure::Usage(err) => Failure::Usage(err.context(msg)),
            Failure::Input(err) => Failure::Input(err.context(msg)),
            Failure::Stage(err) => Failure::Stage(err.context(msg)),
        }
    })?;
    print!("{}", report.table());
    if let Some(share) = &report.long_docs {
        println!("long documents (> {} tokens): {:.3}", share.limit, share.fraction);
    }
    if let Some(path) = &common.report {
        write_report(&Common { report: Some(path.clone()), ..common.clone() }, &report)?;
    }
    Ok(())
}
