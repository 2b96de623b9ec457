//! End-to-end corpus build: ingest every source, deduplicate each one,
//! deduplicate across sources, clean, then optionally train a tokenizer
//! and measure the long-document share.
//!
//! Output directory layout:
//!
//! ```text
//! corpus.jsonl              final surviving corpus
//! report.json               RunReport (no wall-clock fields)
//! timings.json              wall-clock milliseconds per stage
//! summary.txt               size table, one row per stage
//! config.toml               resolved configuration, for replay
//! stages/NN-<stage>.jsonl   surviving documents after each stage
//! signatures/<stage>.bin    MinHash signatures used by each dedup stage
//! evidence/<stage>.jsonl    one removal record per removed document
//! tokenizer/                vocab.txt and merges.txt, when requested
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{default_specials, long_doc_share, train_bpe, BpeVocab, LongDocShare};
use crate::clean::{clean_corpus, CleaningReport, FilterConfig};
use crate::corpus::{read_corpus, render_table, write_jsonl, CorpusManifest, Document, IdRegistry, LineError, SourceSpec, StageStats};
use crate::dedup::{dedup_across, dedup_corpus, DedupReport, Removal};
use crate::error::{Error, Result};
use crate::minhash::{write_signatures, MinHashParams, Signature};

fn default_seed() -> u64 {
    42
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_limit() -> usize {
    512
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSettings {
    /// Train a tokenizer of this size on the cleaned corpus.
    pub vocab_size: Option<usize>,
    #[serde(default = "default_specials")]
    pub specials: Vec<String>,
    /// Use an existing vocabulary instead of training one.
    pub vocab_dir: Option<PathBuf>,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings {
            vocab_size: None,
            specials: default_specials(),
            vocab_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Governs every randomized component; overrides `minhash.seed`.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 means one per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub minhash: MinHashParams,
    #[serde(default)]
    pub filters: FilterConfig,
    #[serde(default)]
    pub tokenizer: TokenizerSettings,
    #[serde(default = "default_limit")]
    pub long_doc_limit: usize,
    #[serde(default = "yes")]
    pub write_stage_outputs: bool,
}

impl PipelineConfig {
    pub fn new(sources: Vec<SourceSpec>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            sources,
            output_dir: output_dir.into(),
            seed: default_seed(),
            workers: 0,
            minhash: MinHashParams::default(),
            filters: FilterConfig::default(),
            tokenizer: TokenizerSettings::default(),
            long_doc_limit: default_limit(),
            write_stage_outputs: true,
        }
    }

    /// Parses TOML; relative paths are taken relative to `base`.
    pub fn from_toml_str(s: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        for src in &mut cfg.sources {
            if src.path.is_relative() {
                src.path = base.join(&src.path);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(dir) = &mut cfg.tokenizer.vocab_dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            sources: self.sources.clone(),
            seed: self.seed,
            output_dir: self.output_dir.clone(),
        }
    }

    /// MinHash parameters with the run seed applied.
    pub fn minhash_params(&self) -> MinHashParams {
        MinHashParams {
            seed: self.seed,
            ..self.minhash
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest().validate()?;
        self.minhash_params().validate()?;
        self.filters.validate()?;
        if let Some(size) = self.tokenizer.vocab_size {
            crate::bpe::check_vocab_size(size, &self.tokenizer.specials)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    #[serde(flatten)]
    pub stats: StageStats,
    /// Output file, relative to the output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDedup {
    pub source: String,
    pub report: DedupReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSummary {
    pub vocab_size: usize,
    pub merges: usize,
    pub specials: Vec<String>,
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u128,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub ingest_errors: Vec<LineError>,
    pub source_dedup: Vec<SourceDedup>,
    pub cross_dedup: Option<DedupReport>,
    pub cleaning: Option<CleaningReport>,
    pub tokenizer: Option<TokenizerSummary>,
    pub long_docs: Option<LongDocShare>,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
}

impl RunReport {
    pub fn stage_stats(&self) -> Vec<StageStats> {
        self.stages.iter().map(|s| s.stats.clone()).collect()
    }

    pub fn table(&self) -> String {
        render_table(&self.stage_stats())
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {error}")]
pub struct PipelineError {
    pub stage: String,
    #[source]
    pub error: Error,
    pub partial: Box<RunReport>,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    report: RunReport,
    stage_no: usize,
}

impl Run<'_> {
    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    fn record(&mut self, stats: StageStats, docs: &[Document]) -> Result<()> {
        self.stage_no += 1;
        let output = if self.cfg.write_stage_outputs {
            let rel = format!("stages/{:02}-{}.jsonl", self.stage_no, file_stem(&stats.stage));
            write_jsonl(self.out(&rel), docs)?;
            Some(rel)
        } else {
            None
        };
        self.report.stages.push(StageRecord { stats, output });
        Ok(())
    }

    fn write_dedup_artifacts(&self, name: &str, sigs: &[Signature], removals: &[Removal]) -> Result<()> {
        write_signatures(self.out(&format!("signatures/{}.bin", file_stem(name))), sigs)?;
        let path = self.out(&format!("evidence/{}.jsonl", file_stem(name)));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for r in removals {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::io(&path, e.into()))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> std::result::Result<T, PipelineError> {
        let start = Instant::now();
        let out = f(self);
        self.report.timings.push(StageTiming {
            stage: stage.to_string(),
            millis: start.elapsed().as_millis(),
        });
        out.map_err(|error| PipelineError {
            stage: stage.to_string(),
            error,
            partial: Box::new(self.report.clone()),
        })
    }
}

fn file_stem(stage: &str) -> String {
    stage
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

fn renamed(mut s: StageStats, name: &str) -> StageStats {
    s.stage = name.to_string();
    s
}

/// Runs every stage in order on a pool of `cfg.workers` threads.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<RunReport, PipelineError> {
    let fail = |stage: &str, error: Error| PipelineError {
        stage: stage.to_string(),
        error,
        partial: Box::default(),
    };
    cfg.validate().map_err(|e| fail("config", e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| fail("config", Error::Config(e.to_string())))?;
    pool.install(|| run_stages(cfg))
}

fn run_stages(cfg: &PipelineConfig) -> std::result::Result<RunReport, PipelineError> {
    let params = cfg.minhash_params();
    let mut run = Run {
        cfg,
        report: RunReport {
            seed: cfg.seed,
            ..RunReport::default()
        },
        stage_no: 0,
    };

    run.timed("setup", |run| {
        for sub in ["stages", "signatures", "evidence"] {
            let dir = run.out(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
        let path = run.out("config.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    })?;

    let raw: Vec<(String, Vec<Document>)> = run.timed("ingest", |run| {
        let mut registry = IdRegistry::new();
        let mut out = Vec::new();
        for src in &cfg.sources {
            let loaded = read_corpus(&src.path, &src.label, &mut registry)?;
            run.report.ingest_errors.extend(loaded.errors);
            let stats = crate::corpus::stage_stats(&loaded.docs, &format!("{}/raw", src.label));
            run.record(stats, &loaded.docs)?;
            out.push((src.label.clone(), loaded.docs));
        }
        Ok(out)
    })?;

    let deduped: Vec<(String, Vec<Document>)> = run.timed("dedup-within", |run| {
        let mut out = Vec::new();
        for (label, docs) in raw {
            let name = format!("{label}/deduplicated");
            let mut outcome = dedup_corpus(docs, &params)?;
            outcome.report.before = renamed(outcome.report.before, &format!("{label}/raw"));
            outcome.report.after = renamed(outcome.report.after, &name);
            run.write_dedup_artifacts(&name, &outcome.signatures, &outcome.report.removals)?;
            run.record(outcome.report.after.clone(), &outcome.survivors)?;
            run.report.source_dedup.push(SourceDedup {
                source: label.clone(),
                report: outcome.report,
            });
            out.push((label, outcome.survivors));
        }
        Ok(out)
    })?;

    let merged: Vec<Document> = run.timed("dedup-across", |run| {
        let name = "merged/deduplicated";
        let docs = if deduped.len() >= 2 {
            let mut outcome = dedup_across(deduped, &params)?;
            outcome.report.before = renamed(outcome.report.before, "merged/input");
            outcome.report.after = renamed(outcome.report.after, name);
            run.write_dedup_artifacts(name, &outcome.signatures, &outcome.report.removals)?;
            run.report.cross_dedup = Some(outcome.report);
            outcome.survivors
        } else {
            deduped.into_iter().flat_map(|(_, d)| d).collect()
        };
        run.record(crate::corpus::stage_stats(&docs, name), &docs)?;
        Ok(docs)
    })?;

    let cleaned: Vec<Document> = run.timed("clean", |run| {
        let (docs, mut report) = clean_corpus(merged, &cfg.filters)?;
        report.before = renamed(report.before, "merged/deduplicated");
        report.after = renamed(report.after, "cleaned");
        run.record(report.after.clone(), &docs)?;
        run.report.cleaning = Some(report);
        write_jsonl(run.out("corpus.jsonl"), &docs)?;
        Ok(docs)
    })?;

    run.timed("tokenizer", |run| {
        let vocab = match (&cfg.tokenizer.vocab_dir, cfg.tokenizer.vocab_size) {
            (Some(dir), _) => Some((BpeVocab::load(dir)?, false)),
            (None, Some(size)) => {
                let vocab = train_bpe(&cleaned, size, cfg.tokenizer.specials.clone())?;
                vocab.save(run.out("tokenizer"))?;
                Some((vocab, true))
            }
            (None, None) => None,
        };
        if let Some((vocab, trained)) = vocab {
            run.report.tokenizer = Some(TokenizerSummary {
                vocab_size: vocab.vocab_size(),
                merges: vocab.merges().len(),
                specials: vocab.specials().to_vec(),
                trained,
            });
            run.report.long_docs = Some(long_doc_share(&cleaned, &vocab, cfg.long_doc_limit));
        }
        Ok(())
    })?;

    run.timed("report", |run| {
        let report_json = serde_json::to_string_pretty(&run.report).map_err(|e| Error::Config(e.to_string()))?;
        let timings = serde_json::to_string_pretty(&run.report.timings).map_err(|e| Error::Config(e.to_string()))?;
        for (name, body) in [("report.json", report_json), ("timings.json", timings), ("summary.txt", run.report.table())] {
            let path = run.out(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })?;

    Ok(run.report)
}
