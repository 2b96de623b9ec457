//! Document model, JSON-Lines ingestion, text normalization and per-stage
//! size accounting.
//!
//! Input records are one JSON object per line with a string `text` field,
//! an optional `id` (string or integer) and an optional `source`, which is
//! always overridden by the label the file was loaded under. Records
//! without an id get `<source>:<line>`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Add;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Location, Result};

/// One corpus record. Immutable once built; the size counters always
/// describe `text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    id: String,
    source: String,
    text: String,
    byte_len: usize,
    word_count: usize,
}

impl Document {
    pub fn new(id: impl Into<String>, source: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Document {
            id: id.into(),
            source: source.into(),
            byte_len: text.len(),
            word_count: word_count(&text),
            text,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn byte_len(&self) -> usize {
        self.byte_len
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    source: &'a str,
    text: &'a str,
}

impl Serialize for Document {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        OutRecord {
            id: &self.id,
            source: &self.source,
            text: &self.text,
        }
        .serialize(s)
    }
}

/// Number of maximal runs of non-whitespace characters (Unicode
/// `White_Space` separates runs).
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Canonical form used for exact matching and shingling: NFC, whitespace
/// runs collapsed to one space, ends trimmed. No case folding, nothing
/// removed.
pub fn normalize_for_dedup(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for (i, word) in nfc.split_whitespace().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// A record that could not be turned into a [`Document`]. Non-fatal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub path: PathBuf,
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub enum Record {
    Doc(Document, Location),
    Bad(LineError),
}

/// Streaming reader over a JSONL corpus. Yields `Err` only for fatal I/O
/// problems; bad lines come through as [`Record::Bad`].
pub struct JsonlReader<R> {
    reader: R,
    path: PathBuf,
    source: String,
    line: usize,
    buf: String,
    failed: bool,
}

impl<R: BufRead> JsonlReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>, source: impl Into<String>) -> Self {
        JsonlReader {
            reader,
            path: path.into(),
            source: source.into(),
            line: 0,
            buf: String::new(),
            failed: false,
        }
    }

    fn parse_line(&self, line: &str) -> std::result::Result<Document, String> {
        let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let obj = value.as_object().ok_or("record is not a JSON object")?;
        let text = match obj.get("text") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err("field `text` is not a string".into()),
            None => return Err("missing field `text`".into()),
        };
        let id = match obj.get("id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::String(_)) => return Err("field `id` is empty".into()),
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::Null) | None => format!("{}:{}", self.source, self.line),
            Some(_) => return Err("field `id` is not a string".into()),
        };
        Ok(Document::new(id, self.source.clone(), text))
    }
}

impl<R: BufRead> Iterator for JsonlReader<R> {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.failed = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
            }
            self.line += 1;
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            let record = match self.parse_line(line) {
                Ok(doc) => Record::Doc(
                    doc,
                    Location {
                        path: self.path.clone(),
                        line: self.line,
                    },
                ),
                Err(message) => Record::Bad(LineError {
                    path: self.path.clone(),
                    line: self.line,
                    message,
                }),
            };
            return Some(Ok(record));
        }
    }
}

/// Opens `path` for streaming. Failure to open is fatal.
pub fn load_jsonl(path: impl AsRef<Path>, source: &str) -> Result<JsonlReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(JsonlReader::new(BufReader::new(file), path, source))
}

/// Tracks every id seen in a run so collisions can cite both locations.
#[derive(Debug, Default)]
pub struct IdRegistry {
    seen: HashMap<String, Location>,
}

impl IdRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: &str, at: Location) -> Result<()> {
        if let Some(first) = self.seen.get(id) {
            return Err(Error::DuplicateId {
                id: id.to_string(),
                first: first.clone(),
                second: at,
            });
        }
        self.seen.insert(id.to_string(), at);
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub docs: Vec<Document>,
    pub errors: Vec<LineError>,
}

/// Reads a whole file, checking ids against `registry`.
pub fn read_corpus(path: impl AsRef<Path>, source: &str, registry: &mut IdRegistry) -> Result<LoadedCorpus> {
    let mut out = LoadedCorpus::default();
    for record in load_jsonl(path, source)? {
        match record? {
            Record::Doc(doc, at) => {
                registry.register(doc.id(), at)?;
                out.docs.push(doc);
            }
            Record::Bad(err) => {
                log::warn!("{}:{}: {}", err.path.display(), err.line, err.message);
                out.errors.push(err);
            }
        }
    }
    Ok(out)
}

pub fn write_jsonl<'a>(path: impl AsRef<Path>, docs: impl IntoIterator<Item = &'a Document>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut w, doc).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Size of a corpus after one pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub documents: u64,
    pub words: u64,
    pub bytes: u64,
}

impl StageStats {
    pub fn empty(stage: impl Into<String>) -> Self {
        StageStats {
            stage: stage.into(),
            documents: 0,
            words: 0,
            bytes: 0,
        }
    }

    pub fn add_doc(&mut self, doc: &Document) {
        self.documents += 1;
        self.words += doc.word_count() as u64;
        self.bytes += doc.byte_len() as u64;
    }
}

impl Add for StageStats {
    type Output = StageStats;

    fn add(self, rhs: StageStats) -> StageStats {
        StageStats {
            stage: self.stage,
            documents: self.documents + rhs.documents,
            words: self.words + rhs.words,
            bytes: self.bytes + rhs.bytes,
        }
    }
}

pub fn stage_stats<'a>(docs: impl IntoIterator<Item = &'a Document>, stage: &str) -> StageStats {
    let mut stats = StageStats::empty(stage);
    for doc in docs {
        stats.add_doc(doc);
    }
    stats
}

/// Plain-text table: stage, bytes, documents, words.
pub fn render_table(rows: &[StageStats]) -> String {
    let header = ["Corpus", "Bytes", "Documents", "Words"];
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.stage.clone(),
                r.bytes.to_string(),
                r.documents.to_string(),
                r.words.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: [&str; 4]| {
        let _ = write!(out, "{:<w$}", row[0], w = widths[0]);
        for (c, w) in row[1..].iter().zip(&widths[1..]) {
            let _ = write!(out, "  {:>w$}", c, w = *w);
        }
        out.push('\n');
    };
    line(&mut out, header);
    for row in &cells {
        line(&mut out, [&row[0], &row[1], &row[2], &row[3]]);
    }
    out
}

/// `label=path` pair naming one input corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub label: String,
    pub path: PathBuf,
}

impl FromStr for SourceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('=') {
            Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok(SourceSpec {
                label: label.to_string(),
                path: PathBuf::from(path),
            }),
            _ => Err(Error::Config(format!("expected `label=path`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub sources: Vec<SourceSpec>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("at least one source is required".into()));
        }
        let mut labels = std::collections::HashSet::new();
        for s in &self.sources {
            if !labels.insert(s.label.as_str()) {
                return Err(Error::Config(format!("source label `{}` given twice", s.label)));
            }
        }
        Ok(())
    }
}
