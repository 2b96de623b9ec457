//! Document-quality filters for the cleaning stage.
//!
//! No filter rejects a document for being long: every statistic used here
//! is either a lower bound on size or a ratio that stays fixed when a
//! document is repeated.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{stage_stats, Document, StageStats};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Script {
    Hebrew,
    Latin,
    Arabic,
    Cyrillic,
    Greek,
}

impl Script {
    pub fn contains(self, c: char) -> bool {
        let u = c as u32;
        match self {
            Script::Hebrew => (0x0590..=0x05FF).contains(&u) || (0xFB1D..=0xFB4F).contains(&u),
            Script::Latin => {
                c.is_ascii_alphabetic()
                    || (0x00C0..=0x024F).contains(&u) && u != 0x00D7 && u != 0x00F7
                    || (0x1E00..=0x1EFF).contains(&u)
            }
            Script::Arabic => (0x0600..=0x06FF).contains(&u) || (0x0750..=0x077F).contains(&u),
            Script::Cyrillic => (0x0400..=0x04FF).contains(&u),
            Script::Greek => (0x0370..=0x03FF).contains(&u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_words: usize,
    pub target_script: Script,
    /// Share of alphabetic characters that must belong to `target_script`.
    pub min_target_script_ratio: f64,
    pub max_mean_word_len: f64,
    /// Longest run of one repeated non-whitespace character.
    pub max_char_repeat_run: usize,
    /// Minimum share of word occurrences not taken by the single most
    /// frequent word.
    pub min_unique_word_ratio: f64,
    pub boilerplate_markers: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_words: 20,
            target_script: Script::Hebrew,
            min_target_script_ratio: 0.30,
            max_mean_word_len: 20.0,
            max_char_repeat_run: 60,
            min_unique_word_ratio: 0.30,
            boilerplate_markers: Vec::new(),
        }
    }
}

impl FilterConfig {
    /// Every threshold at its vacuous extreme: nothing is rejected.
    pub fn permissive() -> Self {
        FilterConfig {
            min_words: 0,
            target_script: Script::Hebrew,
            min_target_script_ratio: 0.0,
            max_mean_word_len: f64::INFINITY,
            max_char_repeat_run: usize::MAX,
            min_unique_word_ratio: 0.0,
            boilerplate_markers: Vec::new(),
        }
    }

    /// Defaults plus a few common cookie-banner and footer phrases.
    pub fn with_common_boilerplate() -> Self {
        FilterConfig {
            boilerplate_markers: [
                "use cookies",
                "cookie policy",
                "all rights reserved",
                "כל הזכויות שמורות",
                "אנו משתמשים בעוגיות",
                "מדיניות פרטיות",
            ]
            .map(String::from)
            .to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is not in [0, 1]")))
            }
        };
        unit("min_target_script_ratio", self.min_target_script_ratio)?;
        unit("min_unique_word_ratio", self.min_unique_word_ratio)?;
        if self.max_mean_word_len.is_nan() || self.max_mean_word_len < 0.0 {
            return Err(Error::Config("max_mean_word_len must be non-negative".into()));
        }
        if self.boilerplate_markers.iter().any(String::is_empty) {
            return Err(Error::Config("empty boilerplate marker".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: FilterConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

/// Filters in evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFewWords,
    ScriptRatio,
    MeanWordLen,
    CharRepeat,
    LowLexicalDiversity,
    Boilerplate,
}

impl RejectReason {
    pub const ALL: [RejectReason; 6] = [
        RejectReason::TooFewWords,
        RejectReason::ScriptRatio,
        RejectReason::MeanWordLen,
        RejectReason::CharRepeat,
        RejectReason::LowLexicalDiversity,
        RejectReason::Boilerplate,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(RejectReason),
}

pub fn script_ratio(text: &str, script: Script) -> f64 {
    let (mut letters, mut hits) = (0usize, 0usize);
    for c in text.chars().filter(|c| c.is_alphabetic()) {
        letters += 1;
        if script.contains(c) {
            hits += 1;
        }
    }
    if letters == 0 {
        0.0
    } else {
        hits as f64 / letters as f64
    }
}

pub fn mean_word_len(text: &str) -> f64 {
    let (mut words, mut chars) = (0usize, 0usize);
    for w in text.split_whitespace() {
        words += 1;
        chars += w.chars().count();
    }
    if words == 0 {
        0.0
    } else {
        chars as f64 / words as f64
    }
}

pub fn longest_char_run(text: &str) -> usize {
    let (mut best, mut run, mut prev) = (0usize, 0usize, None);
    for c in text.chars() {
        if c.is_whitespace() {
            run = 0;
            prev = None;
            continue;
        }
        run = if prev == Some(c) { run + 1 } else { 1 };
        prev = Some(c);
        best = best.max(run);
    }
    best
}

/// `1 - max_count / total` over word occurrences; 1.0 for an empty text.
pub fn unique_word_ratio(text: &str) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut total = 0usize;
    for w in text.split_whitespace() {
        *counts.entry(w).or_default() += 1;
        total += 1;
    }
    match counts.values().max() {
        Some(&top) => 1.0 - top as f64 / total as f64,
        None => 1.0,
    }
}

pub fn apply_filters(doc: &Document, cfg: &FilterConfig) -> Verdict {
    let text = doc.text();
    if doc.word_count() < cfg.min_words {
        return Verdict::Reject(RejectReason::TooFewWords);
    }
    if script_ratio(text, cfg.target_script) < cfg.min_target_script_ratio {
        return Verdict::Reject(RejectReason::ScriptRatio);
    }
    if mean_word_len(text) > cfg.max_mean_word_len {
        return Verdict::Reject(RejectReason::MeanWordLen);
    }
    if longest_char_run(text) > cfg.max_char_repeat_run {
        return Verdict::Reject(RejectReason::CharRepeat);
    }
    if unique_word_ratio(text) < cfg.min_unique_word_ratio {
        return Verdict::Reject(RejectReason::LowLexicalDiversity);
    }
    if cfg.boilerplate_markers.iter().any(|m| text.contains(m.as_str())) {
        return Verdict::Reject(RejectReason::Boilerplate);
    }
    Verdict::Keep
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub before: StageStats,
    pub after: StageStats,
    pub rejected: BTreeMap<RejectReason, usize>,
    pub total_rejected: usize,
}

/// Survivors keep input order.
pub fn clean_corpus(docs: Vec<Document>, cfg: &FilterConfig) -> Result<(Vec<Document>, CleaningReport)> {
    cfg.validate()?;
    let before = stage_stats(&docs, "before");
    let verdicts: Vec<Verdict> = docs.par_iter().map(|d| apply_filters(d, cfg)).collect();
    let mut rejected: BTreeMap<RejectReason, usize> = RejectReason::ALL.iter().map(|r| (*r, 0)).collect();
    let mut survivors = Vec::with_capacity(docs.len());
    for (doc, verdict) in docs.into_iter().zip(verdicts) {
        match verdict {
            Verdict::Keep => survivors.push(doc),
            Verdict::Reject(r) => *rejected.entry(r).or_default() += 1,
        }
    }
    let report = CleaningReport {
        after: stage_stats(&survivors, "after"),
        before,
        total_rejected: rejected.values().sum(),
        rejected,
    };
    Ok((survivors, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEB: [&str; 12] = ["שלום", "עולם", "ספר", "בית", "ילד", "מים", "אור", "דרך", "עיר", "לב", "יום", "שמש"];

    fn hebrew(n: usize) -> String {
        (0..n).map(|i| HEB[(i * 7 + i / 12) % 12]).collect::<Vec<_>>().join(" ")
    }

    fn doc(text: &str) -> Document {
        Document::new("d", "s", text)
    }

    #[test]
    fn too_few_words() {
        let cfg = FilterConfig::default();
        assert_eq!(apply_filters(&doc("שלום עולם ספר"), &cfg), Verdict::Reject(RejectReason::TooFewWords));
    }

    #[test]
    fn huge_clean_document_is_kept() {
        let text = hebrew(50_000);
        let d = doc(&text);
        assert_eq!(d.word_count(), 50_000);
        assert_eq!(apply_filters(&d, &FilterConfig::default()), Verdict::Keep);
    }

    #[test]
    fn mostly_latin_fails_script_ratio() {
        let latin = (0..19).map(|i| format!("word{}", (b'a' + i as u8) as char)).collect::<Vec<_>>().join(" ");
        let text = format!("{latin} שלום");
        assert!(script_ratio(&text, Script::Hebrew) < 0.1);
        assert_eq!(apply_filters(&doc(&text), &FilterConfig::default()), Verdict::Reject(RejectReason::ScriptRatio));
        let cfg = FilterConfig { target_script: Script::Latin, ..FilterConfig::default() };
        assert_eq!(apply_filters(&doc(&text), &cfg), Verdict::Keep);
    }

    #[test]
    fn each_filter_fires_in_order() {
        let cfg = FilterConfig {
            boilerplate_markers: vec!["כל הזכויות שמורות".into()],
            ..FilterConfig::default()
        };
        let long_word = format!("{} {}", hebrew(19), "א".repeat(500));
        assert_eq!(apply_filters(&doc(&long_word), &cfg), Verdict::Reject(RejectReason::MeanWordLen));
        let run = format!("{} {}", hebrew(25), "ב".repeat(61));
        assert_eq!(apply_filters(&doc(&run), &cfg), Verdict::Reject(RejectReason::CharRepeat));
        let spam = vec!["קנו"; 30].join(" ") + " " + &hebrew(5);
        assert_eq!(apply_filters(&doc(&spam), &cfg), Verdict::Reject(RejectReason::LowLexicalDiversity));
        let footer = format!("{} כל הזכויות שמורות", hebrew(25));
        assert_eq!(apply_filters(&doc(&footer), &cfg), Verdict::Reject(RejectReason::Boilerplate));
        // first failing filter wins
        assert_eq!(apply_filters(&doc("aaaa"), &cfg), Verdict::Reject(RejectReason::TooFewWords));
    }

    #[test]
    fn clean_corpus_counts() {
        let mut docs = Vec::new();
        for i in 0..10 {
            let text = if i % 3 == 0 { hebrew(3) } else { hebrew(30 + i) };
            docs.push(Document::new(format!("d{i}"), "s", text));
        }
        let (kept, report) = clean_corpus(docs.clone(), &FilterConfig::default()).unwrap();
        assert_eq!(kept.len(), 6);
        assert_eq!(report.rejected[&RejectReason::TooFewWords], 4);
        assert_eq!(report.total_rejected, 4);
        assert_eq!(report.before.documents, 10);
        assert_eq!(report.after, stage_stats(&kept, "after"));
        let ids: Vec<&str> = kept.iter().map(|d| d.id()).collect();
        assert_eq!(ids, ["d1", "d2", "d4", "d5", "d7", "d8"]);

        let clean: Vec<Document> = docs.into_iter().filter(|d| d.word_count() >= 20).collect();
        let (kept, report) = clean_corpus(clean.clone(), &FilterConfig::default()).unwrap();
        assert_eq!(kept, clean);
        assert_eq!(report.total_rejected, 0);
    }

    #[test]
    fn config_from_toml() {
        let cfg = FilterConfig::from_toml_str("min_words = 5\ntarget_script = \"latin\"\nboilerplate_markers = [\"cookie\"]\n").unwrap();
        assert_eq!(cfg.min_words, 5);
        assert_eq!(cfg.target_script, Script::Latin);
        assert_eq!(cfg.max_char_repeat_run, 60);
        assert!(FilterConfig::from_toml_str("min_unique_word_ratio = 2.0").is_err());
        assert!(FilterConfig::from_toml_str("max_length = 10").is_err());
    }

    fn any_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                "[a-z]{1,8}",
                "[א-ת]{1,8}",
                Just("aaaaaaaaaaaaaaaaaaaa".to_string()),
                Just("!!!".to_string()),
                Just("cookie".to_string()),
            ],
            0..60,
        )
        .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn repetition_never_causes_rejection(words in proptest::collection::vec(0usize..12, 20..80), m in 1usize..8) {
            let base: String = words.iter().map(|&i| HEB[i]).collect::<Vec<_>>().join(" ");
            let cfg = FilterConfig::default();
            let d = doc(&base);
            prop_assume!(apply_filters(&d, &cfg) == Verdict::Keep);
            let repeated = vec![base.as_str(); m].join("\n");
            prop_assert_eq!(apply_filters(&doc(&repeated), &cfg), Verdict::Keep);
        }

        #[test]
        fn permissive_keeps_everything(text in any_text()) {
            prop_assert_eq!(apply_filters(&doc(&text), &FilterConfig::permissive()), Verdict::Keep);
        }

        #[test]
        fn survivors_are_an_ordered_subset(texts in proptest::collection::vec(any_text(), 0..20)) {
            let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| Document::new(format!("d{i}"), "s", t.clone())).collect();
            let cfg = FilterConfig { min_words: 5, target_script: Script::Latin, ..FilterConfig::default() };
            let (kept, report) = clean_corpus(docs.clone(), &cfg).unwrap();
            prop_assert_eq!(report.total_rejected, docs.len() - kept.len());
            let mut it = docs.iter();
            for k in &kept {
                prop_assert!(it.any(|d| d == k));
            }
            let (again, _) = clean_corpus(docs, &cfg).unwrap();
            prop_assert_eq!(again, kept);
        }
    }
}
