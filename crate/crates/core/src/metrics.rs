//! Token-based evaluation metrics: accuracy, span-level NER F1, QA
//! token F1 / exact match, binary F1 and averaging over random splits.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_categories::UnicodeCategories;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sa,
    Ner,
    Qa,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    pub n_examples: usize,
}

impl MetricReport {
    fn new(task: Task, n_examples: usize) -> Self {
        MetricReport {
            task,
            precision: None,
            recall: None,
            f1: None,
            accuracy: None,
            exact_match: None,
            n_examples,
        }
    }

    /// Scores x100 with two decimals, `-` for absent ones.
    pub fn table_row(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", x * 100.0));
        format!(
            "{:<4} P={} R={} F1={} Acc={} EM={} n={}",
            format!("{:?}", self.task).to_lowercase(),
            cell(self.precision),
            cell(self.recall),
            cell(self.f1),
            cell(self.accuracy),
            cell(self.exact_match),
            self.n_examples
        )
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy<L: PartialEq>(examples: &[(L, L)]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("accuracy over zero examples".into()));
    }
    Ok(ratio(examples.iter().filter(|(p, g)| p == g).count(), examples.len()))
}

pub fn accuracy_report<L: PartialEq>(examples: &[(L, L)]) -> Result<MetricReport> {
    let mut r = MetricReport::new(Task::Sa, examples.len());
    r.accuracy = Some(accuracy(examples)?);
    Ok(r)
}

// ---- NER ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    pub fn parse(s: &str) -> Result<Tag> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        match s.split_once('-') {
            Some(("B", t)) if !t.is_empty() => Ok(Tag::Begin(t.to_string())),
            Some(("I", t)) if !t.is_empty() => Ok(Tag::Inside(t.to_string())),
            _ => Err(Error::Parse(format!("`{s}` is not a BIO tag"))),
        }
    }
}

/// `[start, end)` token span with its entity type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Entity spans of a BIO sequence. An `I-X` that does not continue an
/// open `X` entity opens a new one, as if it were `B-X`.
pub fn extract_spans(tags: &[Tag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::Outside => {
                if let Some((kind, start)) = open.take() {
                    spans.push(Span { kind, start, end: i });
                }
            }
            Tag::Begin(t) => {
                if let Some((kind, start)) = open.take() {
                    spans.push(Span { kind, start, end: i });
                }
                open = Some((t.clone(), i));
            }
            Tag::Inside(t) => match &open {
                Some((kind, _)) if kind == t => {}
                _ => {
                    if let Some((kind, start)) = open.take() {
                        spans.push(Span { kind, start, end: i });
                    }
                    open = Some((t.clone(), i));
                }
            },
        }
    }
    if let Some((kind, start)) = open {
        spans.push(Span { kind, start, end: tags.len() });
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerExample {
    pub pred: Vec<String>,
    pub gold: Vec<String>,
}

/// Micro-averaged precision, recall and F1 over exact (type, start, end)
/// matches.
pub fn span_f1(examples: &[NerExample]) -> Result<MetricReport> {
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (i, ex) in examples.iter().enumerate() {
        if ex.pred.len() != ex.gold.len() {
            return Err(Error::Parse(format!(
                "example {i}: {} predicted tags vs {} gold tags",
                ex.pred.len(),
                ex.gold.len()
            )));
        }
        let parse = |v: &[String]| v.iter().map(|s| Tag::parse(s)).collect::<Result<Vec<_>>>();
        let pred: BTreeSet<Span> = extract_spans(&parse(&ex.pred)?).into_iter().collect();
        let gold: BTreeSet<Span> = extract_spans(&parse(&ex.gold)?).into_iter().collect();
        tp += pred.intersection(&gold).count();
        n_pred += pred.len();
        n_gold += gold.len();
    }
    let mut r = MetricReport::new(Task::Ner, examples.len());
    let (p, rc) = (ratio(tp, n_pred), ratio(tp, n_gold));
    r.precision = Some(p);
    r.recall = Some(rc);
    r.f1 = Some(f1_score(p, rc));
    Ok(r)
}

// ---- QA ----

/// NFC, punctuation removed, whitespace collapsed. No article stripping.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s.nfc().filter(|c| !c.is_punctuation()).collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Token-overlap F1 between normalized strings. Two empty answers score 1.
pub fn qa_f1(pred: &str, gold: &str) -> f64 {
    let (p, g) = (normalize_answer(pred), normalize_answer(gold));
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt == gt { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    f1_score(ratio(common, pt.len()), ratio(common, gt.len()))
}

pub fn qa_exact(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub pred: String,
    #[serde(alias = "answers")]
    pub gold: Vec<String>,
}

pub fn squad_f1_em(examples: &[QaExample]) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Empty("QA evaluation over zero examples".into()));
    }
    let (mut f1, mut em) = (0.0, 0.0);
    for (i, ex) in examples.iter().enumerate() {
        if ex.gold.is_empty() {
            return Err(Error::Parse(format!("example {i} has no gold answers")));
        }
        f1 += ex.gold.iter().map(|g| qa_f1(&ex.pred, g)).fold(0.0, f64::max);
        em += if ex.gold.iter().any(|g| qa_exact(&ex.pred, g)) { 1.0 } else { 0.0 };
    }
    let n = examples.len() as f64;
    let mut r = MetricReport::new(Task::Qa, examples.len());
    r.f1 = Some(f1 / n);
    r.exact_match = Some(em / n);
    Ok(r)
}

// ---- binary classification ----

pub fn binary_f1<L: PartialEq>(examples: &[(L, L)], positive: &L) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(Error::Empty("classification over zero examples".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (pred, gold) in examples {
        match (pred == positive, gold == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let (p, rc) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    let mut r = MetricReport::new(Task::Cls, examples.len());
    r.precision = Some(p);
    r.recall = Some(rc);
    r.f1 = Some(f1_score(p, rc));
    r.accuracy = Some(accuracy(examples)?);
    Ok(r)
}

// ---- splits ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub mean: f64,
    pub splits: Vec<f64>,
}

pub fn mean_over_splits(scores: &[f64]) -> Result<SplitSummary> {
    if scores.is_empty() {
        return Err(Error::Empty("no split scores".into()));
    }
    Ok(SplitSummary {
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
        splits: scores.to_vec(),
    })
}

/// `count` seeded shuffles of `0..n`, each cut into (train, test) with
/// `train_fraction` of the items (rounded down) on the train side.
pub fn random_splits(n: usize, count: usize, train_fraction: f64, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let cut = (n as f64 * train_fraction).floor() as usize;
            let test = idx.split_off(cut);
            (idx, test)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn ner(pred: &str, gold: &str) -> NerExample {
        NerExample { pred: tags(pred), gold: tags(gold) }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[(1, 1), (2, 2)]).unwrap(), 1.0);
        assert_eq!(accuracy(&[(1, 2), (2, 1)]).unwrap(), 0.0);
        assert_eq!(accuracy(&[("pos", "pos"), ("neg", "neg"), ("neu", "neu"), ("pos", "neg")]).unwrap(), 0.75);
        assert!(accuracy::<u8>(&[]).is_err());
    }

    #[test]
    fn span_f1_examples() {
        let r = span_f1(&[ner("B-PER I-PER O", "B-PER I-PER O")]).unwrap();
        assert_eq!(r.f1, Some(1.0));
        let r = span_f1(&[ner("B-PER O B-LOC", "B-PER O O")]).unwrap();
        assert_eq!((r.precision, r.recall), (Some(0.5), Some(1.0)));
        assert!((r.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let r = span_f1(&[ner("O O O", "B-PER O B-LOC")]).unwrap();
        assert_eq!(r.f1, Some(0.0));
        assert!(span_f1(&[ner("O", "O O")]).unwrap_err().to_string().contains("example 0"));
        assert!(span_f1(&[ner("X-PER", "O")]).is_err());
    }

    #[test]
    fn orphan_inside_is_repaired() {
        let parse = |s: &str| tags(s).iter().map(|t| Tag::parse(t).unwrap()).collect::<Vec<_>>();
        let spans = extract_spans(&parse("I-PER I-PER O I-LOC B-LOC I-PER"));
        let got: Vec<(&str, usize, usize)> = spans.iter().map(|s| (s.kind.as_str(), s.start, s.end)).collect();
        assert_eq!(got, [("PER", 0, 2), ("LOC", 3, 4), ("LOC", 4, 5), ("PER", 5, 6)]);
        let r = span_f1(&[ner("I-PER I-PER", "B-PER I-PER")]).unwrap();
        assert_eq!(r.f1, Some(1.0));
    }

    #[test]
    fn qa_examples() {
        let ex = |p: &str, g: &[&str]| QaExample { pred: p.into(), gold: g.iter().map(|s| s.to_string()).collect() };
        let r = squad_f1_em(&[ex("ירושלים", &["ירושלים"])]).unwrap();
        assert_eq!((r.f1, r.exact_match), (Some(1.0), Some(1.0)));
        let r = squad_f1_em(&[ex("a b", &["b c"])]).unwrap();
        assert_eq!((r.f1, r.exact_match), (Some(0.5), Some(0.0)));
        let r = squad_f1_em(&[ex("", &["x"])]).unwrap();
        assert_eq!((r.f1, r.exact_match), (Some(0.0), Some(0.0)));
        assert!(squad_f1_em(&[ex("x", &[])]).is_err());
        assert!(squad_f1_em(&[]).is_err());
        assert_eq!(normalize_answer("  \"שלום,  עולם!\" "), "שלום עולם");
    }

    #[test]
    fn binary_examples() {
        assert_eq!(binary_f1(&[(1, 1), (0, 0)], &1).unwrap().f1, Some(1.0));
        assert_eq!(binary_f1(&[(0, 1), (0, 0)], &1).unwrap().f1, Some(0.0));
        let r = binary_f1(&[(1, 1), (1, 1), (1, 0), (0, 1)], &1).unwrap();
        assert!((r.precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(binary_f1::<u8>(&[], &1).is_err());
        let none = binary_f1(&[(0, 0)], &1).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (Some(0.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn split_examples() {
        assert!((mean_over_splits(&[0.9, 0.9, 0.9]).unwrap().mean - 0.9).abs() < 1e-15);
        assert_eq!(mean_over_splits(&[1.0, 0.0]).unwrap().mean, 0.5);
        let s = mean_over_splits(&[0.873]).unwrap();
        assert_eq!((s.mean, s.splits.len()), (0.873, 1));
        assert!(mean_over_splits(&[]).is_err());
    }

    #[test]
    fn splits_are_partitions() {
        let splits = random_splits(645, 3, 0.8, 7);
        assert_eq!(splits.len(), 3);
        for (train, test) in &splits {
            assert_eq!(train.len(), 516);
            let mut all: Vec<usize> = train.iter().chain(test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..645).collect::<Vec<_>>());
        }
        assert_ne!(splits[0].0, splits[1].0);
        assert_eq!(random_splits(645, 3, 0.8, 7), splits);
    }

    #[test]
    fn table_row_scales() {
        let mut r = MetricReport::new(Task::Cls, 3);
        r.f1 = Some(0.873);
        assert!(r.table_row().contains("F1=87.30"));
        assert!(r.table_row().contains("EM=-"));
    }
}
