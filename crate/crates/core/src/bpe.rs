//! Byte-level BPE: training, encoding, decoding and the long-document
//! share.
//!
//! Ids `0..256` are raw bytes, merge `m` creates id `256 + m`, and special
//! tokens follow the merges. Text is pre-split into maximal runs of
//! whitespace and of non-whitespace, so no merge ever spans a boundary
//! between the two. Pair frequency counts every adjacent position, and a
//! merge rewrites a sequence left to right without overlap. Among pairs of
//! equal frequency the smallest `(left, right)` id tuple is merged first.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

pub const BYTE_TOKENS: usize = 256;

pub const DEFAULT_SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<mask>"];

pub fn default_specials() -> Vec<String> {
    DEFAULT_SPECIALS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    specials: Vec<String>,
    ranks: HashMap<(u32, u32), u32>,
}

impl BpeVocab {
    pub fn from_merges(merges: Vec<(u32, u32)>, specials: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (m, &(l, r)) in merges.iter().enumerate() {
            let next = tokens.len() as u32;
            if l >= next || r >= next {
                return Err(Error::Parse(format!("merge {m} ({l} {r}) uses a token not yet defined")));
            }
            if ranks.insert((l, r), m as u32).is_some() {
                return Err(Error::Parse(format!("merge {m} ({l} {r}) appears twice")));
            }
            let mut t = tokens[l as usize].clone();
            t.extend_from_slice(&tokens[r as usize]);
            tokens.push(t);
        }
        let mut seen = HashSet::new();
        if let Some(dup) = specials.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Config(format!("special token `{dup}` given twice")));
        }
        if let Some(bad) = specials.iter().find(|s| s.is_empty() || s.contains(['\t', '\n', '\r'])) {
            return Err(Error::Config(format!("special token {bad:?} is empty or contains a tab or newline")));
        }
        Ok(BpeVocab {
            merges,
            tokens,
            specials,
            ranks,
        })
    }

    /// Bytes plus merges plus specials.
    pub fn vocab_size(&self) -> usize {
        BYTE_TOKENS + self.merges.len() + self.specials.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|s| s == name)
            .map(|i| self.tokens.len() as u32 + i as u32)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) >= self.tokens.len() && (id as usize) < self.vocab_size()
    }

    /// Byte string of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Keeps only the first `n` merges.
    pub fn truncated(&self, n: usize) -> BpeVocab {
        BpeVocab::from_merges(self.merges[..n.min(self.merges.len())].to_vec(), self.specials.clone())
            .expect("prefix of a valid merge list is valid")
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut table = String::new();
        for (id, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(table, "{id}\t{}", escape_token(t));
        }
        for s in &self.specials {
            let _ = writeln!(table, "{}\t{s}", self.special_id(s).unwrap());
        }
        let mut merges = String::from("#version: byte-bpe 1\n");
        for (l, r) in &self.merges {
            let _ = writeln!(merges, "{l} {r}");
        }
        let vocab_path = dir.join("vocab.txt");
        fs::write(&vocab_path, table).map_err(|e| Error::io(&vocab_path, e))?;
        let merges_path = dir.join("merges.txt");
        fs::write(&merges_path, merges).map_err(|e| Error::io(&merges_path, e))
    }

    /// Reads `merges.txt` and `vocab.txt` written by [`BpeVocab::save`] and
    /// checks that they agree.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let merges_path = dir.join("merges.txt");
        let merges_txt = fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let mut merges = Vec::new();
        for (n, line) in merges_txt.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("{}:{}: expected `left right`", merges_path.display(), n + 1));
            let (l, r) = line.split_once(' ').ok_or_else(bad)?;
            merges.push((l.parse().map_err(|_| bad())?, r.parse().map_err(|_| bad())?));
        }
        let vocab_path = dir.join("vocab.txt");
        let table = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let base = BpeVocab::from_merges(merges, Vec::new())?;
        let mut specials = Vec::new();
        for (n, line) in table.lines().enumerate() {
            let bad = |what: &str| Error::Parse(format!("{}:{}: {what}", vocab_path.display(), n + 1));
            let (id, tok) = line.split_once('\t').ok_or_else(|| bad("expected `id<TAB>token`"))?;
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            if id < base.tokens.len() {
                if unescape_token(tok).as_deref() != Some(base.tokens[id].as_slice()) {
                    return Err(bad("token does not match merges.txt"));
                }
            } else if id == base.tokens.len() + specials.len() {
                specials.push(tok.to_string());
            } else {
                return Err(bad("ids out of sequence"));
            }
        }
        BpeVocab::from_merges(base.merges, specials)
    }
}

/// Printable characters pass through; whitespace, control characters,
/// backslash and invalid UTF-8 become `\xHH` (backslash becomes `\\`).
pub fn escape_token(bytes: &[u8]) -> String {
    let mut out = String::new();
    for chunk in bytes.utf8_chunks() {
        for c in chunk.valid().chars() {
            if c == '\\' {
                out.push_str("\\\\");
            } else if c.is_whitespace() || c.is_control() {
                let mut buf = [0u8; 4];
                for b in c.encode_utf8(&mut buf).bytes() {
                    let _ = write!(out, "\\x{b:02X}");
                }
            } else {
                out.push(c);
            }
        }
        for b in chunk.invalid() {
            let _ = write!(out, "\\x{b:02X}");
        }
    }
    out
}

pub fn unescape_token(s: &str) -> Option<Vec<u8>> {
    let mut out = Vec::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next()? {
            '\\' => out.push(b'\\'),
            'x' => {
                let hex: String = chars.by_ref().take(2).collect();
                out.push(u8::from_str_radix(&hex, 16).ok()?);
            }
            _ => return None,
        }
    }
    Some(out)
}

/// Maximal runs of whitespace and of non-whitespace characters.
pub fn pre_tokenize(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        let first = rest.chars().next()?;
        let ws = first.is_whitespace();
        let end = rest
            .char_indices()
            .find(|(_, c)| c.is_whitespace() != ws)
            .map_or(rest.len(), |(i, _)| i);
        let (piece, tail) = rest.split_at(end);
        rest = tail;
        Some(piece)
    })
}

/// Pre-token frequencies, sorted by byte string.
pub fn word_frequencies<'a>(texts: impl ParallelIterator<Item = &'a str>) -> Vec<(Vec<u8>, u64)> {
    let counts = texts
        .fold(HashMap::<&'a str, u64>::new, |mut m, t| {
            for w in pre_tokenize(t) {
                *m.entry(w).or_default() += 1;
            }
            m
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        });
    let mut out: Vec<(Vec<u8>, u64)> = counts.into_iter().map(|(k, v)| (k.as_bytes().to_vec(), v)).collect();
    out.sort_unstable();
    out
}

/// Rewrites every non-overlapping occurrence of `pair`, left to right.
fn merge_word(symbols: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

pub fn check_vocab_size(vocab_size: usize, specials: &[String]) -> Result<usize> {
    let floor = BYTE_TOKENS + specials.len();
    if vocab_size < floor {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is below 256 byte tokens + {} specials",
            specials.len()
        )));
    }
    Ok(vocab_size - floor)
}

pub fn train_bpe(docs: &[Document], vocab_size: usize, specials: Vec<String>) -> Result<BpeVocab> {
    train_bpe_texts(docs.par_iter().map(|d| d.text()), vocab_size, specials)
}

/// Greedy merge training over pre-token frequencies. Stops early (with a
/// warning) once no pair occurs at least twice.
pub fn train_bpe_texts<'a>(
    texts: impl ParallelIterator<Item = &'a str>,
    vocab_size: usize,
    specials: Vec<String>,
) -> Result<BpeVocab> {
    let target = check_vocab_size(vocab_size, &specials)?;
    let freqs = word_frequencies(texts);
    if freqs.is_empty() {
        return Err(Error::Empty("training corpus has no text".into()));
    }
    let mut words: Vec<Vec<u32>> = freqs.iter().map(|(w, _)| w.iter().map(|&b| b as u32).collect()).collect();
    let counts: Vec<i64> = freqs.iter().map(|(_, c)| *c as i64).collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_where: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += counts[wi];
            pair_where.entry(pair).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<(u32, u32)>)> =
        pair_counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

    let mut merges = Vec::with_capacity(target);
    while merges.len() < target {
        let Some((count, Reverse(pair))) = heap.pop() else {
            break;
        };
        if pair_counts.get(&pair).copied() != Some(count) {
            continue; // stale
        }
        if count < 2 {
            log::warn!(
                "BPE training stopped at {} merges: no pair occurs twice (target {target})",
                merges.len()
            );
            break;
        }
        let new_id = (BYTE_TOKENS + merges.len()) as u32;
        merges.push(pair);

        let mut touched: HashMap<(u32, u32), i64> = HashMap::new();
        let mut affected: Vec<usize> = pair_where.remove(&pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let old = &words[wi];
            if !old.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            let new = merge_word(old, pair, new_id);
            for p in old.windows(2) {
                *touched.entry((p[0], p[1])).or_default() -= counts[wi];
            }
            for p in new.windows(2) {
                let q = (p[0], p[1]);
                *touched.entry(q).or_default() += counts[wi];
                if q != pair {
                    pair_where.entry(q).or_default().insert(wi);
                }
            }
            words[wi] = new;
        }
        for (p, delta) in touched {
            if delta == 0 {
                continue;
            }
            let c = pair_counts.entry(p).or_default();
            *c += delta;
            if *c <= 0 {
                pair_counts.remove(&p);
            } else {
                heap.push((*c, Reverse(p)));
            }
        }
        pair_counts.remove(&pair);
    }
    if merges.len() < target {
        log::warn!("vocabulary has {} of {vocab_size} requested tokens", BYTE_TOKENS + merges.len() + specials.len());
    }
    BpeVocab::from_merges(merges, specials)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub doc_id: String,
    pub ids: Vec<u32>,
    /// Token count, specials excluded.
    pub length: usize,
}

fn encode_piece(piece: &[u8], vocab: &BpeVocab, out: &mut Vec<u32>) {
    let mut symbols: Vec<u32> = piece.iter().map(|&b| b as u32).collect();
    loop {
        let best = symbols
            .windows(2)
            .filter_map(|p| vocab.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
            .min();
        let Some((rank, pair)) = best else { break };
        symbols = merge_word(&symbols, pair, BYTE_TOKENS as u32 + rank);
    }
    out.extend(symbols);
}

/// Token ids of `text`; never emits special tokens.
pub fn encode_ids(text: &str, vocab: &BpeVocab) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() / 2);
    for piece in pre_tokenize(text) {
        encode_piece(piece.as_bytes(), vocab, &mut ids);
    }
    ids
}

pub fn encode(doc_id: &str, text: &str, vocab: &BpeVocab) -> TokenSequence {
    let ids = encode_ids(text, vocab);
    TokenSequence {
        doc_id: doc_id.to_string(),
        length: ids.iter().filter(|&&i| !vocab.is_special(i)).count(),
        ids,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Text(String),
    /// The concatenated bytes are not valid UTF-8.
    Bytes(Vec<u8>),
}

impl Decoded {
    pub fn into_bytes(self) -> Vec<u8> {
        match self {
            Decoded::Text(s) => s.into_bytes(),
            Decoded::Bytes(b) => b,
        }
    }
}

/// Concatenates token bytes. Special tokens contribute nothing.
pub fn decode(ids: &[u32], vocab: &BpeVocab) -> Result<Decoded> {
    let mut bytes = Vec::new();
    for &id in ids {
        match vocab.token_bytes(id) {
            Some(b) => bytes.extend_from_slice(b),
            None if vocab.is_special(id) => {}
            None => {
                return Err(Error::Contract(format!(
                    "token id {id} outside vocabulary of {}",
                    vocab.vocab_size()
                )))
            }
        }
    }
    Ok(match String::from_utf8(bytes) {
        Ok(s) => Decoded::Text(s),
        Err(e) => Decoded::Bytes(e.into_bytes()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongDocShare {
    pub limit: usize,
    pub documents: usize,
    pub long_documents: usize,
    pub fraction: f64,
}

/// Share of documents whose token count exceeds `limit`.
pub fn long_doc_share(docs: &[Document], vocab: &BpeVocab, limit: usize) -> LongDocShare {
    let long = docs
        .par_iter()
        .filter(|d| encode(d.id(), d.text(), vocab).length > limit)
        .count();
    LongDocShare {
        limit,
        documents: docs.len(),
        long_documents: long,
        fraction: if docs.is_empty() { 0.0 } else { long as f64 / docs.len() as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn train(texts: &[&str], size: usize) -> BpeVocab {
        train_bpe_texts(texts.par_iter().copied(), size, default_specials()).unwrap()
    }

    #[test]
    fn pre_tokenize_splits_runs() {
        let v: Vec<&str> = pre_tokenize("  ab c\n\nשלום").collect();
        assert_eq!(v, ["  ", "ab", " ", "c", "\n\n", "שלום"]);
        assert_eq!(pre_tokenize("").count(), 0);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = train(&["aaab aaab"], 256 + 2 + 5);
        assert_eq!(v.merges()[0], (b'a' as u32, b'a' as u32));
        assert_eq!(v.merges().len(), 2);
        assert_eq!(v.vocab_size(), 263);
    }

    #[test]
    fn tie_break_prefers_smallest_pair() {
        // (a,b) and (c,d) both occur twice
        let v = train(&["ab cd ab cd"], 256 + 1 + 5);
        assert_eq!(v.merges(), &[(b'a' as u32, b'b' as u32)]);
    }

    #[test]
    fn byte_only_vocabulary() {
        let v = train(&["hello hello"], 256 + 5);
        assert!(v.merges().is_empty());
        assert_eq!(v.vocab_size(), 261);
        assert_eq!(encode_ids("hi", &v), vec![b'h' as u32, b'i' as u32]);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            train_bpe_texts(Vec::<&str>::new().into_par_iter(), 300, default_specials()),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            train_bpe_texts(["abc"].into_par_iter(), 260, default_specials()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn paper_scale_size_is_accepted() {
        assert_eq!(check_vocab_size(50_265, &default_specials()).unwrap(), 50_004);
        let v = train(&["abab abab abab"], 50_265);
        assert!(v.vocab_size() < 50_265);
        assert_eq!(v.vocab_size(), 256 + v.merges().len() + 5);
    }

    #[test]
    fn encode_examples() {
        let v = BpeVocab::from_merges(vec![(97, 97)], default_specials()).unwrap();
        let seq = encode("d", "aaaa", &v);
        assert_eq!(seq.ids, vec![256, 256]);
        assert_eq!(seq.length, 2);
        assert!(encode("d", "", &v).ids.is_empty());
        assert_eq!(encode_ids("xyz", &v), vec![120, 121, 122]);
        assert_eq!(encode_ids("aaa", &v), vec![256, 97]);
    }

    #[test]
    fn decode_examples() {
        let v = BpeVocab::from_merges(vec![(97, 97)], default_specials()).unwrap();
        assert_eq!(decode(&[], &v).unwrap(), Decoded::Text(String::new()));
        assert_eq!(decode(&[0x61], &v).unwrap(), Decoded::Text("a".into()));
        assert_eq!(decode(&[256, 98], &v).unwrap(), Decoded::Text("aab".into()));
        let pad = v.special_id("<pad>").unwrap();
        assert_eq!(pad, 257);
        assert_eq!(decode(&[pad, 97], &v).unwrap(), Decoded::Text("a".into()));
        assert!(decode(&[999], &v).is_err());
        assert_eq!(decode(&[0xD7], &v).unwrap(), Decoded::Bytes(vec![0xD7]));
    }

    #[test]
    fn escape_roundtrip_and_shape() {
        assert_eq!(escape_token(b"a b"), "a\\x20b");
        assert_eq!(escape_token("שלום".as_bytes()), "שלום");
        assert_eq!(escape_token(&[0xD7]), "\\xD7");
        assert_eq!(escape_token(b"\\"), "\\\\");
        for t in [&b"a b"[..], "שלום\n".as_bytes(), &[0xD7, 0x20, 0xFF], b"\\x41"] {
            assert_eq!(unescape_token(&escape_token(t)).unwrap(), t);
        }
    }

    #[test]
    fn vocab_files_roundtrip() {
        let v = train(&["שלום עולם שלום עולם aaab aaab", "עולם ומלואו"], 256 + 20 + 5);
        let dir = tempfile::tempdir().unwrap();
        v.save(dir.path()).unwrap();
        let back = BpeVocab::load(dir.path()).unwrap();
        assert_eq!(back, v);
        let table = fs::read_to_string(dir.path().join("vocab.txt")).unwrap();
        assert_eq!(table.lines().count(), v.vocab_size());
        fs::write(dir.path().join("merges.txt"), "1 999\n").unwrap();
        assert!(BpeVocab::load(dir.path()).is_err());
    }

    #[test]
    fn long_share_counts() {
        let v = BpeVocab::from_merges(vec![], default_specials()).unwrap();
        let docs: Vec<Document> = (0..10)
            .map(|i| Document::new(format!("d{i}"), "s", if i < 3 { "x".repeat(600) } else { "y".repeat(100) }))
            .collect();
        let s = long_doc_share(&docs, &v, 512);
        assert_eq!((s.long_documents, s.documents), (3, 10));
        assert_eq!(s.fraction, 0.3);
        assert_eq!(long_doc_share(&docs[3..], &v, 512).fraction, 0.0);
        assert_eq!(long_doc_share(&[], &v, 512).fraction, 0.0);
    }

    #[test]
    fn more_merges_never_lengthen_training_text() {
        let texts = ["שלום עולם שלום לכולם", "ספר הספרים בבית הספר", "abab abab cdcd"];
        let v = train(&texts, 256 + 5 + 40);
        let mut prev = usize::MAX;
        for n in 0..=v.merges().len() {
            let t = v.truncated(n);
            let len: usize = texts.iter().map(|x| encode_ids(x, &t).len()).sum();
            assert!(len <= prev, "{n} merges gave {len} > {prev}");
            prev = len;
        }
    }

    #[test]
    fn specials_are_validated() {
        assert!(BpeVocab::from_merges(vec![], vec!["a\tb".into()]).is_err());
        assert!(BpeVocab::from_merges(vec![], vec!["".into()]).is_err());
        assert!(BpeVocab::from_merges(vec![], vec!["<x>".into(), "<x>".into()]).is_err());
    }

    #[test]
    fn merge_parts_precede_merge() {
        let v = train(&["the cat sat on the mat with the hat that the rat ate"], 256 + 30 + 5);
        for (m, &(l, r)) in v.merges().iter().enumerate() {
            assert!((l as usize) < 256 + m && (r as usize) < 256 + m);
        }
    }

    proptest! {
        #[test]
        fn roundtrip_random_text(s in "[\\PCא-ת \\n\\t]{0,60}", extra in "[א-ת ]{0,40}") {
            let v = train(&["שלום עולם שלום עולם", "hello hello world", &extra], 256 + 40 + 5);
            prop_assert_eq!(decode(&encode_ids(&s, &v), &v).unwrap(), Decoded::Text(s));
        }
    }
}
