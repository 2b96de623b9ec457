//! Shingling, exact Jaccard and MinHash signatures.
//!
//! # Hash family
//!
//! Signatures are reproducible bit-for-bit on every platform. With
//! `GOLDEN = 0x9E3779B97F4A7C15` and the SplitMix64 finalizer
//!
//! ```text
//! mix64(z) = { z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//!              z = (z ^ (z >> 27)) * 0x94D049BB133111EB;
//!              z ^ (z >> 31) }                       (wrapping arithmetic)
//! ```
//!
//! component `i` of a signature under run seed `seed` uses
//!
//! ```text
//! key_i  = mix64(seed + (i + 1) * GOLDEN)
//! h_i(f) = mix64(f ^ key_i)
//! ```
//!
//! and stores `min over f in shingles of h_i(f)`. Shingle fingerprints `f`
//! are `xxh3_64` (seed 0) of the UTF-8 bytes of the window's words joined
//! by single spaces, taken from [`normalize_for_dedup`] output.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use crate::corpus::{normalize_for_dedup, Document};
use crate::error::{Error, Result};

pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key for hash-family member `index` under `seed`.
#[inline]
pub fn family_key(seed: u64, index: usize) -> u64 {
    mix64(seed.wrapping_add((index as u64).wrapping_add(1).wrapping_mul(GOLDEN)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinHashParams {
    /// Signature length; must equal `bands * rows`.
    pub num_perm: usize,
    pub bands: usize,
    pub rows: usize,
    pub seed: u64,
    /// Shingle width in words.
    pub shingle_n: usize,
    /// Exact-Jaccard cutoff for verified duplicates.
    pub threshold: f64,
}

impl Default for MinHashParams {
    fn default() -> Self {
        MinHashParams {
            num_perm: 256,
            bands: 16,
            rows: 16,
            seed: 42,
            shingle_n: 5,
            threshold: 0.8,
        }
    }
}

impl MinHashParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_perm == 0 {
            return Err(Error::Config("num_perm must be at least 1".into()));
        }
        if self.bands * self.rows != self.num_perm {
            return Err(Error::Config(format!(
                "num_perm ({}) must equal bands ({}) x rows ({})",
                self.num_perm, self.bands, self.rows
            )));
        }
        if self.shingle_n == 0 {
            return Err(Error::Config("shingle_n must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} not in (0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// Probability that a pair with Jaccard `s` shares at least one band.
    pub fn detection_probability(&self, s: f64) -> f64 {
        1.0 - (1.0 - s.powi(self.rows as i32)).powi(self.bands as i32)
    }
}

/// Sorted, de-duplicated shingle fingerprints of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShingleSet {
    pub doc_id: String,
    pub n: usize,
    hashes: Vec<u64>,
}

impl ShingleSet {
    pub fn from_hashes(doc_id: impl Into<String>, n: usize, hashes: impl IntoIterator<Item = u64>) -> Self {
        let mut hashes: Vec<u64> = hashes.into_iter().collect();
        hashes.sort_unstable();
        hashes.dedup();
        ShingleSet {
            doc_id: doc_id.into(),
            n,
            hashes,
        }
    }

    pub fn hashes(&self) -> &[u64] {
        &self.hashes
    }

    pub fn len(&self) -> usize {
        self.hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hashes.is_empty()
    }
}

pub fn shingle(doc: &Document, n: usize) -> ShingleSet {
    shingle_text(doc.id(), doc.text(), n)
}

/// Word `n`-gram fingerprints of the normalized text. Texts shorter than
/// `n` words collapse to one fingerprint of the whole normalized text.
pub fn shingle_text(doc_id: &str, text: &str, n: usize) -> ShingleSet {
    assert!(n >= 1, "shingle width must be positive");
    let norm = normalize_for_dedup(text);
    // byte offsets of word starts and ends in the single-spaced form
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for word in norm.split(' ') {
        if !word.is_empty() {
            bounds.push((start, start + word.len()));
        }
        start += word.len() + 1;
    }
    if bounds.len() < n {
        return ShingleSet::from_hashes(doc_id, n, [xxh3_64(norm.as_bytes())]);
    }
    let hashes = bounds
        .windows(n)
        .map(|w| xxh3_64(&norm.as_bytes()[w[0].0..w[n - 1].1]));
    ShingleSet::from_hashes(doc_id, n, hashes)
}

/// `|A ∩ B| / |A ∪ B|`, by a merge over the sorted fingerprints.
pub fn exact_jaccard(a: &ShingleSet, b: &ShingleSet) -> f64 {
    let (x, y) = (a.hashes(), b.hashes());
    if x.is_empty() && y.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (x.len() + y.len() - inter) as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub doc_id: String,
    pub seed: u64,
    pub values: Vec<u64>,
}

impl Signature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn minhash_signature(set: &ShingleSet, params: &MinHashParams) -> Signature {
    let keys: Vec<u64> = (0..params.num_perm).map(|i| family_key(params.seed, i)).collect();
    let mut values = vec![u64::MAX; params.num_perm];
    for &f in set.hashes() {
        for (v, &k) in values.iter_mut().zip(&keys) {
            let h = mix64(f ^ k);
            if h < *v {
                *v = h;
            }
        }
    }
    Signature {
        doc_id: set.doc_id.clone(),
        seed: params.seed,
        values,
    }
}

/// Fraction of components on which the signatures agree.
pub fn estimate_jaccard(a: &Signature, b: &Signature) -> Result<f64> {
    if a.len() != b.len() || a.seed != b.seed {
        return Err(Error::Contract(format!(
            "signatures `{}` (k={}, seed={}) and `{}` (k={}, seed={}) are not comparable",
            a.doc_id,
            a.len(),
            a.seed,
            b.doc_id,
            b.len(),
            b.seed
        )));
    }
    if a.is_empty() {
        return Err(Error::Contract("empty signatures".into()));
    }
    let same = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

// Record layout, all integers big-endian:
//   u32 id_len | id bytes | u32 k | u64 seed | k x u64 values

pub fn write_signature<W: Write>(w: &mut W, sig: &Signature) -> io::Result<()> {
    let id = sig.doc_id.as_bytes();
    let id_len = u32::try_from(id.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "doc id too long"))?;
    let k = u32::try_from(sig.values.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "signature too long"))?;
    w.write_all(&id_len.to_be_bytes())?;
    w.write_all(id)?;
    w.write_all(&k.to_be_bytes())?;
    w.write_all(&sig.seed.to_be_bytes())?;
    for v in &sig.values {
        w.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_signature<R: Read>(r: &mut R) -> io::Result<Option<Signature>> {
    let mut b4 = [0u8; 4];
    let mut first = 0;
    while first < 4 {
        let n = r.read(&mut b4[first..])?;
        if n == 0 {
            if first == 0 {
                return Ok(None);
            }
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        first += n;
    }
    let id_len = u32::from_be_bytes(b4) as usize;
    let mut id = vec![0u8; id_len];
    r.read_exact(&mut id)?;
    let doc_id = String::from_utf8(id).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    r.read_exact(&mut b4)?;
    let k = u32::from_be_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let seed = u64::from_be_bytes(b8);
    let mut values = Vec::with_capacity(k);
    for _ in 0..k {
        r.read_exact(&mut b8)?;
        values.push(u64::from_be_bytes(b8));
    }
    Ok(Some(Signature { doc_id, seed, values }))
}

pub fn write_signatures(path: impl AsRef<Path>, sigs: &[Signature]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = io::BufWriter::new(file);
    for sig in sigs {
        write_signature(&mut w, sig).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_signatures(path: impl AsRef<Path>) -> Result<Vec<Signature>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = io::BufReader::new(file);
    let mut out = Vec::new();
    while let Some(sig) = read_signature(&mut r).map_err(|e| Error::io(path, e))? {
        out.push(sig);
    }
    Ok(out)
}
