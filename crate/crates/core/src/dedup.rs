//! Exact and MinHash/LSH near-duplicate removal.
//!
//! `dedup_corpus` runs exact matching on normalized text first, then
//! shingles and signs the survivors, buckets them by LSH band, verifies
//! every candidate pair with exact Jaccard and clusters verified pairs
//! transitively. Each cluster keeps one representative: the member with
//! the most words, ties going to the smallest id. Nothing in the result
//! depends on input order or on the number of worker threads.
//!
//! Band key `j` is `xxh3_64_with_seed(be_bytes(values[j*r..(j+1)*r]), j)`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::{xxh3_128, xxh3_64_with_seed};

use crate::corpus::{normalize_for_dedup, stage_stats, Document, StageStats};
use crate::error::{Error, Result};
use crate::minhash::{exact_jaccard, minhash_signature, shingle, MinHashParams, ShingleSet, Signature};

pub fn band_keys(sig: &Signature, params: &MinHashParams) -> Result<Vec<u64>> {
    if sig.len() != params.num_perm || params.bands * params.rows != params.num_perm {
        return Err(Error::Contract(format!(
            "signature `{}` has {} components, expected {} = {} bands x {} rows",
            sig.doc_id,
            sig.len(),
            params.num_perm,
            params.bands,
            params.rows
        )));
    }
    let mut buf = Vec::with_capacity(params.rows * 8);
    Ok(sig
        .values
        .chunks_exact(params.rows)
        .enumerate()
        .map(|(j, band)| {
            buf.clear();
            for v in band {
                buf.extend_from_slice(&v.to_be_bytes());
            }
            xxh3_64_with_seed(&buf, j as u64)
        })
        .collect())
}

/// One hash table per band, mapping band key to the documents that hit it.
#[derive(Debug, Clone)]
pub struct LshIndex {
    params: MinHashParams,
    tables: Vec<HashMap<u64, Vec<String>>>,
}

impl LshIndex {
    pub fn new(params: MinHashParams) -> Result<Self> {
        params.validate()?;
        Ok(LshIndex {
            params,
            tables: vec![HashMap::new(); params.bands],
        })
    }

    pub fn params(&self) -> &MinHashParams {
        &self.params
    }

    pub fn insert(&mut self, sig: &Signature) -> Result<()> {
        let keys = band_keys(sig, &self.params)?;
        for (table, key) in self.tables.iter_mut().zip(keys) {
            table.entry(key).or_default().push(sig.doc_id.clone());
        }
        Ok(())
    }

    /// Keys are computed in parallel, insertion follows `sigs` order.
    pub fn build(params: MinHashParams, sigs: &[Signature]) -> Result<Self> {
        let mut index = LshIndex::new(params)?;
        let keys: Vec<Vec<u64>> = sigs
            .par_iter()
            .map(|s| band_keys(s, &params))
            .collect::<Result<_>>()?;
        for (sig, keys) in sigs.iter().zip(keys) {
            for (table, key) in index.tables.iter_mut().zip(keys) {
                table.entry(key).or_default().push(sig.doc_id.clone());
            }
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.tables.first().map_or(0, |t| t.values().map(Vec::len).sum())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unordered pairs sharing at least one bucket, as `(smaller, larger)`.
pub fn candidate_pairs(index: &LshIndex) -> BTreeSet<(String, String)> {
    let mut pairs = BTreeSet::new();
    for table in &index.tables {
        for bucket in table.values().filter(|b| b.len() > 1) {
            for (i, a) in bucket.iter().enumerate() {
                for b in &bucket[i + 1..] {
                    if a == b {
                        continue;
                    }
                    let pair = if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
                    pairs.insert(pair);
                }
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedPair {
    pub a: String,
    pub b: String,
    pub jaccard: f64,
}

/// Keeps the pairs whose exact Jaccard reaches `threshold`, in input order.
pub fn verify_pairs(
    pairs: &BTreeSet<(String, String)>,
    shingles: &HashMap<String, ShingleSet>,
    threshold: f64,
) -> Result<Vec<VerifiedPair>> {
    let pairs: Vec<&(String, String)> = pairs.iter().collect();
    let checked: Vec<Option<VerifiedPair>> = pairs
        .par_iter()
        .map(|(a, b)| {
            let get = |id: &String| {
                shingles
                    .get(id)
                    .ok_or_else(|| Error::Contract(format!("no shingle set for document `{id}`")))
            };
            let j = exact_jaccard(get(a)?, get(b)?);
            Ok((j >= threshold).then(|| VerifiedPair {
                a: a.clone(),
                b: b.clone(),
                jaccard: j,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(checked.into_iter().flatten().collect())
}

/// Disjoint-set forest with union by size and path halving.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateCluster {
    /// Sorted ids, at least two.
    pub members: Vec<String>,
    pub representative: String,
}

/// Most words wins; equal counts go to the smallest id.
pub fn select_representative<'a>(members: &[&'a Document]) -> &'a str {
    members
        .iter()
        .max_by(|x, y| x.word_count().cmp(&y.word_count()).then_with(|| y.id().cmp(x.id())))
        .map(|d| d.id())
        .expect("cluster has at least one member")
}

/// Connected components of the verified-pair graph. Singletons are dropped.
pub fn cluster(pairs: &[VerifiedPair], docs: &HashMap<&str, &Document>) -> Result<Vec<DuplicateCluster>> {
    let ids: BTreeSet<&str> = pairs.iter().flat_map(|p| [p.a.as_str(), p.b.as_str()]).collect();
    let ids: Vec<&str> = ids.into_iter().collect();
    let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut uf = UnionFind::new(ids.len());
    for p in pairs {
        uf.union(pos[p.a.as_str()], pos[p.b.as_str()]);
    }
    let mut groups: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(id);
    }
    let mut clusters = Vec::with_capacity(groups.len());
    for members in groups.into_values() {
        let found: Vec<&Document> = members
            .iter()
            .map(|id| {
                docs.get(id)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("clustered id `{id}` is not in the corpus")))
            })
            .collect::<Result<_>>()?;
        clusters.push(DuplicateCluster {
            representative: select_representative(&found).to_string(),
            members: members.into_iter().map(str::to_string).collect(),
        });
    }
    clusters.sort_by(|a, b| a.members[0].cmp(&b.members[0]));
    Ok(clusters)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemovalKind {
    Exact,
    Near,
}

/// Evidence for one removed document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub kept: String,
    pub removed: String,
    pub kept_source: String,
    pub removed_source: String,
    pub kind: RemovalKind,
    /// Exact Jaccard of the strongest verified link of the removed
    /// document; 1.0 for exact duplicates.
    pub jaccard: f64,
    /// Exact Jaccard between the removed document and the kept one. Can
    /// sit below the threshold when the link is transitive.
    pub jaccard_to_kept: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcePairCount {
    pub kept_source: String,
    pub removed_source: String,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub before: StageStats,
    pub after: StageStats,
    pub exact_removed: usize,
    pub near_removed: usize,
    pub removed: usize,
    pub clusters: usize,
    pub candidate_pairs: usize,
    pub verified_pairs: usize,
    pub by_source: Vec<SourcePairCount>,
    pub removals: Vec<Removal>,
}

impl DedupReport {
    /// Removals whose kept and removed documents come from different sources.
    pub fn cross_source_removed(&self) -> usize {
        self.by_source
            .iter()
            .filter(|c| c.kept_source != c.removed_source)
            .map(|c| c.removed)
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct DedupOutcome {
    pub survivors: Vec<Document>,
    pub report: DedupReport,
    /// Signatures of the documents that entered the near-duplicate stage,
    /// in corpus order. Suitable for checkpointing.
    pub signatures: Vec<Signature>,
}

fn by_rep_policy(docs: &[&Document]) -> usize {
    let rep = select_representative(docs);
    docs.iter().position(|d| d.id() == rep).unwrap()
}

/// Keeps one document per normalized text. Survivors stay in input order.
pub fn exact_dedup(docs: Vec<Document>) -> (Vec<Document>, Vec<Removal>) {
    let digests: Vec<u128> = docs
        .par_iter()
        .map(|d| xxh3_128(normalize_for_dedup(d.text()).as_bytes()))
        .collect();
    let mut groups: HashMap<u128, Vec<usize>> = HashMap::new();
    for (i, digest) in digests.iter().enumerate() {
        groups.entry(*digest).or_default().push(i);
    }
    let mut drop = vec![false; docs.len()];
    let mut removals = Vec::new();
    for members in groups.values().filter(|m| m.len() > 1) {
        let refs: Vec<&Document> = members.iter().map(|&i| &docs[i]).collect();
        let keep = members[by_rep_policy(&refs)];
        for &i in members.iter().filter(|&&i| i != keep) {
            drop[i] = true;
            removals.push(Removal {
                kept: docs[keep].id().to_string(),
                removed: docs[i].id().to_string(),
                kept_source: docs[keep].source().to_string(),
                removed_source: docs[i].source().to_string(),
                kind: RemovalKind::Exact,
                jaccard: 1.0,
                jaccard_to_kept: 1.0,
            });
        }
    }
    removals.sort_by(|a, b| a.removed.cmp(&b.removed));
    let survivors = docs
        .into_iter()
        .zip(drop)
        .filter_map(|(d, dropped)| (!dropped).then_some(d))
        .collect();
    (survivors, removals)
}

/// Signatures for `docs`, reusing any checkpointed signature whose id,
/// length and seed match.
pub fn sign_corpus(docs: &[Document], params: &MinHashParams, checkpoint: Option<&[Signature]>) -> Vec<Signature> {
    let cached: HashMap<&str, &Signature> = checkpoint
        .unwrap_or_default()
        .iter()
        .filter(|s| s.len() == params.num_perm && s.seed == params.seed)
        .map(|s| (s.doc_id.as_str(), s))
        .collect();
    docs.par_iter()
        .map(|d| match cached.get(d.id()) {
            Some(s) => (*s).clone(),
            None => minhash_signature(&shingle(d, params.shingle_n), params),
        })
        .collect()
}

pub fn dedup_corpus(docs: Vec<Document>, params: &MinHashParams) -> Result<DedupOutcome> {
    dedup_with_checkpoint(docs, params, None)
}

pub fn dedup_with_checkpoint(
    docs: Vec<Document>,
    params: &MinHashParams,
    checkpoint: Option<&[Signature]>,
) -> Result<DedupOutcome> {
    params.validate()?;
    let before = stage_stats(&docs, "before");
    let (docs, mut removals) = exact_dedup(docs);
    let exact_removed = removals.len();

    let signatures = sign_corpus(&docs, params, checkpoint);
    let index = LshIndex::build(*params, &signatures)?;
    let candidates = candidate_pairs(&index);

    let lookup: HashMap<&str, &Document> = docs.iter().map(|d| (d.id(), d)).collect();
    let needed: BTreeSet<&str> = candidates.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
    let needed: Vec<&str> = needed.into_iter().collect();
    let shingles: HashMap<String, ShingleSet> = needed
        .par_iter()
        .map(|id| (id.to_string(), shingle(lookup[id], params.shingle_n)))
        .collect();

    let verified = verify_pairs(&candidates, &shingles, params.threshold)?;
    let clusters = cluster(&verified, &lookup)?;

    let mut best_link: HashMap<&str, f64> = HashMap::new();
    for p in &verified {
        for id in [p.a.as_str(), p.b.as_str()] {
            let e = best_link.entry(id).or_insert(0.0);
            *e = e.max(p.jaccard);
        }
    }
    let mut removed_ids: HashSet<String> = HashSet::new();
    for c in &clusters {
        let kept = lookup[c.representative.as_str()];
        for m in c.members.iter().filter(|m| **m != c.representative) {
            let gone = lookup[m.as_str()];
            removals.push(Removal {
                kept: kept.id().to_string(),
                removed: gone.id().to_string(),
                kept_source: kept.source().to_string(),
                removed_source: gone.source().to_string(),
                kind: RemovalKind::Near,
                jaccard: best_link[m.as_str()],
                jaccard_to_kept: exact_jaccard(&shingles[m], &shingles[&c.representative]),
            });
            removed_ids.insert(m.clone());
        }
    }
    let near_removed = removed_ids.len();

    let survivors: Vec<Document> = docs.into_iter().filter(|d| !removed_ids.contains(d.id())).collect();
    let after = stage_stats(&survivors, "after");

    let mut by_source: BTreeMap<(String, String), usize> = BTreeMap::new();
    for r in &removals {
        *by_source.entry((r.kept_source.clone(), r.removed_source.clone())).or_default() += 1;
    }
    let report = DedupReport {
        before,
        after,
        exact_removed,
        near_removed,
        removed: exact_removed + near_removed,
        clusters: clusters.len(),
        candidate_pairs: candidates.len(),
        verified_pairs: verified.len(),
        by_source: by_source
            .into_iter()
            .map(|((kept_source, removed_source), removed)| SourcePairCount {
                kept_source,
                removed_source,
                removed,
            })
            .collect(),
        removals,
    };
    Ok(DedupOutcome {
        survivors,
        report,
        signatures,
    })
}

/// Deduplicates the union of already internally deduplicated corpora
/// under one index. Survivors keep corpus order, then document order.
pub fn dedup_across(corpora: Vec<(String, Vec<Document>)>, params: &MinHashParams) -> Result<DedupOutcome> {
    dedup_across_with_checkpoint(corpora, params, None)
}

pub fn dedup_across_with_checkpoint(
    corpora: Vec<(String, Vec<Document>)>,
    params: &MinHashParams,
    checkpoint: Option<&[Signature]>,
) -> Result<DedupOutcome> {
    if corpora.len() < 2 {
        return Err(Error::Contract(format!(
            "cross-corpus deduplication needs at least two corpora, got {}",
            corpora.len()
        )));
    }
    let merged: Vec<Document> = corpora.into_iter().flat_map(|(_, docs)| docs).collect();
    dedup_with_checkpoint(merged, params, checkpoint)
}
