//! Inverted index with Okapi BM25 ranking.
//!
//! Documents are numbered in ascending id order, so posting lists sorted by
//! document number are also sorted by id and the ascending-id tie-break is a
//! comparison of numbers.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, KnowledgeBase, TokenSeq};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 5] = b"QKIX1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit<S = f64> {
    pub doc_id: String,
    pub score: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_num: HashMap<String, u32>,
    doc_len: Vec<u32>,
    postings: HashMap<String, Vec<Posting>>,
    avg_doc_len: f64,
}

impl InvertedIndex {
    pub fn build(kb: &KnowledgeBase) -> Self {
        Self::build_with(kb, Bm25Params::default())
    }

    /// Indexes the title (if any) followed by the text of every entry.
    pub fn build_with(kb: &KnowledgeBase, params: Bm25Params) -> Self {
        let mut docs: Vec<_> = kb.iter().collect();
        docs.sort_by(|a, b| a.id.cmp(&b.id));

        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_len = Vec::with_capacity(docs.len());
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        for (num, entry) in docs.iter().enumerate() {
            let tokens = tokenize(&entry.indexed_text());
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in tokens.iter() {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_owned()).or_default().push(Posting {
                    doc: num as u32,
                    tf: count,
                });
            }
            doc_ids.push(entry.id.clone());
            doc_len.push(tokens.len() as u32);
        }
        Self::assemble(params, doc_ids, doc_len, postings)
    }

    fn assemble(
        params: Bm25Params,
        doc_ids: Vec<String>,
        doc_len: Vec<u32>,
        postings: HashMap<String, Vec<Posting>>,
    ) -> Self {
        let total: u64 = doc_len.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_len = if doc_ids.is_empty() {
            0.0
        } else {
            total as f64 / doc_ids.len() as f64
        };
        let doc_num = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Self {
            params,
            doc_ids,
            doc_num,
            doc_len,
            postings,
            avg_doc_len,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.doc_num.get(doc_id).map(|&n| self.doc_len[n as usize])
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`, always non-negative.
    fn idf<S: Scalar>(&self, df: usize) -> S {
        let n = S::from_count(self.num_docs());
        let df = S::from_count(df);
        let half = S::lit(0.5);
        ((n - df + half) / (df + half) + S::one()).ln()
    }

    fn term_weight<S: Scalar>(&self, idf: S, tf: u32, doc: u32) -> S {
        let k1 = S::lit(self.params.k1);
        let b = S::lit(self.params.b);
        let tf = S::from_count(tf as usize);
        let dl = S::from_count(self.doc_len[doc as usize] as usize);
        let avgdl = S::lit(self.avg_doc_len);
        idf * tf * (k1 + S::one()) / (tf + k1 * (S::one() - b + b * dl / avgdl))
    }

    /// BM25 score of one document. Repeated query terms count once per
    /// occurrence.
    pub fn bm25_score<S: Scalar>(&self, query: &TokenSeq, doc_id: &str) -> Result<S> {
        let &doc = self
            .doc_num
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_owned()))?;
        let mut score = S::zero();
        for term in query.iter() {
            let list = self.postings(term);
            if let Ok(pos) = list.binary_search_by_key(&doc, |p| p.doc) {
                let idf = self.idf::<S>(list.len());
                score += self.term_weight(idf, list[pos].tf, doc);
            }
        }
        Ok(score)
    }

    /// The `top_n` positively scored documents, best first, ties by ascending id.
    pub fn retrieve<S: Scalar>(&self, query: &TokenSeq, top_n: usize) -> Vec<RetrievalHit<S>> {
        if top_n == 0 || self.num_docs() == 0 {
            return Vec::new();
        }
        let mut scores: HashMap<u32, S> = HashMap::new();
        for term in query.iter() {
            let list = self.postings(term);
            if list.is_empty() {
                continue;
            }
            let idf = self.idf::<S>(list.len());
            for p in list {
                *scores.entry(p.doc).or_insert_with(S::zero) += self.term_weight(idf, p.tf, p.doc);
            }
        }
        let mut ranked: Vec<(u32, S)> = scores.into_iter().filter(|(_, s)| *s > S::zero()).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
        ranked.truncate(top_n);
        ranked
            .into_iter()
            .map(|(doc, score)| RetrievalHit {
                doc_id: self.doc_ids[doc as usize].clone(),
                score,
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Little-endian layout: magic, k1, b, documents (id, length), then terms
    /// in sorted order with their posting lists.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.params.k1.to_le_bytes());
        out.extend_from_slice(&self.params.b.to_le_bytes());
        out.extend_from_slice(&(self.doc_ids.len() as u64).to_le_bytes());
        for (id, len) in self.doc_ids.iter().zip(&self.doc_len) {
            put_str(&mut out, id);
            out.extend_from_slice(&len.to_le_bytes());
        }
        let mut terms: Vec<_> = self.postings.iter().collect();
        terms.sort_by(|a, b| a.0.cmp(b.0));
        out.extend_from_slice(&(terms.len() as u64).to_le_bytes());
        for (term, list) in terms {
            put_str(&mut out, term);
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for p in list {
                out.extend_from_slice(&p.doc.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::MalformedIndex("bad magic bytes".into()));
        }
        let params = Bm25Params {
            k1: f64::from_le_bytes(r.array()?),
            b: f64::from_le_bytes(r.array()?),
        };
        let n_docs = u64::from_le_bytes(r.array()?) as usize;
        let mut doc_ids = Vec::with_capacity(n_docs.min(1 << 20));
        let mut doc_len = Vec::with_capacity(n_docs.min(1 << 20));
        for _ in 0..n_docs {
            doc_ids.push(r.string()?);
            doc_len.push(u32::from_le_bytes(r.array()?));
        }
        let n_terms = u64::from_le_bytes(r.array()?) as usize;
        let mut postings = HashMap::with_capacity(n_terms.min(1 << 20));
        for _ in 0..n_terms {
            let term = r.string()?;
            let n = u32::from_le_bytes(r.array()?) as usize;
            let mut list = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let doc = u32::from_le_bytes(r.array()?);
                let tf = u32::from_le_bytes(r.array()?);
                if doc as usize >= n_docs {
                    return Err(Error::MalformedIndex(format!("posting for `{term}` names doc {doc}")));
                }
                list.push(Posting { doc, tf });
            }
            postings.insert(term, list);
        }
        if r.pos != bytes.len() {
            return Err(Error::MalformedIndex("trailing bytes".into()));
        }
        Ok(Self::assemble(params, doc_ids, doc_len, postings))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedIndex("truncated file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn string(&mut self) -> Result<String> {
        let len = u32::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::MalformedIndex("invalid utf-8".into()))
    }
}
