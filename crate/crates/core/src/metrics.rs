//! Generation, selection, grounding and query-statistics metrics.
//!
//! All values are in `[0, 1]`. Every lexical metric uses [`tokenize`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, tokenize, write_jsonl, Dialogue, KnowledgeBase};
use crate::error::Result;

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Multiset-overlap F1 between two token sequences; 0 if either is empty.
pub fn token_f1(pred: &[String], reference: &[String]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let ref_counts = counts(reference);
    let overlap: usize = counts(pred)
        .into_iter()
        .map(|(t, c)| c.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn unigram_f1(pred: &str, reference: &str) -> f64 {
    token_f1(&tokenize(pred), &tokenize(reference))
}

pub fn exact_match(pred: &str, reference: &str) -> f64 {
    if tokenize(pred) == tokenize(reference) {
        1.0
    } else {
        0.0
    }
}

/// 1 if `gold` is among the first `k` ranked ids.
pub fn recall_at_k(ranked: &[String], gold: &str, k: usize) -> f64 {
    if ranked.iter().take(k).any(|id| id == gold) {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank of `gold` if it is ranked in the top 10, else 0.
pub fn mrr_at_10(ranked: &[String], gold: &str) -> f64 {
    ranked
        .iter()
        .take(10)
        .position(|id| id == gold)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Overlap F1 between a response and the knowledge it was conditioned on.
pub fn kr_f1(response: &str, knowledge_text: &str) -> f64 {
    unigram_f1(response, knowledge_text)
}

/// Only passes `metric` through when the top-1 selection was correct.
pub fn kilt_gate(metric: f64, recall_at_1: f64) -> f64 {
    if recall_at_1 == 1.0 {
        metric
    } else {
        0.0
    }
}

/// Multi-word entity lexicon matched by longest-first scanning.
#[derive(Debug, Clone, Default)]
pub struct EntityLexicon {
    entries: HashSet<Vec<String>>,
    max_len: usize,
}

impl EntityLexicon {
    pub fn new<I, T>(names: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut entries = HashSet::new();
        let mut max_len = 0;
        for name in names {
            let toks = tokenize(name.as_ref()).into_inner();
            if !toks.is_empty() {
                max_len = max_len.max(toks.len());
                entries.insert(toks);
            }
        }
        Self { entries, max_len }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entities found in `text`, scanning left to right and taking the longest
    /// lexicon match at each position.
    pub fn extract(&self, text: &str) -> HashSet<String> {
        let toks = tokenize(text);
        let mut found = HashSet::new();
        let mut i = 0;
        while i < toks.len() {
            let longest = (1..=self.max_len.min(toks.len() - i))
                .rev()
                .find(|&n| self.entries.contains(&toks[i..i + n]));
            match longest {
                Some(n) => {
                    found.insert(toks[i..i + n].join(" "));
                    i += n;
                }
                None => i += 1,
            }
        }
        found
    }
}

/// Set-F1 over lexicon entities; `None` when the reference has no entities.
pub fn entity_f1(pred: &str, reference: &str, lexicon: &EntityLexicon) -> Option<f64> {
    let gold = lexicon.extract(reference);
    if gold.is_empty() {
        return None;
    }
    let found = lexicon.extract(pred);
    let hit = found.intersection(&gold).count();
    if hit == 0 {
        return Some(0.0);
    }
    let p = hit as f64 / found.len() as f64;
    let r = hit as f64 / gold.len() as f64;
    Some(2.0 * p * r / (p + r))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 with brevity penalty. Orders 2-4 use add-one smoothing;
/// unigram precision is unsmoothed.
pub fn bleu(pred: &str, reference: &str) -> f64 {
    let pred = tokenize(pred);
    let reference = tokenize(reference);
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_precision = 0.0;
    for n in 1..=4 {
        let ref_counts = ngram_counts(&reference, n);
        let pred_counts = ngram_counts(&pred, n);
        let total: usize = pred_counts.values().sum();
        let matched: usize = pred_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_precision += p.ln() / 4.0;
    }
    let (c, r) = (pred.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_precision.exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based ROUGE-L F-measure with beta = 1.
pub fn rouge_l(pred: &str, reference: &str) -> f64 {
    let pred = tokenize(pred);
    let reference = tokenize(reference);
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&pred, &reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / pred.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub mean_length: f64,
    pub mean_context_f1: f64,
    pub mean_response_f1: f64,
}

/// Length and overlap statistics of queries, paired index-wise with dialogues.
/// Context-F1 uses the context without role markers.
pub fn query_stats(queries: &[String], dialogues: &[Dialogue]) -> QueryStats {
    assert_eq!(queries.len(), dialogues.len(), "one query per dialogue");
    if queries.is_empty() {
        return QueryStats {
            mean_length: 0.0,
            mean_context_f1: 0.0,
            mean_response_f1: 0.0,
        };
    }
    let n = queries.len() as f64;
    let mut s = (0.0, 0.0, 0.0);
    for (q, d) in queries.iter().zip(dialogues) {
        s.0 += tokenize(q).len() as f64;
        s.1 += unigram_f1(q, &d.plain_context());
        s.2 += unigram_f1(q, &d.target_response);
    }
    QueryStats {
        mean_length: s.0 / n,
        mean_context_f1: s.1 / n,
        mean_response_f1: s.2 / n,
    }
}

/// One system output to evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub dialogue_id: String,
    pub query: String,
    pub knowledge_id: Option<String>,
    pub knowledge_miss: bool,
    pub response: String,
    /// Fused ranking (best first) used for MRR@10; optional in input files.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranked_knowledge_ids: Vec<String>,
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    Ok(read_jsonl(path.as_ref())?.into_iter().map(|(_, p)| p).collect())
}

pub fn save_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<()> {
    write_jsonl(path, preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dialogue_id: String,
    pub f1: f64,
    pub em: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub entity_f1: Option<f64>,
    pub kilt_f1: Option<f64>,
    pub kilt_rl: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub mrr_at_10: Option<f64>,
    pub kr_f1: f64,
    pub context_f1: f64,
    pub response_f1: f64,
    pub query_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Corpus means over the rows where each metric is defined.
    pub means: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut acc: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
        let mut add = |k: &'static str, v: Option<f64>| {
            if let Some(v) = v {
                let e = acc.entry(k).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        };
        for r in &rows {
            add("f1", Some(r.f1));
            add("em", Some(r.em));
            add("bleu", Some(r.bleu));
            add("rouge_l", Some(r.rouge_l));
            add("entity_f1", r.entity_f1);
            add("kilt_f1", r.kilt_f1);
            add("kilt_rl", r.kilt_rl);
            add("recall_at_1", r.recall_at_1);
            add("mrr_at_10", r.mrr_at_10);
            add("kr_f1", Some(r.kr_f1));
            add("context_f1", Some(r.context_f1));
            add("response_f1", Some(r.response_f1));
            add("query_len", Some(r.query_len as f64));
        }
        let means = acc
            .into_iter()
            .map(|(k, (sum, n))| (k.to_owned(), sum / n as f64))
            .collect();
        Self { rows, means }
    }

    pub fn mean(&self, key: &str) -> Option<f64> {
        self.means.get(key).copied()
    }
}

/// Scores predictions against their dialogues (matched by id). Rows follow the
/// prediction order; predictions without a matching dialogue are skipped.
pub fn evaluate(
    preds: &[Prediction],
    dialogues: &[Dialogue],
    kb: &KnowledgeBase,
    lexicon: Option<&EntityLexicon>,
) -> EvalReport {
    let by_id: HashMap<&str, &Dialogue> = dialogues.iter().map(|d| (d.id.as_str(), d)).collect();
    let rows = preds
        .iter()
        .filter_map(|p| by_id.get(p.dialogue_id.as_str()).map(|d| evaluate_one(p, d, kb, lexicon)))
        .collect();
    EvalReport::from_rows(rows)
}

fn evaluate_one(p: &Prediction, d: &Dialogue, kb: &KnowledgeBase, lexicon: Option<&EntityLexicon>) -> EvalRow {
    let reference = &d.target_response;
    let f1 = unigram_f1(&p.response, reference);
    let rl = rouge_l(&p.response, reference);
    let ranked: Vec<String> = if p.ranked_knowledge_ids.is_empty() {
        p.knowledge_id.iter().cloned().collect()
    } else {
        p.ranked_knowledge_ids.clone()
    };
    let (recall, mrr) = match &d.gold_knowledge_id {
        Some(gold) => (Some(recall_at_k(&ranked, gold, 1)), Some(mrr_at_10(&ranked, gold))),
        None => (None, None),
    };
    let knowledge_text = p
        .knowledge_id
        .as_deref()
        .and_then(|id| kb.get(id))
        .map(|e| e.text.as_str())
        .unwrap_or("");
    EvalRow {
        dialogue_id: p.dialogue_id.clone(),
        f1,
        em: exact_match(&p.response, reference),
        bleu: bleu(&p.response, reference),
        rouge_l: rl,
        entity_f1: lexicon.and_then(|lx| entity_f1(&p.response, reference, lx)),
        kilt_f1: recall.map(|r| kilt_gate(f1, r)),
        kilt_rl: recall.map(|r| kilt_gate(rl, r)),
        recall_at_1: recall,
        mrr_at_10: mrr,
        kr_f1: kr_f1(&p.response, knowledge_text),
        context_f1: unigram_f1(&p.query, &d.plain_context()),
        response_f1: unigram_f1(&p.query, reference),
        query_len: tokenize(&p.query).len(),
    }
}
