//! Two-stage knowledge selection: BM25 recall, reranking, and sigmoid fusion
//! of the two scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, KnowledgeBase, KnowledgeEntry};
use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::metrics::token_f1;
use crate::scalar::{sigmoid, Scalar};

/// Fine-grained relevance of one knowledge entry to a query.
pub trait RerankScorer<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, query: &str, entry: &KnowledgeEntry) -> S;
}

/// Unigram F1 between query and entry text, mapped to a logit.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalF1;

const F1_CLAMP: f64 = 1e-6;

impl<S: Scalar> RerankScorer<S> for LexicalF1 {
    fn name(&self) -> &'static str {
        "lexical-f1"
    }

    fn score(&self, query: &str, entry: &KnowledgeEntry) -> S {
        let f1 = token_f1(&tokenize(query), &tokenize(&entry.text));
        let p = S::lit(f1.clamp(F1_CLAMP, 1.0 - F1_CLAMP));
        (p / (S::one() - p)).ln()
    }
}

/// Looks up a registered reranker.
pub fn reranker_by_name<S: Scalar>(name: &str) -> Result<Box<dyn RerankScorer<S>>> {
    match name {
        "lexical-f1" => Ok(Box::new(LexicalF1)),
        other => Err(Error::InvalidArgument(format!("unknown reranker `{other}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Min-max normalize each score list before summing.
    #[default]
    Minmax,
    /// Sum the raw scores.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub reranker: String,
    pub top_n: usize,
    pub top_k: usize,
    pub fusion: FusionMode,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            reranker: "lexical-f1".into(),
            top_n: 50,
            top_k: 1,
            fusion: FusionMode::Minmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCandidate<S = f64> {
    pub knowledge_id: String,
    pub s_retrieval: S,
    pub s_rerank: S,
    pub fused_prob: S,
}

/// `sigmoid(s_retrieval + s_rerank)`.
#[inline]
pub fn fuse<S: Scalar>(s_retrieval: S, s_rerank: S) -> S {
    sigmoid(s_retrieval + s_rerank)
}

/// Maps a list to `[0, 1]`; a constant list maps to 0.5 everywhere.
pub fn min_max_normalize<S: Scalar>(xs: &[S]) -> Vec<S> {
    let lo = xs.iter().copied().fold(S::infinity(), S::min);
    let hi = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if hi.partial_cmp(&lo) != Some(Ordering::Greater) {
        return vec![S::lit(0.5); xs.len()];
    }
    xs.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

pub struct Selector<'a, S: Scalar = f64> {
    index: &'a InvertedIndex,
    kb: &'a KnowledgeBase,
    reranker: Box<dyn RerankScorer<S>>,
    config: SelectorConfig,
}

impl<'a, S: Scalar> Selector<'a, S> {
    pub fn new(index: &'a InvertedIndex, kb: &'a KnowledgeBase, config: SelectorConfig) -> Result<Self> {
        let reranker = reranker_by_name(&config.reranker)?;
        Self::with_reranker(index, kb, reranker, config)
    }

    /// Uses `reranker` regardless of `config.reranker`.
    pub fn with_reranker(
        index: &'a InvertedIndex,
        kb: &'a KnowledgeBase,
        reranker: Box<dyn RerankScorer<S>>,
        config: SelectorConfig,
    ) -> Result<Self> {
        if config.top_k < 1 {
            return Err(Error::InvalidArgument("selector.top_k must be at least 1".into()));
        }
        if config.top_k > config.top_n {
            return Err(Error::InvalidArgument(format!(
                "selector.top_k ({}) exceeds selector.top_n ({})",
                config.top_k, config.top_n
            )));
        }
        Ok(Self {
            index,
            kb,
            reranker,
            config,
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn kb(&self) -> &KnowledgeBase {
        self.kb
    }

    /// Top `config.top_k` entries for `query`.
    pub fn select(&self, query: &str) -> Result<Vec<SelectionCandidate<S>>> {
        self.select_k(query, self.config.top_k)
    }

    /// Retrieves `top_n`, reranks, fuses, and keeps the best `top_k`, ties by
    /// ascending knowledge id.
    pub fn select_k(&self, query: &str, top_k: usize) -> Result<Vec<SelectionCandidate<S>>> {
        if top_k < 1 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        let hits = self.index.retrieve::<S>(&tokenize(query), self.config.top_n);
        if hits.is_empty() {
            return Ok(Vec::new());
        }
        let retrieval: Vec<S> = hits.iter().map(|h| h.score).collect();
        let rerank = hits
            .iter()
            .map(|h| {
                let entry = self
                    .kb
                    .get(&h.doc_id)
                    .ok_or_else(|| Error::UnknownDocument(h.doc_id.clone()))?;
                Ok(self.reranker.score(query, entry))
            })
            .collect::<Result<Vec<S>>>()?;
        let (nr, nk) = match self.config.fusion {
            FusionMode::Minmax => (min_max_normalize(&retrieval), min_max_normalize(&rerank)),
            FusionMode::Raw => (retrieval.clone(), rerank.clone()),
        };
        let mut scored: Vec<(S, SelectionCandidate<S>)> = hits
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                let sum = nr[i] + nk[i];
                (
                    sum,
                    SelectionCandidate {
                        knowledge_id: h.doc_id,
                        s_retrieval: retrieval[i],
                        s_rerank: rerank[i],
                        fused_prob: sigmoid(sum),
                    },
                )
            })
            .collect();
        // Sigmoid is increasing, so ranking by the sum ranks by fused probability.
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.knowledge_id.cmp(&b.1.knowledge_id))
        });
        scored.truncate(top_k);
        Ok(scored.into_iter().map(|(_, c)| c).collect())
    }
}
