//! Candidate query sets and the marginal training objective.
//!
//! For each dialogue the trainer gathers candidate queries (beam outputs plus
//! guidance strings), selects knowledge for each, and maximizes the target
//! response likelihood marginalized over the candidates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{flatten_context, tokenize, write_jsonl, Dialogue, TokenSeq};
use crate::error::{Error, Result};
use crate::model::{linear_lr, query_input, response_input, AdamW, CondSeqModel, WeightedPair, DEFAULT_LR};
use crate::scalar::{log_sum_exp, Scalar};
use crate::selector::{SelectionCandidate, Selector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextGuidance {
    #[default]
    LastUtterance,
    FullContext,
    /// Gold query with probability `gold_query_p`, otherwise the last
    /// utterance.
    GoldQueryFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub context: ContextGuidance,
    pub gold_query_p: f64,
    pub context_on: bool,
    pub response_on: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            context: ContextGuidance::LastUtterance,
            gold_query_p: 0.0,
            context_on: true,
            response_on: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gold_query_p) {
            return Err(Error::InvalidArgument(format!(
                "guidance.gold_query_p must lie in [0, 1], got {}",
                self.gold_query_p
            )));
        }
        Ok(())
    }

    /// Context-guidance text for `d`. `seed` drives the gold-query draw,
    /// which is made per dialogue so results do not depend on order.
    pub fn context_text(&self, d: &Dialogue, seed: u64) -> Result<String> {
        Ok(match self.context {
            ContextGuidance::LastUtterance => d.last_utterance().to_string(),
            ContextGuidance::FullContext => flatten_context(d),
            ContextGuidance::GoldQueryFraction => {
                if dialogue_rng(seed, &d.id).gen_bool(self.gold_query_p) {
                    d.gold_query.clone().ok_or_else(|| {
                        Error::InvalidArgument(format!("dialogue `{}` has no gold_query", d.id))
                    })?
                } else {
                    d.last_utterance().to_string()
                }
            }
        })
    }
}

/// Deterministic RNG keyed by run seed and dialogue id.
pub fn dialogue_rng(seed: u64, id: &str) -> ChaCha8Rng {
    // FNV-1a keeps the stream independent of the std hasher.
    let stream = id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QWeight {
    /// Softmax of query log-probabilities over the candidate set.
    #[default]
    Softmax,
    /// Raw `exp(log_prob)`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Generated,
    ContextGuidance,
    ResponseGuidance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateItem<S> {
    pub query: String,
    pub tokens: TokenSeq,
    pub source: CandidateSource,
    /// Selected knowledge, best first. Empty on a retrieval miss.
    pub knowledge: Vec<SelectionCandidate<S>>,
    /// Response-task input conditioned on that knowledge.
    pub response_input: TokenSeq,
    /// Query-task log-probability at collection time.
    pub q_logprob: S,
}

impl<S: Scalar> CandidateItem<S> {
    /// Fused probability of the top knowledge entry, 0 if none was found.
    pub fn p_k(&self) -> S {
        self.knowledge.first().map_or(S::zero(), |k| k.fused_prob)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateQuerySet<S> {
    pub items: Vec<CandidateItem<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance<S> {
    pub dialogue_id: String,
    pub query_input: TokenSeq,
    pub candidates: CandidateQuerySet<S>,
    pub target_response: TokenSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: 128,
        }
    }
}

/// Joined texts of the selected entries in rank order.
pub fn knowledge_text<S: Scalar>(selector: &Selector<'_, S>, knowledge: &[SelectionCandidate<S>]) -> String {
    knowledge
        .iter()
        .filter_map(|k| selector.kb().get(&k.knowledge_id))
        .map(|e| e.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Beam queries first, then context guidance, then response guidance.
/// A guidance string equal to an earlier item replaces that item's label and
/// text; a second guidance equal to the first is dropped.
pub fn assemble_candidates<S: Scalar, M: CondSeqModel<S>>(
    model: &M,
    selector: &Selector<'_, S>,
    d: &Dialogue,
    gc: &GuidanceConfig,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<TrainingInstance<S>> {
    let qin = query_input(d);
    let mut raw: Vec<(String, TokenSeq, CandidateSource)> = Vec::new();
    for h in model.beam_search(&qin, decode.beam_size, decode.max_len) {
        if !raw.iter().any(|(_, t, _)| *t == h.tokens) {
            raw.push((h.tokens.join(), h.tokens, CandidateSource::Generated));
        }
    }
    let mut guidance = Vec::new();
    if gc.context_on {
        guidance.push((gc.context_text(d, seed)?, CandidateSource::ContextGuidance));
    }
    if gc.response_on {
        guidance.push((d.target_response.clone(), CandidateSource::ResponseGuidance));
    }
    for (text, source) in guidance {
        let tokens = tokenize(&text);
        match raw.iter_mut().find(|(_, t, _)| *t == tokens) {
            Some(item) if item.2 == CandidateSource::Generated => {
                item.0 = text;
                item.2 = source;
            }
            Some(_) => {}
            None => raw.push((text, tokens, source)),
        }
    }
    let items = raw
        .into_iter()
        .map(|(query, tokens, source)| {
            let knowledge = selector.select(&query).unwrap_or_default();
            let response_input = response_input(d, &knowledge_text(selector, &knowledge));
            let q_logprob = model.log_prob(&qin, &tokens);
            CandidateItem {
                query,
                tokens,
                source,
                knowledge,
                response_input,
                q_logprob,
            }
        })
        .collect();
    Ok(TrainingInstance {
        dialogue_id: d.id.clone(),
        query_input: qin,
        candidates: CandidateQuerySet { items },
        target_response: tokenize(&d.target_response),
    })
}

/// Loss value and the weighted pairs whose NLL gradient equals the loss
/// gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalLoss<S> {
    pub loss: S,
    /// Posterior weight of each candidate.
    pub posterior: Vec<S>,
    pub pairs: Vec<WeightedPair<S>>,
}

/// `-log sum_q p~(q|c) p_k(q) p(r|c,k_q)` under the current model. Returns
/// `None` when no candidate has knowledge.
///
/// With posterior `w_q`, the gradient is `sum_q (p~_q - w_q) d(-s_q)` plus
/// `sum_q w_q d(-r_q)` in softmax mode, where `s_q` and `r_q` are the query
/// and response log-probabilities. In raw mode the query weight is `w_q`.
pub fn marginal_loss<S: Scalar, M: CondSeqModel<S>>(
    model: &M,
    inst: &TrainingInstance<S>,
    q_weight: QWeight,
) -> Option<MarginalLoss<S>> {
    let items = &inst.candidates.items;
    if items.iter().all(|c| c.knowledge.is_empty()) {
        return None;
    }
    let s: Vec<S> = items
        .iter()
        .map(|c| model.log_prob(&inst.query_input, &c.tokens))
        .collect();
    let log_q: Vec<S> = match q_weight {
        QWeight::Softmax => {
            let z = log_sum_exp(&s);
            s.iter().map(|&x| x - z).collect()
        }
        QWeight::Raw => s.clone(),
    };
    let terms: Vec<S> = items
        .iter()
        .zip(&log_q)
        .map(|(c, &lq)| {
            if c.knowledge.is_empty() {
                S::neg_infinity()
            } else {
                lq + c.p_k().ln() + model.log_prob(&c.response_input, &inst.target_response)
            }
        })
        .collect();
    let loss = -log_sum_exp(&terms);
    let posterior: Vec<S> = terms.iter().map(|&t| (t + loss).exp()).collect();
    let mut pairs = Vec::with_capacity(2 * items.len());
    for (j, c) in items.iter().enumerate() {
        let qw = match q_weight {
            QWeight::Softmax => posterior[j] - log_q[j].exp(),
            QWeight::Raw => posterior[j],
        };
        pairs.push(WeightedPair {
            id: format!("{}/q{j}", inst.dialogue_id),
            input: inst.query_input.clone(),
            output: c.tokens.clone(),
            weight: qw,
        });
        if posterior[j] > S::zero() {
            pairs.push(WeightedPair {
                id: format!("{}/r{j}", inst.dialogue_id),
                input: c.response_input.clone(),
                output: inst.target_response.clone(),
                weight: posterior[j],
            });
        }
    }
    Some(MarginalLoss {
        loss,
        posterior,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub inner_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub q_weight: QWeight,
    pub optimizer: AdamW,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            inner_epochs: 2,
            batch_size: 16,
            lr: DEFAULT_LR,
            q_weight: QWeight::Softmax,
            optimizer: AdamW::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerReport {
    /// Mean loss over the final epoch, measured before each batch update.
    pub mean_loss: f64,
    pub steps: usize,
    /// Instances skipped per epoch because no candidate had knowledge.
    pub skipped: usize,
}

/// `epochs` passes over `instances` in a seeded shuffled order, one optimizer
/// step per batch on the batch-mean marginal gradient. The learning rate
/// decays linearly to zero over the call.
pub fn train_inner<S: Scalar, M: CondSeqModel<S>>(
    model: &mut M,
    instances: &[TrainingInstance<S>],
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<InnerReport> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("train_inner needs at least one instance".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches_per_epoch = instances.len().div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.inner_epochs;
    let mut step = 0;
    let mut report = InnerReport {
        mean_loss: 0.0,
        steps: 0,
        skipped: 0,
    };
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for _ in 0..cfg.inner_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let frozen = &*model;
            let losses: Vec<Option<MarginalLoss<S>>> = batch
                .par_iter()
                .map(|&i| marginal_loss(frozen, &instances[i], cfg.q_weight))
                .collect();
            let live = losses.iter().flatten().count();
            skipped += batch.len() - live;
            if live > 0 {
                let scale = S::one() / S::from_count(live);
                let mut pairs = Vec::new();
                for ml in losses.into_iter().flatten() {
                    loss_sum += ml.loss.as_f64();
                    counted += 1;
                    pairs.extend(ml.pairs.into_iter().map(|mut p| {
                        p.weight *= scale;
                        p
                    }));
                }
                model.apply_gradients(&pairs, &cfg.optimizer, linear_lr(cfg.lr, step, total))?;
            }
            step += 1;
        }
        report = InnerReport {
            mean_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
            steps: step,
            skipped,
        };
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedCandidate {
    pub query: String,
    pub source: CandidateSource,
    pub knowledge_id: Option<String>,
    pub p_k: f64,
    pub q_logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedInstance {
    pub dialogue_id: String,
    pub candidates: Vec<DumpedCandidate>,
    pub target_response: String,
}

impl<S: Scalar> From<&TrainingInstance<S>> for DumpedInstance {
    fn from(inst: &TrainingInstance<S>) -> Self {
        Self {
            dialogue_id: inst.dialogue_id.clone(),
            candidates: inst
                .candidates
                .items
                .iter()
                .map(|c| DumpedCandidate {
                    query: c.query.clone(),
                    source: c.source,
                    knowledge_id: c.knowledge.first().map(|k| k.knowledge_id.clone()),
                    p_k: c.p_k().as_f64(),
                    q_logprob: c.q_logprob.as_f64(),
                })
                .collect(),
            target_response: inst.target_response.join(),
        }
    }
}

pub fn dump_instances<S: Scalar>(path: impl AsRef<Path>, instances: &[TrainingInstance<S>]) -> Result<()> {
    let rows: Vec<DumpedInstance> = instances.iter().map(DumpedInstance::from).collect();
    write_jsonl(path.as_ref(), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{KnowledgeBase, KnowledgeEntry, Role, Utterance};
    use crate::index::InvertedIndex;
    use crate::model::{Fbg, Vocab};
    use crate::selector::SelectorConfig;

    fn kb() -> KnowledgeBase {
        KnowledgeBase::new(vec![
            KnowledgeEntry {
                id: "k1".into(),
                text: "the color of zorb is deep blue".into(),
                title: None,
            },
            KnowledgeEntry {
                id: "k2".into(),
                text: "the size of zorb is very small".into(),
                title: None,
            },
        ])
        .unwrap()
    }

    fn dialogue(last: &str) -> Dialogue {
        Dialogue {
            id: "d1".into(),
            context: vec![
                Utterance {
                    role: Role::User,
                    text: "tell me about zorb".into(),
                },
                Utterance {
                    role: Role::User,
                    text: last.into(),
                },
            ],
            target_response: "the color of zorb is deep blue".into(),
            gold_query: Some("what is the color of zorb".into()),
            gold_knowledge_id: Some("k1".into()),
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(
            ["aaa", "the", "color", "of", "zorb", "is", "deep", "blue", "size", "very", "small"]
                .into_iter()
                .chain(["what", "tell", "me", "about", "user"]),
        )
    }

    #[test]
    fn guidance_off_gives_only_generated() {
        let kb = kb();
        let index = InvertedIndex::build(&kb);
        let sel = Selector::<f64>::new(&index, &kb, SelectorConfig::default()).unwrap();
        let m = Fbg::<f64>::zeros(vocab());
        let gc = GuidanceConfig {
            context_on: false,
            response_on: false,
            ..Default::default()
        };
        let inst = assemble_candidates(&m, &sel, &dialogue("what color"), &gc, &DecodeConfig::default(), 0).unwrap();
        assert_eq!(inst.candidates.items.len(), 4);
        assert!(inst.candidates.items.iter().all(|c| c.source == CandidateSource::Generated));
    }

    #[test]
    fn default_guidance_adds_one_of_each() {
        let kb = kb();
        let index = InvertedIndex::build(&kb);
        let sel = Selector::<f64>::new(&index, &kb, SelectorConfig::default()).unwrap();
        let m = Fbg::<f64>::zeros(vocab());
        let d = dialogue("what color");
        let inst = assemble_candidates(&m, &sel, &d, &GuidanceConfig::default(), &DecodeConfig::default(), 0).unwrap();
        let items = &inst.candidates.items;
        assert_eq!(items.len(), 6);
        let count = |s| items.iter().filter(|c| c.source == s).count();
        assert_eq!(count(CandidateSource::ContextGuidance), 1);
        assert_eq!(count(CandidateSource::ResponseGuidance), 1);
        let resp = items.iter().find(|c| c.source == CandidateSource::ResponseGuidance).unwrap();
        assert_eq!(resp.knowledge[0].knowledge_id, "k1");
        // Every item is rescored under the query task.
        for c in items {
            assert_eq!(c.q_logprob, m.log_prob(&inst.query_input, &c.tokens));
        }
    }

    #[test]
    fn duplicate_of_beam_output_is_merged() {
        // A zero model emits "", then single tokens in vocab order; "aaa" is
        // the first real token.
        let kb = kb();
        let index = InvertedIndex::build(&kb);
        let sel = Selector::<f64>::new(&index, &kb, SelectorConfig::default()).unwrap();
        let m = Fbg::<f64>::zeros(vocab());
        let inst = assemble_candidates(&m, &sel, &dialogue("aaa"), &GuidanceConfig::default(), &DecodeConfig::default(), 0).unwrap();
        let items = &inst.candidates.items;
        assert_eq!(items.len(), 5);
        assert_eq!(items[1].query, "aaa");
        assert_eq!(items[1].source, CandidateSource::ContextGuidance);
        // Empty query retrieves nothing.
        assert!(items[0].knowledge.is_empty());
    }

    #[test]
    fn gold_query_fraction_zero_matches_last_utterance() {
        let kb = kb();
        let index = InvertedIndex::build(&kb);
        let sel = Selector::<f64>::new(&index, &kb, SelectorConfig::default()).unwrap();
        let m = Fbg::<f64>::zeros(vocab());
        let d = dialogue("what color");
        let base = assemble_candidates(&m, &sel, &d, &GuidanceConfig::default(), &DecodeConfig::default(), 3).unwrap();
        let gc = GuidanceConfig {
            context: ContextGuidance::GoldQueryFraction,
            gold_query_p: 0.0,
            ..Default::default()
        };
        let alt = assemble_candidates(&m, &sel, &d, &gc, &DecodeConfig::default(), 3).unwrap();
        assert_eq!(base, alt);
        let gc = GuidanceConfig {
            gold_query_p: 1.0,
            ..gc
        };
        assert_eq!(gc.context_text(&d, 3).unwrap(), "what is the color of zorb");
    }

    fn item(tokens: &str, p_k: Option<f64>, knowledge: &str) -> CandidateItem<f64> {
        CandidateItem {
            query: tokens.into(),
            tokens: tokenize(tokens),
            source: CandidateSource::Generated,
            knowledge: p_k
                .map(|p| SelectionCandidate {
                    knowledge_id: "k".into(),
                    s_retrieval: 0.0,
                    s_rerank: 0.0,
                    fused_prob: p,
                })
                .into_iter()
                .collect(),
            response_input: tokenize(knowledge),
            q_logprob: 0.0,
        }
    }

    fn instance(items: Vec<CandidateItem<f64>>) -> TrainingInstance<f64> {
        TrainingInstance {
            dialogue_id: "d".into(),
            query_input: tokenize("the zorb"),
            candidates: CandidateQuerySet { items },
            target_response: tokenize("deep blue"),
        }
    }

    #[test]
    fn single_candidate_loss_is_response_nll() {
        let m = random_fbg(4);
        let inst = instance(vec![item("color", Some(1.0), "zorb color")]);
        let ml = marginal_loss(&m, &inst, QWeight::Softmax).unwrap();
        let r = m.log_prob(&tokenize("zorb color"), &inst.target_response);
        assert!((ml.loss + r).abs() < 1e-12);
    }

    #[test]
    fn equal_candidates_are_independent_of_query_weights() {
        let m = random_fbg(5);
        let inst = instance(vec![item("color", Some(0.8), "zorb"), item("the of", Some(0.8), "zorb")]);
        let ml = marginal_loss(&m, &inst, QWeight::Softmax).unwrap();
        let r = m.log_prob(&tokenize("zorb"), &inst.target_response);
        assert!((ml.loss - (-(0.8f64.ln()) - r)).abs() < 1e-12);
    }

    #[test]
    fn all_empty_knowledge_is_skipped() {
        let m = random_fbg(1);
        let inst = instance(vec![item("color", None, ""), item("zorb", None, "")]);
        assert!(marginal_loss(&m, &inst, QWeight::Softmax).is_none());
        let mut m2 = m.clone();
        let err = train_inner(&mut m2, &[], &TrainerConfig::default(), 0);
        assert!(err.is_err());
        let report = train_inner(&mut m2, &[inst], &TrainerConfig::default(), 0).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(m2, m);
    }

    #[test]
    fn removing_a_candidate_never_lowers_loss() {
        // Uniform query weights: zero query-task parameters make every
        // candidate equally likely.
        let m = Fbg::<f64>::zeros(vocab());
        let all = vec![
            item("color", Some(0.9), "deep blue"),
            item("of", Some(0.4), "zorb"),
            item("size", Some(0.7), "small"),
        ];
        let full = marginal_loss(&m, &instance(all.clone()), QWeight::Raw).unwrap().loss;
        for drop in 0..3 {
            let mut fewer = all.clone();
            fewer.remove(drop);
            let l = marginal_loss(&m, &instance(fewer), QWeight::Raw).unwrap().loss;
            assert!(l >= full - 1e-12);
        }
    }

    pub(crate) fn random_fbg(seed: u64) -> Fbg<f64> {
        let v = vocab();
        let n = v.len() * v.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prev = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bag = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Fbg::from_parts(v, prev, bag).unwrap()
    }

    fn check_fd(q_weight: QWeight, seed: u64) {
        let mut m = random_fbg(seed);
        let inst = instance(vec![
            item("color zorb", Some(0.9), "the color of zorb is deep blue"),
            item("size", Some(0.3), "the size of zorb is very small"),
            item("", None, ""),
        ]);
        let ml = marginal_loss(&m, &inst, q_weight).unwrap();
        let g = m.gradient(&ml.pairs).unwrap().to_dense(m.size());
        let h = 1e-5;
        for i in 0..m.num_parameters() {
            let orig = *m.parameter_mut(i);
            *m.parameter_mut(i) = orig + h;
            let up = marginal_loss(&m, &inst, q_weight).unwrap().loss;
            *m.parameter_mut(i) = orig - h;
            let down = marginal_loss(&m, &inst, q_weight).unwrap().loss;
            *m.parameter_mut(i) = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn marginal_gradient_matches_finite_differences() {
        check_fd(QWeight::Softmax, 2);
        check_fd(QWeight::Raw, 3);
    }

    #[test]
    fn repeated_instance_loss_decreases() {
        let mut m = random_fbg(7);
        let inst = instance(vec![
            item("color zorb", Some(0.9), "the color of zorb is deep blue"),
            item("size", Some(0.3), "the size of zorb is very small"),
        ]);
        let before = marginal_loss(&m, &inst, QWeight::Softmax).unwrap().loss;
        let cfg = TrainerConfig {
            inner_epochs: 50,
            ..Default::default()
        };
        train_inner(&mut m, std::slice::from_ref(&inst), &cfg, 1).unwrap();
        let after = marginal_loss(&m, &inst, QWeight::Softmax).unwrap().loss;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn grounded_candidate_gains_query_weight() {
        // Teach single-token copying first so verbatim knowledge makes the
        // target more likely.
        let mut m = Fbg::<f64>::zeros(vocab());
        let copies: Vec<WeightedPair<f64>> = m
            .vocab()
            .tokens()
            .iter()
            .skip(3)
            .map(|t| WeightedPair {
                id: t.clone(),
                input: tokenize(t),
                output: tokenize(t),
                weight: 1.0,
            })
            .collect();
        for _ in 0..30 {
            m.apply_gradients(&copies, &AdamW::default(), 0.05).unwrap();
        }
        let inst = instance(vec![
            item("color zorb", Some(0.9), "deep blue"),
            item("size", Some(0.9), "very small the of"),
            item("of", Some(0.9), "what me about"),
        ]);
        let share = |m: &Fbg<f64>| marginal_loss(m, &inst, QWeight::Softmax).map(|_| {
            let s: Vec<f64> = inst
                .candidates
                .items
                .iter()
                .map(|c| m.log_prob(&inst.query_input, &c.tokens))
                .collect();
            (s[0] - log_sum_exp(&s)).exp()
        });
        let before = share(&m).unwrap();
        // One epoch of several single-instance batches, so the adaptive step
        // follows the gradient rather than the sign of a single noisy draw.
        let cfg = TrainerConfig {
            inner_epochs: 1,
            batch_size: 1,
            ..Default::default()
        };
        train_inner(&mut m, &vec![inst.clone(); 16], &cfg, 0).unwrap();
        let after = share(&m).unwrap();
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn epochs_zero_and_determinism() {
        let inst = instance(vec![
            item("color zorb", Some(0.9), "the color of zorb is deep blue"),
            item("size", Some(0.3), "the size of zorb is very small"),
        ]);
        let base = random_fbg(9);
        let mut m = base.clone();
        let cfg0 = TrainerConfig {
            inner_epochs: 0,
            ..Default::default()
        };
        train_inner(&mut m, std::slice::from_ref(&inst), &cfg0, 0).unwrap();
        assert_eq!(m, base);
        let cfg = TrainerConfig {
            inner_epochs: 3,
            batch_size: 1,
            ..Default::default()
        };
        let insts = vec![inst.clone(), inst.clone(), inst];
        let mut a = base.clone();
        let mut b = base.clone();
        train_inner(&mut a, &insts, &cfg, 5).unwrap();
        train_inner(&mut b, &insts, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.parameters().zip(b.parameters()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn dump_writes_one_line_per_instance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.jsonl");
        let inst = instance(vec![item("color", Some(0.5), "x"), item("", None, "")]);
        dump_instances(&path, &[inst.clone(), inst]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let row: DumpedInstance = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(row.candidates[1].knowledge_id, None);
        assert_eq!(row.candidates[0].p_k, 0.5);
    }
}
