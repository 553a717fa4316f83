//! Warm-up, the outer collect/train loop, checkpointing and inference.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::corpus::{
    flatten_context, load_dialogues, load_knowledge_base, tokenize, Dialogue, KnowledgeBase, TokenSeq,
};
use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::metrics::{evaluate, EntityLexicon, EvalReport, Prediction};
use crate::model::{
    linear_lr, query_input, response_input, task_prompt, CondSeqModel, Fbg, Task, Vocab, WeightedPair,
};
use crate::scalar::Scalar;
use crate::selector::{Selector, SelectorConfig};
use crate::trainer::{
    assemble_candidates, dump_instances, knowledge_text, train_inner, DecodeConfig, GuidanceConfig, TrainerConfig,
    TrainingInstance,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kb: PathBuf,
    /// Prebuilt index; built from `kb` when unset.
    pub index: Option<PathBuf>,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub entities: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub seed: u64,
    pub decode: DecodeConfig,
    pub selector: SelectorConfig,
    pub trainer: TrainerConfig,
    pub guidance: GuidanceConfig,
    pub warmup_epochs: usize,
    pub max_outer_iters: usize,
    pub patience: usize,
    /// Write each iteration's collected instances as JSONL.
    pub dump_instances: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seed: 7,
            decode: DecodeConfig::default(),
            selector: SelectorConfig::default(),
            trainer: TrainerConfig::default(),
            guidance: GuidanceConfig::default(),
            warmup_epochs: 3,
            max_outer_iters: 30,
            patience: 2,
            dump_instances: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.decode.beam_size == 0 {
            return Err(Error::InvalidArgument("decode.beam_size must be at least 1".into()));
        }
        if self.trainer.batch_size == 0 {
            return Err(Error::InvalidArgument("trainer.batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if !(self.trainer.lr.is_finite() && self.trainer.lr >= 0.0) {
            return Err(Error::InvalidArgument("trainer.lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    pub f1: f64,
    pub em: f64,
    pub recall_at_1: f64,
}

impl ValidationScores {
    fn from_report(r: &EvalReport) -> Self {
        Self {
            f1: r.mean("f1").unwrap_or(0.0),
            em: r.mean("em").unwrap_or(0.0),
            recall_at_1: r.mean("recall_at_1").unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub train_loss: f64,
    pub skipped_instances: usize,
    pub valid: ValidationScores,
    /// File name inside the output directory.
    pub checkpoint: String,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub valid: ValidationScores,
    pub checkpoint: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome<S: Scalar> {
    pub best: Fbg<S>,
    /// 0 when the warm-up checkpoint is returned.
    pub best_iteration: usize,
    pub warmup: WarmupReport,
    pub reports: Vec<IterationReport>,
}

/// Everything a run reads, loaded once.
pub struct Resources {
    pub kb: KnowledgeBase,
    pub index: InvertedIndex,
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub lexicon: Option<EntityLexicon>,
}

impl Resources {
    pub fn load(paths: &Paths) -> Result<Self> {
        let kb = load_knowledge_base(&paths.kb)?;
        let index = match &paths.index {
            Some(p) => InvertedIndex::load(p)?,
            None => InvertedIndex::build(&kb),
        };
        let mut train = load_dialogues(&paths.train)?;
        train.sort_by(|a, b| a.id.cmp(&b.id));
        let valid = load_dialogues(&paths.valid)?;
        let lexicon = match &paths.entities {
            Some(p) => Some(load_lexicon(p)?),
            None => None,
        };
        Ok(Self {
            kb,
            index,
            train,
            valid,
            lexicon,
        })
    }
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<EntityLexicon> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(EntityLexicon::new(text.lines().map(str::trim).filter(|l| !l.is_empty())))
}

/// Vocabulary over prompts, role markers, knowledge and training dialogues.
pub fn build_vocab(kb: &KnowledgeBase, train: &[Dialogue]) -> Vocab {
    let mut tokens: Vec<String> = task_prompt(Task::Query).into_inner();
    tokens.extend(task_prompt(Task::Response).into_inner());
    for e in kb.iter() {
        tokens.extend(tokenize(&e.indexed_text()).into_inner());
    }
    for d in train {
        tokens.extend(tokenize(&flatten_context(d)).into_inner());
        tokens.extend(tokenize(&d.target_response).into_inner());
    }
    Vocab::build(tokens)
}

/// Trains the response task alone. Knowledge is selected with the
/// context-guidance text; every example has weight 1 and the batch mean is
/// applied. Returns the mean NLL of the final epoch.
pub fn warmup<S: Scalar, M: CondSeqModel<S>>(
    model: &mut M,
    selector: &Selector<'_, S>,
    dialogues: &[Dialogue],
    epochs: usize,
    cfg: &RunConfig,
) -> Result<f64> {
    if epochs == 0 || dialogues.is_empty() {
        return Ok(f64::NAN);
    }
    let pairs: Vec<WeightedPair<S>> = dialogues
        .par_iter()
        .map(|d| {
            let query = cfg.guidance.context_text(d, cfg.seed)?;
            let knowledge = selector.select(&query).unwrap_or_default();
            Ok(WeightedPair {
                id: d.id.clone(),
                input: response_input(d, &knowledge_text(selector, &knowledge)),
                output: tokenize(&d.target_response),
                weight: S::one(),
            })
        })
        .collect::<Result<_>>()?;
    let bs = cfg.trainer.batch_size;
    let total = pairs.len().div_ceil(bs) * epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    let mut last = f64::NAN;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            let scale = S::one() / S::from_count(chunk.len());
            let batch: Vec<WeightedPair<S>> = chunk
                .iter()
                .map(|&i| WeightedPair {
                    weight: scale,
                    ..pairs[i].clone()
                })
                .collect();
            let frozen = &*model;
            sum += batch
                .par_iter()
                .map(|p| -frozen.log_prob(&p.input, &p.output).as_f64())
                .collect::<Vec<_>>()
                .iter()
                .sum::<f64>();
            model.apply_gradients(&batch, &cfg.trainer.optimizer, linear_lr(cfg.trainer.lr, step, total))?;
            step += 1;
        }
        last = sum / pairs.len() as f64;
    }
    Ok(last)
}

/// Top beam query, its knowledge, then the top beam response.
pub fn infer<S: Scalar, M: CondSeqModel<S>>(
    model: &M,
    selector: &Selector<'_, S>,
    d: &Dialogue,
    decode: &DecodeConfig,
) -> Prediction {
    let top = |input: &TokenSeq| {
        model
            .beam_search(input, decode.beam_size, decode.max_len)
            .into_iter()
            .next()
            .map(|h| h.tokens.join())
            .unwrap_or_default()
    };
    let query = top(&query_input(d));
    let depth = selector.config().top_n.min(10).max(selector.config().top_k);
    let ranked = selector.select_k(&query, depth).unwrap_or_default();
    let chosen = &ranked[..ranked.len().min(selector.config().top_k)];
    let response = top(&response_input(d, &knowledge_text(selector, chosen)));
    Prediction {
        dialogue_id: d.id.clone(),
        query,
        knowledge_id: chosen.first().map(|k| k.knowledge_id.clone()),
        knowledge_miss: chosen.is_empty(),
        response,
        ranked_knowledge_ids: ranked.into_iter().map(|k| k.knowledge_id).collect(),
    }
}

/// Predictions for every dialogue, in input order.
pub fn infer_all<S: Scalar, M: CondSeqModel<S>>(
    model: &M,
    selector: &Selector<'_, S>,
    dialogues: &[Dialogue],
    decode: &DecodeConfig,
) -> Vec<Prediction> {
    dialogues.par_iter().map(|d| infer(model, selector, d, decode)).collect()
}

/// Candidate sets for every dialogue, in input order.
pub fn collect<S: Scalar, M: CondSeqModel<S>>(
    model: &M,
    selector: &Selector<'_, S>,
    dialogues: &[Dialogue],
    cfg: &RunConfig,
) -> Result<Vec<TrainingInstance<S>>> {
    dialogues
        .par_iter()
        .map(|d| assemble_candidates(model, selector, d, &cfg.guidance, &cfg.decode, cfg.seed))
        .collect()
}

fn validate_model<S: Scalar>(model: &Fbg<S>, selector: &Selector<'_, S>, res: &Resources, cfg: &RunConfig) -> EvalReport {
    let preds = infer_all(model, selector, &res.valid, &cfg.decode);
    evaluate(&preds, &res.valid, &res.kb, res.lexicon.as_ref())
}

fn append_line<T: Serialize>(path: &Path, row: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(row)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Full training run with outputs in `cfg.paths.out_dir`.
pub fn run<S: Scalar>(cfg: &RunConfig) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let res = Resources::load(&cfg.paths)?;
    run_with(cfg, &res)
}

/// As [`run`], with inputs already loaded.
pub fn run_with<S: Scalar>(cfg: &RunConfig, res: &Resources) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    config::save_flat(cfg, out.join("config_resolved.json"))?;
    let runlog = out.join("runlog.jsonl");
    fs::write(&runlog, b"").map_err(|e| Error::io(&runlog, e))?;

    let selector = Selector::<S>::new(&res.index, &res.kb, cfg.selector.clone())?;
    let mut model = Fbg::<S>::zeros(build_vocab(&res.kb, &res.train));
    let warm_loss = warmup(&mut model, &selector, &res.train, cfg.warmup_epochs, cfg)?;
    model.save(out.join("ckpt_warmup.json"), cfg.seed)?;
    let warm = WarmupReport {
        epochs: cfg.warmup_epochs,
        final_loss: warm_loss,
        valid: ValidationScores::from_report(&validate_model(&model, &selector, res, cfg)),
        checkpoint: "ckpt_warmup.json".into(),
    };
    write_json(&out.join("warmup_report.json"), &warm)?;

    let mut best = model.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_iteration = 0;
    if cfg.max_outer_iters == 0 {
        best.save(out.join("ckpt_best.json"), cfg.seed)?;
    }
    let mut reports = Vec::new();
    let mut stale = 0;
    for iteration in 1..=cfg.max_outer_iters {
        let wrap = |e: Error| Error::Iteration {
            iteration,
            source: Box::new(e),
        };
        let started = Instant::now();
        let instances = collect(&model, &selector, &res.train, cfg).map_err(wrap)?;
        if cfg.dump_instances {
            dump_instances(out.join(format!("instances_iter{iteration}.jsonl")), &instances).map_err(wrap)?;
        }
        let inner = train_inner(&mut model, &instances, &cfg.trainer, cfg.seed.wrapping_add(iteration as u64))
            .map_err(wrap)?;
        let valid = ValidationScores::from_report(&validate_model(&model, &selector, res, cfg));
        let name = format!("ckpt_iter{iteration}.json");
        model.save(out.join(&name), cfg.seed).map_err(wrap)?;
        if valid.f1 > best_f1 {
            best_f1 = valid.f1;
            best_iteration = iteration;
            best = model.clone();
            best.save(out.join("ckpt_best.json"), cfg.seed).map_err(wrap)?;
            stale = 0;
        } else {
            stale += 1;
        }
        let report = IterationReport {
            iteration,
            train_loss: inner.mean_loss,
            skipped_instances: inner.skipped,
            valid,
            checkpoint: name,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        append_line(&runlog, &report).map_err(wrap)?;
        reports.push(report);
        if stale >= cfg.patience {
            break;
        }
    }
    Ok(RunOutcome {
        best,
        best_iteration,
        warmup: warm,
        reports,
    })
}
