use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use qkconv::config;
use qkconv::corpus::{load_dialogues, load_knowledge_base};
use qkconv::index::{Bm25Params, InvertedIndex};
use qkconv::metrics::{evaluate, load_predictions, query_stats, save_predictions};
use qkconv::selector::{FusionMode, Selector, SelectorConfig};
use qkconv::synth::{generate, WorldSpec};
use qkconv::trainer::DecodeConfig;
use qkconv::training_loop::{infer_all, load_lexicon, run, RunConfig};
use qkconv::FbgModel;

#[derive(Parser)]
#[command(name = "qkconv", version, about = "Query-enhanced knowledge-grounded dialogue pipeline")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index file from a knowledge base.
    BuildIndex(BuildIndexArgs),
    /// Generate a synthetic world.
    Synth(SynthArgs),
    /// Warm up, then run the outer collect/train loop.
    Train(TrainArgs),
    /// Decode query, knowledge and response for each dialogue.
    Infer(InferArgs),
    /// Score predictions.
    Eval(EvalArgs),
    /// Length and overlap statistics of predicted queries.
    QueryStats(QueryStatsArgs),
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    kb: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Bm25Params::default().k1)]
    k1: f64,
    #[arg(long, default_value_t = Bm25Params::default().b)]
    b: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = WorldSpec::default().seed)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    attrs: Option<usize>,
    #[arg(long)]
    dialogues: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    turns: Option<usize>,
    #[arg(long)]
    facts: Option<usize>,
    /// Give each split its own facts.
    #[arg(long)]
    split_by_fact: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Guidance {
    None,
    Context,
    Response,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    guidance: Option<Guidance>,
    /// Extra overrides as `key=value`; values parse as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    /// Prebuilt index; built from the kb when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    dialogues: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run config to take decode and selector settings from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_parser = ["minmax", "raw"])]
    fusion: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "pred", visible_alias = "predictions")]
    predictions: PathBuf,
    #[arg(long = "data", visible_alias = "dialogues")]
    dialogues: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    /// Entity lexicon, one name per line, enabling Entity-F1.
    #[arg(long)]
    entities: Option<PathBuf>,
    /// Write the full report (rows and means) here.
    #[arg(long = "report", visible_alias = "out")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryStatsArgs {
    #[arg(long = "pred", visible_alias = "predictions")]
    predictions: PathBuf,
    #[arg(long = "data", visible_alias = "dialogues")]
    dialogues: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::BuildIndex(a) => build_index(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::QueryStats(a) => stats(a),
    }
}

/// Output directories are append-only unless `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force && fs::read_dir(dir)?.next().is_some() {
        bail!("output directory {} is not empty (pass --force to reuse it)", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let kb = load_knowledge_base(&a.kb)?;
    let index = InvertedIndex::build_with(&kb, Bm25Params { k1: a.k1, b: a.b });
    index.save(&a.out)?;
    println!("indexed {} documents into {}", index.num_docs(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let d = WorldSpec::default();
    let spec = WorldSpec {
        seed: a.seed,
        n_entities: a.entities.unwrap_or(d.n_entities),
        n_attributes: a.attrs.unwrap_or(d.n_attributes),
        n_distractor_docs: a.distractors.unwrap_or(d.n_distractor_docs),
        turns_per_dialogue: a.turns.unwrap_or(d.turns_per_dialogue),
        n_dialogues: a.dialogues.unwrap_or(d.n_dialogues),
        n_facts: a.facts.or(d.n_facts),
        split_by_fact: a.split_by_fact,
        ..d
    };
    prepare_out_dir(&a.out, a.force)?;
    let world = generate(&spec)?;
    world.write(&a.out)?;
    config::save_flat(&spec, a.out.join("config_resolved.json"))?;
    println!(
        "wrote {} knowledge entries and {}/{}/{} dialogues to {}",
        world.kb.len(),
        world.train.len(),
        world.valid.len(),
        world.test.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let Some((k, v)) = raw.split_once('=') else {
        bail!("override `{raw}` is not KEY=VALUE");
    };
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let base = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => Value::Object(Map::new()),
    };
    let mut root = match config::unflatten(&base)? {
        Value::Object(m) => m,
        _ => unreachable!("unflatten returns an object"),
    };
    let mut set = |k: &str, v: Value| config::set_path(&mut root, k, v);
    if let Some(seed) = a.seed {
        set("seed", seed.into())?;
    }
    if let Some(out) = &a.out {
        set("paths.out_dir", out.display().to_string().into())?;
    }
    if let Some(g) = a.guidance {
        let (ctx, resp) = match g {
            Guidance::None => (false, false),
            Guidance::Context => (true, false),
            Guidance::Response => (false, true),
            Guidance::Both => (true, true),
        };
        set("guidance.context_on", ctx.into())?;
        set("guidance.response_on", resp.into())?;
    }
    for raw in &a.overrides {
        let (k, v) = parse_override(raw)?;
        set(&k, v)?;
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(root)).context("invalid run config")?;
    if cfg.paths.out_dir.as_os_str().is_empty() {
        bail!("no output directory: set paths.out_dir or pass --out");
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_run_config(&a)?;
    cfg.validate()?;
    for (name, path) in [("paths.kb", &cfg.paths.kb), ("paths.train", &cfg.paths.train), ("paths.valid", &cfg.paths.valid)] {
        if !path.is_file() {
            bail!("{name}: {} does not exist", path.display());
        }
    }
    prepare_out_dir(&cfg.paths.out_dir, a.force)?;
    let outcome = run::<f64>(&cfg)?;
    for r in &outcome.reports {
        println!(
            "iter {:>2}  loss {:.4}  valid f1 {:.4}  em {:.4}  r@1 {:.4}",
            r.iteration, r.train_loss, r.valid.f1, r.valid.em, r.valid.recall_at_1
        );
    }
    println!(
        "best iteration {} -> {}",
        outcome.best_iteration,
        cfg.paths.out_dir.join("ckpt_best.json").display()
    );
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let (mut decode, mut selector_cfg) = match &a.config {
        Some(p) => {
            let cfg: RunConfig = config::load(p)?;
            (cfg.decode, cfg.selector)
        }
        None => (DecodeConfig::default(), SelectorConfig::default()),
    };
    decode.beam_size = a.beam_size.unwrap_or(decode.beam_size);
    decode.max_len = a.max_len.unwrap_or(decode.max_len);
    selector_cfg.top_n = a.top_n.unwrap_or(selector_cfg.top_n);
    selector_cfg.top_k = a.top_k.unwrap_or(selector_cfg.top_k);
    if let Some(f) = &a.fusion {
        selector_cfg.fusion = if f == "raw" { FusionMode::Raw } else { FusionMode::Minmax };
    }
    let (model, _) = FbgModel::load(&a.checkpoint)?;
    let kb = load_knowledge_base(&a.kb)?;
    let index = match &a.index {
        Some(p) => InvertedIndex::load(p)?,
        None => InvertedIndex::build(&kb),
    };
    let selector = Selector::<f64>::new(&index, &kb, selector_cfg)?;
    let dialogues = load_dialogues(&a.dialogues)?;
    let preds = infer_all(&model, &selector, &dialogues, &decode);
    save_predictions(&a.out, &preds)?;
    let misses = preds.iter().filter(|p| p.knowledge_miss).count();
    println!("wrote {} predictions ({misses} retrieval misses) to {}", preds.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = load_predictions(&a.predictions)?;
    let dialogues = load_dialogues(&a.dialogues)?;
    let kb = load_knowledge_base(&a.kb)?;
    let lexicon = a.entities.as_ref().map(load_lexicon).transpose()?;
    let report = evaluate(&preds, &dialogues, &kb, lexicon.as_ref());
    if report.rows.len() < preds.len() {
        eprintln!("warning: {} predictions had no matching dialogue", preds.len() - report.rows.len());
    }
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&report.means)?);
    Ok(())
}

fn stats(a: QueryStatsArgs) -> Result<()> {
    let preds = load_predictions(&a.predictions)?;
    let dialogues = load_dialogues(&a.dialogues)?;
    let by_id: HashMap<&str, _> = dialogues.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut queries = Vec::new();
    let mut matched = Vec::new();
    for p in &preds {
        match by_id.get(p.dialogue_id.as_str()) {
            Some(d) => {
                queries.push(p.query.clone());
                matched.push((*d).clone());
            }
            None => bail!("prediction for unknown dialogue `{}`", p.dialogue_id),
        }
    }
    let s = query_stats(&queries, &matched);
    println!("{}", serde_json::to_string_pretty(&s)?);
    Ok(())
}
