//! Command line front end: annotate, build rules, generate, train, predict,
//! evaluate.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ctxtag::model::{Mode, Model, ModelConfig};
use ctxtag::par::Execution;
use ctxtag::pipeline::annotate::Sidecars;
use ctxtag::pipeline::*;
use ctxtag::rules::{RuleVocabulary, TagRecord};
use ctxtag::train::{train, RewardScaling, TrainConfig, METRICS_HEADER};

#[derive(Parser, Debug)]
#[command(name = "ctxtag", version, about = "Dialogue utterance rewriting by context tagging")]
struct Cli {
    /// Flat `key = value` file mirroring the long flags; flags given on the
    /// command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Extract gold actions and spans from a corpus with targets.
    Annotate(AnnotateArgs),
    /// Cluster and filter rules; write the vocabulary and final tags.
    BuildRules(BuildRulesArgs),
    /// Generate a synthetic corpus with parse trees and gold tags.
    Gen(GenArgs),
    /// Train a tagger.
    Train(TrainArgs),
    /// Greedy rewrites for a corpus.
    Predict(PredictArgs),
    /// Score predictions against corpus targets.
    Evaluate(EvaluateArgs),
    /// Vocabulary size at several filter thresholds.
    SweepThreshold(SweepArgs),
}

#[derive(Args, Debug)]
struct AnnotateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSONL of `{id, tree}` parses of the targets.
    #[arg(long)]
    trees: Option<PathBuf>,
    /// JSONL of `{id, lemmas: {token: lemma}}`.
    #[arg(long)]
    lemmas: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Coverage statistics as JSON (printed to stdout when absent).
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildRulesArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RULE_THRESHOLD)]
    rule_threshold: f64,
    #[arg(long)]
    vocab_out: PathBuf,
    /// Final tags per example as JSONL.
    #[arg(long)]
    tags_out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_THRESHOLDS)]
    thresholds: Vec<f64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 1000)]
    size: usize,
    #[arg(long, env = "CTXTAG_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trees_out: Option<PathBuf>,
    #[arg(long)]
    gold_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Tags from `build-rules`; must cover the training and dev examples.
    #[arg(long)]
    tags: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Explicit dev corpus; otherwise a 90/10 split by id hash.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long, default_value_t = Mode::Hct)]
    mode: Mode,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, env = "CTXTAG_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    #[arg(long, default_value_t = 15)]
    min_epochs: usize,
    /// Scale the sampled reward instead of the advantage.
    #[arg(long)]
    scale_reward: bool,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    ffn: usize,
    /// Maximum spans per position (MST).
    #[arg(long, default_value_t = 3)]
    max_spans: usize,
    /// Binary checkpoint, or JSON when the name ends in `.json`.
    #[arg(long)]
    checkpoint_out: PathBuf,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Required for HCT checkpoints.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[arg(long)]
    per_example_out: Option<PathBuf>,
}

fn reading(path: &Path) -> String {
    format!("reading {}", path.display())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run_annotate(a: AnnotateArgs, exec: Execution) -> Result<()> {
    let corpus = read_corpus(&a.corpus).with_context(|| reading(&a.corpus))?;
    let sidecars = Sidecars::load(a.trees.as_deref(), a.lemmas.as_deref())?;
    let (anns, stats) = annotate(&corpus, &sidecars, exec)?;
    write_jsonl(&a.out, &anns)?;
    match a.stats_out {
        Some(p) => write_json(&p, &stats)?,
        None => println!("{}", serde_json::to_string_pretty(&stats)?),
    }
    Ok(())
}

fn run_build_rules(a: BuildRulesArgs) -> Result<()> {
    let anns: Vec<Annotation> = read_jsonl(&a.annotations).with_context(|| reading(&a.annotations))?;
    let cfg = RuleBuildConfig {
        threshold: a.rule_threshold,
        ..Default::default()
    };
    let build = build_rules(&anns, &cfg)?;
    build.vocab.save(&a.vocab_out)?;
    write_jsonl(&a.tags_out, &build.records)?;
    log::info!("{} rules from {} extracted", build.vocab.len(), build.extracted.len());
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let anns: Vec<Annotation> = read_jsonl(&a.annotations).with_context(|| reading(&a.annotations))?;
    for point in sweep_thresholds(&anns, &a.thresholds, &RuleBuildConfig::default()) {
        println!("{}", serde_json::to_string(&point)?);
    }
    Ok(())
}

fn run_gen(a: GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        size: a.size,
        seed: a.seed,
        ..Default::default()
    };
    let gen = generate_synthetic(&spec)?;
    let examples: Vec<_> = gen.iter().map(|g| g.example.clone()).collect();
    write_jsonl(&a.out, &examples)?;
    if let Some(p) = a.trees_out {
        write_jsonl(&p, &gen.iter().map(|g| g.tree_record()).collect::<Vec<_>>())?;
    }
    if let Some(p) = a.gold_out {
        write_jsonl(&p, &gen.iter().map(|g| g.gold_record()).collect::<Vec<_>>())?;
    }
    Ok(())
}

fn run_train(a: TrainArgs, exec: Execution) -> Result<()> {
    let vocab = RuleVocabulary::load(&a.vocab).with_context(|| reading(&a.vocab))?;
    let records: Vec<TagRecord> = read_jsonl(&a.tags).with_context(|| reading(&a.tags))?;
    let corpus = read_corpus(&a.corpus).with_context(|| reading(&a.corpus))?;
    let (train_part, dev_part) = match &a.dev {
        Some(p) => (corpus, read_corpus(p).with_context(|| reading(p))?),
        None => split_dev(&corpus, |e| e.id.as_str()),
    };
    let model_cfg = ModelConfig {
        mode: a.mode,
        d: a.d,
        depth: a.depth,
        ffn: a.ffn,
        max_spans: a.max_spans,
        ..Default::default()
    };
    let cfg = TrainConfig {
        lambda: a.lambda,
        lr: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        min_epochs: a.min_epochs,
        patience: a.patience,
        seed: a.seed,
        reward_scaling: if a.scale_reward {
            RewardScaling::Reward
        } else {
            RewardScaling::Advantage
        },
        execution: exec,
        ..Default::default()
    };
    cfg.validate()?;
    let model = new_model(model_cfg, &train_part, &vocab, a.seed)?;
    let train_set = training_examples(&model, &train_part, &records, &vocab)?;
    let dev_set = training_examples(&model, &dev_part, &records, &vocab)?;
    log::info!("training on {} examples, {} dev", train_set.len(), dev_set.len());

    let mut metrics = match &a.metrics_out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            writeln!(w, "{METRICS_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let mut write_err = None;
    let report = train(model, &train_set, &dev_set, &cfg, |row| {
        log::info!("{}", row.csv_row());
        if let Some(w) = metrics.as_mut() {
            if let Err(e) = writeln!(w, "{}", row.csv_row()).and_then(|_| w.flush()) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    report.model.save(&a.checkpoint_out)?;
    println!(
        "{}",
        serde_json::json!({
            "best_epoch": report.best_epoch,
            "best_dev_bleu4": report.best_dev_bleu4,
            "epochs": report.log.len(),
        })
    );
    Ok(())
}

fn run_predict(a: PredictArgs, exec: Execution) -> Result<()> {
    let model = Model::load(&a.checkpoint).with_context(|| reading(&a.checkpoint))?;
    let vocab = match &a.vocab {
        Some(p) => Some(RuleVocabulary::load(p).with_context(|| reading(p))?),
        None => None,
    };
    let corpus = read_corpus(&a.corpus).with_context(|| reading(&a.corpus))?;
    let preds = predict(&corpus, &model, vocab.as_ref(), exec)?;
    write_jsonl(&a.out, &preds)?;
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let preds: Vec<Prediction> = read_jsonl(&a.predictions).with_context(|| reading(&a.predictions))?;
    let corpus = read_corpus(&a.corpus).with_context(|| reading(&a.corpus))?;
    let (report, per) = evaluate(&preds, &corpus)?;
    for (name, v) in [
        ("BLEU-1", report.bleu_1),
        ("BLEU-2", report.bleu_2),
        ("BLEU-4", report.bleu_4),
        ("ROUGE-1", report.rouge_1),
        ("ROUGE-2", report.rouge_2),
        ("ROUGE-L", report.rouge_l),
        ("EM", report.em),
    ] {
        println!("{name:<8} {v:>7.2}");
    }
    if let Some(p) = a.report_out {
        write_json(&p, &report)?;
    }
    if let Some(p) = a.per_example_out {
        write_jsonl(&p, &per)?;
    }
    Ok(())
}

/// Inserts `--key value` pairs from the config file right after the
/// subcommand name so that later command line flags override them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let pos = args.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else { return Ok(args) };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_owned(),
        None => args.get(pos + 1).cloned().context("--config needs a path")?,
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let cmd = Cli::command();
    let Some((sub_at, sub)) = args
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a).map(|s| (i, s)))
    else {
        return Ok(args);
    };
    // Long flag name and whether it is a switch.
    let known: HashMap<String, bool> = sub
        .get_arguments()
        .chain(cmd.get_arguments())
        .filter_map(|a| Some((a.get_long()?.to_owned(), !a.get_action().takes_values())))
        .collect();
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ctxtag::Error::Config(format!("{path}:{}: expected key = value", n + 1)).into());
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            continue;
        }
        match (known.get(&key), value) {
            (None, _) => log::debug!("config key {key} does not apply to {}", sub.get_name()),
            (Some(true), "true") => extra.push(format!("--{key}")),
            (Some(true), "false") => {}
            _ => extra.push(format!("--{key}={value}")),
        }
    }
    let mut out = args[..=sub_at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub_at + 1..]);
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.cmd {
        Cmd::Annotate(a) => run_annotate(a, exec),
        Cmd::BuildRules(a) => run_build_rules(a),
        Cmd::Gen(a) => run_gen(a),
        Cmd::Train(a) => run_train(a, exec),
        Cmd::Predict(a) => run_predict(a, exec),
        Cmd::Evaluate(a) => run_evaluate(a),
        Cmd::SweepThreshold(a) => run_sweep(a),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<ctxtag::Error>() {
        e.kind()
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else if e.downcast_ref::<serde_json::Error>().is_some() {
        "json"
    } else {
        "usage"
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "kind": kind, "message": message });
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => return fail(error_kind(&e), &format!("{e:#}")),
    };
    let parsed = Cli::command()
        .mut_subcommands(|s| s.args_override_self(true))
        .try_get_matches_from(args)
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            return fail("usage", text.join(" ").trim_start_matches("error: "));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), &format!("{e:#}")),
    }
}
