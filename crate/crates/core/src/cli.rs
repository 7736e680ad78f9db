//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{
    build_observations, load_contextual_embeddings, load_embeddings, load_matrix, parse_conllu,
    write_conllu, ContextualStore, EmbeddingTable, ObservedSequence, Sentence, WordVectors,
    NUM_UPOS,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, language_distance};
use crate::model::Task;
use crate::transfer::{finetune_target, pretrain_source, TransferConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "structflow", version, about = "Structured flow models for cross-lingual tagging and parsing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Supervised training on a source treebank.
    TrainSource(TrainSourceArgs),
    /// Anchored unsupervised fine-tuning on a target treebank.
    Finetune(FinetuneArgs),
    /// Fill predicted UPOS (tagging) or HEAD (parsing) columns.
    Predict(PredictArgs),
    /// Score predictions against gold annotations; prints JSON.
    Evaluate(EvaluateArgs),
    /// Mean of genetic, geographic and syntactic distances.
    Distance(DistanceArgs),
}

#[derive(Debug, Args)]
struct VectorArgs {
    /// Word embeddings: a "count dim" header line, then "word v1 .. vD" rows.
    #[arg(long, conflicts_with = "contextual", required_unless_present = "contextual")]
    embeddings: Option<PathBuf>,
    /// Whitespace-separated D x D matrix applied to every word vector.
    #[arg(long, requires = "embeddings")]
    alignment: Option<PathBuf>,
    /// Per-token vectors: "sent_id position v1 .. vD" rows.
    #[arg(long)]
    contextual: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    beta3: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainSourceArgs {
    #[arg(long)]
    treebank: PathBuf,
    /// Development treebank for epoch and restart selection.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[command(flatten)]
    vectors: VectorArgs,
    /// JSON file with any subset of the training configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    restarts: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Source checkpoint.
    #[arg(long)]
    source: PathBuf,
    /// Target-language treebank (annotations beyond UPOS are ignored).
    #[arg(long)]
    treebank: PathBuf,
    #[command(flatten)]
    vectors: VectorArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    treebank: PathBuf,
    #[command(flatten)]
    vectors: VectorArgs,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value = "tag")]
    task: Task,
}

#[derive(Debug, Args)]
struct DistanceArgs {
    genetic: f64,
    geographic: f64,
    syntactic: f64,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::TrainSource(args) => train_source(args),
        Command::Finetune(args) => finetune(args),
        Command::Predict(args) => predict(args),
        Command::Evaluate(args) => {
            let pred = read_treebank(&args.pred)?;
            let gold = read_treebank(&args.gold)?;
            let report = evaluate(args.task, &pred, &gold)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Data(e.to_string()))?;
            println!("{json}");
            Ok(())
        }
        Command::Distance(args) => {
            let d = language_distance(args.genetic, args.geographic, args.syntactic)?;
            println!("{}", format_real(d));
            Ok(())
        }
    }
}

/// Shortest decimal that survives rounding to 12 places, so 0.86 prints as
/// `0.86` rather than `0.8600000000000001`.
fn format_real(v: f64) -> String {
    let s = format!("{v:.12}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_treebank(path: &Path) -> Result<Vec<Sentence>> {
    parse_conllu(open(path)?).map_err(|e| match e {
        Error::Parse { line, message } => Error::Data(format!("{}:{line}: {message}", path.display())),
        other => other,
    })
}

enum Vectors {
    Table(EmbeddingTable),
    Contextual(ContextualStore),
}

impl Vectors {
    fn load(args: &VectorArgs, corpus: &[Sentence]) -> Result<Vectors> {
        if let Some(path) = &args.contextual {
            return Ok(Vectors::Contextual(load_contextual_embeddings(open(path)?, corpus)?));
        }
        let path = args
            .embeddings
            .as_ref()
            .ok_or_else(|| Error::Config("either --embeddings or --contextual is required".into()))?;
        let table = load_embeddings(open(path)?)?;
        let table = match &args.alignment {
            Some(m) => table.apply_alignment(load_matrix(open(m)?)?.view())?,
            None => table,
        };
        Ok(Vectors::Table(table))
    }

    fn view(&self) -> WordVectors<'_> {
        match self {
            Vectors::Table(t) => WordVectors::Table(t),
            Vectors::Contextual(c) => WordVectors::Contextual(c),
        }
    }
}

fn observe(corpus: &[Sentence], vectors: &Vectors) -> Result<Vec<ObservedSequence>> {
    corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| build_observations(s, vectors.view(), None))
        .collect()
}

/// Defaults for `task`, overlaid with the JSON file, then with flags.
fn load_config(
    path: Option<&Path>,
    task: Option<Task>,
    defaults: fn(Task) -> TransferConfig,
) -> Result<TransferConfig> {
    let file: Option<serde_json::Map<String, serde_json::Value>> = match path {
        None => None,
        Some(p) => Some(
            serde_json::from_reader(open(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        ),
    };
    let file_task = match file.as_ref().and_then(|f| f.get("task")) {
        None => None,
        Some(v) => Some(
            serde_json::from_value::<Task>(v.clone())
                .map_err(|e| Error::Config(format!("task: {e}")))?,
        ),
    };
    let task = task.or(file_task).unwrap_or(Task::Tag);
    let mut merged = serde_json::to_value(defaults(task)).expect("config serializes");
    if let Some(file) = file {
        let obj = merged.as_object_mut().expect("config is an object");
        obj.extend(file);
    }
    merged["task"] = serde_json::to_value(task).expect("task serializes");
    let config: TransferConfig =
        serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
    Ok(config)
}

fn apply_overrides(config: &mut TransferConfig, o: &Overrides) {
    if let Some(v) = o.epochs {
        config.epochs = v;
    }
    if let Some(v) = o.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = o.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.beta1 {
        config.beta1 = v;
    }
    if let Some(v) = o.beta2 {
        config.beta2 = v;
    }
    if let Some(v) = o.beta3 {
        config.beta3 = v;
    }
}

fn train_source(args: TrainSourceArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref(), args.task, TransferConfig::source_defaults)?;
    apply_overrides(&mut config, &args.overrides);
    if let Some(r) = args.restarts {
        config.restarts = r;
    }
    config.validate()?;
    let train_corpus = read_treebank(&args.treebank)?;
    let dev_corpus = match &args.dev {
        Some(p) => read_treebank(p)?,
        None => Vec::new(),
    };
    if config.task == Task::Parse {
        if let Some(s) = train_corpus.iter().find(|s| s.heads.is_none()) {
            return Err(Error::data(format!("sentence {} has no heads", s.sent_id)));
        }
    }
    let mut all = train_corpus.clone();
    all.extend(dev_corpus.iter().cloned());
    let vectors = Vectors::load(&args.vectors, &all)?;
    let train = observe(&train_corpus, &vectors)?;
    let dev = observe(&dev_corpus, &vectors)?;
    let outcome = pretrain_source(&train, &dev, &config)?;
    for r in &outcome.restarts {
        eprintln!("restart seed {}: dev metric {:.4}", r.seed, r.dev_metric);
    }
    save_checkpoint(&outcome.checkpoint, &args.output)
}

fn finetune(args: FinetuneArgs) -> Result<()> {
    let source = load_checkpoint(&args.source)?;
    let mut config = load_config(
        args.config.as_deref(),
        Some(source.spec.task),
        TransferConfig::finetune_defaults,
    )?;
    apply_overrides(&mut config, &args.overrides);
    config.validate()?;
    let corpus = read_treebank(&args.treebank)?;
    let vectors = Vectors::load(&args.vectors, &corpus)?;
    let target = observe(&corpus, &vectors)?;
    let outcome = finetune_target(&source, &target, &config)?;
    if outcome.excluded > 0 {
        eprintln!("skipped {} sentences longer than the length limit", outcome.excluded);
    }
    if let (Some(first), Some(last)) = (outcome.nll_trace.first(), outcome.nll_trace.last()) {
        eprintln!("mean target NLL {first:.4} -> {last:.4}");
    }
    save_checkpoint(&outcome.checkpoint, &args.output)
}

fn predict(args: PredictArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let params = &checkpoint.params;
    let mut corpus = read_treebank(&args.treebank)?;
    let vectors = Vectors::load(&args.vectors, &corpus)?;
    let task = checkpoint.spec.task;
    if task == Task::Tag && params.num_categories() > NUM_UPOS {
        return Err(Error::data(format!(
            "model has {} categories, which cannot be written as UPOS tags",
            params.num_categories()
        )));
    }
    for sentence in corpus.iter_mut().filter(|s| !s.is_empty()) {
        let obs = build_observations(sentence, vectors.view(), None)?;
        match task {
            Task::Tag => sentence.upos = params.decode_tags(&obs)?,
            Task::Parse => {
                sentence.heads = Some(params.decode_parse(&obs)?.into_heads());
                sentence.deprels = None;
            }
        }
    }
    match &args.output {
        Some(path) => {
            let mut out = io::BufWriter::new(File::create(path)?);
            write_conllu(&mut out, &corpus)?;
            out.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut out = stdout.lock();
            write_conllu(&mut out, &corpus)?;
        }
    }
    Ok(())
}
