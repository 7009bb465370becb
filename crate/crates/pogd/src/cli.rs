//! Command-line entry point for the whole pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
//! (training divergence or a failed gradient check). Every run echoes its
//! fully-resolved configuration to stdout before doing work, and every
//! output artifact is written atomically (temp file + rename).

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;

use crate::corpus::{load_corpus, load_ontology, CorpusError, Dialogue, Ontology};
use crate::embeddings::{EmbeddingError, WordTable};
use crate::evaluation::{
    self, AblationMode, EvalError, ForceBranch,
};
use crate::labelgen::LabelError;
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::verify;
use crate::model::{ModelError, Params};
use crate::training::{self, FineTuneStrategy, TrainConfig, TrainError};

const SEED_ENV: &str = "POGD_SEED";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } => CliError::Usage(e.to_string()),
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidArgument { .. } => CliError::Usage(e.to_string()),
            EvalError::Train(inner) => CliError::from(*inner),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_data(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Write bytes via a temp file in the destination directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_data(path))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_data(path))?;
    tmp.write_all(bytes).map_err(io_data(path))?;
    tmp.persist(path)
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

#[derive(Parser)]
#[command(
    name = "pogd",
    version,
    about = "Point-or-generate dialogue state tracker"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate weak-supervision labels for a corpus and write them as JSONL.
    Labelgen(LabelgenArgs),
    /// Train a tracker and write checkpoint, metrics log, and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus and report accuracy metrics.
    Eval(EvalArgs),
    /// Evaluate under an oracle/ablation mode.
    Ablate(AblateArgs),
    /// Hold out a fraction of one slot's values, retrain, and score them.
    Unseen(UnseenArgs),
    /// Pretrain without one slot, then fine-tune on growing example budgets.
    Fewshot(FewshotArgs),
    /// Export the slot-similarity graph of a checkpoint (DOT and JSON).
    Graph(GraphArgs),
    /// Check model gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Configuration resolution shared by most subcommands: a preset or config
/// file is the base, `--set` overrides individual fields, and the seed is
/// taken from `--seed`, then the POGD_SEED environment variable, then the
/// base config.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Training-config JSON file (takes the place of --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in base config: synth, woz, or multiwoz.
    #[arg(long, default_value = "synth")]
    preset: String,
    /// Override one config field, e.g. --set epochs=40 or --set d_h=64.
    /// Values are parsed as JSON, falling back to plain strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Random seed; wins over POGD_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Pretrained embedding text file; omitted, a seeded random table is used.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut base = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(io_data(path))?;
                serde_json::from_str::<TrainConfig>(&text)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
            }
            None => match self.preset.as_str() {
                "synth" => TrainConfig::synth(),
                "woz" => TrainConfig::woz(),
                "multiwoz" => TrainConfig::multiwoz(),
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown preset '{other}' (expected synth, woz, or multiwoz)"
                    )))
                }
            },
        };

        if !self.overrides.is_empty() {
            let mut value = serde_json::to_value(&base)
                .expect("a training config is always serializable");
            let object = value.as_object_mut().expect("config serializes to an object");
            for pair in &self.overrides {
                let (key, raw) = pair.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("override '{pair}' is not KEY=VALUE"))
                })?;
                if !object.contains_key(key) {
                    return Err(CliError::Usage(format!("unknown config key '{key}'")));
                }
                let parsed = serde_json::from_str(raw)
                    .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
                object.insert(key.to_string(), parsed);
            }
            base = serde_json::from_value(value)
                .map_err(|e| CliError::Usage(format!("bad override value: {e}")))?;
        }

        if let Some(seed) = self.seed {
            base.seed = seed;
        } else if let Ok(env) = std::env::var(SEED_ENV) {
            base.seed = env.parse().map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}='{env}' is not an integer seed"))
            })?;
        }

        base.validate()?;
        println!(
            "{}",
            serde_json::to_string_pretty(&base).expect("config serializes")
        );
        Ok(base)
    }

    fn word_table(&self, config: &TrainConfig) -> Result<WordTable, CliError> {
        match &self.embeddings {
            Some(path) => {
                Ok(WordTable::load_pretrained(path, config.model.word_dim, config.seed)?)
            }
            None => Ok(WordTable::random(config.model.word_dim, config.seed)),
        }
    }
}

/// Ontology fallback when no file is given: every (slot, value) pair seen in
/// the corpus belief states, in first-appearance order.
fn derive_ontology(dialogues: &[Dialogue]) -> Result<Ontology, CliError> {
    let mut slots: IndexMap<String, Vec<String>> = IndexMap::new();
    for dialogue in dialogues {
        for turn in &dialogue.turns {
            for (slot, value) in &turn.belief_state {
                let values = slots.entry(slot.clone()).or_default();
                if !values.contains(value) {
                    values.push(value.clone());
                }
            }
        }
    }
    if slots.is_empty() {
        return Err(CliError::Data(
            "cannot derive an ontology: no belief-state pairs in the corpus".to_string(),
        ));
    }
    Ok(Ontology::from_slots(slots)?)
}

fn read_inputs(data: &Path, ontology: Option<&Path>) -> Result<(Vec<Dialogue>, Ontology), CliError> {
    let dialogues = load_corpus(data)?;
    let ontology = match ontology {
        Some(path) => load_ontology(path)?,
        None => derive_ontology(&dialogues)?,
    };
    Ok((dialogues, ontology))
}

#[derive(Args)]
struct LabelgenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus JSON file.
    #[arg(long)]
    data: PathBuf,
    /// Ontology JSON file; omitted, slots and values are collected from
    /// the corpus belief states.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Output JSONL path (one labeled example per line).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Ontology JSON file; omitted, slots and values are collected from
    /// the corpus belief states.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Output directory for checkpoint.bin, metrics.jsonl, and config.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus JSON file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Ontology JSON file; omitted, slots and values are collected from
    /// the corpus belief states.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report JSON path; omitted, the report goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Plain,
    ClassifierOracle,
    SwitcherOracle,
    PointerOnly,
    GeneratorOnly,
}

impl ModeArg {
    fn to_mode(self) -> AblationMode {
        match self {
            ModeArg::Plain => AblationMode::plain(),
            ModeArg::ClassifierOracle => AblationMode {
                classifier_oracle: true,
                switcher_oracle: false,
                force_branch: ForceBranch::None,
            },
            ModeArg::SwitcherOracle => AblationMode {
                classifier_oracle: false,
                switcher_oracle: true,
                force_branch: ForceBranch::None,
            },
            ModeArg::PointerOnly => AblationMode {
                classifier_oracle: true,
                switcher_oracle: false,
                force_branch: ForceBranch::PointerOnly,
            },
            ModeArg::GeneratorOnly => AblationMode {
                classifier_oracle: true,
                switcher_oracle: false,
                force_branch: ForceBranch::GeneratorOnly,
            },
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Corpus JSON file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Ontology JSON file; omitted, slots and values are collected from
    /// the corpus belief states.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which oracle substitution or forced branch to apply.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Report JSON path; omitted, the report goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UnseenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training corpus (examples using held-out values are dropped).
    #[arg(long)]
    train_data: PathBuf,
    /// Untouched test corpus.
    #[arg(long)]
    test_data: PathBuf,
    /// Ontology JSON file; omitted, slots and values are collected from
    /// the corpus belief states.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Slot whose values are held out.
    #[arg(long)]
    slot: String,
    /// Fraction of the slot's concrete values to hold out, in [0, 1).
    #[arg(long)]
    rate: f64,
    /// Report JSON path; omitted, the report goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FewshotArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Pretraining corpus (the target slot's examples become the tuning pool).
    #[arg(long)]
    train_data: PathBuf,
    /// Untouched test corpus.
    #[arg(long)]
    test_data: PathBuf,
    /// Ontology JSON file; omitted, slots and values are collected from
    /// the corpus belief states.
    #[arg(long)]
    ontology: Option<PathBuf>,
    /// Slot excluded from pretraining and learned by fine-tuning.
    #[arg(long)]
    slot: String,
    /// Comma-separated example budgets, e.g. 0,8,32.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Slot-row setup: plain, alternate, or similar:<source-slot>.
    #[arg(long, default_value = "plain")]
    strategy: String,
    /// Fine-tune epochs per budget.
    #[arg(long, default_value_t = 4)]
    tune_epochs: usize,
    /// Curve JSONL path; omitted, the curve goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// DOT output path; omitted, the DOT text goes to stdout.
    #[arg(long)]
    dot: Option<PathBuf>,
    /// JSON mirror of the same edges.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the fixture's parameters and embeddings.
    #[arg(long)]
    seed: Option<u64>,
    /// Probed elements per parameter tensor.
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Labelgen(args) => cmd_labelgen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Unseen(args) => cmd_unseen(args),
        Command::Fewshot(args) => cmd_fewshot(args),
        Command::Graph(args) => cmd_graph(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn cmd_labelgen(args: LabelgenArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let (dialogues, ontology) = read_inputs(&args.data, args.ontology.as_deref())?;
    let refs: Vec<&Dialogue> = dialogues.iter().collect();
    let examples = training::build_examples(
        &refs,
        &ontology,
        config.negative_policy,
        config.first_occurrence_correction,
        config.seed,
    )?;
    let mut out = String::new();
    for ex in &examples {
        out.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        out.push('\n');
    }
    write_atomic(&args.out, out.as_bytes())?;
    println!("wrote {} examples to {}", examples.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let (dialogues, ontology) = read_inputs(&args.data, args.ontology.as_deref())?;
    let table = args.config.word_table(&config)?;
    let artifacts = training::train(&config, &dialogues, &ontology, &table)?;

    fs::create_dir_all(&args.out).map_err(io_data(&args.out))?;
    let ckpt = args.out.join("checkpoint.bin");
    checkpoint::save(&ckpt, &config.model, &artifacts.params)?;
    write_atomic(
        &args.out.join("metrics.jsonl"),
        training::metrics_to_jsonl(&artifacts.metrics).as_bytes(),
    )?;
    write_atomic(
        &args.out.join("config.json"),
        serde_json::to_string_pretty(&config)
            .expect("config serializes")
            .as_bytes(),
    )?;
    println!(
        "best validation joint accuracy {:.4} at epoch {}; artifacts in {}",
        artifacts.best_val_acc,
        artifacts.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn load_model(
    config: &TrainConfig,
    table: &WordTable,
    ontology: &Ontology,
    ckpt: &Path,
) -> Result<(Params<f32>, IndexMap<String, crate::model::forward::ValueSet>), CliError> {
    let params = checkpoint::load(ckpt, &config.model)?;
    let value_sets = crate::model::forward::ValueSet::build_all(ontology, table)?;
    Ok((params, value_sets))
}

fn report_out(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let (dialogues, ontology) = read_inputs(&args.data, args.ontology.as_deref())?;
    let table = args.config.word_table(&config)?;
    let (params, value_sets) = load_model(&config, &table, &ontology, &args.checkpoint)?;
    let refs: Vec<&Dialogue> = dialogues.iter().collect();
    let report = evaluation::evaluate(
        &params,
        &config.model,
        &table,
        &value_sets,
        &refs,
        &AblationMode::plain(),
        None,
    )?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    report_out(args.out.as_deref(), &text)
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let (dialogues, ontology) = read_inputs(&args.data, args.ontology.as_deref())?;
    let table = args.config.word_table(&config)?;
    let (params, value_sets) = load_model(&config, &table, &ontology, &args.checkpoint)?;
    let refs: Vec<&Dialogue> = dialogues.iter().collect();
    let report = evaluation::run_ablation(
        &args.mode.to_mode(),
        &params,
        &config.model,
        &table,
        &value_sets,
        &refs,
    )?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    report_out(args.out.as_deref(), &text)
}

fn cmd_unseen(args: UnseenArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let (train_dialogues, ontology) = read_inputs(&args.train_data, args.ontology.as_deref())?;
    let test_dialogues = load_corpus(&args.test_data)?;
    let table = args.config.word_table(&config)?;
    let outcome = evaluation::unseen_value_experiment(
        &train_dialogues,
        &test_dialogues,
        &ontology,
        &args.slot,
        args.rate,
        config.seed,
        &config,
        &table,
    )?;
    let text = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
    report_out(args.out.as_deref(), &text)
}

fn parse_strategy(raw: &str) -> Result<FineTuneStrategy, CliError> {
    match raw {
        "plain" => Ok(FineTuneStrategy::Plain),
        "alternate" => Ok(FineTuneStrategy::AlternateFullData),
        other => match other.strip_prefix("similar:") {
            Some(source) if !source.is_empty() => {
                Ok(FineTuneStrategy::InitFromSimilar(source.to_string()))
            }
            _ => Err(CliError::Usage(format!(
                "unknown strategy '{other}' (expected plain, alternate, or similar:<slot>)"
            ))),
        },
    }
}

fn cmd_fewshot(args: FewshotArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    if args.sizes.is_empty() {
        return Err(CliError::Usage("--sizes must list at least one budget".to_string()));
    }
    let strategy = parse_strategy(&args.strategy)?;
    let (train_dialogues, ontology) = read_inputs(&args.train_data, args.ontology.as_deref())?;
    let test_dialogues = load_corpus(&args.test_data)?;
    let table = args.config.word_table(&config)?;
    let curve = evaluation::few_shot_experiment(
        &train_dialogues,
        &test_dialogues,
        &ontology,
        &args.slot,
        &args.sizes,
        &strategy,
        &config,
        &table,
        args.tune_epochs,
    )?;
    report_out(
        args.out.as_deref(),
        evaluation::few_shot_curve_jsonl(&curve).trim_end(),
    )
}

fn cmd_graph(args: GraphArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let params = checkpoint::load(&args.checkpoint, &config.model)?;
    let embeddings = evaluation::slot_embeddings(&params);
    let graph = evaluation::slot_similarity_graph(&embeddings)?;
    let dot = evaluation::slot_graph_dot(&graph);
    match &args.dot {
        Some(path) => write_atomic(path, dot.as_bytes())?,
        None => print!("{dot}"),
    }
    if let Some(path) = &args.json {
        write_atomic(path, evaluation::slot_graph_json(&graph).as_bytes())?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let seed = match args.seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(env) => env.parse().map_err(|_| {
                CliError::Usage(format!("{SEED_ENV}='{env}' is not an integer seed"))
            })?,
            Err(_) => 7,
        },
    };
    println!(
        "{}",
        serde_json::json!({"subcommand": "gradcheck", "seed": seed, "samples": args.samples})
    );
    let report = verify::full_gradcheck(seed, args.samples)?;
    println!(
        "max relative error {:.3e} over {} probes",
        report.max_relative_error, report.checked
    );
    if report.passed() {
        Ok(())
    } else {
        let worst = report.failures();
        let detail = worst
            .first()
            .map(|f| format!("{}[{}]: analytic {} vs numeric {}", f.param, f.index, f.analytic, f.numeric))
            .unwrap_or_default();
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} ({detail})",
            report.max_relative_error
        )))
    }
}
