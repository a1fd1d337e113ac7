//! `hyperprompt` batch driver.
//!
//! Settings resolve in three layers: built-in defaults, then the JSON file
//! given with `--config`, then command-line flags. The default seed is read
//! from `HYPERPROMPT_SEED` when set.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hyperprompt::datagen::{build_pretrain_corpus, lm_input_text, synthetic_tables, CorpusOptions};
use hyperprompt::error::Error;
use hyperprompt::gformer::encode_soft_prompt;
use hyperprompt::hypergraph::{table_to_hypergraph, triples_to_hypergraph, HyperGraph};
use hyperprompt::ingest::{corpus_stats, parse_table, parse_triples, TableFormat, TextSample};
use hyperprompt::numerics::checkpoint;
use hyperprompt::pipeline::{
    load_corpus, load_training_checkpoint, predict_all, pretrain, save_training_checkpoint, score_predictions,
    write_predictions, Ablation, Bundle, BundleConfig, Preset, TrainState, PROMPT_PREFIX,
};
use hyperprompt::toylm::{Tokenizer, LORA_PREFIX};
use hyperprompt::train::{LossLog, LossMode, TuningMode};
use hyperprompt::{encoder, gformer, toylm};

use config::{RunConfig, SEED_ENV};

const BUNDLE_CONFIG: &str = "config.json";
const MODEL_FILE: &str = "model.ckpt";
const STATE_FILE: &str = "state.ckpt";
const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Parser)]
#[command(
    name = "hyperprompt",
    version,
    about = "Hypergraph soft prompts for a toy language model"
)]
struct Cli {
    /// JSON file overriding the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (default: $HYPERPROMPT_SEED, else 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Built-in size defaults the config file is merged over (default: desk).
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum PresetArg {
    Desk,
    Long,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum FormatArg {
    Csv,
    JsonRows,
    Triples,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum AblationArg {
    Full,
    NoPretrain,
    NoGnn,
    NoGformer,
    PromptTuning,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum TuningArg {
    FreezeLlm,
    Lora,
    Full,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum PretrainLoss {
    AnswerGen,
    Contrastive,
    Joint,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Table or triples file to hypergraph JSON.
    Convert {
        #[arg(long, value_enum)]
        format: FormatArg,
        input: PathBuf,
        output: PathBuf,
    },
    /// Templated question shards from tables.
    GenPretrain(GenArgs),
    /// Trains the encoder and former on a corpus.
    Pretrain(PretrainArgs),
    /// Instruction-tunes a bundle in one ablation and tuning mode.
    TrainToy(TrainToyArgs),
    /// Soft-prompt matrix for one hypergraph.
    Encode {
        /// Directory written by `train-toy`.
        #[arg(long)]
        bundle: PathBuf,
        /// Hypergraph JSON written by `convert`.
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Length and size statistics of a corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        /// Label copied into the report.
        #[arg(long, default_value = "train")]
        split: String,
        /// Token budget used to count truncations (default: the model's max_len).
        #[arg(long)]
        max_len: Option<usize>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicts answers for a corpus and scores them by exact match.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for predictions.jsonl and report.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Table files; the format follows the extension (.csv or .json).
    #[arg(long = "table", num_args = 1..)]
    tables: Vec<PathBuf>,
    /// Generate this many synthetic tables instead.
    #[arg(long, conflicts_with = "tables")]
    synthetic: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Questions generated per table.
    #[arg(long)]
    per_table: Option<usize>,
    /// Records per shard file.
    #[arg(long)]
    shard_size: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// Directory written by `gen-pretrain`.
    #[arg(long)]
    corpus: PathBuf,
    /// Bundle directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Cap on optimizer steps; also fixes the schedule length.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Leave the timestamp column out of the loss log.
    #[arg(long)]
    no_timestamps: bool,
    /// Continue from a training state written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Return after this many steps with a resumable state (0: run to the end).
    #[arg(long)]
    stop_after: Option<usize>,
    /// Write the training state every N steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_enum)]
    loss: Option<PretrainLoss>,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long, value_enum)]
    tuning: Option<TuningArg>,
    /// Encoder and former weights from `pretrain`.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Language-model weights to start from instead of the seeded init.
    #[arg(long)]
    base_lm: Option<PathBuf>,
}

/// Failure split by exit code.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            report("Usage", &e.render().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            report("Usage", &msg);
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
    }
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message.trim_end() }));
}

fn run(cli: Cli) -> CliResult<()> {
    let preset = cli.preset.map(|p| match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Long => Preset::Long,
    });
    if let Some(p) = &cli.config {
        require_file(p)?;
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut rc = RunConfig::resolve(cli.config.as_deref(), env_seed.as_deref(), preset).map_err(Failure::Usage)?;
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    match cli.cmd {
        Cmd::Convert { format, input, output } => convert(format, &input, &output),
        Cmd::GenPretrain(a) => gen_pretrain(rc, a),
        Cmd::Pretrain(a) => run_pretrain(rc, a),
        Cmd::TrainToy(a) => train_toy(rc, a),
        Cmd::Encode { bundle, graph, out } => encode(&bundle, &graph, &out),
        Cmd::Stats {
            corpus,
            split,
            max_len,
            out,
        } => stats(&rc, &corpus, &split, max_len, out.as_deref()),
        Cmd::Eval { bundle, corpus, out } => eval(&bundle, &corpus, &out),
    }
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: no such file", p.display())))
    }
}

fn require_dir(p: &Path) -> CliResult<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{}: no such directory", p.display())))
    }
}

fn read(p: &Path) -> CliResult<Vec<u8>> {
    fs::read(p).map_err(|e| Error::io(p, e).into())
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e).into())
}

fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e).into())
}

fn convert(format: FormatArg, input: &Path, output: &Path) -> CliResult<()> {
    require_file(input)?;
    let raw = read(input)?;
    let hg = match format {
        FormatArg::Csv => table_to_hypergraph(&parse_table(&raw, TableFormat::Csv)?),
        FormatArg::JsonRows => table_to_hypergraph(&parse_table(&raw, TableFormat::JsonRows)?),
        FormatArg::Triples => triples_to_hypergraph(&parse_triples(&raw)?)?,
    };
    write(output, hg.to_json())?;
    println!(
        "{}",
        json!({ "nodes": hg.n_nodes(), "hyperedges": hg.n_hyperedges(), "incidences": hg.incidence().len() })
    );
    Ok(())
}

fn table_format(p: &Path) -> CliResult<TableFormat> {
    match p.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(TableFormat::Csv),
        Some("json") => Ok(TableFormat::JsonRows),
        _ => Err(Failure::Usage(format!(
            "{}: expected a .csv or .json table",
            p.display()
        ))),
    }
}

fn gen_pretrain(rc: RunConfig, a: GenArgs) -> CliResult<()> {
    let mut opts = CorpusOptions {
        seed: rc.seed,
        max_len: rc.model.lm.max_len,
        ..rc.corpus
    };
    if let Some(v) = a.per_table {
        opts.per_table = v;
    }
    if let Some(v) = a.shard_size {
        opts.shard_size = v;
    }
    create_dir(&a.out)?;
    let summary = match a.synthetic {
        Some(n) => {
            let tables = synthetic_tables(n, (3, 8), (3, 6), rc.seed);
            build_pretrain_corpus(tables.into_iter().map(Ok), &opts, &a.out)?
        }
        None => {
            if a.tables.is_empty() {
                return Err(Failure::Usage("give --table files or --synthetic N".into()));
            }
            for p in &a.tables {
                require_file(p)?;
                table_format(p)?;
            }
            let tables = a.tables.iter().map(|p| {
                let raw = fs::read(p).map_err(|e| Error::io(p, e))?;
                let fmt = if p.extension().is_some_and(|e| e == "csv") {
                    TableFormat::Csv
                } else {
                    TableFormat::JsonRows
                };
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok((id, parse_table(&raw, fmt)?))
            });
            build_pretrain_corpus(tables, &opts, &a.out)?
        }
    };
    println!("{}", json!({ "examples": summary.examples, "shards": summary.shards }));
    Ok(())
}

fn apply_train_flags(rc: &mut RunConfig, f: &TrainFlags) {
    let t = &mut rc.train;
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.max_steps {
        t.max_steps = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.stop_after {
        t.stop_after = v;
    }
    t.seed = rc.seed;
}

/// Loss log, training state and the hook that checkpoints every N steps.
fn prepare(bundle: &mut Bundle, f: &TrainFlags) -> CliResult<(TrainState, LossLog)> {
    require_dir(&f.corpus)?;
    create_dir(&f.out)?;
    let state = match &f.resume {
        Some(p) => {
            require_file(p)?;
            load_training_checkpoint(bundle, p)?
        }
        None => TrainState::fresh(),
    };
    let mut log = LossLog::new(!f.no_timestamps);
    // A resumed run appends to the log of the run it continues.
    let prior = f.out.join(LOSS_FILE);
    if f.resume.is_some() && prior.is_file() {
        log = LossLog::read(&prior, !f.no_timestamps)?;
        log.rows.retain(|r| r.step < state.step);
    }
    Ok((state, log))
}

fn finish(
    bundle: &Bundle,
    state: &TrainState,
    log: &LossLog,
    f: &TrainFlags,
    model_prefixes: &[&str],
) -> CliResult<()> {
    save_training_checkpoint(bundle, state, &f.out.join(STATE_FILE))?;
    let mut model = hyperprompt::numerics::ParamStore::new();
    for (_, name, t) in bundle.store.iter() {
        if model_prefixes.iter().any(|p| name.starts_with(p)) {
            model.insert(name, t.clone())?;
        }
    }
    checkpoint::save(&model, &f.out.join(MODEL_FILE))?;
    write(
        &f.out.join(BUNDLE_CONFIG),
        serde_json::to_string_pretty(&bundle.cfg).map_err(Error::from)?,
    )?;
    log.write(&f.out.join(LOSS_FILE))?;
    let last = log.rows.last().map(|r| r.loss);
    println!("{}", json!({ "steps": state.step, "final_loss": last }));
    Ok(())
}

fn run_pretrain(mut rc: RunConfig, a: PretrainArgs) -> CliResult<()> {
    apply_train_flags(&mut rc, &a.train);
    if let Some(l) = a.loss {
        rc.pretrain_loss = match l {
            PretrainLoss::AnswerGen => LossMode::AnswerGen,
            PretrainLoss::Contrastive => LossMode::Contrastive,
            PretrainLoss::Joint => LossMode::Joint,
        };
    }
    let mut tcfg = rc.train.clone();
    tcfg.loss_mode = rc.pretrain_loss;
    let mut cfg = rc.model.clone();
    cfg.ablation = Ablation::Full;
    cfg.tuning = TuningMode::FreezeLlm;
    let mut bundle = Bundle::new(cfg)?;
    let (mut state, mut log) = prepare(&mut bundle, &a.train)?;
    let samples = load_corpus(&a.train.corpus)?;
    let every = a.train.checkpoint_every;
    let state_path = a.train.out.join(STATE_FILE);
    let mut hook = |b: &Bundle, s: &TrainState| {
        if every > 0 && s.step.is_multiple_of(every) {
            save_training_checkpoint(b, s, &state_path)?;
        }
        Ok(())
    };
    pretrain(&mut bundle, &samples, &tcfg, &mut state, &mut log, Some(&mut hook))?;
    finish(&bundle, &state, &log, &a.train, &[encoder::PREFIX, gformer::PREFIX])
}

fn train_toy(mut rc: RunConfig, a: TrainToyArgs) -> CliResult<()> {
    apply_train_flags(&mut rc, &a.train);
    if let Some(ab) = a.ablation {
        rc.model.ablation = match ab {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoPretrain => Ablation::NoPretrain,
            AblationArg::NoGnn => Ablation::NoGnn,
            AblationArg::NoGformer => Ablation::NoGformer,
            AblationArg::PromptTuning => Ablation::PromptTuning,
        };
    }
    if let Some(t) = a.tuning {
        rc.model.tuning = match t {
            TuningArg::FreezeLlm => TuningMode::FreezeLlm,
            TuningArg::Lora => TuningMode::Lora,
            TuningArg::Full => TuningMode::Full,
        };
    }
    let mut tcfg = rc.train.clone();
    tcfg.loss_mode = LossMode::Instruction;
    tcfg.tuning = rc.model.tuning;
    let ablation = rc.model.ablation;
    let mut bundle = Bundle::new(rc.model.clone())?;
    if let Some(p) = &a.base_lm {
        require_file(p)?;
        bundle.load_params(&checkpoint::load(p)?, &[toylm::PREFIX])?;
    }
    match (&a.pretrained, ablation.uses_pretrained()) {
        (Some(p), true) => {
            require_file(p)?;
            bundle.load_params(&checkpoint::load(p)?, &[encoder::PREFIX, gformer::PREFIX])?;
        }
        (Some(_), false) => {
            return Err(Failure::Usage(format!(
                "ablation {ablation:?} starts from fresh weights; drop --pretrained"
            )))
        }
        (None, true) if a.train.resume.is_none() => {
            return Err(Failure::Usage(format!("ablation {ablation:?} needs --pretrained")))
        }
        _ => {}
    }
    let (mut state, mut log) = prepare(&mut bundle, &a.train)?;
    let samples = load_corpus(&a.train.corpus)?;
    let every = a.train.checkpoint_every;
    let state_path = a.train.out.join(STATE_FILE);
    let mut hook = |b: &Bundle, s: &TrainState| {
        if every > 0 && s.step.is_multiple_of(every) {
            save_training_checkpoint(b, s, &state_path)?;
        }
        Ok(())
    };
    hyperprompt::pipeline::instruction_tune(&mut bundle, &samples, &tcfg, &mut state, &mut log, Some(&mut hook))?;
    finish(
        &bundle,
        &state,
        &log,
        &a.train,
        &[
            encoder::PREFIX,
            gformer::PREFIX,
            toylm::PREFIX,
            LORA_PREFIX,
            PROMPT_PREFIX,
        ],
    )
}

/// Rebuilds a bundle written by `train-toy`.
fn load_bundle(dir: &Path) -> CliResult<Bundle> {
    require_dir(dir)?;
    let cfg_path = dir.join(BUNDLE_CONFIG);
    require_file(&cfg_path)?;
    let cfg: BundleConfig = serde_json::from_slice(&read(&cfg_path)?).map_err(Error::from)?;
    let mut bundle = Bundle::new(cfg)?;
    let model = dir.join(MODEL_FILE);
    require_file(&model)?;
    let saved = checkpoint::load(&model)?;
    bundle.load_params(&saved, &[""])?;
    Ok(bundle)
}

fn encode(bundle: &Path, graph: &Path, out: &Path) -> CliResult<()> {
    require_file(graph)?;
    let bundle = load_bundle(bundle)?;
    let hg = HyperGraph::from_json(&read(graph)?)?;
    let q = bundle.extract_soft_prompt(&hg)?;
    write(out, encode_soft_prompt(&q))?;
    println!("{}", json!({ "rows": q.rows(), "cols": q.cols() }));
    Ok(())
}

fn stats(rc: &RunConfig, corpus: &Path, split: &str, max_len: Option<usize>, out: Option<&Path>) -> CliResult<()> {
    require_dir(corpus)?;
    let samples: Vec<TextSample> = load_corpus(corpus)?
        .into_iter()
        .map(|s| TextSample {
            input: lm_input_text(&s.structure, &s.question),
            output: s.answer,
            nodes: s.graph.n_nodes(),
        })
        .collect();
    let st = corpus_stats(split, &samples, &Tokenizer, max_len.unwrap_or(rc.model.lm.max_len))?;
    let text = serde_json::to_string_pretty(&st).map_err(Error::from)?;
    match out {
        Some(p) => write(p, text + "\n"),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn eval(bundle: &Path, corpus: &Path, out: &Path) -> CliResult<()> {
    require_dir(corpus)?;
    let bundle = load_bundle(bundle)?;
    let samples = load_corpus(corpus)?;
    create_dir(out)?;
    let preds_path = out.join("predictions.jsonl");
    write_predictions(&preds_path, &predict_all(&bundle, &samples)?)?;
    let report = score_predictions(&preds_path)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write(&out.join("report.json"), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}
