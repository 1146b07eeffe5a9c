//! Command-line driver: data generation, training, evaluation, gradient
//! checks and CSV dumps.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::corpus::{generate_synthetic, kshot_sample, load_jsonl, Corpus, Dataset, Split, SyntheticConfig};
use crate::encoder::EncoderDims;
use crate::evaluation::{
    direct_test, embed_dataset, export_embeddings, linear_probe_train, report_from_predictions, LpConfig,
    MetricsReport, ProbeInit,
};
use crate::gradcheck::{run_gradcheck, REL_TOL};
use crate::hierarchy::{load_descriptions, truncate_bottom_up, TemplateSpec};
use crate::label_space::DEFAULT_REENCODE_EVERY;
use crate::losses::LossVariant;
use crate::matrix::Matrix;
use crate::training::{train, write_history_csv, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "lascl", version, about = "Label-aware supervised contrastive learning")]
#[command(args_override_self = true)]
pub struct Cli {
    /// JSON object of flag values for the chosen subcommand; explicit flags win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hierarchical corpus as JSONL.
    GenData(GenDataArgs),
    /// Train an encoder and label space.
    Train(TrainArgs),
    /// Evaluate a checkpoint by direct testing or a linear probe.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the similarity matrices or embeddings of a checkpoint as CSV.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    pub branches: usize,
    #[arg(long, default_value_t = 3)]
    pub leaves_per_branch: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    /// Probability of a uniformly random token, in [0, 1).
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Taxonomy depth; levels between branch and leaf form single-child chains.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value = "data.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Scl,
    Li,
    Liuc,
    Lic,
    Lisc,
}

impl From<VariantArg> for LossVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Scl => LossVariant::Scl,
            VariantArg::Li => LossVariant::Li,
            VariantArg::Liuc => LossVariant::Liuc,
            VariantArg::Lic => LossVariant::Lic,
            VariantArg::Lisc => LossVariant::Lisc,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "lisc")]
    pub variant: VariantArg,
    /// Contrastive temperature.
    #[arg(long, default_value_t = 0.3)]
    pub tau: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Decoupled weight decay.
    #[arg(long, default_value_t = 0.1)]
    pub weight_decay: f64,
    /// Steps between re-encodings of the label sentences.
    #[arg(long, default_value_t = DEFAULT_REENCODE_EVERY)]
    pub reencode_every: usize,
    /// Steps between validation runs.
    #[arg(long, default_value_t = 256)]
    pub eval_every: usize,
    /// Non-improving validations tolerated before stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Train on at most K examples per class.
    #[arg(long, value_name = "K")]
    pub kshot: Option<usize>,
    /// Keep only the last L names of each label path.
    #[arg(long, value_name = "L")]
    pub bottom_up_levels: Option<usize>,
    #[arg(long, default_value = "It contains {label} news.")]
    pub template: String,
    /// JSON map from `/`-joined label paths to label sentences.
    #[arg(long, value_name = "PATH")]
    pub descriptions: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Hash buckets (power of two).
    #[arg(long, default_value_t = 4096)]
    pub buckets: usize,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub output_dim: usize,
    /// Output directory for checkpoint.json and history.csv.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Dt,
    Lp,
    LpLabelInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "dt")]
    pub mode: EvalMode,
    /// Split to score.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Training examples per class for the probe.
    #[arg(long, default_value_t = 16)]
    pub lp_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub lp_epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lp_lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lp_weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub lp_batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report JSON here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("what").required(true).args(["similarity", "embeddings"])))]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write the similarity and scale matrices here.
    #[arg(long, value_name = "OUT")]
    pub similarity: Option<PathBuf>,
    /// Write instance and label embeddings here (needs --data).
    #[arg(long, value_name = "OUT", requires = "data")]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
}

/// Turns a JSON config object into `--key value` pairs.
fn config_flags(path: &Path) -> Result<Vec<OsString>, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CliError::Usage(format!("{}: expected a JSON object", path.display())))?;
    let mut flags = Vec::new();
    for (key, v) in obj {
        let flag = key.replace('_', "-");
        if flag == "config" {
            return Err(CliError::Usage("config files cannot nest --config".into()));
        }
        let text = match v {
            serde_json::Value::Null => continue,
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Bool(b) => b.to_string(),
            _ => return Err(CliError::Usage(format!("config key {key:?} must be a scalar"))),
        };
        flags.push(format!("--{flag}").into());
        flags.push(text.into());
    }
    Ok(flags)
}

const SUBCOMMANDS: [&str; 5] = ["gen-data", "train", "eval", "gradcheck", "dump"];

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_str()?;
        if a == "--" {
            return None;
        }
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn parse_once(args: &[OsString]) -> Result<Cli, clap::Error> {
    let matches = Cli::command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

/// Parses `args`, splicing config-file values in right after the subcommand
/// so that explicit flags given later override them.
pub fn parse(args: Vec<OsString>) -> Result<Result<Cli, clap::Error>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(parse_once(&args));
    };
    let Some(pos) = args
        .iter()
        .position(|a| a.to_str().is_some_and(|s| SUBCOMMANDS.contains(&s)))
    else {
        return Ok(parse_once(&args));
    };
    let mut merged = args[..=pos].to_vec();
    merged.extend(config_flags(&path)?);
    merged.extend_from_slice(&args[pos + 1..]);
    Ok(parse_once(&merged))
}

/// Entry point used by the binary. Returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> i32 {
    let args: Vec<OsString> = args.into_iter().collect();
    let cli = match parse(args) {
        Ok(Ok(cli)) => cli,
        Ok(Err(e)) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Dump(a) => cmd_dump(&a),
    }
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&a.noise) {
        return Err(CliError::Usage(format!("--noise must lie in [0, 1), got {}", a.noise)));
    }
    let cfg = SyntheticConfig {
        branches: a.branches,
        leaves_per_branch: a.leaves_per_branch,
        per_class: a.per_class,
        noise: a.noise,
        seed: a.seed,
        depth: a.depth,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    corpus.write_jsonl(&a.out).map_err(runtime)?;
    println!(
        "classes={} examples={} train={} validation={} test={}",
        corpus.num_classes(),
        corpus.train.len() + corpus.validation.len() + corpus.test.len(),
        corpus.train.len(),
        corpus.validation.len(),
        corpus.test.len()
    );
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    load_jsonl(path).map_err(runtime)
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let config = TrainConfig {
        variant: a.variant.into(),
        tau: a.tau,
        batch_size: a.batch,
        epochs: a.epochs,
        lr: a.lr,
        weight_decay: a.weight_decay,
        reencode_every: a.reencode_every,
        eval_every: a.eval_every,
        patience: a.patience,
        seed: a.seed,
        dims: EncoderDims {
            buckets: a.buckets,
            embed: a.embed_dim,
            hidden: a.hidden_dim,
            output: a.output_dim,
        },
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.kshot == Some(0) {
        return Err(CliError::Usage("--kshot must be at least 1".into()));
    }
    if a.bottom_up_levels == Some(0) {
        return Err(CliError::Usage("--bottom-up-levels must be at least 1".into()));
    }

    let corpus = load_corpus(&a.data)?;
    for c in corpus.missing_train_classes() {
        let path = corpus.tree.path_key(c).map_err(runtime)?;
        eprintln!("warning: class {c} ({path}) has no training examples");
    }
    let overrides = a
        .descriptions
        .as_deref()
        .map(|p| load_descriptions(&corpus.tree, p))
        .transpose()
        .map_err(runtime)?;
    let tree = match a.bottom_up_levels {
        Some(levels) => truncate_bottom_up(&corpus.tree, levels).map_err(runtime)?,
        None => corpus.tree.clone(),
    };
    let train_set = match a.kshot {
        Some(k) => kshot_sample(&corpus.train, k, a.seed).map_err(runtime)?,
        None => corpus.train.clone(),
    };
    let template = TemplateSpec::new(a.template.clone());
    let outcome = train::<f64>(
        &config,
        &train_set,
        &corpus.validation,
        &tree,
        &template,
        overrides.as_ref(),
    )
    .map_err(runtime)?;

    fs::create_dir_all(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
    let ckpt = Checkpoint::from_snapshot(outcome.best(), &config, &template, &tree);
    ckpt.save(&a.out.join("checkpoint.json")).map_err(runtime)?;
    let hist_path = a.out.join("history.csv");
    let file = fs::File::create(&hist_path).map_err(|e| runtime(format!("{}: {e}", hist_path.display())))?;
    write_history_csv(std::io::BufWriter::new(file), outcome.history()).map_err(runtime)?;

    println!(
        "variant={} train_examples={} steps={} initial_val_nodeAcc={} best_step={} best_val_nodeAcc={}{}",
        config.variant,
        train_set.len(),
        outcome.state.step,
        outcome.initial_val_node_acc,
        outcome.best().step,
        outcome.best().val_node_acc,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn select_split(corpus: &Corpus, split: SplitArg) -> Dataset {
    match split {
        SplitArg::Train => corpus.train.clone(),
        SplitArg::Validation => corpus.validation.clone(),
        SplitArg::Test => corpus.test.clone(),
        SplitArg::All => {
            let mut all = Dataset::new(Split::Train);
            for d in [&corpus.train, &corpus.validation, &corpus.test] {
                all.examples.extend(d.examples.iter().cloned());
            }
            all
        }
    }
}

fn load_checkpoint_for(path: &Path, corpus: &Corpus) -> Result<Checkpoint<f64>, CliError> {
    let ckpt = Checkpoint::<f64>::load(path).map_err(runtime)?;
    if ckpt.label_paths.len() != corpus.num_classes() {
        return Err(runtime(format!(
            "checkpoint has {} classes but the data has {}",
            ckpt.label_paths.len(),
            corpus.num_classes()
        )));
    }
    Ok(ckpt)
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    if a.mode != EvalMode::Dt && a.lp_per_class == 0 {
        return Err(CliError::Usage("--lp-per-class must be at least 1".into()));
    }
    let corpus = load_corpus(&a.data)?;
    let ckpt = load_checkpoint_for(&a.checkpoint, &corpus)?;
    let eval_set = select_split(&corpus, a.split);
    let report: MetricsReport = match a.mode {
        EvalMode::Dt => direct_test(&ckpt.encoder, &ckpt.label_space, &eval_set, &corpus.tree).map_err(runtime)?,
        EvalMode::Lp | EvalMode::LpLabelInit => {
            let probe_set = kshot_sample(&corpus.train, a.lp_per_class, a.seed).map_err(runtime)?;
            let pz = embed_dataset(&ckpt.encoder, &probe_set);
            let vz = embed_dataset(&ckpt.encoder, &corpus.validation);
            let vy = corpus.validation.labels();
            let init = if a.mode == EvalMode::Lp {
                ProbeInit::Random
            } else {
                ProbeInit::LabelEmbeddings
            };
            let cfg = LpConfig {
                lr: a.lp_lr,
                weight_decay: a.lp_weight_decay,
                epochs: a.lp_epochs,
                batch_size: a.lp_batch,
                seed: a.seed,
            };
            let probe = linear_probe_train(
                &pz,
                &probe_set.labels(),
                corpus.num_classes(),
                init,
                Some(&ckpt.label_space.centers),
                Some((&vz, &vy)),
                &cfg,
            )
            .map_err(runtime)?;
            let ez = embed_dataset(&ckpt.encoder, &eval_set);
            let preds: Vec<usize> = ez.iter().map(|z| probe.predict(z)).collect();
            report_from_predictions(&corpus.tree, &ez, &eval_set.labels(), &preds).map_err(runtime)?
        }
    };
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    println!("{json}");
    if let Some(out) = &a.out {
        fs::write(out, format!("{json}\n")).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let reports = run_gradcheck(a.trials, a.seed);
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<8} max_rel_err={:.3e} checked={} {}",
            r.name,
            r.max_rel_err,
            r.checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!(
            "relative error above {REL_TOL:e} in: {}",
            failed.join(", ")
        )))
    }
}

/// Similarity and scale matrices in one table: `matrix,class,<path per class>`.
pub fn write_similarity_csv(
    out: impl std::io::Write,
    class_paths: &[String],
    similarity: &Matrix<f64>,
    scaled: &Matrix<f64>,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["matrix".to_string(), "class".to_string()];
    header.extend(class_paths.iter().cloned());
    w.write_record(&header)?;
    for (name, m) in [("W", similarity), ("S", scaled)] {
        for (r, path) in class_paths.iter().enumerate() {
            let mut row = vec![name.to_string(), path.clone()];
            row.extend(m.row(r).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_dump(a: &DumpArgs) -> Result<(), CliError> {
    if let Some(out) = &a.similarity {
        let ckpt = Checkpoint::<f64>::load(&a.checkpoint).map_err(runtime)?;
        let tree = ckpt.tree().map_err(runtime)?;
        let paths = (0..tree.num_classes())
            .map(|c| tree.path_key(c))
            .collect::<Result<Vec<_>, _>>()
            .map_err(runtime)?;
        let mut buf = Vec::new();
        write_similarity_csv(&mut buf, &paths, &ckpt.label_space.similarity, &ckpt.label_space.scaled)
            .map_err(runtime)?;
        fs::write(out, buf).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    }
    if let Some(out) = &a.embeddings {
        let data = a
            .data
            .as_deref()
            .ok_or_else(|| CliError::Usage("--embeddings needs --data".into()))?;
        let corpus = load_corpus(data)?;
        let ckpt = load_checkpoint_for(&a.checkpoint, &corpus)?;
        let set = select_split(&corpus, a.split);
        export_embeddings(&ckpt.encoder, &set, &ckpt.label_space, out).map_err(runtime)?;
    }
    Ok(())
}
