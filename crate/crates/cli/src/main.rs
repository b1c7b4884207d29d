//! `labelshift` — train softmax classifiers under shifted label
//! distributions, adapt them with bias adjustment or rejection thresholds,
//! and reproduce the synthetic shift experiments.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use labelshift::adapt::{
    apply_threshold, ba_fix_predict, ba_set_predict, clean_dev_split, estimate_label_distribution,
    grid_with_steps, tune_threshold, AdjustmentSpec, ThresholdKind,
};
use labelshift::corpus::{build_vocab, load_instances, save_dataset};
use labelshift::derive_seed;
use labelshift::eval::{evaluate, gold_indices, EvalReport};
use labelshift::experiment::{emit_reports, run_experiment, write_suite, RunConfig, METHODS};
use labelshift::model::{Instance, ModelKind, SoftmaxClassifier};
use labelshift::synth::{build_shift_suite, random_distribution, shift_report, SynthGenSpec};
use labelshift::train::{train, train_ba_fix, TrainConfig, TrainLog};

mod config;

/// Default-output-directory override.
const OUT_DIR_ENV: &str = "LABELSHIFT_OUT_DIR";

#[derive(Parser)]
#[command(name = "labelshift", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a softmax classifier on a JSONL corpus.
    Train(TrainArgs),
    /// Evaluate a saved model on a labeled corpus.
    Eval(EvalArgs),
    /// Adapt a saved model to a test set and score the held-out part.
    Adapt(AdaptArgs),
    /// Grid-search a rejection threshold on a clean dev split.
    TuneThreshold(TuneArgs),
    /// Generate a synthetic label-shift suite (or a single dataset).
    Synth(SynthArgs),
    /// Report the per-label shift between a train corpus and a test corpus.
    ShiftReport(ShiftArgs),
    /// Run the full multi-seed experiment pipeline.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    #[value(name = "sparse-linear")]
    SparseLinear,
    #[value(name = "embedding-average")]
    EmbeddingAverage,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::SparseLinear => ModelKind::SparseLinear,
            KindArg::EmbeddingAverage => ModelKind::EmbeddingAverage,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    Max,
    Entropy,
}

impl From<ThresholdArg> for ThresholdKind {
    fn from(k: ThresholdArg) -> Self {
        match k {
            ThresholdArg::Max => ThresholdKind::Max,
            ThresholdArg::Entropy => ThresholdKind::Entropy,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(name = "ba-set")]
    BaSet,
    #[value(name = "ba-fix")]
    BaFix,
    #[value(name = "max-thres")]
    MaxThres,
    #[value(name = "ent-thres")]
    EntThres,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (JSONL).
    #[arg(long)]
    train: PathBuf,
    /// Dev corpus; when absent a fraction of the train set is split off.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Fraction of the train set used as dev when --dev is absent.
    #[arg(long, default_value_t = 0.1)]
    dev_fraction: f64,
    /// Where to write the trained model (JSON).
    #[arg(long)]
    model_out: PathBuf,
    /// Optional per-epoch log (CSV).
    #[arg(long)]
    trainlog: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sparse-linear")]
    kind: KindArg,
    #[arg(long, default_value_t = labelshift::model::DEFAULT_EMBEDDING_DIM)]
    embedding_dim: usize,
    /// Train with the bias frozen at ln p(r|train).
    #[arg(long)]
    ba_fix: bool,
    #[arg(long, default_value_t = 1.0)]
    lr0: f64,
    #[arg(long, default_value_t = 0.1)]
    decay_factor: f64,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 30)]
    max_epochs: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    input_dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    pool_dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labeled corpus to score (JSONL).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test corpus; a clean dev sample is split off for estimation/tuning.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Train corpus for estimating the source prior (BA-Set); when absent
    /// the prior recorded in the model is used.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    clean_fraction: f64,
    /// Additive smoothing for prior estimation.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 101)]
    grid_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum)]
    kind: ThresholdArg,
    #[arg(long, default_value_t = 0.2)]
    clean_fraction: f64,
    #[arg(long, default_value_t = 101)]
    grid_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; falls back to $LABELSHIFT_OUT_DIR, then ".".
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Generate one dataset of this size at the test prior instead of the
    /// full S0..S5 suite.
    #[arg(long)]
    single: Option<usize>,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long, default_value_t = 0.75)]
    none_share: f64,
    #[arg(long, default_value_t = 210)]
    vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    feats: usize,
    #[arg(long, default_value_t = 0.45)]
    block_mass: f64,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 3000)]
    n_test: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
}

#[derive(Args)]
struct ShiftArgs {
    /// Train corpus (JSONL).
    #[arg(long)]
    train: PathBuf,
    /// Test corpus (JSONL).
    #[arg(long)]
    test: PathBuf,
    /// Optional CSV output for the bin table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// key=value config file; flags override file entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; falls back to $LABELSHIFT_OUT_DIR, then ".".
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated seeds, e.g. 1,2,3,4,5.
    #[arg(long)]
    seeds: Option<String>,
    /// Load a pre-built suite from this directory instead of generating.
    #[arg(long)]
    suite_dir: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    suite_seed: Option<u64>,
    #[arg(long, value_enum)]
    model_kind: Option<KindArg>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    clean_fraction: Option<f64>,
    #[arg(long)]
    grid_steps: Option<usize>,
}

/// Error category carrying the process exit code.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<labelshift::Error> for CliError {
    fn from(e: labelshift::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(format!("serialization failed: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Adapt(args) => cmd_adapt(args),
        Command::TuneThreshold(args) => cmd_tune(args),
        Command::Synth(args) => cmd_synth(args),
        Command::ShiftReport(args) => cmd_shift_report(args),
        Command::Experiment(args) => cmd_experiment(args),
    }
}

fn out_dir_or_default(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn check_fraction(name: &str, value: f64) -> CliResult<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "--{name} must lie in (0, 1), got {value}"
        )))
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn score(model: &SoftmaxClassifier, preds: &[usize], data: &[Instance]) -> CliResult<EvalReport> {
    let golds = gold_indices(data, model.vocab())?;
    Ok(evaluate(preds, &golds, model.vocab())?)
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    check_fraction("dev-fraction", args.dev_fraction)?;
    let train_data = load_instances(&args.train)?;
    let (train_part, dev_part) = match &args.dev {
        Some(path) => (train_data.clone(), load_instances(path)?),
        None => {
            let (dev, tr) = clean_dev_split(&train_data, args.dev_fraction, args.seed)?;
            (tr, dev)
        }
    };
    let mut everything = train_part.clone();
    everything.extend(dev_part.iter().cloned());
    let vocab = build_vocab(&everything, labelshift::model::DEFAULT_NONE_NAME)?;
    let feature_ids = SoftmaxClassifier::feature_ids_from(&train_part);
    let init = match ModelKind::from(args.kind) {
        ModelKind::SparseLinear => SoftmaxClassifier::sparse_linear(vocab.clone(), feature_ids),
        ModelKind::EmbeddingAverage => SoftmaxClassifier::embedding_average(
            vocab.clone(),
            feature_ids,
            args.embedding_dim,
            derive_seed(args.seed, 1),
        )?,
    };
    let cfg = TrainConfig {
        lr0: args.lr0,
        decay_factor: args.decay_factor,
        patience: args.patience,
        max_epochs: args.max_epochs,
        batch_size: args.batch_size,
        input_dropout: args.input_dropout,
        pool_dropout: args.pool_dropout,
        l2: args.l2,
        seed: args.seed,
    };
    let (mut model, log) = if args.ba_fix {
        let p_src = estimate_label_distribution(&train_data, &vocab, 1.0)?;
        train_ba_fix(init, &train_part, &dev_part, &cfg, &p_src)?
    } else {
        train(init, &train_part, &dev_part, &cfg)?
    };
    // Record the prior of the full corpus, not just the split.
    model.set_train_prior(estimate_label_distribution(&train_data, &vocab, 1.0)?);
    model.save(&args.model_out)?;
    if let Some(path) = &args.trainlog {
        write_trainlog(path, &log)?;
    }
    let best = log
        .epochs
        .iter()
        .map(|e| e.dev_loss)
        .fold(f64::INFINITY, f64::min);
    println!(
        "trained {} model over {} instances ({} epochs, best dev loss {best:.6})",
        ModelKind::from(args.kind),
        train_part.len(),
        log.final_epoch,
    );
    println!("model written to {}", args.model_out.display());
    Ok(())
}

fn write_trainlog(path: &Path, log: &TrainLog) -> CliResult<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    log.write_csv(file)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let model = SoftmaxClassifier::load(&args.model)?;
    let data = load_instances(&args.data)?;
    if data.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no instances",
            args.data.display()
        )));
    }
    let preds: Vec<usize> = data.iter().map(|x| model.argmax_predict(x)).collect();
    print_json(&score(&model, &preds, &data)?)
}

fn cmd_adapt(args: AdaptArgs) -> CliResult<()> {
    check_fraction("clean-fraction", args.clean_fraction)?;
    let model = SoftmaxClassifier::load(&args.model)?;
    let test = load_instances(&args.test)?;
    let (clean, held) = clean_dev_split(&test, args.clean_fraction, args.seed)?;
    let p_tgt = estimate_label_distribution(&clean, model.vocab(), args.alpha)?;

    let mut threshold = None;
    let mut p_src = None;
    let preds: Vec<usize> = match args.method {
        MethodArg::BaSet => {
            let src = match &args.train {
                Some(path) => {
                    estimate_label_distribution(&load_instances(path)?, model.vocab(), args.alpha)?
                }
                None => model.train_prior().cloned().ok_or_else(|| {
                    CliError::Data(
                        "model records no train prior; pass --train to estimate one".into(),
                    )
                })?,
            };
            let spec = AdjustmentSpec::new(src.clone(), p_tgt.clone())?;
            p_src = Some(src);
            held.iter()
                .map(|x| ba_set_predict(&model, x, &spec).map(|p| p.argmax()))
                .collect::<labelshift::Result<_>>()?
        }
        MethodArg::BaFix => {
            p_src = model.ba_fix_src().cloned();
            held.iter()
                .map(|x| ba_fix_predict(&model, x, &p_tgt).map(|p| p.argmax()))
                .collect::<labelshift::Result<_>>()?
        }
        MethodArg::MaxThres | MethodArg::EntThres => {
            let kind = match args.method {
                MethodArg::MaxThres => ThresholdKind::Max,
                _ => ThresholdKind::Entropy,
            };
            let grid = grid_with_steps(kind, model.num_labels(), args.grid_steps);
            let spec = tune_threshold(&model, &clean, kind, &grid)?;
            threshold = Some(spec.clone());
            held.iter()
                .map(|x| apply_threshold(&model.predict(x), &spec, model.vocab()))
                .collect()
        }
    };
    let report = score(&model, &preds, &held)?;

    #[derive(serde::Serialize)]
    struct AdaptOutput<'a> {
        method: &'a str,
        clean_dev_size: usize,
        held_out_size: usize,
        threshold: Option<labelshift::adapt::ThresholdSpec>,
        p_src: Option<&'a [f64]>,
        p_tgt: &'a [f64],
        report: &'a EvalReport,
    }
    print_json(&AdaptOutput {
        method: match args.method {
            MethodArg::BaSet => METHODS[3],
            MethodArg::BaFix => METHODS[4],
            MethodArg::MaxThres => METHODS[1],
            MethodArg::EntThres => METHODS[2],
        },
        clean_dev_size: clean.len(),
        held_out_size: held.len(),
        threshold,
        p_src: p_src.as_ref().map(|d| d.probs()),
        p_tgt: p_tgt.probs(),
        report: &report,
    })
}

fn cmd_tune(args: TuneArgs) -> CliResult<()> {
    check_fraction("clean-fraction", args.clean_fraction)?;
    let model = SoftmaxClassifier::load(&args.model)?;
    let test = load_instances(&args.test)?;
    let (clean, held) = clean_dev_split(&test, args.clean_fraction, args.seed)?;
    let kind = ThresholdKind::from(args.kind);
    let grid = grid_with_steps(kind, model.num_labels(), args.grid_steps);
    let spec = tune_threshold(&model, &clean, kind, &grid)?;
    let preds: Vec<usize> = held
        .iter()
        .map(|x| apply_threshold(&model.predict(x), &spec, model.vocab()))
        .collect();
    let report = score(&model, &preds, &held)?;

    #[derive(serde::Serialize)]
    struct TuneOutput<'a> {
        threshold: &'a labelshift::adapt::ThresholdSpec,
        clean_dev_size: usize,
        held_out_report: &'a EvalReport,
    }
    print_json(&TuneOutput {
        threshold: &spec,
        clean_dev_size: clean.len(),
        held_out_report: &report,
    })
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let out_dir = out_dir_or_default(args.out_dir);
    let spec = SynthGenSpec::with_block_classes(
        args.k,
        args.none_share,
        args.vocab_size,
        args.feats,
        args.block_mass,
        args.seed,
    )?;
    if let Some(n) = args.single {
        let data = labelshift::synth::synth_generate(&spec, &spec.test_prior(), n, args.seed)?;
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
        let path = out_dir.join("data.jsonl");
        save_dataset(&path, &data)?;
        println!("wrote {} instances to {}", data.len(), path.display());
        return Ok(());
    }
    let s0 = spec.test_prior();
    let s5 = random_distribution(args.k, derive_seed(args.seed, 5))?;
    let suite = build_shift_suite(&spec, &s0, &s5, &s0, args.n_train, args.n_test, args.seed)?;
    let files = write_suite(&suite, &out_dir)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_shift_report(args: ShiftArgs) -> CliResult<()> {
    let train_data = load_instances(&args.train)?;
    let test_data = load_instances(&args.test)?;
    let mut everything = train_data.clone();
    everything.extend(test_data.iter().cloned());
    let vocab = build_vocab(&everything, labelshift::model::DEFAULT_NONE_NAME)?;
    let train_dist = estimate_label_distribution(&train_data, &vocab, 0.0)?;
    let report = shift_report(&train_dist, &test_data, &vocab)?;
    if let Some(path) = &args.csv {
        let file = std::fs::File::create(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        report.write_csv(file)?;
    }

    #[derive(serde::Serialize)]
    struct ShiftOutput<'a> {
        labels: &'a [String],
        report: &'a labelshift::synth::ShiftReport,
    }
    print_json(&ShiftOutput {
        labels: vocab.labels(),
        report: &report,
    })
}

fn cmd_experiment(args: ExperimentArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(path) => config::load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(spec) = &args.seeds {
        cfg.seeds = config::parse_seeds(spec).map_err(CliError::Usage)?;
    }
    if let Some(dir) = args.suite_dir {
        cfg.suite_dir = Some(dir);
    }
    if let Some(n) = args.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = args.n_test {
        cfg.n_test = n;
    }
    if let Some(s) = args.suite_seed {
        cfg.suite_seed = s;
    }
    if let Some(kind) = args.model_kind {
        cfg.model_kind = kind.into();
    }
    if let Some(e) = args.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = args.lr0 {
        cfg.lr0 = lr;
    }
    if let Some(f) = args.clean_fraction {
        cfg.clean_dev_fraction = f;
    }
    if let Some(g) = args.grid_steps {
        cfg.grid_steps = g;
    }
    let out_dir = out_dir_or_default(args.out_dir);

    let result = run_experiment(&cfg)?;
    let files = emit_reports(&result, &out_dir)?;

    println!("config hash: {}", result.config_hash);
    println!("mean micro-F1 by method and step:");
    print!("{:>12}", "method");
    for step in 0..result.step_priors.len() {
        print!("{:>8}", format!("S{step}"));
    }
    println!();
    for method in METHODS {
        print!("{method:>12}");
        for step in 0..result.step_priors.len() {
            let mean = result
                .aggregate(method, step)
                .map(|a| a.mean_f1)
                .unwrap_or(f64::NAN);
            print!("{:>8.2}", 100.0 * mean);
        }
        println!();
    }
    for f in files.iter().take(3) {
        println!("wrote {}", f.display());
    }
    println!(
        "wrote {} training logs under {}",
        result.train_logs.len(),
        out_dir.join("trainlogs").display()
    );
    Ok(())
}
