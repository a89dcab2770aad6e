use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use apr_core::dataset::{read_interactions, ingest, read_split, split_leave_one_out, write_split, IngestOptions};
use apr_core::evaluator::{evaluate, itempop_scorer, EvalReport};
use apr_core::model::FactorModel;
use apr_core::probe::{probe_sweep, write_probe_means, write_probe_rows, Mode};
use apr_core::train::{write_history, EpochRecord, TrainOutcome};
use apr_core::{continue_bpr, train_apr, train_bpr, RunConfig, Target};

#[derive(Parser)]
#[command(name = "apr", version, about = "Matrix factorization with BPR and adversarial personalized ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest an interaction log and write a leave-one-out split.
    Split(SplitArgs),
    /// Train a model with BPR or APR.
    Train(TrainArgs),
    /// Measure metric degradation under adversarial and random perturbations.
    Probe(ProbeArgs),
    /// Full-ranking HR@K and NDCG@K on the held-out items.
    Eval(EvalArgs),
}

#[derive(Parser)]
struct SplitArgs {
    /// Tab-separated `user item [timestamp]` lines.
    #[arg(long)]
    input: PathBuf,
    /// Output prefix; writes .train, .valid, .test, .user.map, .item.map and .summary.
    #[arg(long)]
    output: PathBuf,
    /// Drop items with fewer interactions than this.
    #[arg(long, default_value_t = 0)]
    min_item_interactions: usize,
    /// Drop users with fewer interactions than this (after the item filter).
    #[arg(long, default_value_t = 0)]
    min_user_interactions: usize,
    /// Treat repeated (user, item) pairs as an error instead of merging them.
    #[arg(long)]
    no_merge: bool,
    /// Also hold out a validation item per user.
    #[arg(long)]
    validation: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Bpr,
    Apr,
}

#[derive(Parser)]
struct TrainArgs {
    /// Split prefix written by `apr split`.
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum)]
    stage: StageArg,
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Checkpoint to continue from. Without it, `--stage apr` runs BPR
    /// pretraining first.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Final checkpoint path; also writes <output>.best and <output>.history.csv.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Parser)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Comma-separated perturbation norms.
    #[arg(long, default_value = "0,0.5,1,2")]
    epsilons: String,
    /// Comma-separated modes: adversarial, random.
    #[arg(long, default_value = "adversarial,random")]
    modes: String,
    #[arg(long, default_value_t = apr_core::probe::DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-cell CSV; means go to the same path with extension .mean.csv.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Test,
    Validation,
}

#[derive(Parser)]
struct EvalArgs {
    /// Checkpoint path, or `itempop` for the popularity baseline.
    #[arg(long)]
    model: String,
    #[arg(long)]
    split: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "50,100")]
    cutoffs: String,
    #[arg(long, value_enum, default_value = "test")]
    target: TargetArg,
    /// Metrics CSV; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-user `user,rank` CSV.
    #[arg(long)]
    per_user: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("APR_THREADS") {
        let n: usize = threads
            .parse()
            .with_context(|| format!("APR_THREADS must be a positive integer, got '{threads}'"))?;
        if n == 0 {
            bail!("APR_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Split(args) => split(args),
        Command::Train(args) => train(args),
        Command::Probe(args) => probe(args),
        Command::Eval(args) => eval(args),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("invalid {what} '{s}': {e}")))
        .collect()
}

fn split(args: SplitArgs) -> Result<()> {
    let records = read_interactions(&args.input)?;
    let options = IngestOptions {
        min_item_interactions: args.min_item_interactions,
        min_user_interactions: args.min_user_interactions,
        merge_repeats: !args.no_merge,
    };
    let data = ingest(&records, &options)?;
    let split = split_leave_one_out(&data, args.validation, args.seed);
    write_split(&split, &args.output)?;

    let summary = format!(
        "Interaction#: {}\nItem#: {}\nUser#: {}\nSparsity: {}\nTest users: {}\nValidation users: {}\n",
        data.n_interactions(),
        data.n_items(),
        data.n_users(),
        data.sparsity(),
        split.summary.test_users,
        split.summary.validation_users,
    );
    let path = suffixed(&args.output, ".summary");
    std::fs::write(&path, &summary).with_context(|| format!("cannot write {}", path.display()))?;
    print!("{summary}");
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        config.apply_override(o)?;
    }
    config.validate()?;
    let split = read_split(&args.split)?;
    let init = args.init.as_ref().map(FactorModel::load).transpose()?;

    let mut history: Vec<EpochRecord> = Vec::new();
    let outcome: TrainOutcome = match (args.stage, init) {
        (StageArg::Bpr, None) => train_bpr(&split, config.train())?,
        (StageArg::Bpr, Some(model)) => continue_bpr(&split, model, config.train())?,
        (StageArg::Apr, Some(model)) => train_apr(&split, model, &config.apr)?,
        (StageArg::Apr, None) => {
            info!("no initial checkpoint: pretraining with BPR");
            let pretrained = train_bpr(&split, &config.pretrain())?;
            history.extend(pretrained.history.iter().cloned());
            train_apr(&split, pretrained.best_model().clone(), &config.apr)?
        }
    };
    history.extend(outcome.history.iter().cloned());

    outcome.model.save(&args.output)?;
    outcome.best_model().save(suffixed(&args.output, ".best"))?;
    let path = suffixed(&args.output, ".history.csv");
    let mut out = create(&path)?;
    write_history(&mut out, &history)?;
    out.flush()?;
    if let Some((epoch, _)) = &outcome.best {
        info!("best validation checkpoint from epoch {epoch}");
    }
    Ok(())
}

fn probe(args: ProbeArgs) -> Result<()> {
    let epsilons: Vec<f64> = parse_list(&args.epsilons, "epsilon")?;
    if epsilons.is_empty() {
        bail!("the epsilon list is empty");
    }
    let modes: Vec<Mode> = parse_list(&args.modes, "mode")?;
    let model = FactorModel::load(&args.checkpoint)?;
    let split = read_split(&args.split)?;
    let report = probe_sweep(&model, &split, &epsilons, &modes, args.repeats, args.seed)?;

    let mut out = create(&args.output)?;
    write_probe_rows(&mut out, &report)?;
    out.flush()?;
    let mean_path = args.output.with_extension("mean.csv");
    let mut out = create(&mean_path)?;
    write_probe_means(&mut out, &report)?;
    out.flush()?;
    Ok(())
}

fn write_metrics<W: Write>(out: &mut W, report: &EvalReport) -> std::io::Result<()> {
    writeln!(out, "cutoff,hr,ndcg,n_users")?;
    for m in &report.metrics {
        writeln!(out, "{},{},{},{}", m.cutoff, m.hr, m.ndcg, report.n_users)?;
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cutoffs: Vec<usize> = parse_list(&args.cutoffs, "cutoff")?;
    apr_core::evaluator::validate_cutoffs(&cutoffs)?;
    let split = read_split(&args.split)?;
    let target = match args.target {
        TargetArg::Test => Target::Test,
        TargetArg::Validation => Target::Validation,
    };
    let report = if args.model == "itempop" {
        evaluate(&itempop_scorer(&split.train), &split, &cutoffs, target)?
    } else {
        let model = FactorModel::load(&args.model)?;
        evaluate(&model, &split, &cutoffs, target)?
    };
    match &args.output {
        Some(path) => {
            let mut out = create(path)?;
            write_metrics(&mut out, &report)?;
            out.flush()?;
        }
        None => write_metrics(&mut std::io::stdout().lock(), &report)?,
    }
    if let Some(path) = &args.per_user {
        let mut out = create(path)?;
        writeln!(out, "user,rank")?;
        for (u, rank) in &report.ranks {
            writeln!(out, "{},{}", split.train.user_token(*u), rank)?;
        }
        out.flush()?;
    }
    info!("evaluated {} users in {:.3}s", report.n_users, report.elapsed_secs);
    Ok(())
}
