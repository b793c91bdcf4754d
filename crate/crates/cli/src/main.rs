use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sqlvote::agent::{Corpus, Dialect};
use sqlvote::corpus::{
    detect_format, export_report, load_benchmark, BenchmarkFormat, BenchmarkSet, Difficulty,
    ReportFilter, ReportKind, RunStore,
};
use sqlvote::experts::{build_ensemble, read_transcript, EnsembleMode, ExpertsFile, TranscriptLog};
use sqlvote::pipeline::{
    run_setting, run_stage, RunSummary, Setting, SettingConfig, StageConfig, StageId,
};
use sqlvote::vote::sim::{simulate_bounds, SimulationConfig};
use sqlvote::vote::{GroupingMode, LossMode, VoteStrategy};
use sqlvote::Expert;

#[derive(Parser)]
#[command(name = "sqlvote", version, about = "Ensemble text-to-SQL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a Spider or BIRD layout and print a summary.
    Load {
        #[arg(long)]
        benchmark: PathBuf,
        #[arg(long)]
        format: Option<BenchmarkFormat>,
    },
    /// Run one pipeline stage over a benchmark.
    RunStage(StageArgs),
    /// Run one agent setting over a benchmark.
    RunSetting(SettingArgs),
    /// Export a CSV report from a run store.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "accuracy_table")]
        kind: ReportKind,
        #[arg(long)]
        stage: Option<String>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate WMA and RWMA on random loss matrices and check the bounds.
    SimulateBounds {
        #[arg(long, default_value_t = 5)]
        num_experts: usize,
        #[arg(long, default_value_t = 1000)]
        rounds: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// RWMA runs per loss matrix.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long)]
    format: Option<BenchmarkFormat>,
    /// Experts config (JSON).
    #[arg(long)]
    experts: PathBuf,
    /// Answer from a recorded transcript instead of calling experts.
    #[arg(long, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Record every expert exchange to this transcript.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Run store (line-JSON); records are appended.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-query execution timeout in seconds.
    #[arg(long, default_value_t = 30)]
    timeout: u64,
    #[arg(long, value_enum, default_value_t = GroupArg::Fingerprint)]
    vote_group: GroupArg,
    #[arg(long, value_enum, default_value_t = LossArg::Supervised)]
    loss: LossArg,
    /// Only the first N items.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    stage: StageId,
    /// Few-shot demonstrations per prompt.
    #[arg(long, default_value_t = 9)]
    k: usize,
    /// Executions per candidate during refinement.
    #[arg(long)]
    refine_cap: Option<usize>,
}

#[derive(Args)]
struct SettingArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    setting: Setting,
    /// Directory holding one documentation folder per item id.
    #[arg(long)]
    env: Option<PathBuf>,
    /// Knowledge documents for retrieval.
    #[arg(long)]
    knowledge: Option<PathBuf>,
    /// Reference syntax documents for retrieval.
    #[arg(long)]
    syntax: Option<PathBuf>,
    /// Root for result.csv files.
    #[arg(long, default_value = "agent_output")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = DialectArg::Sqlite)]
    dialect: DialectArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    Fingerprint,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Supervised,
    Unsupervised,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Wma,
    Rwma,
    Naive,
}

#[derive(Clone, Copy, ValueEnum)]
enum DialectArg {
    Sqlite,
    Bigquery,
    Snowflake,
}

impl From<GroupArg> for GroupingMode {
    fn from(g: GroupArg) -> Self {
        match g {
            GroupArg::Fingerprint => GroupingMode::ByFingerprint,
            GroupArg::Text => GroupingMode::ByNormalizedText,
        }
    }
}

impl From<LossArg> for LossMode {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Supervised => LossMode::Supervised,
            LossArg::Unsupervised => LossMode::Unsupervised,
        }
    }
}

impl From<StrategyArg> for VoteStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Wma => VoteStrategy::Wma,
            StrategyArg::Rwma => VoteStrategy::Rwma,
            StrategyArg::Naive => VoteStrategy::Naive,
        }
    }
}

impl From<DialectArg> for Dialect {
    fn from(d: DialectArg) -> Self {
        match d {
            DialectArg::Sqlite => Dialect::Sqlite,
            DialectArg::Bigquery => Dialect::Bigquery,
            DialectArg::Snowflake => Dialect::Snowflake,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Load { benchmark, format } => {
            let bench = open_benchmark(&benchmark, format, None)?;
            print!("{}", describe(&bench));
        }
        Command::RunStage(args) => {
            let bench = open_benchmark(
                &args.common.benchmark,
                args.common.format,
                args.common.limit,
            )?;
            let mut config = StageConfig::new(args.stage);
            config.k = args.k;
            config.refine_cap = args.refine_cap;
            config.seed = args.common.seed;
            config.timeout = Duration::from_secs(args.common.timeout);
            config.grouping = args.common.vote_group.into();
            config.loss = args.common.loss.into();
            let (experts, log) = ensemble(&args.common)?;
            let mut store = RunStore::open(&args.common.store)?;
            let summary = run_stage(&config, &bench, &experts, &mut store);
            save_log(&args.common, log)?;
            print!("{}", render_summary(&summary?));
        }
        Command::RunSetting(args) => {
            let bench = open_benchmark(
                &args.common.benchmark,
                args.common.format,
                args.common.limit,
            )?;
            let mut config = SettingConfig::new(args.setting, args.output.clone());
            config.seed = args.common.seed;
            config.loss = args.common.loss.into();
            config.grouping = args.common.vote_group.into();
            config.agent.timeout = Duration::from_secs(args.common.timeout);
            config.agent.dialect = args.dialect.into();
            config.env_root = args.env.clone();
            config.knowledge = corpus(args.knowledge.as_deref())?;
            config.syntax = corpus(args.syntax.as_deref())?;
            let (experts, log) = ensemble(&args.common)?;
            let mut store = RunStore::open(&args.common.store)?;
            let summary = run_setting(&config, &bench, &experts, &mut store);
            save_log(&args.common, log)?;
            print!("{}", render_summary(&summary?));
        }
        Command::Report {
            store,
            kind,
            stage,
            strategy,
            out,
        } => {
            let records = RunStore::read(&store)?;
            let filter = ReportFilter {
                stage,
                strategy: strategy.map(Into::into),
            };
            let csv = export_report(&records, kind, &filter)?;
            match out {
                Some(path) => fs::write(&path, csv).with_context(|| path.display().to_string())?,
                None => print!("{csv}"),
            }
        }
        Command::SimulateBounds {
            num_experts,
            rounds,
            trials,
            seeds,
            seed,
        } => {
            if num_experts == 0 || rounds == 0 {
                bail!("--num-experts and --rounds must be positive");
            }
            let reports = simulate_bounds(&SimulationConfig {
                experts: num_experts,
                rounds,
                trials,
                seeds,
                seed,
            });
            println!("trial,variant,lhs,tight_rhs,relaxed_rhs,tight_ok,relaxed_ok");
            let mut violations = 0;
            for (trial, r) in &reports {
                violations += usize::from(!r.tight_satisfied || !r.relaxed_satisfied);
                println!(
                    "{trial},{:?},{:.4},{:.4},{:.4},{},{}",
                    r.variant,
                    r.lhs,
                    r.tight_rhs,
                    r.relaxed_rhs,
                    r.tight_satisfied,
                    r.relaxed_satisfied
                );
            }
            if violations > 0 {
                bail!("{violations} bound violation(s)");
            }
        }
    }
    Ok(())
}

fn open_benchmark(
    root: &Path,
    format: Option<BenchmarkFormat>,
    limit: Option<usize>,
) -> Result<BenchmarkSet> {
    let format = match format {
        Some(f) => f,
        None => detect_format(root)?,
    };
    let mut bench = load_benchmark(root, format)?;
    if let Some(n) = limit {
        bench.items.truncate(n);
    }
    Ok(bench)
}

fn describe(bench: &BenchmarkSet) -> String {
    let mut out = format!(
        "format: {:?}\nitems: {}\ndatabases: {}\ntrain pool: {}\n",
        bench.format,
        bench.items.len(),
        bench.databases.len(),
        bench.train_pool.len()
    );
    for d in Difficulty::ALL {
        let n = bench.items.iter().filter(|i| i.difficulty == d).count();
        if n > 0 {
            out.push_str(&format!("{}: {n}\n", d.name()));
        }
    }
    out
}

fn ensemble(common: &Common) -> Result<(Vec<Arc<dyn Expert>>, Option<TranscriptLog>)> {
    let file = ExpertsFile::load(&common.experts)?;
    let (mode, log) = match (&common.replay, &common.record) {
        (Some(path), _) => {
            let records = read_transcript(path).with_context(|| path.display().to_string())?;
            (EnsembleMode::Replay(records), None)
        }
        (None, Some(_)) => {
            let log = TranscriptLog::default();
            (EnsembleMode::Record(log.clone()), Some(log))
        }
        (None, None) => (EnsembleMode::Live, None),
    };
    Ok((build_ensemble(&file, &mode)?, log))
}

fn save_log(common: &Common, log: Option<TranscriptLog>) -> Result<()> {
    if let (Some(log), Some(path)) = (log, &common.record) {
        log.save(path).with_context(|| path.display().to_string())?;
    }
    Ok(())
}

fn corpus(dir: Option<&Path>) -> Result<Corpus> {
    match dir {
        Some(d) => Corpus::from_dir(d).with_context(|| d.display().to_string()),
        None => Ok(Corpus::default()),
    }
}

fn render_summary(s: &RunSummary) -> String {
    let mut out = format!(
        "run: {}\nitems: {} (failed {})\n",
        s.run_id, s.items, s.failed_items
    );
    let denom = s.items.max(1) as f64;
    for (strategy, correct) in &s.strategy_correct {
        out.push_str(&format!(
            "{}: {correct}/{} = {:.4}\n",
            strategy.name(),
            s.items,
            *correct as f64 / denom
        ));
    }
    for (expert, correct) in &s.expert_correct {
        out.push_str(&format!(
            "{expert}: {correct}/{} = {:.4}\n",
            s.items,
            *correct as f64 / denom
        ));
    }
    out
}
