use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kbrefine_cli::{
    build_gateway, cmd_corrupt, cmd_eval, cmd_refine, cmd_select, require_model, CliError, CorruptArgs, EvalArgs,
    RefineArgs, RunConfig, SelectArgs, SourceKind,
};
use kbrefine_core::corrupt::{ErrorType, RedundancyMode};

#[derive(Parser)]
#[command(name = "kbrefine", version, about = "Refine triple knowledge bases with model-driven repair actions")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for embeddings and corruption choices; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scripted model responses (JSONL); overrides the config.
    #[arg(long, global = true)]
    mock_fixtures: Option<PathBuf>,
    /// Plan only; write nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Refine a KB with a stream of queries.
    Refine {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Refine only a coverage-selected subset.
        #[arg(long)]
        select: bool,
    },
    /// Score answers over a draft KB against a refined KB.
    Eval {
        #[arg(long)]
        draft_kb: PathBuf,
        #[arg(long)]
        refined_kb: PathBuf,
        #[arg(long)]
        queries: PathBuf,
    },
    /// Pick a covering subset of queries.
    Select {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        queries: PathBuf,
    },
    /// Build a corrupted benchmark from clean samples.
    Corrupt {
        /// JSONL of {id, question, golden_answers, kb}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "type", value_enum, default_value = "all")]
        error_type: TypeArg,
        #[arg(long, value_enum)]
        redundancy_mode: Option<ModeArg>,
        #[arg(long, value_enum, default_value = "oracle")]
        source: SourceArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TypeArg {
    All,
    Incompleteness,
    Incorrectness,
    Redundancy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Alias,
    Duplicate,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Oracle,
    Model,
}

fn load_config(g: &Global) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(path) = &g.mock_fixtures {
        cfg.gateway.mock_fixtures = Some(path.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.global)?;
    let g = &cli.global;
    match cli.command {
        Command::Refine { kb, queries, select } => {
            if !g.dry_run {
                require_model(&cfg)?;
            }
            let gw = build_gateway(&cfg)?;
            let args = RefineArgs { kb, queries, out_dir: g.out_dir.clone(), select, dry_run: g.dry_run };
            let summary = cmd_refine(&cfg, &args, &gw)?;
            if summary.dry_run {
                println!("planned refinement of {} of {} queries:", summary.selected.as_ref().map_or(0, Vec::len), summary.queries);
                for id in summary.selected.iter().flatten() {
                    println!("  {id}");
                }
            } else {
                println!(
                    "refined {} queries: {} applied, {} skipped, {} failed; KB revision {}",
                    summary.attempted, summary.applied, summary.skipped, summary.failed, summary.kb_revision
                );
            }
        }
        Command::Eval { draft_kb, refined_kb, queries } => {
            let gw = build_gateway(&cfg)?;
            let (_, summary) = cmd_eval(&cfg, &EvalArgs { draft_kb, refined_kb, queries, out_dir: g.out_dir.clone() }, &gw)?;
            print!("{}", summary.table());
        }
        Command::Select { kb, queries } => {
            let (cov, sel) = cmd_select(&cfg, &SelectArgs { kb, queries, out_dir: g.out_dir.clone(), dry_run: g.dry_run })?;
            println!("coverage: k={} m={} B={} rho={}", cov.k, cov.m, cov.budget, cov.rho);
            for s in &sel {
                println!("{:>4} {} +{} ({:.3})", s.rank, s.query_id, s.new_elements, s.cumulative_fraction);
            }
        }
        Command::Corrupt { input, error_type, redundancy_mode, source } => {
            let types = match error_type {
                TypeArg::All => Vec::new(),
                TypeArg::Incompleteness => vec![ErrorType::Incompleteness],
                TypeArg::Incorrectness => vec![ErrorType::Incorrectness],
                TypeArg::Redundancy => vec![ErrorType::Redundancy],
            };
            let redundancy_mode = redundancy_mode.map(|m| match m {
                ModeArg::Alias => RedundancyMode::Alias,
                ModeArg::Duplicate => RedundancyMode::Duplicate,
            });
            let source = match source {
                SourceArg::Oracle => SourceKind::Oracle,
                SourceArg::Model => SourceKind::Model,
            };
            let gw = build_gateway(&cfg)?;
            let args = CorruptArgs { input, out_dir: g.out_dir.clone(), types, redundancy_mode, source, dry_run: g.dry_run };
            let manifest = cmd_corrupt(&cfg, &args, &gw)?;
            println!("accepted {} samples, rejected {}", manifest.accepted, manifest.rejected);
            for (t, n) in &manifest.counts {
                println!("  {t}: {n}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
