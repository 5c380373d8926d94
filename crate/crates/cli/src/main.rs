//! `rcor`: validate, fuse and evaluate exported recognition records.

mod commands;
mod failure;
mod predictions;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rcor::data::Metric;
use rcor::fusion::{FullWeightMode, SelectionStrategy};
use rcor::prior::PriorOrder;
use rcor::synth::Regime;

use failure::{Failure, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "rcor",
    version,
    about = "Foreground/context fusion over exported detector and classifier outputs"
)]
struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a record stream against a manifest and the box policy.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        records: PathBuf,
    },
    /// Compute FULL, FG and FG+FULL predictions for every record.
    Fuse {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Prediction stream (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction stream.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to the manifest's metric.
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        /// Machine-readable output with values in [0, 1].
        #[arg(long)]
        json: bool,
    },
    /// Markdown table of per-method deltas between two prediction streams.
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long, value_enum, default_value = "total")]
        metric: MetricArg,
        /// Compare every candidate method with this baseline method instead of its namesake.
        #[arg(long)]
        baseline_method: Option<String>,
    },
    /// Build class prototypes from top-box embeddings.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Keep only images whose top box also tops the text-prompt ranking.
        #[arg(long)]
        filter_text: bool,
        #[arg(long, value_name = "N")]
        max_images_per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the box closest to each image's class prototype.
    Localize {
        /// Class prototypes written by `embed`.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Per-image selections (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metadata priors.
    #[command(subcommand)]
    Prior(PriorCommand),
    /// Write a synthetic world: manifest.json, train.jsonl and test.jsonl.
    Synth {
        #[arg(long, value_parser = parse_regime)]
        regime: Regime,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images per split.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PriorCommand {
    /// Fit P(value | class) tables from training records.
    Fit {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Metadata field; repeat for several.
        #[arg(long = "field", required = true)]
        fields: Vec<String>,
        #[arg(long, default_value_t = rcor::prior::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pipeline with priors applied.
    Apply {
        #[arg(long)]
        prior: PathBuf,
        /// Fields to use (default: every field in the prior document).
        #[arg(long = "field")]
        fields: Vec<String>,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, value_enum, default_value = "pre")]
        order: OrderArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Copy)]
struct PipelineArgs {
    /// owmc, unweighted, hs, union, max-area or center-crop.
    #[arg(long, default_value = "owmc", value_parser = parse_strategy)]
    strategy: SelectionStrategy,
    /// Weight on the FULL confidence: top-candidate objectness or 1.
    #[arg(long, default_value = "top", value_parser = parse_mode)]
    full_weight: FullWeightMode,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Total,
    Macro,
    Real,
    WorstGroup,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Total => Metric::Total,
            MetricArg::Macro => Metric::Macro,
            MetricArg::Real => Metric::Real,
            MetricArg::WorstGroup => Metric::WorstGroup,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Pre,
    Post,
}

impl From<OrderArg> for PriorOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Pre => PriorOrder::PreFusion,
            OrderArg::Post => PriorOrder::PostFusion,
        }
    }
}

fn parse_strategy(s: &str) -> Result<SelectionStrategy, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<FullWeightMode, String> {
    s.parse()
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::contract(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Validate { manifest, records } => commands::validate(&manifest, &records),
        Command::Fuse {
            manifest,
            records,
            pipeline,
            out,
        } => commands::fuse(
            &manifest,
            &records,
            pipeline.strategy,
            pipeline.full_weight,
            None,
            out.as_deref(),
        ),
        Command::Eval {
            predictions,
            manifest,
            metric,
            json,
        } => commands::eval(&predictions, &manifest, metric.map(Metric::from), json),
        Command::Report {
            baseline,
            candidate,
            metric,
            baseline_method,
        } => commands::report(&baseline, &candidate, metric.into(), baseline_method.as_deref()),
        Command::Embed {
            input,
            k,
            filter_text,
            max_images_per_class,
            out,
        } => commands::embed(&input, k, filter_text, max_images_per_class, &out),
        Command::Localize { queries, input, out } => commands::localize_boxes(&queries, &input, out.as_deref()),
        Command::Prior(PriorCommand::Fit {
            records,
            manifest,
            fields,
            alpha,
            out,
        }) => commands::prior_fit(&records, &manifest, &fields, alpha, &out),
        Command::Prior(PriorCommand::Apply {
            prior,
            fields,
            records,
            manifest,
            pipeline,
            order,
            out,
        }) => {
            let tables = commands::load_priors(&prior, &fields)?;
            commands::fuse(
                &manifest,
                &records,
                pipeline.strategy,
                pipeline.full_weight,
                Some((&tables, order.into())),
                out.as_deref(),
            )
        }
        Command::Synth { regime, seed, n, out } => commands::synth(regime, seed, n, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RCOR_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
