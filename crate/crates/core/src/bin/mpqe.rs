use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpqe::encoder::AggregatorKind;
use mpqe::eval::{EvalOptions, HeadlineNegatives};
use mpqe::pipeline::{self, Error};
use mpqe::query::Structure;
use mpqe::sampler::Split;
use mpqe::trainer::{Curriculum, TrainConfig};

#[derive(Parser)]
#[command(name = "mpqe", version, about = "Query embedding experiments over typed knowledge graphs")]
struct Cli {
    /// Size of the worker pool (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, env = "MPQE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a graph and hold out a fraction of its edges.
    Prepare {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        types: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate train, validation and test queries.
    Sample {
        #[arg(long)]
        graph_dir: PathBuf,
        #[arg(long)]
        n_train: usize,
        /// Split 1:10 between validation and test.
        #[arg(long)]
        n_eval: usize,
        /// Comma-separated structure names; all seven by default.
        #[arg(long, value_delimiter = ',')]
        structures: Vec<Structure>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model; flags override the configuration file.
    Train(TrainCmd),
    /// Score a split and write AUC and APR tables.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "hard-substituted")]
        negatives: HeadlineNegatives,
        /// Skip the average percentile rank.
        #[arg(long)]
        no_apr: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test one model per message-passing depth.
    SweepDepth {
        #[arg(long)]
        data_dir: PathBuf,
        /// Depths as a range `a..b` (inclusive) or a comma list.
        #[arg(long, default_value = "1..4")]
        depths: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write sampled entity embeddings with their type labels.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        types: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_type: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Flat key-value file, TOML or JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Continue from the training state in the output directory.
    #[arg(long)]
    resume: bool,
    /// Save and exit after this many epochs.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    aggregator: Option<AggregatorKind>,
    #[arg(long)]
    curriculum: Option<Curriculum>,
    #[arg(long, env = "MPQE_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    fixed_depth: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

impl TrainOverrides {
    fn resolve(&self, file: Option<&PathBuf>) -> Result<TrainConfig, Error> {
        let mut c = match file {
            Some(p) => pipeline::load_train_config(p)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(aggregator, curriculum, seed, lr, dim, layers, batch_size, max_epochs, patience);
        if self.fixed_depth.is_some() {
            c.fixed_depth = self.fixed_depth;
        }
        Ok(c)
    }
}

fn parse_depths(s: &str) -> Result<Vec<usize>, Error> {
    let bad = || Error::Argument(format!("invalid depth list `{s}`"));
    let depths: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',').map(|d| d.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if depths.is_empty() || depths.contains(&0) {
        return Err(bad());
    }
    Ok(depths)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Argument(e.to_string()))?;
    }
    match cli.command {
        Command::Prepare { triples, types, fraction, seed, out_dir } => {
            let stats =
                pipeline::prepare(&pipeline::PrepareArgs { triples, types, fraction, seed: seed.seed, out_dir })?;
            log::info!(
                "{} entities, {} triples, {} removed",
                stats.full.entities,
                stats.full.triples,
                stats.removed_edges
            );
        }
        Command::Sample { graph_dir, n_train, n_eval, structures, seed, out_dir } => {
            let structures = if structures.is_empty() { Structure::ALL.to_vec() } else { structures };
            let counts = pipeline::sample(&pipeline::SampleArgs {
                graph_dir,
                n_train,
                n_eval,
                seed: seed.seed,
                out_dir,
                structures,
            })?;
            log::info!("train counts {:?}", counts.train);
        }
        Command::Train(cmd) => {
            let config = cmd.overrides.resolve(cmd.config.as_ref())?;
            let outcome = pipeline::train(&pipeline::TrainArgs {
                data_dir: cmd.data_dir,
                out_dir: cmd.out_dir,
                config,
                resume: cmd.resume,
                stop_after: cmd.stop_after,
            })?;
            if !outcome.finished {
                log::info!("stopped early; rerun with --resume to continue");
            }
        }
        Command::Eval { checkpoint, data_dir, split, negatives, no_apr, out } => {
            let report = pipeline::evaluate(&pipeline::EvalArgs {
                checkpoint,
                data_dir,
                split,
                out_dir: out,
                options: EvalOptions { headline: negatives, apr: !no_apr },
            })?;
            print!("{}", report.to_table());
        }
        Command::SweepDepth { data_dir, depths, config, overrides, out } => {
            let sweep = pipeline::sweep(&pipeline::SweepArgs {
                data_dir,
                depths: parse_depths(&depths)?,
                out_dir: out,
                config: overrides.resolve(config.as_ref())?,
            })?;
            print!("{}", sweep.to_csv());
        }
        Command::ExportEmbeddings { checkpoint, types, per_type, seed, out } => {
            let rows = pipeline::export_embeddings(&pipeline::ExportArgs {
                checkpoint,
                types,
                per_type,
                seed: seed.seed,
                out,
            })?;
            log::info!("wrote {rows} rows");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
