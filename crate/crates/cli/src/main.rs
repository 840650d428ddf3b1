use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tnt_cli::commands;
use tnt_cli::{CliError, ExperimentConfig, Method, Result};

#[derive(Parser)]
#[command(name = "tnt", version, about = "Token pruning experiments on a toy vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed (overrides `seeds` in the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone for every seed.
    TrainBackbone(Common),
    /// Train the noise allocator on a frozen backbone checkpoint.
    TrainAllocator(Common),
    /// Evaluate pruning methods across keep points on the held-out split.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of dense,tnt,tnt_no_sim,tnt_seq,tnt_merge,random,cls_topk.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Comma-separated kept-token counts (replaces the configured keep points).
        #[arg(long, value_delimiter = ',')]
        keep: Option<Vec<usize>>,
        /// Also measure images/second for each row.
        #[arg(long)]
        throughput: bool,
    },
    /// Per-layer MAC report.
    Flops {
        #[command(flatten)]
        common: Common,
        /// deit-b-distil, deit-s-distil or vit16-768.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Render kept/dropped token maps from a keep history.
    RenderMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        history: PathBuf,
        /// Comma-separated held-out sample ids; default is every sample in the history.
        #[arg(long, value_delimiter = ',')]
        samples: Option<Vec<usize>>,
    },
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("TNT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("TNT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::TrainBackbone(c) => commands::cmd_train_backbone(&resolve(&c)?),
        Command::TrainAllocator(c) => commands::cmd_train_allocator(&resolve(&c)?),
        Command::Sweep {
            common,
            methods,
            keep,
            throughput,
        } => {
            let mut config = resolve(&common)?;
            if let Some(m) = methods {
                config.sweep.methods = m.iter().map(|s| s.parse::<Method>()).collect::<Result<_>>()?;
            }
            if let Some(k) = keep {
                config.sweep.keep_counts = k;
                config.sweep.keep_rates.clear();
            }
            config.sweep.throughput |= throughput;
            let rows = commands::cmd_sweep(&config)?;
            print!("{}", commands::sweep_csv(&rows));
            Ok(())
        }
        Command::Flops { common, preset } => {
            let report = commands::cmd_flops(&resolve(&common)?, preset.as_deref())?;
            println!("{:.4} GFLOPs", report.total_gflops());
            Ok(())
        }
        Command::RenderMap {
            common,
            history,
            samples,
        } => {
            let written = commands::cmd_render_map(&resolve(&common)?, &history, samples.as_deref())?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
