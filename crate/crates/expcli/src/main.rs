use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expcli::experiments::{run_design_check, run_multiround, run_oneshot, with_pool};
use expcli::output::{read_xy, resolve_out_dir, write_multiround, write_oneshot};
use expcli::stats::{fit_loglog_slope, group_means};
use expcli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "prefvcg", version, about = "Simulations of VCG allocation with preference feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One-shot game: utility gains from misreporting and efficiency gaps over a K sweep.
    Oneshot(RunArgs),
    /// Multi-round game: welfare-regret traces.
    Multiround(RunArgs),
    /// Optimal-design diagnostics for every agent and K.
    DesignCheck(RunArgs),
    /// Log–log least-squares slope of a CSV column against another.
    Slope(SlopeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: fig1, fig1-payasbid, fig2a or fig2b.
    #[arg(long)]
    preset: Option<String>,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $PREFVCG_OUT, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// At most 10 repetitions and every other K.
    #[arg(long)]
    quick: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct SlopeArgs {
    /// Input CSV.
    #[arg(long)]
    csv: PathBuf,
    /// Column used as x (values with equal x are averaged).
    #[arg(long)]
    x: String,
    /// Column used as y.
    #[arg(long)]
    y: String,
    /// Keep only rows with COLUMN=VALUE; repeatable.
    #[arg(long = "where", value_name = "COLUMN=VALUE")]
    filters: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.quick {
            cfg = cfg.quick();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Oneshot(args) => {
            let cfg = args.config()?;
            let out = with_pool(args.jobs, || run_oneshot(&cfg))??;
            for f in write_oneshot(&resolve_out_dir(args.out.as_deref()), &out)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Multiround(args) => {
            let cfg = args.config()?;
            let out = with_pool(args.jobs, || run_multiround(&cfg))??;
            for f in write_multiround(&resolve_out_dir(args.out.as_deref()), &out)? {
                println!("wrote {}", f.display());
            }
        }
        Command::DesignCheck(args) => {
            let cfg = args.config()?;
            let (report, pass) = run_design_check(&cfg)?;
            print!("{report}");
            if !pass {
                return Err(CliError::Numerical("design bound violated".into()));
            }
        }
        Command::Slope(args) => {
            let filters = args
                .filters
                .iter()
                .map(|f| {
                    f.split_once('=')
                        .map(|(c, v)| (c.to_string(), v.to_string()))
                        .ok_or_else(|| CliError::Config(format!("filter `{f}` is not COLUMN=VALUE")))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let points = group_means(&read_xy(&args.csv, &args.x, &args.y, &filters)?);
            let fit = fit_loglog_slope(&points)?;
            println!("points: {}", fit.points);
            println!("slope: {}", fit.slope);
            println!("intercept: {}", fit.intercept);
            println!("r_squared: {}", fit.r_squared);
        }
    }
    Ok(())
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
