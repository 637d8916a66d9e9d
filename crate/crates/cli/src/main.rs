//! `stationary-np`: task generation, training, evaluation, verification and
//! figure data.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stationary_np::model::Variant;
use stationary_np::taskgen::Family;

use crate::commands::DumpFormat;
use crate::config::{RunConfig, Split};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "stationary-np", version = output::VERSION, about = "Bayesian convolutional deep sets for stationary processes")]
struct Cli {
    /// Print the configuration schema with defaults and exit.
    #[arg(long)]
    print_schema: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must be empty or absent unless --force is given.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "STATIONARY_NP_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    force: bool,
    /// bayes, convcnp or gpconvcnp.
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated task families for both training and evaluation.
    #[arg(long, value_delimiter = ',')]
    family: Vec<String>,
    /// Comma-separated context sizes to evaluate.
    #[arg(long, value_delimiter = ',')]
    nc_list: Vec<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dotted `key=value` overrides applied after the config file.
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train a model; writes checkpoints and a metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint over the configured context sizes and families.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write seeded task dumps.
    GenTasks {
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
        #[arg(long, value_enum, default_value_t = DumpFormat::Both)]
        format: DumpFormat,
        #[command(flatten)]
        common: Common,
    },
    /// Run the verification criteria and print a pass/fail table.
    Verify {
        /// Include the training comparison (criterion 9).
        #[arg(long)]
        full: bool,
        /// Run only these criteria.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
        /// Count known-unattainable sub-checks as failures.
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write per-figure CSVs for one or more checkpoints.
    PlotData {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = config::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(v) = &common.variant {
        cfg.model.variant = Variant::parse(v)?;
    }
    if !common.family.is_empty() {
        let fams = common.family.iter().map(|f| Family::parse(f)).collect::<Result<Vec<_>, _>>()?;
        cfg.tasks.families = fams.clone();
        cfg.eval.families = fams;
    }
    if !common.nc_list.is_empty() {
        cfg.eval.nc_list = common.nc_list.clone();
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    cfg.model = cfg.model.normalized();
    Ok(cfg)
}

fn require_out(common: &Common) -> Result<PathBuf, CliError> {
    common.out.clone().ok_or_else(|| CliError::Config("--out is required".into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_schema {
        print!("{}", config::schema_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config("no subcommand given; see --help".into()));
    };
    match command {
        Command::Train { common } => commands::train(resolve(&common)?, &require_out(&common)?, common.force),
        Command::Eval { checkpoint, common } => {
            commands::eval(resolve(&common)?, &checkpoint, &require_out(&common)?, common.force)
        }
        Command::GenTasks { count, split, format, common } => {
            commands::gen_tasks(resolve(&common)?, count, split, format, &require_out(&common)?, common.force)
        }
        Command::Verify { full, only, strict, common } => {
            let ids: Vec<u32> = if !only.is_empty() {
                only
            } else if full {
                (1..=9).collect()
            } else {
                (1..=8).collect()
            };
            commands::verify(resolve(&common)?, &ids, strict, common.out.as_deref(), common.force)
        }
        Command::PlotData { checkpoint, common } => {
            commands::plot_data(resolve(&common)?, &checkpoint, &require_out(&common)?, common.force)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
