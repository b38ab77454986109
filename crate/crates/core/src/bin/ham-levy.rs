use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ham_levy::cli::{list_presets, run, summary, write_artifacts, ExperimentConfig, OutputFormat, WORKERS_ENV};

#[derive(Parser)]
#[command(name = "ham-levy", version, about = "Run a configured hyperbolic Anderson model experiment")]
struct Args {
    #[command(subcommand)]
    command: Option<Command>,
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides the config).
    #[arg(long, global = true, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment in CONFIG (same as --config).
    Run { config: Option<PathBuf> },
    /// Print kernel and noise presets with their moment tables.
    ListPresets,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let path = match &args.command {
        Some(Command::ListPresets) => {
            print!("{}", list_presets());
            return ExitCode::SUCCESS;
        }
        Some(Command::Run { config }) => config.clone().or(args.config.clone()),
        None => args.config.clone(),
    };
    let Some(path) = path else {
        eprintln!("error: no config given (use --config PATH or `run PATH`)");
        return ExitCode::from(1);
    };
    let mut cfg = match ExperimentConfig::from_file(&path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return ExitCode::from(1);
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    if let Err(e) = cfg.validate() {
        eprintln!("{}: {e}", path.display());
        return ExitCode::from(1);
    }
    let rep = match run(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("run failed: {e}");
            return ExitCode::from(1);
        }
    };
    let format = match args.format {
        Format::Csv => OutputFormat::Csv,
        Format::Json => OutputFormat::Json,
        Format::Both => OutputFormat::Both,
    };
    if let Err(e) = write_artifacts(&rep, cfg.kind, &cfg.out_dir, format) {
        eprintln!("cannot write artifacts: {e}");
        return ExitCode::from(1);
    }
    print!("{}", summary(&rep));
    ExitCode::from(rep.status.exit_code() as u8)
}
