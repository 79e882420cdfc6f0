//! `fastbci`: fetch, preprocess, pretrain, adapt and report.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fastbci::data::fir::FilterMode;
use fastbci::data::Activity;
use fastbci::model::NormKind;
use fastbci::strategy::Strategy;

#[derive(Parser)]
#[command(name = "fastbci", version, about = "Fast-adaptability experiments for EEG motor-imagery classifiers")]
struct Cli {
    /// Worker threads (default: all cores; 1 runs everything serially).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

fn activity(s: &str) -> Result<Activity, String> {
    let id: u8 = s.parse().map_err(|_| format!("`{s}` is not an activity id"))?;
    Activity::new(id).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Download the raw EDF recordings.
    Fetch {
        #[arg(long)]
        dest: Option<PathBuf>,
        #[arg(long, default_value = "1-109")]
        subjects: String,
        #[arg(long)]
        base_url: Option<String>,
    },
    /// Filter and epoch raw recordings into a trial archive.
    Preprocess {
        #[arg(long)]
        raw: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "band_stop")]
        filter: FilterMode,
        #[arg(long, default_value_t = 7.0)]
        low: f64,
        #[arg(long, default_value_t = 30.0)]
        high: f64,
        #[arg(long, default_value_t = 2.0)]
        transition: f64,
        #[arg(long, default_value = "1-109")]
        subjects: String,
    },
    /// Pretrain a classifier with MAML or transfer learning.
    Pretrain {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long, value_parser = activity)]
        activity: Option<Activity>,
        #[arg(long)]
        norm: Option<NormKind>,
        /// Trial archive directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training log CSV (default: next to the model).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Run the fine-tuning protocol on held-out subjects.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_parser = activity)]
        target_activity: Activity,
        #[arg(long, default_value = "99-109")]
        subjects: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot report CSVs and summarize them.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a before/after markdown table.
        #[arg(long)]
        table: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match cli.command {
        Command::Fetch { dest, subjects, base_url } => {
            let dest = commands::data_dir(dest, "raw")?;
            commands::fetch(&dest, &subjects, base_url.as_deref())
        }
        Command::Preprocess {
            raw,
            out,
            filter,
            low,
            high,
            transition,
            subjects,
        } => {
            let raw = commands::data_dir(raw, "raw")?;
            let out = commands::data_dir(out, "epochs")?;
            let filter = config::FilterConfig {
                mode: filter,
                low_hz: low,
                high_hz: high,
                transition_hz: transition,
            };
            commands::preprocess(&raw, &out, &filter, &subjects)
        }
        Command::Pretrain {
            strategy,
            activity,
            norm,
            data,
            out,
            config,
            seed,
            log,
            max_iterations,
            max_epochs,
        } => commands::pretrain(commands::PretrainArgs {
            data: commands::data_dir(data, "epochs")?,
            out,
            config,
            log,
            overrides: config::Overrides {
                strategy,
                activity,
                norm,
                seed,
                max_iterations,
                max_epochs,
            },
        }),
        Command::Adapt {
            model,
            data,
            target_activity,
            subjects,
            steps,
            runs,
            seed,
            out,
        } => commands::adapt(commands::AdaptArgs {
            model,
            data: commands::data_dir(data, "epochs")?,
            target_activity,
            subjects,
            steps,
            runs,
            seed,
            out,
        }),
        Command::Report { inputs, out, table } => commands::report(&inputs, &out, table),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors before anything runs
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}
