use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmgfuse_cli::{
    cmd_evaluate, cmd_segment, cmd_synth, cmd_train, segments_json, CliError, CliResult, RunConfig, RunScheme,
};
use mmgfuse_core::synth::SynthConfig;

#[derive(Parser)]
#[command(name = "mmgfuse", version, about = "Facial-activity recognition from a multimodal sensor cap")]
struct Cli {
    /// Worker threads for folds and models; defaults to every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: JSON logs, WAVs and a manifest.
    Synth {
        /// Generator config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the final models on all data and write checkpoints and cards.
    Train(RunArgs),
    /// Leave-one-session-out evaluation; writes JSON, CSV and text reports.
    Evaluate(RunArgs),
    /// Detect activity segments in the pressure channels of a sensor log.
    Segment {
        #[arg(long)]
        log: PathBuf,
        /// Slope threshold in units per second.
        #[arg(long, default_value_t = 6.0)]
        threshold: f64,
        #[arg(long, default_value_t = 100.0)]
        min_duration: f64,
        /// Write the segments here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// per-user, cross-user or hybrid; overrides the config.
    #[arg(long)]
    scheme: Option<RunScheme>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> CliResult<(RunConfig, PathBuf)> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.scheme {
            cfg.scheme = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir".into()))?;
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            config,
            out,
            subjects,
            seed,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let bytes = std::fs::read(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                    serde_json::from_slice::<SynthConfig>(&bytes)
                        .map_err(|e| CliError::Usage(format!("synth config: {e}")))?
                }
                None => SynthConfig::default(),
            };
            if let Some(n) = subjects {
                cfg.subjects = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let written = cmd_synth(&cfg, &out)?;
            println!("wrote {} files under {}", written.len(), out.display());
        }
        Command::Train(args) => {
            let (cfg, out) = args.resolve()?;
            for path in cmd_train(&cfg, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate(args) => {
            let (cfg, out) = args.resolve()?;
            let report = cmd_evaluate(&cfg, &out)?;
            print!("{}", report.render_text());
        }
        Command::Segment {
            log,
            threshold,
            min_duration,
            out,
        } => {
            let json = segments_json(&cmd_segment(&log, threshold, min_duration)?);
            match out {
                Some(path) => std::fs::write(&path, json + "\n")
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
