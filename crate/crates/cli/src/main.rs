use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hazebridge::evaluation::Domain;
use hazebridge_cli::commands::{self, EvalSource, FINAL_CHECKPOINT};
use hazebridge_cli::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "hazebridge", version, about = "Domain-adaptive dehazing experiments")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set mode=SYN`.
    #[arg(long = "set", global = true, value_parser = parse_pair)]
    overrides: Vec<(String, String)>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural training and validation sets.
    Synth {
        /// Regenerate a dataset from its manifest instead.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Destination for `--manifest` (default: data_dir).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Run the training phases.
    Train {
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the validation set.
    Eval {
        #[arg(long, conflicts_with = "score")]
        checkpoint: Option<PathBuf>,
        /// Score images in `<dir>/<domain>/<stem>.png` instead of a checkpoint.
        #[arg(long)]
        score: Option<PathBuf>,
        /// Also write dehazed images here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Dehaze a PNG or a directory of PNGs.
    Dehaze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "real")]
        domain: Domain,
    },
    /// Train and score every mode.
    Ablate,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out_dir {
        overrides.push(("out_dir".into(), out.display().to_string()));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    cfg.echo()?;
    match cli.command {
        Command::Synth { manifest, dest } => commands::synth(&cfg, manifest.as_deref(), dest.as_deref()),
        Command::Train { resume } => commands::train(&cfg, resume.as_deref()).map(|_| ()),
        Command::Eval {
            checkpoint,
            score,
            predictions,
        } => {
            let source = match score {
                Some(dir) => EvalSource::Files(dir),
                None => EvalSource::Checkpoint(checkpoint.unwrap_or_else(|| cfg.out_dir.join(FINAL_CHECKPOINT))),
            };
            for s in commands::eval(&cfg, &source, predictions.as_deref())? {
                println!(
                    "{} {} n={} psnr_hazy={:.3} psnr={:.3} ssim_hazy={:.4} ssim={:.4}",
                    s.domain, s.network, s.count, s.psnr_hazy, s.psnr, s.ssim_hazy, s.ssim
                );
            }
            Ok(())
        }
        Command::Dehaze {
            input,
            output,
            checkpoint,
            domain,
        } => commands::dehaze(&checkpoint, &input, &output, domain)
            .map(|id| println!("{id}"))
            .with_context(|| format!("dehazing {}", input.display())),
        Command::Ablate => {
            print!("{}", commands::ablate(&cfg)?.to_csv());
            Ok(())
        }
    }
}

/// Error chain joined with `: `, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
