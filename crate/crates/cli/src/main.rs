use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sarfusion::fusion::Stream;
use sarfusion_cli::commands::{self, with_suffix};
use sarfusion_cli::config::RunConfig;
use sarfusion_cli::formats;
use sarfusion_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "sarfusion", version, about = "Speckled-scene classification with a spatial encoder and a statistical descriptor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic scene: <out>.sarf and <out>.sarl.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample patches and compute their descriptors, or with --grid the
    /// descriptors of every inference-grid centre.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// Label map; required unless --grid.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        grid: bool,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on extracted samples.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// Prefix given to extract.
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        stream: Option<Stream>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify a labelled scene and report accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        stride: Option<usize>,
        /// Grid descriptors from `extract --grid`.
        #[arg(long)]
        descriptors: Option<PathBuf>,
        /// Also write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a class map: <out>.ppm and <out>.sarl.
    Map {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        descriptors: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Parameter counts per module of a checkpoint or configuration.
    Inspect {
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stream: Option<Stream>,
    },
}

fn grid_descriptors(path: Option<&Path>) -> Result<Option<formats::Descriptors>> {
    path.map(formats::read_descriptors).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = common.load()?;
            let (i, l) = commands::cmd_synth(&cfg, cfg.seed, &out)?;
            println!("wrote {} and {}", i.display(), l.display());
        }
        Command::Extract {
            common,
            image,
            labels,
            grid,
            stride,
            out,
        } => {
            let cfg = common.load()?;
            let img = formats::read_image(&image)?;
            if grid {
                let d = commands::cmd_extract_grid(&cfg, stride.unwrap_or(cfg.stride), &img, &out)?;
                println!("wrote {} descriptors of width {} to {}", d.count, d.dim, with_suffix(&out, ".grid.nsjs").display());
            } else {
                let labels = labels.ok_or_else(|| CliError::Validation("extract: --labels is required without --grid".into()))?;
                let file = commands::cmd_extract(&cfg, cfg.seed, &img, &formats::read_labels(&labels)?, &out)?;
                println!("sampled {} patches into {}", file.samples.len(), with_suffix(&out, ".samples.json").display());
            }
        }
        Command::Train {
            common,
            image,
            samples,
            epochs,
            stream,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = stream {
                cfg.stream = s;
            }
            let t = commands::cmd_train(&cfg, &formats::read_image(&image)?, &samples, &out)?;
            match (t.history.best_epoch, t.history.best_val_loss()) {
                (Some(e), Some(l)) => println!("kept epoch {e} (val loss {l:.4}); wrote {}", out.display()),
                _ => println!("no epochs run; wrote initial weights to {}", out.display()),
            }
        }
        Command::Eval {
            checkpoint,
            image,
            labels,
            stride,
            descriptors,
            out,
        } => {
            let (mut model, meta) = commands::load_checkpoint(&checkpoint)?;
            let cfg = meta.config;
            let m = commands::cmd_eval(
                &mut model,
                &cfg,
                &formats::read_image(&image)?,
                &formats::read_labels(&labels)?,
                stride.unwrap_or(cfg.stride),
                grid_descriptors(descriptors.as_deref())?.as_ref(),
            )?;
            print!("{}", m.report(cfg.stream.name()));
            if let Some(o) = out {
                let json = serde_json::to_vec_pretty(&m).map_err(|e| CliError::Validation(e.to_string()))?;
                formats::write_atomic(&o, &json)?;
            }
        }
        Command::Map {
            checkpoint,
            image,
            stride,
            descriptors,
            out,
        } => {
            let (mut model, meta) = commands::load_checkpoint(&checkpoint)?;
            let cfg = meta.config;
            commands::cmd_map(
                &mut model,
                &cfg,
                &formats::read_image(&image)?,
                stride.unwrap_or(cfg.stride),
                grid_descriptors(descriptors.as_deref())?.as_ref(),
                &out,
            )?;
            println!("wrote {}", with_suffix(&out, ".ppm").display());
        }
        Command::Gradcheck => {
            let outcome = commands::cmd_gradcheck()?;
            print!("{}", outcome.table);
            if !outcome.passed {
                return Err(CliError::Numeric("gradcheck: some cases exceed the tolerance".into()));
            }
        }
        Command::Inspect {
            checkpoint,
            config,
            stream,
        } => {
            let (model, cfg) = match checkpoint {
                Some(p) => {
                    let (m, meta) = commands::load_checkpoint(&p)?;
                    (m, meta.config)
                }
                None => {
                    let mut cfg = RunConfig::load_or_default(config.as_deref())?;
                    if let Some(s) = stream {
                        cfg.stream = s;
                    }
                    (sarfusion_cli::checkpoint::build_model(&cfg)?, cfg)
                }
            };
            print!("{}", commands::cmd_inspect(&model, &cfg));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
