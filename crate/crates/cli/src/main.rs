use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amaut::audio::SynthSpec;
use amaut::harness::{self, DatasetSource, ExperimentConfig};
use amaut::tta::{Profile, RefineMethod};
use amaut::{Error, Result};
use clap::{Args, Parser, Subcommand};
use log::error;

/// Audio classification with multiview training and test-time adaptation.
#[derive(Parser, Debug)]
#[command(name = "amaut", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Adaptation preset.
    #[arg(long, global = true)]
    profile: Option<Profile>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and keep the best checkpoint.
    Train,
    /// Adapt a checkpoint to unlabeled test clips.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test manifest; only its path column is read.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Accuracy of one checkpoint or an ensemble.
    Eval {
        /// Repeat for ensembles.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "none")]
        refine: RefineMethod,
    },
    /// Agreement rate between two checkpoints.
    Agree {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write the synthetic tone corpus as WAV files plus a manifest.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        clips_per_class: usize,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long, default_value_t = 16000)]
        rate: u32,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = common.profile {
        cfg.profile = Some(p);
        cfg = cfg.with_profile();
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn manifest(path: &Option<PathBuf>) -> Option<DatasetSource> {
    path.clone().map(DatasetSource::Manifest)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out: &Path = &cfg.output_dir;
    match cli.command {
        Command::Train => print(&harness::cmd_train(&cfg, out)?),
        Command::Adapt { checkpoint, manifest: m } => print(&harness::cmd_adapt(&cfg, &checkpoint, manifest(&m).as_ref(), out)?),
        Command::Eval { checkpoints, manifest: m, refine } => {
            print(&harness::cmd_eval(&cfg, &checkpoints, manifest(&m).as_ref(), refine, out)?)
        }
        Command::Agree { a, b, manifest: m } => print(&harness::cmd_agree(&cfg, &a, &b, manifest(&m).as_ref(), out)?),
        Command::Synth { classes, clips_per_class, duration, rate, noise } => {
            let mut spec = SynthSpec::new(classes, clips_per_class, duration, rate, cfg.train.seed);
            spec.noise_amplitude = noise;
            let path = harness::cmd_synth(&spec, out)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
