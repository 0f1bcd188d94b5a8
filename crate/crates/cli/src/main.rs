//! Command-line driver for cloakbench experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use cloakbench::attacks::Method;
use cloakbench::experiment::{
    load_config, run_stages, DatasetSpec, ExperimentConfig, ExperimentError, Stages, MANIFEST_FILE,
};
use cloakbench::pipeline::{synth_dataset, write_directory};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "cloakbench", version, about = "Adversarial face de-identification benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic identity dataset as <identity>/<image>.png.
    GenData(GenData),
    /// Train (or reuse) the configured classifiers.
    Train(Overrides),
    /// Craft adversarial images with the trained classifiers.
    Attack(Overrides),
    /// Evaluate stored adversarial images on every classifier.
    Evaluate(Overrides),
    /// Write tables, curve data and image grids from stored results.
    Report(Overrides),
    /// Run train, attack, evaluate and report.
    Run(Overrides),
}

#[derive(Args)]
struct GenData {
    /// Destination directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 80)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Defaults to CLOAKBENCH_SEED, then 7.
    #[arg(long)]
    seed: Option<u64>,
}

/// Each flag replaces the config key of the same name.
#[derive(Args)]
struct Overrides {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Comma-separated budgets in pixel units.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f32>>,
    /// Comma-separated subset of fgsm, bim, illc.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    k_set: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    n_iter: Option<usize>,
    /// Storage JPEG quality (1-100).
    #[arg(long, conflicts_with = "no_jpeg")]
    jpeg_quality: Option<u8>,
    /// Evaluate without the JPEG storage step.
    #[arg(long)]
    no_jpeg: bool,
    #[arg(long, value_delimiter = ',')]
    jpeg_sweep: Option<Vec<u8>>,
    /// Use an <identity>/<image>.png directory instead of synthetic data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Overrides {
    /// Config file, then CLOAKBENCH_SEED, then flags.
    fn resolve(self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.output_dir {
            cfg.output_dir = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.eval_samples {
            cfg.eval_samples = v;
        }
        if let Some(v) = self.epsilons {
            cfg.epsilons = v;
        }
        if let Some(v) = self.methods {
            cfg.methods = v;
        }
        if let Some(v) = self.k_set {
            cfg.k_set = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if self.n_iter.is_some() {
            cfg.n_iter = self.n_iter;
        }
        if self.no_jpeg {
            cfg.jpeg_quality = None;
        } else if self.jpeg_quality.is_some() {
            cfg.jpeg_quality = self.jpeg_quality;
        }
        if let Some(v) = self.jpeg_sweep {
            cfg.jpeg_sweep = v;
        }
        if let Some(path) = self.data_dir {
            cfg.dataset = DatasetSpec::Directory { path };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gen_data(args: GenData) -> Result<(), ExperimentError> {
    let mut seed_cfg = ExperimentConfig::default();
    seed_cfg.apply_env()?;
    let seed = args.seed.unwrap_or(seed_cfg.seed);
    let ds = synth_dataset(args.classes, args.per_class, args.size, seed)
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let files = write_directory(&ds, &args.out).map_err(|e| ExperimentError::Stage {
        stage: "gen-data",
        message: e.to_string(),
    })?;
    println!(
        "wrote {} images for {} identities to {}",
        files.len(),
        ds.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn run(overrides: Overrides, stages: Stages) -> Result<(), ExperimentError> {
    let cfg = overrides.resolve()?;
    let (manifest, err) = run_stages(&cfg, stages)?;
    for s in &manifest.stages {
        println!("{:<13} {:?} {:.1}s", s.name, s.status, s.seconds);
    }
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    println!("manifest: {}", cfg.output_dir.join(MANIFEST_FILE).display());
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn defaults_help() -> String {
    let defaults = serde_json::to_string_pretty(&ExperimentConfig::default()).unwrap_or_default();
    format!(
        "Exit codes: 0 success, 2 config error, 3 stage failure.\n\
         CLOAKBENCH_SEED overrides the config seed; flags override both.\n\n\
         Default config:\n{defaults}"
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = defaults_help();
    let matches = Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|sub| sub.after_long_help(help.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(o) => run(o, Stages::Train),
        Command::Attack(o) => run(o, Stages::Attack),
        Command::Evaluate(o) => run(o, Stages::Evaluate),
        Command::Report(o) => run(o, Stages::Report),
        Command::Run(o) => run(o, Stages::All),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_STAGE })
        }
    }
}
