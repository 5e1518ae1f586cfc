//! Command-line front end for the generative visual rationale pipeline.
//!
//! Each subcommand runs one stage against a run directory; stages read the
//! artifacts of earlier stages and refuse to run when a prerequisite is
//! missing, naming the subcommand that produces it.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gvr_pipeline::orchestrator::{
    fetch_mnist, stage_baselines, stage_encode_corpus, stage_evaluate, stage_gvr, stage_report,
    stage_train_autoencoder, stage_train_gan, stage_train_head, Experiment, ExperimentConfig,
};
use gvr_pipeline::PipelineError;

#[derive(Parser)]
#[command(
    name = "gvr",
    about = "Generative visual rationales: train, invert, predict, explain",
    version
)]
struct Cli {
    /// Configuration file of `key = value` lines layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory (default: $GVR_RUN_ROOT or ./runs, joined with run.name).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Override the random seed (shorthand for --set seed=N).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override one configuration key, e.g. --set gan.iterations=500.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage the MNIST corpus into data.dir, verifying checksums.
    FetchMnist {
        /// Directory holding the four idx files (optionally .gz); when
        /// omitted and files are missing, they are downloaded.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Adversarially train the generator on the training images.
    TrainGan {
        /// Continue from the existing checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Train the encoder against the frozen generator.
    TrainAutoencoder {
        #[arg(long)]
        resume: bool,
    },
    /// Encode both corpus splits into latent codes.
    EncodeCorpus,
    /// Fit the prediction head on the training codes.
    TrainHead,
    /// Score the head on held-out codes: accuracy, ROC curve, AUC.
    Evaluate,
    /// Generate counterfactual rationales for held-out source-class images.
    Gvr {
        /// Override gvr.source for this invocation.
        #[arg(long)]
        source: Option<usize>,
        /// Override gvr.target for this invocation.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Classical attribution baselines: saliency, integrated gradients,
    /// occlusion.
    Baselines,
    /// Compose the rationale-versus-baselines comparison page.
    Report,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();

    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set("seed", &seed.to_string())?;
    }
    for pair in &cli.overrides {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("--set {pair:?} is not of the form key=value"))?;
        config.set(key.trim(), value.trim())?;
    }
    // Stage flags are sugar for config overrides so artifact hashes see them.
    if let Command::Gvr { source, target } = &cli.command {
        if let Some(s) = source {
            config.set("gvr.source", &s.to_string())?;
        }
        if let Some(t) = target {
            config.set("gvr.target", &t.to_string())?;
        }
    }

    let run_dir = match &cli.run_dir {
        Some(dir) => dir.clone(),
        None => {
            let root = std::env::var_os("GVR_RUN_ROOT")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"));
            root.join(config.get("run.name"))
        }
    };
    let exp = Experiment::open(run_dir, config)?;
    log::info!("run directory {}", exp.root.display());
    log::info!("configuration hash {}", exp.hash_hex());

    match cli.command {
        Command::FetchMnist { source } => {
            fetch_with_download(&exp, source.as_deref())?;
            println!("corpus staged and verified in {}", exp.config.get("data.dir"));
        }
        Command::TrainGan { resume } => {
            stage_train_gan(&exp, resume)?;
            println!("generator checkpoint written to {}", exp.checkpoints().join("gan.ckpt").display());
        }
        Command::TrainAutoencoder { resume } => {
            stage_train_autoencoder(&exp, resume)?;
            println!("encoder checkpoint written to {}", exp.checkpoints().join("encoder.ckpt").display());
        }
        Command::EncodeCorpus => {
            stage_encode_corpus(&exp)?;
            println!("latent codes written to {}", exp.checkpoints().join("codes.ckpt").display());
        }
        Command::TrainHead => {
            stage_train_head(&exp)?;
            println!("prediction head written to {}", exp.checkpoints().join("head.ckpt").display());
        }
        Command::Evaluate => {
            let summary = stage_evaluate(&exp)?;
            println!(
                "accuracy {:.4} on {} held-out items; class {} AUC {:.4}",
                summary.accuracy, summary.n_test, summary.roc_class, summary.auc
            );
            println!("curve at {}", exp.figures().join("roc.png").display());
        }
        Command::Gvr { .. } => {
            let summary = stage_gvr(&exp)?;
            println!(
                "{} rationales ({} optimized, {} converged): {:.0}% left class {}, {:.0}% landed on class {}",
                summary.selected,
                summary.optimized,
                summary.converged,
                100.0 * summary.left_source_fraction,
                summary.source,
                100.0 * summary.landed_target_fraction,
                summary.target
            );
            println!("artifacts under {}", exp.rationales().display());
        }
        Command::Baselines => {
            let ids = stage_baselines(&exp)?;
            println!(
                "attribution maps for {} items under {}",
                ids.len(),
                exp.figures().join("baselines").display()
            );
        }
        Command::Report => {
            let page = stage_report(&exp)?;
            println!("comparison page at {}", page.display());
        }
    }
    Ok(())
}

const MNIST_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

const MNIST_NAMES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Stage the corpus, downloading compressed files when nothing local is
/// available. Checksum verification happens inside the library either way.
fn fetch_with_download(exp: &Experiment, source: Option<&Path>) -> Result<()> {
    if source.is_some() {
        return Ok(fetch_mnist(exp, source)?);
    }
    match fetch_mnist(exp, None) {
        Ok(()) => Ok(()),
        Err(PipelineError::MissingPrerequisite { .. }) => {
            let data_dir = PathBuf::from(exp.config.get("data.dir"));
            std::fs::create_dir_all(&data_dir)
                .with_context(|| format!("creating {}", data_dir.display()))?;
            let client = reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(300))
                .build()?;
            for name in MNIST_NAMES {
                if data_dir.join(name).exists() || data_dir.join(format!("{name}.gz")).exists() {
                    continue;
                }
                let url = format!("{MNIST_MIRROR}/{name}.gz");
                log::info!("downloading {url}");
                let response = client
                    .get(&url)
                    .send()
                    .and_then(reqwest::blocking::Response::error_for_status)
                    .with_context(|| format!("downloading {url}"))?;
                let bytes = response.bytes().with_context(|| format!("reading {url}"))?;
                let dest = data_dir.join(format!("{name}.gz"));
                std::fs::write(&dest, &bytes)
                    .with_context(|| format!("writing {}", dest.display()))?;
            }
            // The library decompresses and verifies from the data directory.
            Ok(fetch_mnist(exp, Some(&data_dir))?)
        }
        Err(other) => bail!(other),
    }
}
