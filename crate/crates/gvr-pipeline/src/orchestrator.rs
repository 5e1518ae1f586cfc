//! Experiment orchestration: flat-key config files, run directories with
//! locking and artifact manifests, and one function per pipeline stage.
//!
//! Stage functions are the library face of the CLI subcommands. Every
//! artifact they write is tagged with the experiment's config hash, either
//! inside the file (checkpoints, JSON sidecars) or through the run
//! manifest, which also records a content hash per file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{
    integrated_gradients, occlusion_sensitivity, saliency, CompositeScorer, ScoreTarget,
};
use crate::autoencoder::{
    encode, load_encoder, train_autoencoder, EncoderConfig, EncoderPaths, PyramidLossConfig,
};
use crate::data::{load_idx_labels, load_mnist_images, ImageBatch};
use crate::error::{PipelineError, Result};
use crate::gan::{train_gan, GanConfig, GanPaths, GanState, Generator};
use crate::gvr::{optimize_latent_multiclass, Direction, GvrConfig, RationaleResult};
use crate::predictors::{
    accuracy, roc_auc, train_head, HeadKind, HeadTargets, HeadTrainConfig, PredictionHead,
};
use crate::viz::{
    compose_page, overlay_rgba, render_curve, render_grid, render_overlay, scale_difference_map,
    OverlaySpec, RgbaCell, Series,
};
use gvr_core::checkpoint::{decode_tensor_section, encode_tensor_section, Checkpoint};

/// Default value for every recognized configuration key. The effective
/// config is defaults, overridden by the file, overridden by CLI pairs;
/// the config hash covers the merged result.
const DEFAULTS: &[(&str, &str)] = &[
    ("corpus", "mnist"),
    ("seed", "0"),
    ("run.name", "default"),
    ("data.dir", "data/mnist"),
    ("data.side", "32"),
    ("data.limit_train", "0"),
    ("data.limit_test", "0"),
    ("gan.latent_dim", "100"),
    ("gan.top_width", "512"),
    ("gan.start_side", "2"),
    ("gan.batch_size", "64"),
    ("gan.critic_steps", "4"),
    ("gan.lr", "5e-5"),
    ("gan.gp_lambda", "10"),
    ("gan.iterations", "20000"),
    ("gan.checkpoint_every", "1000"),
    ("gan.aug_translate", "2"),
    ("autoencoder.epochs", "20"),
    ("autoencoder.batch_size", "64"),
    ("autoencoder.lr", "1e-4"),
    ("autoencoder.aug_translate", "0"),
    ("autoencoder.val_fraction", "0.1"),
    ("autoencoder.levels", "0"),
    ("head.kind", "linear-softmax:10"),
    ("head.lr", "1e-3"),
    ("head.epochs", "100"),
    ("head.batch_size", "128"),
    ("evaluate.class", "9"),
    ("gvr.source", "9"),
    ("gvr.target", "4"),
    ("gvr.lr", "0.1"),
    ("gvr.gamma", "0.1"),
    ("gvr.cutoff", "0.1"),
    ("gvr.beta", "1.0"),
    ("gvr.max_iterations", "500"),
    ("gvr.direction", "decrease"),
    ("gvr.count", "16"),
    ("gvr.parallelism", "1"),
    ("baselines.count", "4"),
    ("baselines.ig_steps", "300"),
    ("baselines.occlusion_window", "8"),
    ("baselines.occlusion_stride", "0"),
    ("baselines.occlusion_fill", "0"),
    ("report.items", "4"),
];

/// Flat dotted-key experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    entries: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            entries: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl ExperimentConfig {
    /// Parse `key = value` lines (# comments, blank lines allowed) over the
    /// defaults. Unknown keys and malformed lines report their line number.
    pub fn parse(text: &str, origin: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let location = format!("{origin}:{}", idx + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::config(&location, "expected `key = value`"))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(PipelineError::config(&location, "empty key or value"));
            }
            cfg.set(key, value).map_err(|_| {
                PipelineError::config(&location, format!("unknown configuration key {key:?}"))
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        ExperimentConfig::parse(&text, &path.display().to_string())
    }

    /// Override one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !DEFAULTS.iter().any(|(k, _)| *k == key) {
            return Err(PipelineError::config(
                key,
                "unknown configuration key".to_string(),
            ));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.entries
            .get(key)
            .unwrap_or_else(|| panic!("unknown configuration key {key:?}"))
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| PipelineError::config(key, format!("expected {what}, got {:?}", self.get(key))))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parse_value(key, "a nonnegative integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parse_value(key, "a nonnegative integer")
    }

    pub fn get_f32(&self, key: &str) -> Result<f32> {
        self.parse_value(key, "a number")
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.parse_value(key, "a number")
    }

    /// SHA-256 over the canonical `key=value` listing.
    pub fn hash(&self) -> [u8; 32] {
        self.hash_keys(|_| true)
    }

    /// SHA-256 over the sorted `key=value` lines whose key matches the
    /// scope: an exact entry, or a `prefix.` entry matching by prefix.
    pub fn scoped_hash(&self, scope: &[&str]) -> [u8; 32] {
        self.hash_keys(|key| {
            scope
                .iter()
                .any(|s| *s == key || (s.ends_with('.') && key.starts_with(s)))
        })
    }

    fn hash_keys(&self, mut include: impl FnMut(&str) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (k, v) in &self.entries {
            if !include(k) {
                continue;
            }
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }

    fn gan_config(&self) -> Result<GanConfig> {
        Ok(GanConfig {
            image_side: self.get_usize("data.side")?,
            latent_dim: self.get_usize("gan.latent_dim")?,
            top_width: self.get_usize("gan.top_width")?,
            start_side: self.get_usize("gan.start_side")?,
            batch_size: self.get_usize("gan.batch_size")?,
            critic_steps: self.get_usize("gan.critic_steps")?,
            lr: self.get_f32("gan.lr")?,
            beta1: 0.0,
            beta2: 0.9,
            gp_lambda: self.get_f32("gan.gp_lambda")?,
            iterations: self.get_u64("gan.iterations")?,
            checkpoint_every: self.get_u64("gan.checkpoint_every")?,
            aug_translate: self.get_usize("gan.aug_translate")?,
            seed: self.get_u64("seed")?,
        })
    }

    fn encoder_config(&self) -> Result<EncoderConfig> {
        let side = self.get_usize("data.side")?;
        let mut pyramid = PyramidLossConfig::for_side(side);
        let levels = self.get_usize("autoencoder.levels")?;
        if levels > 0 {
            pyramid = PyramidLossConfig {
                levels,
                level_weights: (0..levels).map(|j| (4u32.pow(j as u32)) as f32).collect(),
            };
        }
        Ok(EncoderConfig {
            epochs: self.get_usize("autoencoder.epochs")?,
            batch_size: self.get_usize("autoencoder.batch_size")?,
            lr: self.get_f32("autoencoder.lr")?,
            beta1: 0.9,
            beta2: 0.999,
            aug_translate: self.get_usize("autoencoder.aug_translate")?,
            val_fraction: self.get_f64("autoencoder.val_fraction")?,
            pyramid,
            seed: self.get_u64("seed")?,
        })
    }

    fn gvr_config(&self) -> Result<GvrConfig> {
        let direction = match self.get("gvr.direction") {
            "decrease" => Direction::Decrease,
            "increase" => Direction::Increase,
            other => {
                return Err(PipelineError::config(
                    "gvr.direction",
                    format!("expected decrease or increase, got {other:?}"),
                ))
            }
        };
        Ok(GvrConfig {
            lr: self.get_f32("gvr.lr")?,
            gamma: self.get_f32("gvr.gamma")?,
            cutoff: self.get_f64("gvr.cutoff")?,
            beta: self.get_f32("gvr.beta")?,
            target_class: Some(self.get_usize("gvr.target")?),
            max_iterations: self.get_usize("gvr.max_iterations")?,
            direction,
        })
    }
}

// Stage scopes: the configuration keys that determine each artifact's
// content, including everything upstream of it. Keys that cannot change
// content stay out of every scope: run.name and data.dir locate things
// (corpus payloads are checksum-verified), gvr.parallelism only schedules.
fn scope_corpus() -> Vec<&'static str> {
    vec!["corpus", "seed", "data.side", "data.limit_train", "data.limit_test"]
}
fn scope_gan() -> Vec<&'static str> {
    [scope_corpus(), vec!["gan."]].concat()
}
fn scope_encoder() -> Vec<&'static str> {
    [scope_gan(), vec!["autoencoder."]].concat()
}
fn scope_codes() -> Vec<&'static str> {
    scope_encoder()
}
fn scope_head() -> Vec<&'static str> {
    [scope_codes(), vec!["head."]].concat()
}
fn scope_evaluate() -> Vec<&'static str> {
    [scope_head(), vec!["evaluate.class"]].concat()
}
fn scope_gvr_keys() -> Vec<&'static str> {
    vec![
        "gvr.source",
        "gvr.target",
        "gvr.lr",
        "gvr.gamma",
        "gvr.cutoff",
        "gvr.beta",
        "gvr.max_iterations",
        "gvr.direction",
        "gvr.count",
    ]
}
fn scope_gvr() -> Vec<&'static str> {
    [scope_head(), scope_gvr_keys()].concat()
}
fn scope_baselines() -> Vec<&'static str> {
    [scope_head(), vec!["gvr.source", "baselines."]].concat()
}
fn scope_report() -> Vec<&'static str> {
    [scope_gvr(), vec!["gvr.source", "baselines.", "report.items"]].concat()
}

/// An opened experiment directory with its effective configuration.
pub struct Experiment {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    pub config_hash: [u8; 32],
}

impl Experiment {
    /// Create (or reuse) the run directory layout under `root`.
    pub fn open(root: impl Into<PathBuf>, config: ExperimentConfig) -> Result<Experiment> {
        let root = root.into();
        let config_hash = config.hash();
        for sub in ["checkpoints", "logs", "figures", "rationales"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        }
        Ok(Experiment {
            root,
            config,
            config_hash,
        })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
    pub fn rationales(&self) -> PathBuf {
        self.root.join("rationales")
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.config_hash)
    }

    /// Scoped config hashes, one per stage artifact family.
    pub fn hash_gan(&self) -> [u8; 32] {
        self.config.scoped_hash(&scope_gan())
    }
    pub fn hash_encoder(&self) -> [u8; 32] {
        self.config.scoped_hash(&scope_encoder())
    }
    pub fn hash_codes(&self) -> [u8; 32] {
        self.config.scoped_hash(&scope_codes())
    }
    pub fn hash_head(&self) -> [u8; 32] {
        self.config.scoped_hash(&scope_head())
    }
    pub fn hash_evaluate(&self) -> [u8; 32] {
        self.config.scoped_hash(&scope_evaluate())
    }
    pub fn hash_gvr(&self) -> [u8; 32] {
        self.config.scoped_hash(&scope_gvr())
    }
    pub fn hash_baselines(&self) -> [u8; 32] {
        self.config.scoped_hash(&scope_baselines())
    }
    pub fn hash_report(&self) -> [u8; 32] {
        self.config.scoped_hash(&scope_report())
    }

    /// Take the single-stage lock for this run directory.
    fn lock(&self, stage: &str) -> Result<StageLock> {
        StageLock::acquire(&self.root.join(".lock"), stage)
    }

    /// Record artifacts in the run manifest under the producing stage's
    /// scoped config hash plus a content hash.
    fn record_artifacts(&self, stage_hash: [u8; 32], paths: &[PathBuf]) -> Result<()> {
        let manifest_path = self.root.join("manifest.json");
        let mut manifest: BTreeMap<String, ManifestEntry> = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path)
                .map_err(|e| PipelineError::io(&manifest_path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::format(&manifest_path, e.to_string()))?
        } else {
            BTreeMap::new()
        };
        for path in paths {
            let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
            let rel = path
                .strip_prefix(&self.root)
                .unwrap_or(path)
                .display()
                .to_string();
            manifest.insert(
                rel,
                ManifestEntry {
                    config: hex(&stage_hash),
                    sha256: hex(&Sha256::digest(&bytes)),
                },
            );
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, text).map_err(|e| PipelineError::io(&manifest_path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    config: String,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// RAII lock file; at most one stage runs per experiment directory.
struct StageLock {
    path: PathBuf,
}

impl StageLock {
    fn acquire(path: &Path, stage: &str) -> Result<StageLock> {
        match fs::OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(file) => {
                use std::io::Write;
                let mut file = file;
                let _ = writeln!(file, "{stage}");
                Ok(StageLock { path: path.to_path_buf() })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(path).unwrap_or_default();
                Err(PipelineError::contract(format!(
                    "another stage ({}) holds the lock {}; remove the file if it is stale",
                    holder.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(PipelineError::io(path, e)),
        }
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---- corpus ----

const MNIST_FILES: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

fn require_mnist_corpus(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.get("corpus") {
        "mnist" => Ok(()),
        other => Err(PipelineError::config(
            "corpus",
            format!("only the mnist corpus is wired end-to-end, got {other:?}"),
        )),
    }
}

fn data_file(exp: &Experiment, name: &str) -> Result<PathBuf> {
    let path = PathBuf::from(exp.config.get("data.dir")).join(name);
    if !path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            what: format!("corpus file {name}"),
            path,
            subcommand: "fetch-mnist".into(),
        });
    }
    Ok(path)
}

fn limit_batch(images: ImageBatch, labels: Vec<u8>, limit: usize) -> (ImageBatch, Vec<u8>) {
    if limit == 0 || limit >= images.len() {
        return (images, labels);
    }
    let pixels = images
        .pixels
        .slice_axis(Axis(0), ndarray::Slice::from(0..limit))
        .to_owned();
    let ids = images.source_ids[..limit].to_vec();
    (ImageBatch::new(pixels, ids), labels[..limit].to_vec())
}

fn load_split(exp: &Experiment, train: bool) -> Result<(ImageBatch, Vec<u8>)> {
    require_mnist_corpus(&exp.config)?;
    let side = exp.config.get_usize("data.side")?;
    let (img_name, lbl_name, limit_key) = if train {
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "data.limit_train")
    } else {
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "data.limit_test")
    };
    let images = load_mnist_images(&data_file(exp, img_name)?, side)?;
    let labels = load_idx_labels(&data_file(exp, lbl_name)?)?;
    if images.len() != labels.len() {
        return Err(PipelineError::contract(format!(
            "{img_name} has {} images but {lbl_name} has {} labels",
            images.len(),
            labels.len()
        )));
    }
    let limit = exp.config.get_usize(limit_key)?;
    Ok(limit_batch(images, labels, limit))
}

/// Copy (and, for .gz sources, decompress) the four MNIST files into the
/// data directory, verifying the pinned SHA-256 of each payload. Files
/// already present are verified rather than rewritten.
pub fn fetch_mnist(exp: &Experiment, source: Option<&Path>) -> Result<()> {
    let _lock = exp.lock("fetch-mnist")?;
    require_mnist_corpus(&exp.config)?;
    let dir = PathBuf::from(exp.config.get("data.dir"));
    fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;

    for (name, want_hash) in MNIST_FILES {
        let dest = dir.join(name);
        if !dest.exists() {
            let src_dir = source.ok_or_else(|| PipelineError::MissingPrerequisite {
                what: format!("corpus file {name} (no --source directory given)"),
                path: dest.clone(),
                subcommand: "fetch-mnist --source <dir>".into(),
            })?;
            let payload = read_maybe_gz(src_dir, name)?;
            fs::write(&dest, payload).map_err(|e| PipelineError::io(&dest, e))?;
        }
        let bytes = fs::read(&dest).map_err(|e| PipelineError::io(&dest, e))?;
        let got = hex(&Sha256::digest(&bytes));
        if got != want_hash {
            return Err(PipelineError::format(
                &dest,
                format!("checksum mismatch: expected {want_hash}, got {got}"),
            ));
        }
        log::info!("verified {}", dest.display());
    }
    Ok(())
}

fn read_maybe_gz(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    if plain.exists() {
        return fs::read(&plain).map_err(|e| PipelineError::io(&plain, e));
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.exists() {
        let file = fs::File::open(&gz).map_err(|e| PipelineError::io(&gz, e))?;
        let mut out = Vec::new();
        use std::io::Read;
        flate2::read::GzDecoder::new(file)
            .read_to_end(&mut out)
            .map_err(|e| PipelineError::format(&gz, format!("gzip decode failed: {e}")))?;
        return Ok(out);
    }
    Err(PipelineError::MissingPrerequisite {
        what: format!("source file {name}[.gz]"),
        path: plain,
        subcommand: "fetch-mnist --source <dir>".into(),
    })
}

// ---- stage: train-gan ----

fn gan_paths(exp: &Experiment) -> GanPaths {
    GanPaths {
        checkpoint: exp.checkpoints().join("gan.ckpt"),
        log_csv: exp.logs().join("gan.csv"),
    }
}

pub fn stage_train_gan(exp: &Experiment, resume: bool) -> Result<()> {
    let _lock = exp.lock("train-gan")?;
    let (images, _) = load_split(exp, true)?;
    let cfg = exp.config.gan_config()?;
    let paths = gan_paths(exp);
    train_gan(&images, &cfg, exp.hash_gan(), &paths, resume)?;
    exp.record_artifacts(exp.hash_gan(), &[paths.checkpoint, paths.log_csv])
}

fn load_generator(exp: &Experiment) -> Result<Generator> {
    let path = gan_paths(exp).checkpoint;
    if !path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            what: "generator checkpoint".into(),
            path,
            subcommand: "train-gan".into(),
        });
    }
    let cfg = exp.config.gan_config()?;
    Ok(GanState::load(&path, &cfg, exp.hash_gan())?.generator)
}

// ---- stage: train-autoencoder ----

fn encoder_paths(exp: &Experiment) -> EncoderPaths {
    EncoderPaths {
        checkpoint: exp.checkpoints().join("encoder.ckpt"),
        log_csv: exp.logs().join("encoder.csv"),
    }
}

pub fn stage_train_autoencoder(exp: &Experiment, resume: bool) -> Result<()> {
    let _lock = exp.lock("train-autoencoder")?;
    let (images, _) = load_split(exp, true)?;
    let generator = load_generator(exp)?;
    let cfg = exp.config.encoder_config()?;
    let paths = encoder_paths(exp);
    train_autoencoder(&images, &generator, &cfg, exp.hash_encoder(), &paths, resume)?;

    // Validation curves (MSE and Laplacian) as a figure beside the CSV.
    let rows = read_encoder_log(&paths.log_csv)?;
    if !rows.is_empty() {
        let mse: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.1)).collect();
        let lap: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.2)).collect();
        let (png, _) = render_curve(
            &[
                Series { label: "mse".into(), points: mse },
                Series { label: "laplacian".into(), points: lap },
            ],
            "epoch",
            "validation loss",
        )?;
        let fig = exp.figures().join("encoder_loss.png");
        fs::write(&fig, png).map_err(|e| PipelineError::io(&fig, e))?;
        return exp.record_artifacts(exp.hash_encoder(), &[paths.checkpoint, paths.log_csv, fig]);
    }
    exp.record_artifacts(exp.hash_encoder(), &[paths.checkpoint, paths.log_csv])
}

fn read_encoder_log(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(PipelineError::format(path, format!("bad log row {line:?}")));
        }
        out.push((
            parts[0].parse().map_err(|_| PipelineError::format(path, "bad epoch"))?,
            parts[1].parse().map_err(|_| PipelineError::format(path, "bad mse"))?,
            parts[2].parse().map_err(|_| PipelineError::format(path, "bad laplacian"))?,
        ));
    }
    Ok(out)
}

fn load_encoder_checked(exp: &Experiment) -> Result<crate::gan::DownNet> {
    let path = encoder_paths(exp).checkpoint;
    if !path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            what: "encoder checkpoint".into(),
            path,
            subcommand: "train-autoencoder".into(),
        });
    }
    let (encoder, hash) = load_encoder(&path)?;
    if hash != exp.hash_encoder() {
        return Err(PipelineError::contract(format!(
            "encoder checkpoint {} was produced under a different configuration",
            path.display()
        )));
    }
    Ok(encoder)
}

// ---- stage: encode-corpus ----

fn codes_path(exp: &Experiment) -> PathBuf {
    exp.checkpoints().join("codes.ckpt")
}

pub fn stage_encode_corpus(exp: &Experiment) -> Result<()> {
    let _lock = exp.lock("encode-corpus")?;
    let encoder = load_encoder_checked(exp)?;
    let mut ckpt = Checkpoint::new(exp.hash_codes());
    for (split, train) in [("train", true), ("test", false)] {
        let (images, labels) = load_split(exp, train)?;
        let codes = encode(&encoder, &images);
        let labels_f: ArrayD<f32> =
            ArrayD::from_shape_vec(IxDyn(&[labels.len()]), labels.iter().map(|&l| l as f32).collect())
                .unwrap();
        ckpt.insert(&format!("{split}_codes"), encode_tensor_section(&codes.into_dyn()));
        ckpt.insert(&format!("{split}_labels"), encode_tensor_section(&labels_f));
    }
    let path = codes_path(exp);
    ckpt.write_atomic(&path)?;
    exp.record_artifacts(exp.hash_codes(), &[path])
}

fn load_codes(exp: &Experiment, split: &str) -> Result<(Array2<f32>, Vec<usize>)> {
    let path = codes_path(exp);
    if !path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            what: "encoded corpus".into(),
            path,
            subcommand: "encode-corpus".into(),
        });
    }
    let ckpt = Checkpoint::read_from(&path)?;
    if ckpt.config_hash != exp.hash_codes() {
        return Err(PipelineError::contract(format!(
            "encoded corpus {} was produced under a different configuration",
            path.display()
        )));
    }
    let codes = decode_tensor_section(ckpt.require(&format!("{split}_codes"))?)?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| PipelineError::contract("stored codes are not 2-d"))?;
    let labels = decode_tensor_section(ckpt.require(&format!("{split}_labels"))?)?
        .iter()
        .map(|&v| v as usize)
        .collect();
    Ok((codes, labels))
}

// ---- stage: train-head ----

fn head_path(exp: &Experiment) -> PathBuf {
    exp.checkpoints().join("head.ckpt")
}

pub fn stage_train_head(exp: &Experiment) -> Result<()> {
    let _lock = exp.lock("train-head")?;
    let (codes, labels) = load_codes(exp, "train")?;
    let kind = HeadKind::from_tag(exp.config.get("head.kind"))?;
    if !matches!(kind, HeadKind::LinearSoftmax { .. }) {
        return Err(PipelineError::config(
            "head.kind",
            "the mnist corpus trains classification heads (linear-softmax:10)",
        ));
    }
    let cfg = HeadTrainConfig {
        lr: exp.config.get_f32("head.lr")?,
        epochs: exp.config.get_usize("head.epochs")?,
        batch_size: exp.config.get_usize("head.batch_size")?,
        seed: exp.config.get_u64("seed")?,
    };
    let report = train_head(&codes, &HeadTargets::Classification(labels), kind, &cfg)?;
    let path = head_path(exp);
    report.head.save(&path, exp.hash_head())?;

    let log = exp.logs().join("head.json");
    let text = serde_json::json!({
        "config": hex(&exp.hash_head()),
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
    });
    fs::write(&log, serde_json::to_string_pretty(&text).unwrap())
        .map_err(|e| PipelineError::io(&log, e))?;
    exp.record_artifacts(exp.hash_head(), &[path, log])
}

fn load_head_checked(exp: &Experiment) -> Result<PredictionHead> {
    let path = head_path(exp);
    if !path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            what: "prediction head checkpoint".into(),
            path,
            subcommand: "train-head".into(),
        });
    }
    let (head, hash) = PredictionHead::load(&path)?;
    if hash != exp.hash_head() {
        return Err(PipelineError::contract(format!(
            "head checkpoint {} was produced under a different configuration",
            path.display()
        )));
    }
    Ok(head)
}

// ---- stage: evaluate ----

/// Metrics produced by the evaluate stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub config: String,
    pub n_test: usize,
    pub accuracy: f64,
    pub roc_class: usize,
    pub auc: f64,
}

pub fn stage_evaluate(exp: &Experiment) -> Result<EvaluateSummary> {
    let _lock = exp.lock("evaluate")?;
    let head = load_head_checked(exp)?;
    let (codes, labels) = load_codes(exp, "test")?;
    let probs = head.predict(&codes);
    let predicted = head.predict_classes(&codes);
    let acc = accuracy(&predicted, &labels);

    let class = exp.config.get_usize("evaluate.class")?;
    if class >= probs.ncols() {
        return Err(PipelineError::config(
            "evaluate.class",
            format!("class {class} out of range for a {}-way head", probs.ncols()),
        ));
    }
    let scores: Vec<f64> = probs.column(class).iter().map(|&v| v as f64).collect();
    let flags: Vec<bool> = labels.iter().map(|&l| l == class).collect();
    let roc = roc_auc(&scores, &flags)?;

    let roc_csv = exp.logs().join("roc.csv");
    let mut text = String::from("fpr,tpr,threshold\n");
    for i in 0..roc.thresholds.len() {
        use std::fmt::Write;
        writeln!(text, "{},{},{}", roc.fpr[i], roc.tpr[i], roc.thresholds[i]).unwrap();
    }
    fs::write(&roc_csv, text).map_err(|e| PipelineError::io(&roc_csv, e))?;

    let points: Vec<(f64, f64)> = roc.fpr.iter().copied().zip(roc.tpr.iter().copied()).collect();
    let (png, _) = render_curve(
        &[Series { label: format!("class {class}"), points }],
        "false positive rate",
        "true positive rate",
    )?;
    let roc_png = exp.figures().join("roc.png");
    fs::write(&roc_png, png).map_err(|e| PipelineError::io(&roc_png, e))?;

    let summary = EvaluateSummary {
        config: hex(&exp.hash_evaluate()),
        n_test: labels.len(),
        accuracy: acc,
        roc_class: class,
        auc: roc.auc,
    };
    let summary_path = exp.logs().join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| PipelineError::io(&summary_path, e))?;
    exp.record_artifacts(exp.hash_evaluate(), &[roc_csv, roc_png, summary_path])?;
    Ok(summary)
}

// ---- stage: gvr ----

/// Outcome counters for a batch of generated rationales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GvrSummary {
    pub config: String,
    pub source: usize,
    pub target: usize,
    pub selected: usize,
    pub optimized: usize,
    pub converged: usize,
    pub left_source: usize,
    pub landed_target: usize,
    pub left_source_fraction: f64,
    pub landed_target_fraction: f64,
    pub ids: Vec<String>,
}

#[derive(Debug, Serialize)]
struct RationaleSidecar<'a> {
    id: &'a str,
    config: String,
    converged: bool,
    iterations_used: usize,
    source_class: Option<usize>,
    final_class: Option<usize>,
    prediction_trace: &'a [f64],
    gvr: serde_json::Value,
}

fn gvr_config_json(cfg: &GvrConfig) -> serde_json::Value {
    serde_json::json!({
        "lr": cfg.lr,
        "gamma": cfg.gamma,
        "cutoff": cfg.cutoff,
        "beta": cfg.beta,
        "target_class": cfg.target_class,
        "max_iterations": cfg.max_iterations,
        "direction": match cfg.direction { Direction::Decrease => "decrease", Direction::Increase => "increase" },
    })
}

pub fn stage_gvr(exp: &Experiment) -> Result<GvrSummary> {
    let _lock = exp.lock("gvr")?;
    let generator = load_generator(exp)?;
    let encoder = load_encoder_checked(exp)?;
    let head = load_head_checked(exp)?;

    let source = exp.config.get_usize("gvr.source")?;
    let target = exp.config.get_usize("gvr.target")?;
    let cfg = exp.config.gvr_config()?;
    let stage_hash = hex(&exp.hash_gvr());
    let count = exp.config.get_usize("gvr.count")?;
    let parallelism = exp.config.get_usize("gvr.parallelism")?.max(1);

    // Held-out images of the source class.
    let (images, labels) = load_split(exp, false)?;
    let mut picked: Vec<usize> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l as usize == source {
            picked.push(i);
            if count > 0 && picked.len() == count {
                break;
            }
        }
    }
    if picked.is_empty() {
        return Err(PipelineError::contract(format!(
            "no held-out images of class {source}"
        )));
    }

    let codes = {
        let mut pixels = ndarray::Array4::zeros((picked.len(), 1, images.side(), images.side()));
        for (row, &i) in picked.iter().enumerate() {
            pixels
                .index_axis_mut(Axis(0), row)
                .assign(&images.pixels.index_axis(Axis(0), i));
        }
        let ids = picked.iter().map(|&i| images.source_ids[i].clone()).collect();
        ImageBatch::new(pixels, ids)
    };
    let z0s = encode(&encoder, &codes);
    let initial_classes = head.predict_classes(&z0s);

    // Optimize in parallel over the items that actually start at a class
    // other than the target; the rest already satisfy the counterfactual.
    let jobs: Vec<usize> = (0..picked.len())
        .filter(|&row| initial_classes[row] != target)
        .collect();
    let results: Vec<Option<Result<RationaleResult>>> = {
        let slots: Vec<std::sync::Mutex<Option<Result<RationaleResult>>>> =
            (0..picked.len()).map(|_| std::sync::Mutex::new(None)).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..parallelism.min(jobs.len().max(1)) {
                scope.spawn(|| loop {
                    let j = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if j >= jobs.len() {
                        break;
                    }
                    let row = jobs[j];
                    let z0 = z0s.row(row).to_owned();
                    let result = optimize_latent_multiclass(&z0, &head, &generator, &cfg);
                    *slots[row].lock().unwrap() = Some(result);
                });
            }
        });
        slots.into_iter().map(|s| s.into_inner().unwrap()).collect()
    };

    let spec = OverlaySpec::default();
    let mut summary = GvrSummary {
        config: stage_hash.clone(),
        source,
        target,
        selected: picked.len(),
        optimized: 0,
        converged: 0,
        left_source: 0,
        landed_target: 0,
        left_source_fraction: 0.0,
        landed_target_fraction: 0.0,
        ids: codes.source_ids.clone(),
    };
    let mut artifacts: Vec<PathBuf> = Vec::new();
    let mut data = Checkpoint::new(exp.hash_gvr());

    for row in 0..picked.len() {
        let id = &codes.source_ids[row];
        let original = codes.image(row).to_owned();
        let (sidecar_json, panels) = match &results[row] {
            None => {
                // Already predicted as the target class: identity rationale.
                summary.left_source += usize::from(initial_classes[row] != source);
                summary.landed_target += 1;
                let zero = Array2::<f32>::zeros(original.dim());
                let sidecar = serde_json::json!({
                    "id": id,
                    "config": stage_hash,
                    "converged": true,
                    "iterations_used": 0,
                    "source_class": initial_classes[row],
                    "final_class": target,
                    "prediction_trace": Vec::<f64>::new(),
                    "gvr": gvr_config_json(&cfg),
                });
                (sidecar, (original.clone(), zero, original.clone()))
            }
            Some(Err(e)) => {
                return Err(PipelineError::contract(format!(
                    "rationale for {id} failed: {e}"
                )));
            }
            Some(Ok(r)) => {
                summary.optimized += 1;
                summary.converged += usize::from(r.converged);
                let final_class = r.final_class.expect("multiclass rationale");
                summary.left_source += usize::from(final_class != source);
                summary.landed_target += usize::from(final_class == target);
                let sidecar = serde_json::to_value(RationaleSidecar {
                    id,
                    config: stage_hash.clone(),
                    converged: r.converged,
                    iterations_used: r.iterations_used,
                    source_class: r.source_class,
                    final_class: r.final_class,
                    prediction_trace: &r.prediction_trace,
                    gvr: gvr_config_json(&cfg),
                })
                .expect("sidecar serializes");
                (sidecar, (r.x0_2d(), r.difference_2d(), r.x_final_2d()))
            }
        };

        let (x0, diff, x_final) = panels;
        let scaled = scale_difference_map(&diff);
        let overlay_png = render_overlay(&original, &scaled, &spec)?;
        let grid_png = render_grid(&[original.clone(), x_final.clone()], 2)?;

        let overlay_path = exp.rationales().join(format!("{id}.overlay.png"));
        fs::write(&overlay_path, overlay_png).map_err(|e| PipelineError::io(&overlay_path, e))?;
        let panel_path = exp.rationales().join(format!("{id}.panels.png"));
        fs::write(&panel_path, grid_png).map_err(|e| PipelineError::io(&panel_path, e))?;
        let sidecar_path = exp.rationales().join(format!("{id}.json"));
        fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar_json).unwrap())
            .map_err(|e| PipelineError::io(&sidecar_path, e))?;
        artifacts.extend([overlay_path, panel_path, sidecar_path]);

        data.insert(&format!("orig/{id}"), encode_tensor_section(&original.into_dyn()));
        data.insert(&format!("x0/{id}"), encode_tensor_section(&x0.into_dyn()));
        data.insert(&format!("diff/{id}"), encode_tensor_section(&diff.into_dyn()));
        data.insert(&format!("final/{id}"), encode_tensor_section(&x_final.into_dyn()));
    }

    summary.left_source_fraction = summary.left_source as f64 / summary.selected as f64;
    summary.landed_target_fraction = summary.landed_target as f64 / summary.selected as f64;

    let data_path = exp.rationales().join("data.ckpt");
    data.write_atomic(&data_path)?;
    let summary_path = exp.rationales().join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| PipelineError::io(&summary_path, e))?;
    artifacts.extend([data_path, summary_path]);
    exp.record_artifacts(exp.hash_gvr(), &artifacts)?;
    Ok(summary)
}

// ---- stage: baselines ----

pub fn stage_baselines(exp: &Experiment) -> Result<Vec<String>> {
    let _lock = exp.lock("baselines")?;
    let encoder = load_encoder_checked(exp)?;
    let head = load_head_checked(exp)?;

    let source = exp.config.get_usize("gvr.source")?;
    let count = exp.config.get_usize("baselines.count")?;
    let ig_steps = exp.config.get_usize("baselines.ig_steps")?;
    let window = exp.config.get_usize("baselines.occlusion_window")?;
    let stride = match exp.config.get_usize("baselines.occlusion_stride")? {
        0 => None,
        s => Some(s),
    };
    let fill = exp.config.get_f32("baselines.occlusion_fill")?;

    let (images, labels) = load_split(exp, false)?;
    let mut ids = Vec::new();
    let mut data = Checkpoint::new(exp.hash_baselines());
    let dir = exp.figures().join("baselines");
    fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
    let spec = OverlaySpec::default();
    let mut artifacts = Vec::new();

    for (i, &l) in labels.iter().enumerate() {
        if l as usize != source {
            continue;
        }
        let id = images.source_ids[i].clone();
        let image = images.image(i).to_owned();

        // Explain the predicted class of this image.
        let codes = encode(&encoder, &single_batch(&image, &id));
        let predicted = head.predict_classes(&codes)[0];
        let scorer = CompositeScorer {
            encoder: &encoder,
            head: &head,
            target: ScoreTarget::ClassLogit(predicted),
        };

        let sal = saliency(&scorer, &image)?;
        let ig = integrated_gradients(&scorer, &image, None, ig_steps)?;
        let occ = occlusion_sensitivity(&scorer, &image, window, stride, fill)?;

        for (name, map) in [("saliency", &sal), ("ig", &ig), ("occlusion", &occ)] {
            let scaled = scale_difference_map(map);
            let png = render_overlay(&image, &scaled, &spec)?;
            let path = dir.join(format!("{id}.{name}.png"));
            fs::write(&path, png).map_err(|e| PipelineError::io(&path, e))?;
            artifacts.push(path);
            data.insert(&format!("{name}/{id}"), encode_tensor_section(&map.clone().into_dyn()));
        }
        data.insert(&format!("orig/{id}"), encode_tensor_section(&image.into_dyn()));
        ids.push(id);
        if count > 0 && ids.len() == count {
            break;
        }
    }
    if ids.is_empty() {
        return Err(PipelineError::contract(format!(
            "no held-out images of class {source}"
        )));
    }

    let data_path = dir.join("data.ckpt");
    data.write_atomic(&data_path)?;
    let ids_path = dir.join("items.json");
    fs::write(&ids_path, serde_json::to_string_pretty(&ids).unwrap())
        .map_err(|e| PipelineError::io(&ids_path, e))?;
    artifacts.extend([data_path, ids_path]);
    exp.record_artifacts(exp.hash_baselines(), &artifacts)?;
    Ok(ids)
}

fn single_batch(image: &Array2<f32>, id: &str) -> ImageBatch {
    let side = image.nrows();
    let mut pixels = ndarray::Array4::zeros((1, 1, side, side));
    pixels
        .index_axis_mut(Axis(0), 0)
        .index_axis_move(Axis(0), 0)
        .assign(image);
    ImageBatch::new(pixels, vec![id.to_string()])
}

// ---- stage: report ----

/// Assemble the comparison page: original, GVR overlay, counterfactual,
/// saliency, integrated gradients, occlusion — one row per item present in
/// both the gvr and baselines outputs.
pub fn stage_report(exp: &Experiment) -> Result<PathBuf> {
    let _lock = exp.lock("report")?;
    let rat_path = exp.rationales().join("data.ckpt");
    if !rat_path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            what: "rationale data".into(),
            path: rat_path,
            subcommand: "gvr".into(),
        });
    }
    let base_path = exp.figures().join("baselines").join("data.ckpt");
    if !base_path.exists() {
        return Err(PipelineError::MissingPrerequisite {
            what: "baseline attribution data".into(),
            path: base_path,
            subcommand: "baselines".into(),
        });
    }
    let rat = Checkpoint::read_from(&rat_path)?;
    let base = Checkpoint::read_from(&base_path)?;
    for (ckpt, want, path) in [
        (&rat, exp.hash_gvr(), &rat_path),
        (&base, exp.hash_baselines(), &base_path),
    ] {
        if ckpt.config_hash != want {
            return Err(PipelineError::contract(format!(
                "{} was produced under a different configuration",
                path.display()
            )));
        }
    }

    let summary_text = fs::read_to_string(exp.rationales().join("summary.json"))
        .map_err(|e| PipelineError::io(exp.rationales().join("summary.json"), e))?;
    let summary: GvrSummary = serde_json::from_str(&summary_text)
        .map_err(|e| PipelineError::format(exp.rationales().join("summary.json"), e.to_string()))?;

    let limit = exp.config.get_usize("report.items")?;
    let spec = OverlaySpec::default();
    let mut rows = Vec::new();
    let mut used = Vec::new();
    for id in &summary.ids {
        if base.get(&format!("orig/{id}")).is_none() {
            continue;
        }
        let tensor2 = |ckpt: &Checkpoint, name: &str| -> Result<Array2<f32>> {
            decode_tensor_section(ckpt.require(name)?)?
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|_| PipelineError::contract(format!("{name} is not a 2-d map")))
        };
        let original = tensor2(&rat, &format!("orig/{id}"))?;
        let diff = tensor2(&rat, &format!("diff/{id}"))?;
        let x_final = tensor2(&rat, &format!("final/{id}"))?;
        let sal = tensor2(&base, &format!("saliency/{id}"))?;
        let ig = tensor2(&base, &format!("ig/{id}"))?;
        let occ = tensor2(&base, &format!("occlusion/{id}"))?;

        let overlay_cell = |map: &Array2<f32>| -> Result<RgbaCell> {
            let rgba = overlay_rgba(&original, &scale_difference_map(map), &spec)?;
            Ok(RgbaCell {
                width: original.ncols(),
                height: original.nrows(),
                rgba,
            })
        };
        rows.push(vec![
            RgbaCell::from_gray(&original),
            overlay_cell(&diff)?,
            RgbaCell::from_gray(&x_final),
            overlay_cell(&sal)?,
            overlay_cell(&ig)?,
            overlay_cell(&occ)?,
        ]);
        used.push(id.clone());
        if limit > 0 && rows.len() == limit {
            break;
        }
    }
    if rows.is_empty() {
        return Err(PipelineError::contract(
            "no items appear in both gvr and baselines outputs",
        ));
    }

    let labels: Vec<String> = ["original", "gvr", "counterfactual", "saliency", "ig", "occlusion"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let png = compose_page(&rows, &labels)?;
    let out = exp.figures().join("comparison.png");
    fs::write(&out, png).map_err(|e| PipelineError::io(&out, e))?;

    let meta = exp.figures().join("comparison.json");
    fs::write(
        &meta,
        serde_json::to_string_pretty(&serde_json::json!({
            "config": hex(&exp.hash_report()),
            "items": used,
        }))
        .unwrap(),
    )
    .map_err(|e| PipelineError::io(&meta, e))?;
    exp.record_artifacts(exp.hash_report(), &[out.clone(), meta])?;
    Ok(out)
}
