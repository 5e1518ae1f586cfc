//! Generator inversion: an encoder trained against the frozen generator as
//! decoder, minimizing a Laplacian-pyramid L1 loss, plus the pyramid
//! machinery itself.
//!
//! The pyramid uses the 5-tap binomial kernel [1,4,6,4,1]/16 (separable).
//! With `levels` bands, the image is blurred/downsampled `levels - 1` times;
//! band j is level j minus the upsampled level j+1 and the coarsest band is
//! the residual low-pass, so the bands reconstruct the input exactly.
//!
//! Borders are handled by normalized convolution: each blur output is
//! divided by the total kernel mass that actually fell inside the image, so
//! a constant image blurs (and zero-stuffed-upsamples) to exactly the same
//! constant and its difference bands vanish identically.

use std::path::{Path, PathBuf};

use gvr_core::checkpoint::{
    decode_adam_into, decode_params_into, decode_rng, decode_u64s, encode_adam, encode_params,
    encode_rng, encode_u64s, Checkpoint,
};
use gvr_core::optimizer::Adam;
use gvr_core::rng::{seeded_stream, RngState};
use gvr_core::tape::{Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;

use crate::data::{shuffled_indices, translate_batch, ImageBatch, PAD_VALUE};
use crate::error::{PipelineError, Result};
use crate::gan::{DownNet, Generator};
use crate::runlog::{read_log, write_log, LogRow};

/// Laplacian-pyramid loss settings: number of bands and per-band weights
/// (finest band first).
#[derive(Debug, Clone)]
pub struct PyramidLossConfig {
    pub levels: usize,
    pub level_weights: Vec<f32>,
}

impl PyramidLossConfig {
    /// Default banding for an image side: weight 4^j on band j.
    pub fn for_side(side: usize) -> PyramidLossConfig {
        let levels = default_levels(side);
        PyramidLossConfig {
            levels,
            level_weights: (0..levels).map(|j| (4u32.pow(j as u32)) as f32).collect(),
        }
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        if self.levels == 0 {
            return Err(PipelineError::config("pyramid.levels", "levels must be >= 1"));
        }
        if self.level_weights.len() != self.levels {
            return Err(PipelineError::config(
                "pyramid.level_weights",
                format!(
                    "{} weights for {} levels",
                    self.level_weights.len(),
                    self.levels
                ),
            ));
        }
        if self.level_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(PipelineError::config(
                "pyramid.level_weights",
                "all weights must be positive",
            ));
        }
        let divisor = 1usize << (self.levels - 1);
        if side % divisor != 0 {
            return Err(PipelineError::config(
                "pyramid.levels",
                format!("image side {side} is not divisible by 2^{}", self.levels - 1),
            ));
        }
        Ok(())
    }
}

/// Bands per side so the low-pass stays a sensible size (3 bands at 32px,
/// 4 at 128px).
pub fn default_levels(side: usize) -> usize {
    if side >= 128 {
        4
    } else if side >= 32 {
        3
    } else if side >= 8 {
        2
    } else {
        1
    }
}

/// 5-tap binomial blur kernel as a [1,1,5,5] conv filter (sums to 1).
fn blur_kernel() -> ArrayD<f32> {
    let b = [1.0f32, 4.0, 6.0, 4.0, 1.0];
    let mut k = ArrayD::zeros(IxDyn(&[1, 1, 5, 5]));
    for i in 0..5 {
        for j in 0..5 {
            k[[0, 0, i, j]] = b[i] * b[j] / 256.0;
        }
    }
    k
}

/// In-bounds kernel mass at every output of the stride-2 blur (1 in the
/// interior, < 1 near borders). Dividing by it renormalizes the blur.
fn down_mask(side: usize) -> ArrayD<f32> {
    let ones = ArrayD::from_elem(IxDyn(&[1, 1, side, side]), 1.0f32);
    gvr_core::conv::conv2d(&ones, &blur_kernel(), 2, 2)
}

/// In-bounds kernel mass at every output of the zero-stuffed upsampler.
fn up_mask(small_side: usize, out_side: usize) -> ArrayD<f32> {
    let ones = ArrayD::from_elem(IxDyn(&[1, 1, small_side, small_side]), 1.0f32);
    gvr_core::conv::conv2d_transpose(&ones, &(blur_kernel() * 4.0), 2, 2, (out_side, out_side))
}

/// Border-corrected stride-2 blur/downsample on the tape.
fn normalized_down(tape: &mut Tape, x: Var, k: Var) -> Var {
    let side = tape.value(x).shape()[2];
    let raw = tape.conv2d(x, k, 2, 2);
    let shape = tape.value(raw).shape().to_vec();
    let mask = tape.leaf(down_mask(side));
    let mask_b = tape.broadcast(mask, &shape);
    tape.div(raw, mask_b)
}

/// Border-corrected zero-stuffing upsample on the tape.
fn normalized_up(tape: &mut Tape, small: Var, k4: Var, out_side: usize) -> Var {
    let small_side = tape.value(small).shape()[2];
    let raw = tape.conv2d_transpose(small, k4, 2, 2, (out_side, out_side));
    let shape = tape.value(raw).shape().to_vec();
    let mask = tape.leaf(up_mask(small_side, out_side));
    let mask_b = tape.broadcast(mask, &shape);
    tape.div(raw, mask_b)
}

/// Laplacian bands of a batch [N,1,H,W] on the tape; `levels` entries, the
/// last being the residual low-pass.
pub fn pyramid_bands(tape: &mut Tape, x: Var, levels: usize) -> Vec<Var> {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 4, "pyramid expects [N,1,H,W]");
    assert_eq!(shape[2], shape[3], "pyramid expects square images");
    let side = shape[2];
    assert!(levels >= 1, "pyramid needs at least one level");
    assert_eq!(
        side % (1 << (levels - 1)),
        0,
        "side {side} not divisible by 2^{}",
        levels - 1
    );

    let k = tape.leaf(blur_kernel());
    // Upsampling = zero-stuffing followed by the 4x kernel (the transpose of
    // the stride-2 blur), which preserves mean brightness.
    let k4 = tape.leaf(blur_kernel() * 4.0);

    let mut bands = Vec::with_capacity(levels);
    let mut cur = x;
    let mut cur_side = side;
    for _ in 0..levels - 1 {
        let down = normalized_down(tape, cur, k);
        let up = normalized_up(tape, down, k4, cur_side);
        let band = tape.sub(cur, up);
        bands.push(band);
        cur = down;
        cur_side /= 2;
    }
    bands.push(cur);
    bands
}

/// Laplacian pyramid of a single image; `levels` band arrays, finest first.
pub fn laplacian_pyramid(image: &Array2<f32>, levels: usize) -> Result<Vec<Array2<f32>>> {
    let (h, w) = image.dim();
    if h != w {
        return Err(PipelineError::contract(format!(
            "pyramid expects a square image, got {h}x{w}"
        )));
    }
    if levels == 0 || (levels > 1 && h % (1 << (levels - 1)) != 0) {
        return Err(PipelineError::contract(format!(
            "image side {h} does not support {levels} pyramid levels"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(as_nchw(&image.view()));
    let bands = pyramid_bands(&mut tape, x, levels);
    Ok(bands
        .into_iter()
        .map(|b| {
            let v = tape.value(b);
            let side = v.shape()[2];
            Array2::from_shape_vec((side, side), v.iter().copied().collect()).unwrap()
        })
        .collect())
}

/// A 2-d array as a single-item [1,1,H,W] batch tensor.
fn as_nchw(image: &ndarray::ArrayView2<'_, f32>) -> ArrayD<f32> {
    let (h, w) = image.dim();
    ArrayD::from_shape_vec(IxDyn(&[1, 1, h, w]), image.iter().copied().collect()).unwrap()
}

/// Invert `laplacian_pyramid`: iterated upsample-and-add from the coarsest
/// band.
pub fn reconstruct_from_pyramid(bands: &[Array2<f32>]) -> Array2<f32> {
    assert!(!bands.is_empty());
    let mut tape = Tape::new();
    let k4 = tape.leaf(blur_kernel() * 4.0);
    let mut cur = tape.leaf(as_nchw(&bands.last().unwrap().view()));
    for band in bands[..bands.len() - 1].iter().rev() {
        let side = band.nrows();
        let up = normalized_up(&mut tape, cur, k4, side);
        let b = tape.leaf(as_nchw(&band.view()));
        cur = tape.add(b, up);
    }
    let v = tape.value(cur);
    let side = v.shape()[2];
    Array2::from_shape_vec((side, side), v.iter().copied().collect()).unwrap()
}

/// Weighted band-wise mean-L1 between two batches, on the tape. Uses the
/// linearity of the pyramid: bands(a) - bands(b) = bands(a - b).
pub fn laplacian_loss_var(tape: &mut Tape, a: Var, b: Var, cfg: &PyramidLossConfig) -> Var {
    assert_eq!(
        tape.value(a).shape(),
        tape.value(b).shape(),
        "laplacian loss shape mismatch"
    );
    let diff = tape.sub(a, b);
    let bands = pyramid_bands(tape, diff, cfg.levels);
    let mut total: Option<Var> = None;
    for (j, band) in bands.into_iter().enumerate() {
        let m = tape.mean_l1(band);
        let weighted = tape.mul_scalar(m, cfg.level_weights[j]);
        total = Some(match total {
            Some(t) => tape.add(t, weighted),
            None => weighted,
        });
    }
    total.expect("at least one level")
}

/// Weighted Laplacian-pyramid L1 distance between two image batches.
pub fn laplacian_loss(a: &ImageBatch, b: &ImageBatch, cfg: &PyramidLossConfig) -> Result<f64> {
    if a.pixels.dim() != b.pixels.dim() {
        return Err(PipelineError::contract(format!(
            "laplacian_loss shape mismatch: {:?} vs {:?}",
            a.pixels.dim(),
            b.pixels.dim()
        )));
    }
    cfg.validate(a.side())?;
    let mut tape = Tape::new();
    let av = tape.leaf(a.pixels.clone().into_dyn());
    let bv = tape.leaf(b.pixels.clone().into_dyn());
    let loss = laplacian_loss_var(&mut tape, av, bv, cfg);
    Ok(tape.scalar_value(loss) as f64)
}

/// Plain mean squared error between two image batches.
pub fn batch_mse(a: &ImageBatch, b: &ImageBatch) -> f64 {
    assert_eq!(a.pixels.dim(), b.pixels.dim());
    let mut acc = 0.0f64;
    for (x, y) in a.pixels.iter().zip(b.pixels.iter()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    acc / a.pixels.len() as f64
}

/// Encode a batch of images to latent codes [n, d], in memory-bounded chunks.
pub fn encode(encoder: &DownNet, images: &ImageBatch) -> Array2<f32> {
    assert_eq!(
        images.side(),
        encoder.image_side,
        "encoder expects {}px images, got {}px",
        encoder.image_side,
        images.side()
    );
    let n = images.len();
    let mut out = Array2::zeros((n, encoder.out_dim));
    let chunk = 256usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let scores = encoder.score(&images.select(&idx).pixels);
        out.slice_mut(ndarray::s![start..end, ..]).assign(&scores);
        start = end;
    }
    out
}

/// Encode then decode: G(f(x)). Keeps the source ids of the inputs.
pub fn reconstruct(encoder: &DownNet, generator: &Generator, images: &ImageBatch) -> ImageBatch {
    let codes = encode(encoder, images);
    let n = images.len();
    let side = generator.image_side;
    let mut pixels = ndarray::Array4::zeros((n, 1, side, side));
    let chunk = 256usize;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let z = codes.slice(ndarray::s![start..end, ..]).to_owned();
        let imgs = generator.generate(&z);
        pixels.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&imgs);
        start = end;
    }
    ImageBatch::new(pixels, images.source_ids.clone())
}

/// Encoder training settings.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Max +/- pixels of random translation on training batches (0 = off).
    pub aug_translate: usize,
    /// Fraction of the corpus held out for validation curves.
    pub val_fraction: f64,
    pub pyramid: PyramidLossConfig,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn for_side(side: usize) -> EncoderConfig {
        EncoderConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            aug_translate: 0,
            val_fraction: 0.1,
            pyramid: PyramidLossConfig::for_side(side),
            seed: 0,
        }
    }
}

/// Artifact locations for encoder training.
#[derive(Debug, Clone)]
pub struct EncoderPaths {
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
}

/// Encoder plus its optimizer/rng state and progress counter.
pub struct EncoderState {
    pub encoder: DownNet,
    pub opt: Adam,
    pub data_rng: ChaCha20Rng,
    pub completed_epochs: u64,
}

impl EncoderState {
    pub fn init(generator: &Generator, cfg: &EncoderConfig) -> EncoderState {
        let mut init_rng = seeded_stream(cfg.seed, 5);
        let encoder = DownNet::init_with(
            generator.image_side,
            generator.start_side,
            generator.top_width(),
            generator.latent_dim,
            &mut init_rng,
        );
        let opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &encoder.params);
        EncoderState {
            encoder,
            opt,
            data_rng: seeded_stream(cfg.seed, 6),
            completed_epochs: 0,
        }
    }

    pub fn save(&self, path: &Path, config_hash: [u8; 32]) -> Result<()> {
        let mut ckpt = Checkpoint::new(config_hash);
        ckpt.insert("encoder_params", encode_params(&self.encoder.params));
        ckpt.insert(
            "geometry",
            encode_u64s(&[
                self.encoder.image_side as u64,
                self.encoder.start_side as u64,
                self.encoder.top_width() as u64,
                self.encoder.out_dim as u64,
            ]),
        );
        ckpt.insert("adam", encode_adam(&self.opt));
        ckpt.insert("rng", encode_rng(&RngState::capture(&self.data_rng)));
        ckpt.insert("progress", encode_u64s(&[self.completed_epochs]));
        ckpt.write_atomic(path)?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: &EncoderConfig, config_hash: [u8; 32]) -> Result<EncoderState> {
        let ckpt = Checkpoint::read_from(path)?;
        if ckpt.config_hash != config_hash {
            return Err(PipelineError::contract(format!(
                "checkpoint {} was produced under a different configuration",
                path.display()
            )));
        }
        let geom = decode_u64s(ckpt.require("geometry")?, 4)?;
        let mut rng = seeded_stream(cfg.seed, 5);
        let mut encoder = DownNet::init_with(
            geom[0] as usize,
            geom[1] as usize,
            geom[2] as usize,
            geom[3] as usize,
            &mut rng,
        );
        decode_params_into(ckpt.require("encoder_params")?, &mut encoder.params)?;
        let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &encoder.params);
        decode_adam_into(ckpt.require("adam")?, &mut opt)?;
        Ok(EncoderState {
            encoder,
            opt,
            data_rng: decode_rng(ckpt.require("rng")?)?.restore(),
            completed_epochs: decode_u64s(ckpt.require("progress")?, 1)?[0],
        })
    }
}

/// Load just the encoder network from a checkpoint (for inference stages).
pub fn load_encoder(path: &Path) -> Result<(DownNet, [u8; 32])> {
    let ckpt = Checkpoint::read_from(path)?;
    let geom = decode_u64s(ckpt.require("geometry")?, 4)?;
    let mut rng = seeded_stream(0, 5);
    let mut encoder = DownNet::init_with(
        geom[0] as usize,
        geom[1] as usize,
        geom[2] as usize,
        geom[3] as usize,
        &mut rng,
    );
    decode_params_into(ckpt.require("encoder_params")?, &mut encoder.params)?;
    Ok((encoder, ckpt.config_hash))
}

/// Deterministic train/validation index split.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded_stream(seed, 4);
    let order = shuffled_indices(n, &mut rng);
    let n_val = (((n as f64) * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

const ENCODER_LOG_HEADER: &str = "epoch,mse,laplacian";

/// Validation metrics of an encoder against the frozen generator.
fn validation_metrics(
    encoder: &DownNet,
    generator: &Generator,
    val: &ImageBatch,
    pyramid: &PyramidLossConfig,
    chunk: usize,
) -> Result<(f64, f64)> {
    let n = val.len();
    let mut mse_acc = 0.0f64;
    let mut lap_acc = 0.0f64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = val.select(&idx);
        let recon = reconstruct(encoder, generator, &batch);
        let weight = (end - start) as f64 / n as f64;
        mse_acc += batch_mse(&recon, &batch) * weight;
        lap_acc += laplacian_loss(&recon, &batch, pyramid)? * weight;
        start = end;
    }
    Ok((mse_acc, lap_acc))
}

/// Laplacian/MSE of the best constant predictor: the train-set mean image
/// emitted for every validation image.
pub fn mean_image_baseline(
    train: &ImageBatch,
    val: &ImageBatch,
    pyramid: &PyramidLossConfig,
) -> Result<(f64, f64)> {
    let mean = train.mean_image();
    let n = val.len();
    let side = val.side();
    let mut pixels = ndarray::Array4::zeros((n, 1, side, side));
    for i in 0..n {
        pixels
            .index_axis_mut(ndarray::Axis(0), i)
            .index_axis_move(ndarray::Axis(0), 0)
            .assign(&mean);
    }
    let constant = ImageBatch::new(pixels, val.source_ids.clone());
    let mse = batch_mse(&constant, val);
    let lap = laplacian_loss(&constant, val, pyramid)?;
    Ok((mse, lap))
}

/// Train (or resume) the encoder against the frozen generator.
///
/// Per epoch the validation MSE and Laplacian loss are appended to the CSV
/// at `paths.log_csv` (columns epoch,mse,laplacian) and the full state is
/// checkpointed, so interrupted runs resume bit-exactly. The generator is
/// never modified.
pub fn train_autoencoder(
    data: &ImageBatch,
    generator: &Generator,
    cfg: &EncoderConfig,
    config_hash: [u8; 32],
    paths: &EncoderPaths,
    resume: bool,
) -> Result<EncoderState> {
    if data.side() != generator.image_side {
        return Err(PipelineError::contract(format!(
            "corpus images are {}px but the generator produces {}px",
            data.side(),
            generator.image_side
        )));
    }
    cfg.pyramid.validate(data.side())?;
    if data.len() < 2 {
        return Err(PipelineError::contract(
            "autoencoder training needs at least two images",
        ));
    }

    let mut state = if resume && paths.checkpoint.exists() {
        let s = EncoderState::load(&paths.checkpoint, cfg, config_hash)?;
        log::info!("resuming encoder training at epoch {}", s.completed_epochs);
        s
    } else {
        EncoderState::init(generator, cfg)
    };

    let (train_idx, val_idx) = train_val_split(data.len(), cfg.val_fraction, cfg.seed);
    let train = data.select(&train_idx);
    let val = data.select(&val_idx);

    let mut rows = read_log(&paths.log_csv, 2, state.completed_epochs)?;

    while state.completed_epochs < cfg.epochs as u64 {
        let epoch = state.completed_epochs + 1;
        let order = shuffled_indices(train.len(), &mut state.data_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = train.select(chunk);
            if cfg.aug_translate > 0 {
                batch = translate_batch(&batch, cfg.aug_translate, PAD_VALUE, &mut state.data_rng);
            }

            let mut tape = Tape::new();
            let enc_leaves = state.encoder.params.bind(&mut tape);
            let gen_leaves = generator.params.bind_frozen(&mut tape);
            let x = tape.leaf(batch.pixels.clone().into_dyn());
            let z = state.encoder.forward(&mut tape, x, &enc_leaves);
            let xr = generator.forward(&mut tape, z, &gen_leaves);
            let loss = laplacian_loss_var(&mut tape, xr, x, &cfg.pyramid);
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(PipelineError::Divergence {
                    stage: "autoencoder".into(),
                    iteration: epoch,
                    message: format!("non-finite training loss {loss_val}"),
                });
            }
            let grads = tape.grad(loss, &enc_leaves);
            let grads: Vec<Option<ArrayD<f32>>> = grads
                .into_iter()
                .map(|g| g.map(|v| tape.value(v).clone()))
                .collect();
            state.opt.step(&mut state.encoder.params, &grads);
        }

        let (mse, lap) = validation_metrics(
            &state.encoder,
            generator,
            &val,
            &cfg.pyramid,
            cfg.batch_size.max(1),
        )?;
        if !(mse.is_finite() && lap.is_finite()) {
            return Err(PipelineError::Divergence {
                stage: "autoencoder".into(),
                iteration: epoch,
                message: format!("non-finite validation metrics (mse {mse}, laplacian {lap})"),
            });
        }
        rows.push(LogRow {
            step: epoch,
            values: vec![mse, lap],
        });
        state.completed_epochs = epoch;
        state.save(&paths.checkpoint, config_hash)?;
        write_log(&paths.log_csv, ENCODER_LOG_HEADER, &rows)?;
        log::info!(
            "encoder epoch {epoch}/{}: val mse {mse:.5}, val laplacian {lap:.5}",
            cfg.epochs
        );
    }

    write_log(&paths.log_csv, ENCODER_LOG_HEADER, &rows)?;
    Ok(state)
}
