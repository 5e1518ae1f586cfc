//! Wasserstein GAN with gradient penalty on grayscale images.
//!
//! The generator projects a latent vector to a small spatial grid and
//! upsamples with stride-2 transposed convolutions; the critic mirrors it
//! with stride-2 convolutions. Neither network uses normalization layers —
//! the gradient penalty assumes the critic scores each sample independently
//! — and both use SELU activations, with a final tanh on the generator.

use std::path::{Path, PathBuf};

use gvr_core::checkpoint::{
    decode_adam_into, decode_params_into, decode_rng, decode_u64s, encode_adam, encode_params,
    encode_rng, encode_u64s, Checkpoint,
};
use gvr_core::nn::{lecun_normal, zeros, ParamStore};
use gvr_core::optimizer::Adam;
use gvr_core::rng::{seeded_stream, standard_normal, RngState};
use gvr_core::tape::{Tape, Var};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::RngExt;
use rand_chacha::ChaCha20Rng;

use crate::data::{sample_indices, translate_batch, ImageBatch, PAD_VALUE};
use crate::error::{PipelineError, Result};
use crate::runlog::{read_log, write_log, LogRow};

/// Hyperparameters for adversarial training.
#[derive(Debug, Clone)]
pub struct GanConfig {
    /// Image side length; must be `start_side * 2^k` for some k >= 1.
    pub image_side: usize,
    /// Latent dimensionality of the prior N(0, I).
    pub latent_dim: usize,
    /// Channel count at the smallest spatial resolution; halves per stage.
    pub top_width: usize,
    /// Spatial side of the generator's first grid (2 for 32px, 4 for 128px).
    pub start_side: usize,
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    /// Gradient-penalty coefficient.
    pub gp_lambda: f32,
    /// Total generator iterations to train.
    pub iterations: u64,
    /// Checkpoint cadence in generator iterations.
    pub checkpoint_every: u64,
    /// Max +/- pixels of random translation applied to real batches.
    pub aug_translate: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            image_side: 32,
            latent_dim: 100,
            top_width: 512,
            start_side: 2,
            batch_size: 64,
            critic_steps: 4,
            lr: 5e-5,
            beta1: 0.0,
            beta2: 0.9,
            gp_lambda: 10.0,
            iterations: 20_000,
            checkpoint_every: 1000,
            aug_translate: 2,
            seed: 0,
        }
    }
}

impl GanConfig {
    /// Number of stride-2 stages between `start_side` and `image_side`.
    pub fn stages(&self) -> usize {
        (self.image_side / self.start_side).trailing_zeros() as usize
    }

    /// Channel widths from the coarsest grid outward, halving per stage.
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.stages()).map(|i| self.top_width >> i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ratio = self.image_side / self.start_side;
        if self.start_side < 2
            || self.image_side % self.start_side != 0
            || !ratio.is_power_of_two()
            || ratio < 2
        {
            return Err(PipelineError::config(
                "gan.image_side",
                format!(
                    "image side {} must be start side {} times a power of two (at least 2)",
                    self.image_side, self.start_side
                ),
            ));
        }
        if self.top_width >> (self.stages() - 1) == 0 {
            return Err(PipelineError::config(
                "gan.top_width",
                format!(
                    "top width {} too small for {} stages",
                    self.top_width,
                    self.stages()
                ),
            ));
        }
        if self.latent_dim == 0 || self.batch_size == 0 || self.critic_steps == 0 {
            return Err(PipelineError::config(
                "gan",
                "latent_dim, batch_size and critic_steps must be positive",
            ));
        }
        Ok(())
    }
}

/// Latent-to-image upsampling network.
pub struct Generator {
    pub params: ParamStore,
    pub latent_dim: usize,
    pub image_side: usize,
    pub start_side: usize,
    widths: Vec<usize>,
}

impl Generator {
    pub fn init(cfg: &GanConfig, rng: &mut ChaCha20Rng) -> Generator {
        let widths = cfg.stage_widths();
        let mut params = ParamStore::new();
        let top = widths[0];
        let proj_out = top * cfg.start_side * cfg.start_side;
        params.add(
            "proj.w",
            lecun_normal(rng, &[cfg.latent_dim, proj_out], cfg.latent_dim),
        );
        params.add("proj.b", zeros(&[1, proj_out]));
        for i in 0..widths.len() {
            let cin = widths[i];
            let cout = if i + 1 < widths.len() { widths[i + 1] } else { 1 };
            // Transposed-conv kernel, stored as the matching forward-conv
            // kernel [cin, cout, 4, 4] (the op is its adjoint).
            params.add(
                &format!("up{i}.k"),
                lecun_normal(rng, &[cin, cout, 4, 4], cin * 4),
            );
            params.add(&format!("up{i}.b"), zeros(&[1, cout, 1, 1]));
        }
        Generator {
            params,
            latent_dim: cfg.latent_dim,
            image_side: cfg.image_side,
            start_side: cfg.start_side,
            widths,
        }
    }

    /// Forward pass: z [N, latent] -> image [N, 1, side, side] in [-1, 1].
    /// `leaves` must bind `self.params` in id order.
    pub fn forward(&self, tape: &mut Tape, z: Var, leaves: &[Var]) -> Var {
        let n = tape.value(z).shape()[0];
        let mut cursor = leaves.iter().copied();
        let mut next = || cursor.next().expect("leaf count matches param count");

        let (w, b) = (next(), next());
        let h = tape.linear(z, w, b);
        let top = self.widths[0];
        let mut x = tape.reshape(h, &[n, top, self.start_side, self.start_side]);
        x = tape.selu(x);
        let mut side = self.start_side;
        for i in 0..self.widths.len() {
            let (k, bias) = (next(), next());
            side *= 2;
            let y = tape.conv2d_transpose(x, k, 2, 1, (side, side));
            let shape = tape.value(y).shape().to_vec();
            let bb = tape.broadcast(bias, &shape);
            let y = tape.add(y, bb);
            x = if i + 1 < self.widths.len() {
                tape.selu(y)
            } else {
                tape.tanh(y)
            };
        }
        debug_assert_eq!(side, self.image_side);
        x
    }

    /// Channel count at the coarsest grid.
    pub fn top_width(&self) -> usize {
        self.widths[0]
    }

    /// Frozen-parameter convenience forward.
    pub fn generate(&self, z: &Array2<f32>) -> Array4<f32> {
        let mut tape = Tape::new();
        let leaves = self.params.bind_frozen(&mut tape);
        let zv = tape.leaf(z.clone().into_dyn());
        let out = self.forward(&mut tape, zv, &leaves);
        tape.value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
    }
}

/// Strided-convolution downsampling network mapping an image to a vector;
/// serves as the WGAN critic (`out_dim` = 1) and, in the inversion stage,
/// as the encoder (`out_dim` = latent dimension).
pub struct DownNet {
    pub params: ParamStore,
    pub image_side: usize,
    pub start_side: usize,
    pub out_dim: usize,
    widths: Vec<usize>,
}

impl DownNet {
    pub fn init(cfg: &GanConfig, out_dim: usize, rng: &mut ChaCha20Rng) -> DownNet {
        DownNet::init_with(
            cfg.image_side,
            cfg.start_side,
            cfg.top_width,
            out_dim,
            rng,
        )
    }

    /// Construct directly from geometry (image side, coarsest grid side,
    /// channel count at the coarsest grid).
    pub fn init_with(
        image_side: usize,
        start_side: usize,
        top_width: usize,
        out_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> DownNet {
        let stages = (image_side / start_side).trailing_zeros() as usize;
        let widths: Vec<usize> = (0..stages).map(|i| top_width >> i).collect();
        let mut params = ParamStore::new();
        // Walk the generator widths backwards: 1 -> w[last] -> ... -> w[0].
        let mut cin = 1usize;
        for (i, &cout) in widths.iter().rev().enumerate() {
            params.add(
                &format!("down{i}.k"),
                lecun_normal(rng, &[cout, cin, 4, 4], cin * 16),
            );
            params.add(&format!("down{i}.b"), zeros(&[1, cout, 1, 1]));
            cin = cout;
        }
        let flat = widths[0] * start_side * start_side;
        params.add("out.w", lecun_normal(rng, &[flat, out_dim], flat));
        params.add("out.b", zeros(&[1, out_dim]));
        DownNet {
            params,
            image_side,
            start_side,
            out_dim,
            widths,
        }
    }

    /// Channel count at the coarsest grid (needed to rebuild the geometry).
    pub fn top_width(&self) -> usize {
        self.widths[0]
    }

    /// Forward pass: image [N, 1, side, side] -> [N, out_dim].
    pub fn forward(&self, tape: &mut Tape, x: Var, leaves: &[Var]) -> Var {
        let n = tape.value(x).shape()[0];
        let mut cursor = leaves.iter().copied();
        let mut next = || cursor.next().expect("leaf count matches param count");

        let mut h = x;
        for _ in 0..self.widths.len() {
            let (k, bias) = (next(), next());
            let y = tape.conv2d(h, k, 2, 1);
            let shape = tape.value(y).shape().to_vec();
            let bb = tape.broadcast(bias, &shape);
            let y = tape.add(y, bb);
            h = tape.selu(y);
        }
        let flat = self.widths[0] * self.start_side * self.start_side;
        let hflat = tape.reshape(h, &[n, flat]);
        let (w, b) = (next(), next());
        tape.linear(hflat, w, b)
    }

    /// Frozen-parameter convenience forward.
    pub fn score(&self, x: &Array4<f32>) -> Array2<f32> {
        let mut tape = Tape::new();
        let leaves = self.params.bind_frozen(&mut tape);
        let xv = tape.leaf(x.clone().into_dyn());
        let out = self.forward(&mut tape, xv, &leaves);
        tape.value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }
}

/// Draw a batch of latent vectors from the standard-normal prior.
pub fn sample_prior(rng: &mut ChaCha20Rng, n: usize, latent_dim: usize) -> Array2<f32> {
    standard_normal(rng, &[n, latent_dim])
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

/// Gradient penalty lambda * mean((|grad D(xhat)| - 1)^2) at interpolates
/// xhat = eps*x_real + (1-eps)*x_fake, built on the tape so it is itself
/// differentiable with respect to the critic parameters. Returns the
/// penalty and the mean interpolate gradient norm (for monitoring).
///
/// `critic` receives the interpolate variable and must score it on the same
/// tape. `eps` has shape [N, 1, 1, 1].
pub fn gradient_penalty<F>(
    tape: &mut Tape,
    critic: F,
    x_real: &ArrayD<f32>,
    x_fake: &ArrayD<f32>,
    eps: &ArrayD<f32>,
    lambda: f32,
) -> (Var, Var)
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    assert_eq!(x_real.shape(), x_fake.shape(), "interpolate shape mismatch");
    let n = x_real.shape()[0];
    assert_eq!(eps.shape(), [n, 1, 1, 1].as_slice(), "eps must be [N,1,1,1]");

    let eps_b = eps
        .broadcast(x_real.raw_dim())
        .expect("eps broadcast")
        .to_owned();
    let xhat_val = &eps_b * x_real + &(1.0 - &eps_b) * x_fake;
    let xhat = tape.leaf_grad(xhat_val);

    let d = critic(tape, xhat);
    // Per-sample scores are independent, so summing before differentiating
    // yields exactly the per-sample input gradients.
    let s = tape.sum_all(d);
    let g = tape
        .grad(s, &[xhat])[0]
        .expect("critic must depend on its input");
    let gsq = tape.square(g);
    let per_pixel: usize = x_real.len() / n;
    let flat = tape.reshape(gsq, &[n, per_pixel]);
    let sq_norms = tape.sum_to(flat, &[n, 1]);
    // Tiny floor keeps sqrt differentiable if a gradient is exactly zero.
    let safe = tape.add_scalar(sq_norms, 1e-12);
    let norms = tape.sqrt(safe);
    let dev = tape.add_scalar(norms, -1.0);
    let devsq = tape.square(dev);
    let mean_dev = tape.mean_all(devsq);
    let penalty = tape.mul_scalar(mean_dev, lambda);
    let mean_norm = tape.mean_all(norms);
    (penalty, mean_norm)
}

/// Numbers produced by one critic update.
#[derive(Debug, Clone, Copy)]
pub struct CriticStats {
    /// Wasserstein estimate mean D(real) - mean D(fake) before the update.
    pub wasserstein: f64,
    /// Gradient-penalty term (including lambda).
    pub gp: f64,
    /// Mean gradient norm at the interpolates.
    pub grad_norm: f64,
}

/// One critic update on a real batch against a frozen generator.
pub fn critic_step(
    generator: &Generator,
    critic: &mut DownNet,
    opt: &mut Adam,
    x_real: &Array4<f32>,
    z: &Array2<f32>,
    eps: &ArrayD<f32>,
    lambda: f32,
) -> CriticStats {
    let x_fake = generator.generate(z);

    let mut tape = Tape::new();
    let leaves = critic.params.bind(&mut tape);
    let xr = tape.leaf(x_real.clone().into_dyn());
    let xf = tape.leaf(x_fake.clone().into_dyn());
    let d_real = critic.forward(&mut tape, xr, &leaves);
    let d_fake = critic.forward(&mut tape, xf, &leaves);
    let mean_real = tape.mean_all(d_real);
    let mean_fake = tape.mean_all(d_fake);
    let main = tape.sub(mean_fake, mean_real);
    let (penalty, mean_norm) = gradient_penalty(
        &mut tape,
        |t, xhat| critic.forward(t, xhat, &leaves),
        &x_real.clone().into_dyn(),
        &x_fake.into_dyn(),
        eps,
        lambda,
    );
    let total = tape.add(main, penalty);

    let stats = CriticStats {
        wasserstein: (tape.scalar_value(mean_real) - tape.scalar_value(mean_fake)) as f64,
        gp: tape.scalar_value(penalty) as f64,
        grad_norm: tape.scalar_value(mean_norm) as f64,
    };

    let grads = tape.grad(total, &leaves);
    let grads: Vec<Option<ArrayD<f32>>> = grads
        .into_iter()
        .map(|g| g.map(|v| tape.value(v).clone()))
        .collect();
    opt.step(&mut critic.params, &grads);
    stats
}

/// One generator update against a frozen critic. Returns the generator loss
/// -mean D(G(z)) before the update.
pub fn generator_step(
    generator: &mut Generator,
    critic: &DownNet,
    opt: &mut Adam,
    z: &Array2<f32>,
) -> f64 {
    let mut tape = Tape::new();
    let gen_leaves = generator.params.bind(&mut tape);
    let critic_leaves = critic.params.bind_frozen(&mut tape);
    let zv = tape.leaf(z.clone().into_dyn());
    let fake = generator.forward(&mut tape, zv, &gen_leaves);
    let d = critic.forward(&mut tape, fake, &critic_leaves);
    let mean_d = tape.mean_all(d);
    let loss = tape.neg(mean_d);
    let loss_val = tape.scalar_value(loss) as f64;

    let grads = tape.grad(loss, &gen_leaves);
    let grads: Vec<Option<ArrayD<f32>>> = grads
        .into_iter()
        .map(|g| g.map(|v| tape.value(v).clone()))
        .collect();
    opt.step(&mut generator.params, &grads);
    loss_val
}

/// Where training artifacts live.
#[derive(Debug, Clone)]
pub struct GanPaths {
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
}

/// Trained networks plus their optimizer/rng state, ready to continue.
pub struct GanState {
    pub generator: Generator,
    pub critic: DownNet,
    pub gen_opt: Adam,
    pub critic_opt: Adam,
    pub data_rng: ChaCha20Rng,
    pub noise_rng: ChaCha20Rng,
    pub completed_iterations: u64,
}

impl GanState {
    /// Fresh state from the config seed.
    pub fn init(cfg: &GanConfig) -> GanState {
        let mut init_rng = seeded_stream(cfg.seed, 0);
        let generator = Generator::init(cfg, &mut init_rng);
        let critic = DownNet::init(cfg, 1, &mut init_rng);
        let gen_opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &generator.params);
        let critic_opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, &critic.params);
        GanState {
            generator,
            critic,
            gen_opt,
            critic_opt,
            data_rng: seeded_stream(cfg.seed, 1),
            noise_rng: seeded_stream(cfg.seed, 2),
            completed_iterations: 0,
        }
    }

    pub fn save(&self, path: &Path, config_hash: [u8; 32]) -> Result<()> {
        let mut ckpt = Checkpoint::new(config_hash);
        ckpt.insert("gen_params", encode_params(&self.generator.params));
        ckpt.insert("critic_params", encode_params(&self.critic.params));
        ckpt.insert("gen_adam", encode_adam(&self.gen_opt));
        ckpt.insert("critic_adam", encode_adam(&self.critic_opt));
        ckpt.insert("rng_data", encode_rng(&RngState::capture(&self.data_rng)));
        ckpt.insert("rng_noise", encode_rng(&RngState::capture(&self.noise_rng)));
        ckpt.insert("progress", encode_u64s(&[self.completed_iterations]));
        ckpt.write_atomic(path)?;
        Ok(())
    }

    /// Restore a checkpoint produced with the same config.
    pub fn load(path: &Path, cfg: &GanConfig, config_hash: [u8; 32]) -> Result<GanState> {
        let ckpt = Checkpoint::read_from(path)?;
        if ckpt.config_hash != config_hash {
            return Err(PipelineError::contract(format!(
                "checkpoint {} was produced under a different configuration",
                path.display()
            )));
        }
        let mut state = GanState::init(cfg);
        decode_params_into(ckpt.require("gen_params")?, &mut state.generator.params)?;
        decode_params_into(ckpt.require("critic_params")?, &mut state.critic.params)?;
        decode_adam_into(ckpt.require("gen_adam")?, &mut state.gen_opt)?;
        decode_adam_into(ckpt.require("critic_adam")?, &mut state.critic_opt)?;
        state.data_rng = decode_rng(ckpt.require("rng_data")?)?.restore();
        state.noise_rng = decode_rng(ckpt.require("rng_noise")?)?.restore();
        state.completed_iterations = decode_u64s(ckpt.require("progress")?, 1)?[0];
        Ok(state)
    }
}

const GAN_LOG_HEADER: &str = "iteration,wasserstein_estimate,gp_value,gen_loss";

/// Train (or resume) the WGAN-GP to `cfg.iterations` generator iterations.
///
/// Every `checkpoint_every` iterations (and at the end) the full state —
/// parameters, both ADAM moments, both RNG streams and the iteration count
/// — is written atomically, so a resumed run continues bit-for-bit exactly
/// as an uninterrupted one. The CSV log at `paths.log_csv` gains one row per
/// generator iteration: iteration, Wasserstein estimate, gradient penalty,
/// generator loss.
pub fn train_gan(
    data: &ImageBatch,
    cfg: &GanConfig,
    config_hash: [u8; 32],
    paths: &GanPaths,
    resume: bool,
) -> Result<GanState> {
    cfg.validate()?;
    if data.side() != cfg.image_side {
        return Err(PipelineError::contract(format!(
            "training images are {}px but the config says {}px",
            data.side(),
            cfg.image_side
        )));
    }

    let mut state = if resume && paths.checkpoint.exists() {
        let s = GanState::load(&paths.checkpoint, cfg, config_hash)?;
        log::info!(
            "resuming adversarial training at iteration {}",
            s.completed_iterations
        );
        s
    } else {
        GanState::init(cfg)
    };

    // Drop any log rows from beyond the checkpoint we restarted from.
    let mut rows = read_log(&paths.log_csv, 3, state.completed_iterations)?;

    let n = data.len();
    while state.completed_iterations < cfg.iterations {
        let iteration = state.completed_iterations + 1;
        let mut last = CriticStats {
            wasserstein: 0.0,
            gp: 0.0,
            grad_norm: 0.0,
        };
        for _ in 0..cfg.critic_steps {
            let idx = sample_indices(n, cfg.batch_size, &mut state.data_rng);
            let mut real = data.select(&idx);
            if cfg.aug_translate > 0 {
                real = translate_batch(&real, cfg.aug_translate, PAD_VALUE, &mut state.data_rng);
            }
            let z = sample_prior(&mut state.noise_rng, cfg.batch_size, cfg.latent_dim);
            let eps = uniform_eps(&mut state.noise_rng, cfg.batch_size);
            last = critic_step(
                &state.generator,
                &mut state.critic,
                &mut state.critic_opt,
                &real.pixels,
                &z,
                &eps,
                cfg.gp_lambda,
            );
            if !(last.wasserstein.is_finite() && last.gp.is_finite()) {
                return Err(PipelineError::Divergence {
                    stage: "gan-critic".into(),
                    iteration,
                    message: format!(
                        "non-finite critic loss (wasserstein {}, gp {})",
                        last.wasserstein, last.gp
                    ),
                });
            }
        }
        let z = sample_prior(&mut state.noise_rng, cfg.batch_size, cfg.latent_dim);
        let gen_loss = generator_step(
            &mut state.generator,
            &state.critic,
            &mut state.gen_opt,
            &z,
        );
        if !gen_loss.is_finite() {
            return Err(PipelineError::Divergence {
                stage: "gan-generator".into(),
                iteration,
                message: format!("non-finite generator loss {gen_loss}"),
            });
        }

        rows.push(LogRow {
            step: iteration,
            values: vec![last.wasserstein, last.gp, gen_loss],
        });
        state.completed_iterations = iteration;

        if iteration % cfg.checkpoint_every == 0 || iteration == cfg.iterations {
            state.save(&paths.checkpoint, config_hash)?;
            write_log(&paths.log_csv, GAN_LOG_HEADER, &rows)?;
            log::info!(
                "iteration {iteration}/{}: wasserstein {:.4}, gp {:.4}, gen loss {:.4}",
                cfg.iterations,
                last.wasserstein,
                last.gp,
                gen_loss
            );
        }
    }

    // A run that was asked for fewer iterations than the checkpoint already
    // holds still rewrites the (truncated) log for consistency.
    write_log(&paths.log_csv, GAN_LOG_HEADER, &rows)?;
    Ok(state)
}

/// Per-sample uniform mixing coefficients, shaped [N, 1, 1, 1].
pub fn uniform_eps(rng: &mut ChaCha20Rng, n: usize) -> ArrayD<f32> {
    let vals: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
    ArrayD::from_shape_vec(IxDyn(&[n, 1, 1, 1]), vals).unwrap()
}

/// Mean critic gradient norm at fresh real/fake interpolates (no update),
/// averaged over `batches` batches — the value the gradient penalty drives
/// toward 1.
pub fn interpolate_grad_norm(
    generator: &Generator,
    critic: &DownNet,
    data: &ImageBatch,
    batch_size: usize,
    batches: usize,
    seed: u64,
) -> f64 {
    let mut rng = seeded_stream(seed, 3);
    let mut total = 0.0;
    for _ in 0..batches {
        let idx = sample_indices(data.len(), batch_size, &mut rng);
        let real = data.select(&idx);
        let z = sample_prior(&mut rng, batch_size, generator.latent_dim);
        let fake = generator.generate(&z);
        let eps = uniform_eps(&mut rng, batch_size);

        let mut tape = Tape::new();
        let leaves = critic.params.bind_frozen(&mut tape);
        let (_, mean_norm) = gradient_penalty(
            &mut tape,
            |t, xhat| critic.forward(t, xhat, &leaves),
            &real.pixels.clone().into_dyn(),
            &fake.into_dyn(),
            &eps,
            1.0,
        );
        total += tape.scalar_value(mean_norm) as f64;
    }
    total / batches as f64
}
