//! Counterfactual rationale generation by penalized latent-space descent.
//!
//! Starting from an encoded image z0, ADAM minimizes
//!     prediction term + gamma * ||G(z) - G(z0)||^2
//! where the prediction term is the head output (regression) or
//! y_source - beta * y_target (multiclass, on softmax probabilities), until
//! the prediction crosses the cutoff in the configured direction or the
//! iteration cap is reached. All optimization happens in latent space: the
//! optimized variable has dimension d, never the image size.

use gvr_core::nn::ParamStore;
use gvr_core::optimizer::Adam;
use gvr_core::tape::{Tape, Var};
use ndarray::{Array1, Array2, ArrayD, Axis};

use crate::autoencoder::encode;
use crate::data::ImageBatch;
use crate::error::{PipelineError, Result};
use crate::gan::{DownNet, Generator};
use crate::predictors::{HeadKind, PredictionHead};

/// Which way the optimizer pushes the prediction, and hence which crossing
/// of the cutoff counts as convergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Decrease,
    Increase,
}

/// Latent-optimization settings.
#[derive(Debug, Clone)]
pub struct GvrConfig {
    /// ADAM learning rate on the latent code.
    pub lr: f32,
    /// Image-similarity penalty weight.
    pub gamma: f32,
    /// Cutoff the prediction must cross for convergence.
    pub cutoff: f64,
    /// Target-class weight (multiclass only).
    pub beta: f32,
    /// Target class t (multiclass only).
    pub target_class: Option<usize>,
    pub max_iterations: usize,
    pub direction: Direction,
}

impl GvrConfig {
    /// Regression defaults: lr 0.1, gamma 0.1, 5000 iterations, cutoff at
    /// the clinical threshold on the scaled axis, driving predictions down.
    pub fn regression_default() -> GvrConfig {
        GvrConfig {
            lr: 0.1,
            gamma: 0.1,
            cutoff: crate::predictors::BNP_THRESHOLD_SCALED,
            beta: 1.0,
            target_class: None,
            max_iterations: 5000,
            direction: Direction::Decrease,
        }
    }

    /// Multiclass defaults: 500 iterations, stop once the source-class
    /// probability falls below 0.1.
    pub fn multiclass_default(target_class: usize) -> GvrConfig {
        GvrConfig {
            lr: 0.1,
            gamma: 0.1,
            cutoff: 0.1,
            beta: 1.0,
            target_class: Some(target_class),
            max_iterations: 500,
            direction: Direction::Decrease,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(PipelineError::config("gvr.lr", "learning rate must be positive"));
        }
        if !(self.gamma >= 0.0) {
            return Err(PipelineError::config("gvr.gamma", "gamma must be nonnegative"));
        }
        if self.max_iterations == 0 {
            return Err(PipelineError::config(
                "gvr.max_iterations",
                "at least one iteration required",
            ));
        }
        Ok(())
    }

    fn satisfied(&self, y: f64) -> bool {
        match self.direction {
            Direction::Decrease => y < self.cutoff,
            Direction::Increase => y > self.cutoff,
        }
    }
}

/// Anything that can decode a latent batch on a tape with frozen weights.
pub trait Decoder: Sync {
    /// z [N, d] -> decoded tensor with leading batch axis.
    fn decode(&self, tape: &mut Tape, z: Var) -> Var;
}

impl Decoder for Generator {
    fn decode(&self, tape: &mut Tape, z: Var) -> Var {
        let leaves = self.params.bind_frozen(tape);
        self.forward(tape, z, &leaves)
    }
}

/// Decoder that returns the latent itself; the analytic test bed.
pub struct IdentityDecoder;

impl Decoder for IdentityDecoder {
    fn decode(&self, _tape: &mut Tape, z: Var) -> Var {
        z
    }
}

/// One counterfactual optimization outcome. Decoded tensors keep their full
/// shape minus the batch axis (images: [1, side, side]).
#[derive(Debug, Clone)]
pub struct RationaleResult {
    pub z0: Array1<f32>,
    pub z_final: Array1<f32>,
    pub x0: ArrayD<f32>,
    pub x_final: ArrayD<f32>,
    /// Signed counterfactual evidence map: exactly x0 - x_final.
    pub difference: ArrayD<f32>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Prediction after k steps, k = 0..=iterations_used.
    pub prediction_trace: Vec<f64>,
    /// Source class whose score was driven down (multiclass only).
    pub source_class: Option<usize>,
    /// Argmax class at z_final (multiclass only).
    pub final_class: Option<usize>,
}

impl RationaleResult {
    /// The difference map as a 2-d image (single-channel results only).
    pub fn difference_2d(&self) -> Array2<f32> {
        as_2d(&self.difference, "difference")
    }

    /// The reconstructed starting image as a 2-d image.
    pub fn x0_2d(&self) -> Array2<f32> {
        as_2d(&self.x0, "x0")
    }

    /// The counterfactual image as a 2-d image.
    pub fn x_final_2d(&self) -> Array2<f32> {
        as_2d(&self.x_final, "x_final")
    }
}

fn as_2d(t: &ArrayD<f32>, what: &str) -> Array2<f32> {
    let s = t.shape();
    assert_eq!(s.len(), 3, "{what} is not an image tensor");
    assert_eq!(s[0], 1, "{what} has {} channels", s[0]);
    Array2::from_shape_vec((s[1], s[2]), t.iter().copied().collect()).unwrap()
}

/// What the per-step objective minimizes beyond the image penalty.
enum TermKind {
    /// Head output, signed by direction.
    Regression,
    /// y_source - beta * y_target on softmax probabilities.
    Multiclass { source: usize, target: usize },
}

/// One objective evaluation: raw prediction y, objective value, dV/dz.
fn eval_objective<D: Decoder + ?Sized>(
    z: &ArrayD<f32>,
    x0: &ArrayD<f32>,
    head: &PredictionHead,
    decoder: &D,
    cfg: &GvrConfig,
    term: &TermKind,
) -> Result<(f64, f64, ArrayD<f32>)> {
    let mut tape = Tape::new();
    let zv = tape.leaf_grad(z.clone());
    let x = decoder.decode(&mut tape, zv);
    // The head scores the latent code; the decoded image only enters the
    // similarity penalty.
    let head_leaves = head.params.bind_frozen(&mut tape);
    let out = head.forward(&mut tape, zv, &head_leaves);

    let (y_var, term_var) = match term {
        TermKind::Regression => {
            let y = tape.sum_all(out); // [1,1] -> scalar
            let t = match cfg.direction {
                Direction::Decrease => y,
                Direction::Increase => tape.neg(y),
            };
            (y, t)
        }
        TermKind::Multiclass { source, target } => {
            let probs = tape.softmax(out);
            let classes = tape.value(probs).shape()[1];
            let mut pick_m = ArrayD::zeros(ndarray::IxDyn(&[1, classes]));
            pick_m[[0, *source]] = 1.0f32;
            let mut pick_t = ArrayD::zeros(ndarray::IxDyn(&[1, classes]));
            pick_t[[0, *target]] = 1.0f32;
            let m_mask = tape.leaf(pick_m);
            let t_mask = tape.leaf(pick_t);
            let ym_v = tape.mul(probs, m_mask);
            let ym = tape.sum_all(ym_v);
            let yt_v = tape.mul(probs, t_mask);
            let yt = tape.sum_all(yt_v);
            let weighted_t = tape.mul_scalar(yt, cfg.beta);
            let spread = tape.sub(ym, weighted_t);
            let t = match cfg.direction {
                Direction::Decrease => spread,
                Direction::Increase => tape.neg(spread),
            };
            (ym, t)
        }
    };

    let x0_var = tape.leaf(x0.clone());
    let diff = tape.sub(x, x0_var);
    let sq = tape.square(diff);
    let pen = tape.sum_all(sq);
    let weighted_pen = tape.mul_scalar(pen, cfg.gamma);
    let total = tape.add(term_var, weighted_pen);

    let y = tape.scalar_value(y_var) as f64;
    let value = tape.scalar_value(total) as f64;
    if !value.is_finite() {
        return Err(PipelineError::contract(format!(
            "non-finite rationale objective {value} at z = {:?}",
            z.iter().take(8).collect::<Vec<_>>()
        )));
    }
    let grad_var = tape
        .grad(total, &[zv])[0]
        .ok_or_else(|| PipelineError::contract("objective does not depend on z"))?;
    let grad = tape.value(grad_var).clone();
    Ok((y, value, grad))
}

/// The penalized objective of the latent descent and its gradient, in the
/// canonical (decrease) form: value = head(z) + gamma * sum((D(z)-D(z0))^2).
pub fn gvr_objective<D: Decoder + ?Sized>(
    z: &Array1<f32>,
    z0: &Array1<f32>,
    head: &PredictionHead,
    decoder: &D,
    gamma: f32,
) -> Result<(f64, Array1<f32>)> {
    if z.len() != z0.len() {
        return Err(PipelineError::contract(format!(
            "latent dimension mismatch: {} vs {}",
            z.len(),
            z0.len()
        )));
    }
    let cfg = GvrConfig {
        gamma,
        ..GvrConfig::regression_default()
    };
    let x0 = decode_value(decoder, z0);
    let zt = row(z);
    let (_, value, grad) = eval_objective(&zt, &x0, head, decoder, &cfg, &TermKind::Regression)?;
    Ok((value, Array1::from_vec(grad.iter().copied().collect())))
}

/// Latent vector as a [1, d] tensor.
fn row(z: &Array1<f32>) -> ArrayD<f32> {
    ArrayD::from_shape_vec(ndarray::IxDyn(&[1, z.len()]), z.to_vec()).unwrap()
}

/// Frozen decode of a single latent, values only.
fn decode_value<D: Decoder + ?Sized>(decoder: &D, z: &Array1<f32>) -> ArrayD<f32> {
    let mut tape = Tape::new();
    let zv = tape.leaf(row(z));
    let x = decoder.decode(&mut tape, zv);
    tape.value(x).clone()
}

/// Shared descent loop for both algorithms.
fn optimize(
    z0: &Array1<f32>,
    head: &PredictionHead,
    decoder: &(impl Decoder + ?Sized),
    cfg: &GvrConfig,
    term: TermKind,
) -> Result<RationaleResult> {
    cfg.validate()?;
    let x0 = decode_value(decoder, z0);

    // Fresh per-rationale ADAM over the single latent "parameter".
    let mut store = ParamStore::new();
    let zid = store.add("z", row(z0));
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999, &store);

    let (y, _, mut grad) = eval_objective(store.get(zid), &x0, head, decoder, cfg, &term)?;
    let mut trace = vec![y];
    let mut converged = cfg.satisfied(y);
    let mut iterations_used = 0;

    if !converged {
        for t in 1..=cfg.max_iterations {
            opt.step(&mut store, &[Some(grad)]);
            let (y, _, g) = eval_objective(store.get(zid), &x0, head, decoder, cfg, &term)?;
            trace.push(y);
            iterations_used = t;
            if cfg.satisfied(y) {
                converged = true;
                break;
            }
            grad = g;
        }
    }

    let z_final = Array1::from_vec(store.get(zid).iter().copied().collect());
    let x_final = if iterations_used == 0 {
        x0.clone()
    } else {
        decode_value(decoder, &z_final)
    };
    let x0_sq = x0.index_axis(Axis(0), 0).to_owned();
    let x_final_sq = x_final.index_axis(Axis(0), 0).to_owned();
    let difference = &x0_sq - &x_final_sq;

    let (source_class, final_class) = match term {
        TermKind::Regression => (None, None),
        TermKind::Multiclass { source, .. } => {
            let probs = predict_probs(head, &z_final);
            let fin = argmax(&probs);
            (Some(source), Some(fin))
        }
    };

    Ok(RationaleResult {
        z0: z0.clone(),
        z_final,
        x0: x0_sq,
        x_final: x_final_sq,
        difference,
        iterations_used,
        converged,
        prediction_trace: trace,
        source_class,
        final_class,
    })
}

fn predict_probs(head: &PredictionHead, z: &Array1<f32>) -> Vec<f64> {
    let codes = z.clone().insert_axis(Axis(0));
    head.predict(&codes).iter().map(|&v| v as f64).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

/// Algorithm for regression heads, starting from an explicit latent.
pub fn optimize_latent_regression(
    z0: &Array1<f32>,
    head: &PredictionHead,
    decoder: &(impl Decoder + ?Sized),
    cfg: &GvrConfig,
) -> Result<RationaleResult> {
    if matches!(head.kind, HeadKind::LinearSoftmax { .. }) {
        return Err(PipelineError::contract(
            "regression rationale requires a regression head",
        ));
    }
    optimize(z0, head, decoder, cfg, TermKind::Regression)
}

/// Algorithm for multiclass heads, starting from an explicit latent. The
/// source class is the argmax prediction at z0.
pub fn optimize_latent_multiclass(
    z0: &Array1<f32>,
    head: &PredictionHead,
    decoder: &(impl Decoder + ?Sized),
    cfg: &GvrConfig,
) -> Result<RationaleResult> {
    let classes = match head.kind {
        HeadKind::LinearSoftmax { classes } => classes,
        _ => {
            return Err(PipelineError::contract(
                "multiclass rationale requires a softmax head",
            ))
        }
    };
    let target = cfg.target_class.ok_or_else(|| {
        PipelineError::config("gvr.target_class", "multiclass rationale needs a target class")
    })?;
    if target >= classes {
        return Err(PipelineError::config(
            "gvr.target_class",
            format!("target class {target} outside [0, {classes})"),
        ));
    }
    let probs = predict_probs(head, z0);
    let source = argmax(&probs);
    if source == target {
        return Err(PipelineError::contract(format!(
            "input is already predicted as the target class {target}"
        )));
    }
    optimize(z0, head, decoder, cfg, TermKind::Multiclass { source, target })
}

/// Full Algorithm 1: encode an image, then descend in latent space.
pub fn generate_rationale_regression(
    image: &Array2<f32>,
    encoder: &DownNet,
    generator: &Generator,
    head: &PredictionHead,
    cfg: &GvrConfig,
) -> Result<RationaleResult> {
    let z0 = encode_single(image, encoder)?;
    optimize_latent_regression(&z0, head, generator, cfg)
}

/// Full Algorithm 2: encode an image, then descend in latent space.
pub fn generate_rationale_multiclass(
    image: &Array2<f32>,
    encoder: &DownNet,
    generator: &Generator,
    head: &PredictionHead,
    cfg: &GvrConfig,
) -> Result<RationaleResult> {
    let z0 = encode_single(image, encoder)?;
    optimize_latent_multiclass(&z0, head, generator, cfg)
}

fn encode_single(image: &Array2<f32>, encoder: &DownNet) -> Result<Array1<f32>> {
    let side = image.nrows();
    if image.ncols() != side || side != encoder.image_side {
        return Err(PipelineError::contract(format!(
            "image is {side}x{cols} but the encoder expects {want}x{want}",
            cols = image.ncols(),
            want = encoder.image_side
        )));
    }
    let mut pixels = ndarray::Array4::zeros((1, 1, side, side));
    pixels
        .index_axis_mut(Axis(0), 0)
        .index_axis_move(Axis(0), 0)
        .assign(image);
    let batch = ImageBatch::new(pixels, vec!["input".into()]);
    let codes = encode(encoder, &batch);
    Ok(codes.row(0).to_owned())
}

/// Generate rationales for a batch of images across `parallelism` threads.
/// Results are positionally aligned with the inputs; per-item failures stay
/// isolated. Each item is a pure deterministic computation, so the output
/// is independent of parallelism and input order.
pub fn batch_generate(
    images: &ImageBatch,
    encoder: &DownNet,
    generator: &Generator,
    head: &PredictionHead,
    cfg: &GvrConfig,
    parallelism: usize,
) -> Vec<Result<RationaleResult>> {
    let n = images.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = parallelism.max(1).min(n);
    let mut slots: Vec<Option<Result<RationaleResult>>> = Vec::new();
    slots.resize_with(n, || None);
    let slots = std::sync::Mutex::new(slots);
    let next = std::sync::atomic::AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let image = images.image(i).to_owned();
                let result = match head.kind {
                    HeadKind::LinearSoftmax { .. } => {
                        generate_rationale_multiclass(&image, encoder, generator, head, cfg)
                    }
                    _ => generate_rationale_regression(&image, encoder, generator, head, cfg),
                };
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });

    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}
