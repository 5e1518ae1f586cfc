//! Classical per-pixel attribution baselines: saliency, integrated
//! gradients, and occlusion sensitivity. All three explain a scalar-valued
//! scorer, usually the encoder composed with a prediction head.

use gvr_core::tape::{Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{PipelineError, Result};
use crate::gan::DownNet;
use crate::predictors::{HeadKind, PredictionHead};

/// A differentiable scalar score over an image batch.
pub trait Scorer: Sync {
    /// x [N, 1, H, W] -> scores [N, 1] on the tape.
    fn score(&self, tape: &mut Tape, x: Var) -> Var;
}

/// Which head output the composite scorer exposes.
#[derive(Debug, Clone, Copy)]
pub enum ScoreTarget {
    /// The regression output.
    Value,
    /// The logit of one class of a softmax head.
    ClassLogit(usize),
}

/// Encoder followed by a prediction head; the standard end-to-end scorer.
pub struct CompositeScorer<'a> {
    pub encoder: &'a DownNet,
    pub head: &'a PredictionHead,
    pub target: ScoreTarget,
}

impl Scorer for CompositeScorer<'_> {
    fn score(&self, tape: &mut Tape, x: Var) -> Var {
        let enc_leaves = self.encoder.params.bind_frozen(tape);
        let codes = self.encoder.forward(tape, x, &enc_leaves);
        let head_leaves = self.head.params.bind_frozen(tape);
        let out = self.head.forward(tape, codes, &head_leaves);
        match self.target {
            ScoreTarget::Value => {
                assert!(
                    !matches!(self.head.kind, HeadKind::LinearSoftmax { .. }),
                    "value target needs a regression head"
                );
                out
            }
            ScoreTarget::ClassLogit(c) => {
                let shape = tape.value(out).shape().to_vec();
                let classes = shape[1];
                assert!(c < classes, "class {c} outside [0, {classes})");
                let mut pick = ArrayD::zeros(IxDyn(&[1, classes]));
                pick[[0, c]] = 1.0f32;
                let mask = tape.leaf(pick);
                let mask_b = tape.broadcast(mask, &shape);
                let masked = tape.mul(out, mask_b);
                tape.sum_to(masked, &[shape[0], 1])
            }
        }
    }
}

/// A bare critic-shaped network with a single output is itself a scorer.
impl Scorer for DownNet {
    fn score(&self, tape: &mut Tape, x: Var) -> Var {
        assert_eq!(self.out_dim, 1, "scorer networks must be scalar-valued");
        let leaves = self.params.bind_frozen(tape);
        self.forward(tape, x, &leaves)
    }
}

fn image_to_nchw(image: &Array2<f32>) -> Result<ArrayD<f32>> {
    let (h, w) = image.dim();
    if h != w {
        return Err(PipelineError::contract(format!(
            "attribution expects square images, got {h}x{w}"
        )));
    }
    Ok(ArrayD::from_shape_vec(
        IxDyn(&[1, 1, h, w]),
        image.iter().copied().collect(),
    )
    .unwrap())
}

/// The scorer value at one image.
pub fn score_image<S: Scorer + ?Sized>(scorer: &S, image: &Array2<f32>) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(image_to_nchw(image)?);
    let s = scorer.score(&mut tape, x);
    Ok(tape.value(s).iter().map(|&v| v as f64).sum())
}

/// Signed input gradient of the score at one image.
fn input_gradient<S: Scorer + ?Sized>(scorer: &S, image: &ArrayD<f32>) -> Result<Array2<f32>> {
    let mut tape = Tape::new();
    let x = tape.leaf_grad(image.clone());
    let s_batch = scorer.score(&mut tape, x);
    let s = tape.sum_all(s_batch);
    let grad = tape
        .grad(s, &[x])[0]
        .ok_or_else(|| PipelineError::contract("score does not depend on the input"))?;
    let g = tape.value(grad);
    let side = image.shape()[2];
    Ok(Array2::from_shape_vec((side, side), g.iter().copied().collect()).unwrap())
}

/// Absolute input gradient |dF/dx| per pixel.
pub fn saliency<S: Scorer + ?Sized>(scorer: &S, image: &Array2<f32>) -> Result<Array2<f32>> {
    let x = image_to_nchw(image)?;
    Ok(input_gradient(scorer, &x)?.mapv(f32::abs))
}

/// Integrated gradients along the straight path from `baseline` to `image`
/// with a right-endpoint Riemann sum over `steps` points. The default
/// baseline is the all-black image (-1 in tanh range).
pub fn integrated_gradients<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Array2<f32>,
    baseline: Option<&Array2<f32>>,
    steps: usize,
) -> Result<Array2<f32>> {
    if steps == 0 {
        return Err(PipelineError::contract("integrated gradients need at least one step"));
    }
    let default_baseline;
    let base = match baseline {
        Some(b) => {
            if b.dim() != image.dim() {
                return Err(PipelineError::contract(format!(
                    "baseline shape {:?} does not match image shape {:?}",
                    b.dim(),
                    image.dim()
                )));
            }
            b
        }
        None => {
            default_baseline = Array2::from_elem(image.dim(), -1.0f32);
            &default_baseline
        }
    };

    let diff = image - base;
    let mut grad_sum = Array2::<f64>::zeros(image.dim());
    for k in 1..=steps {
        let alpha = k as f32 / steps as f32;
        let point = base + &(&diff * alpha);
        let g = input_gradient(scorer, &image_to_nchw(&point)?)?;
        grad_sum.zip_mut_with(&g, |acc, &v| *acc += v as f64);
    }
    let scale = 1.0 / steps as f64;
    let mut out = Array2::<f32>::zeros(image.dim());
    ndarray::Zip::from(&mut out)
        .and(&diff)
        .and(&grad_sum)
        .for_each(|o, &d, &gs| *o = d * (gs * scale) as f32);
    Ok(out)
}

/// Sum of an attribution map and the score difference it should explain;
/// the completeness gap of integrated gradients is |sum - delta|.
pub fn completeness<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Array2<f32>,
    baseline: Option<&Array2<f32>>,
    attribution: &Array2<f32>,
) -> Result<(f64, f64)> {
    let default_baseline;
    let base = match baseline {
        Some(b) => b,
        None => {
            default_baseline = Array2::from_elem(image.dim(), -1.0f32);
            &default_baseline
        }
    };
    let total: f64 = attribution.iter().map(|&v| v as f64).sum();
    let delta = score_image(scorer, image)? - score_image(scorer, base)?;
    Ok((total, delta))
}

/// Score drop F(x) - F(x with a window filled by `fill`), attributed to the
/// covered pixels and averaged where windows overlap. The stride defaults
/// to the window size (a non-overlapping tiling); a final clamped position
/// guarantees the last rows and columns are always covered.
pub fn occlusion_sensitivity<S: Scorer + ?Sized>(
    scorer: &S,
    image: &Array2<f32>,
    window: usize,
    stride: Option<usize>,
    fill: f32,
) -> Result<Array2<f32>> {
    let side = image.nrows();
    if image.ncols() != side {
        return Err(PipelineError::contract(format!(
            "attribution expects square images, got {side}x{}",
            image.ncols()
        )));
    }
    if window == 0 {
        return Err(PipelineError::contract("occlusion window must be positive"));
    }
    if window > side {
        return Err(PipelineError::contract(format!(
            "occlusion window {window} exceeds the {side}-pixel image"
        )));
    }
    let stride = stride.unwrap_or(window);
    if stride == 0 {
        return Err(PipelineError::contract("occlusion stride must be positive"));
    }

    let positions = window_positions(side, window, stride);
    let base_score = score_image(scorer, image)?;

    let mut sums = Array2::<f64>::zeros(image.dim());
    let mut counts = Array2::<f64>::zeros(image.dim());
    for &r in &positions {
        for &c in &positions {
            let mut occluded = image.clone();
            occluded
                .slice_mut(ndarray::s![r..r + window, c..c + window])
                .fill(fill);
            let delta = base_score - score_image(scorer, &occluded)?;
            for i in r..r + window {
                for j in c..c + window {
                    sums[[i, j]] += delta;
                    counts[[i, j]] += 1.0;
                }
            }
        }
    }
    Ok(Array2::from_shape_fn(image.dim(), |(i, j)| {
        (sums[[i, j]] / counts[[i, j]]) as f32
    }))
}

/// Window start offsets along one axis: every stride, plus a clamped final
/// position so the last pixels are covered when stride does not divide.
fn window_positions(side: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..=side - window).step_by(stride).collect();
    let last = side - window;
    if *positions.last().unwrap() != last {
        positions.push(last);
    }
    positions
}
