//! Supervised heads on latent codes and ranking metrics.
//!
//! Heads are deliberately simple — a linear regressor, a 2-layer MLP
//! (256 hidden units by default) and a linear softmax — because the latent
//! space is supposed to carry the signal; the heads just read it out.

use gvr_core::checkpoint::{decode_params_into, encode_params, Checkpoint};
use gvr_core::nn::{lecun_normal, zeros, ParamStore};
use gvr_core::optimizer::Adam;
use gvr_core::rng::seeded_stream;
use gvr_core::tape::{Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};

use crate::data::shuffled_indices;
use crate::error::{PipelineError, Result};

/// The clinical decision threshold (100 ng/L) on the scaled target axis.
pub const BNP_THRESHOLD_SCALED: f64 = 0.46051701859880916; // ln(100)/10

/// Head architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    LinearRegressor,
    MlpRegressor { hidden: usize },
    LinearSoftmax { classes: usize },
}

impl HeadKind {
    pub fn mlp_default() -> Self {
        HeadKind::MlpRegressor { hidden: 256 }
    }

    pub fn tag(&self) -> String {
        match self {
            HeadKind::LinearRegressor => "linear-regressor".into(),
            HeadKind::MlpRegressor { hidden } => format!("mlp-regressor:{hidden}"),
            HeadKind::LinearSoftmax { classes } => format!("linear-softmax:{classes}"),
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        if tag == "linear-regressor" {
            return Ok(HeadKind::LinearRegressor);
        }
        if let Some(h) = tag.strip_prefix("mlp-regressor:") {
            return Ok(HeadKind::MlpRegressor {
                hidden: h
                    .parse()
                    .map_err(|_| PipelineError::contract(format!("bad head tag {tag:?}")))?,
            });
        }
        if let Some(c) = tag.strip_prefix("linear-softmax:") {
            return Ok(HeadKind::LinearSoftmax {
                classes: c
                    .parse()
                    .map_err(|_| PipelineError::contract(format!("bad head tag {tag:?}")))?,
            });
        }
        Err(PipelineError::contract(format!("unknown head tag {tag:?}")))
    }
}

/// Trained prediction head over latent codes.
pub struct PredictionHead {
    pub kind: HeadKind,
    pub latent_dim: usize,
    pub params: ParamStore,
}

impl PredictionHead {
    /// Fresh head with LeCun-normal weights and zero biases.
    pub fn init(kind: HeadKind, latent_dim: usize, seed: u64) -> Self {
        let mut rng = seeded_stream(seed, 0);
        let mut params = ParamStore::new();
        match kind {
            HeadKind::LinearRegressor => {
                params.add("w", lecun_normal(&mut rng, &[latent_dim, 1], latent_dim));
                params.add("b", zeros(&[1, 1]));
            }
            HeadKind::MlpRegressor { hidden } => {
                params.add("w1", lecun_normal(&mut rng, &[latent_dim, hidden], latent_dim));
                params.add("b1", zeros(&[1, hidden]));
                params.add("w2", lecun_normal(&mut rng, &[hidden, 1], hidden));
                params.add("b2", zeros(&[1, 1]));
            }
            HeadKind::LinearSoftmax { classes } => {
                params.add("w", lecun_normal(&mut rng, &[latent_dim, classes], latent_dim));
                params.add("b", zeros(&[1, classes]));
            }
        }
        PredictionHead {
            kind,
            latent_dim,
            params,
        }
    }

    /// Raw forward pass on a tape: regression value [n,1] or logits [n,C].
    /// `leaves` must be the tape bindings of `self.params` in id order.
    pub fn forward(&self, tape: &mut Tape, x: Var, leaves: &[Var]) -> Var {
        match self.kind {
            HeadKind::LinearRegressor | HeadKind::LinearSoftmax { .. } => {
                tape.linear(x, leaves[0], leaves[1])
            }
            HeadKind::MlpRegressor { .. } => {
                let h = tape.linear(x, leaves[0], leaves[1]);
                let a = tape.selu(h);
                tape.linear(a, leaves[2], leaves[3])
            }
        }
    }

    /// Predictions for a batch of codes: regression values [n,1] or class
    /// probabilities [n,C] (rows summing to 1).
    pub fn predict(&self, codes: &Array2<f32>) -> Array2<f32> {
        assert_eq!(
            codes.ncols(),
            self.latent_dim,
            "code dimension {} does not match head input {}",
            codes.ncols(),
            self.latent_dim
        );
        let mut tape = Tape::new();
        let leaves = self.params.bind_frozen(&mut tape);
        let x = tape.leaf(codes.clone().into_dyn());
        let out = self.forward(&mut tape, x, &leaves);
        let out = if matches!(self.kind, HeadKind::LinearSoftmax { .. }) {
            tape.softmax(out)
        } else {
            out
        };
        tape.value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }

    /// Predicted class per row (softmax heads).
    pub fn predict_classes(&self, codes: &Array2<f32>) -> Vec<usize> {
        let probs = self.predict(codes);
        probs
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect()
    }

    pub fn save(&self, path: &std::path::Path, config_hash: [u8; 32]) -> Result<()> {
        let mut ckpt = Checkpoint::new(config_hash);
        ckpt.insert("head_kind", self.kind.tag().into_bytes());
        ckpt.insert("latent_dim", (self.latent_dim as u64).to_le_bytes().to_vec());
        ckpt.insert("params", encode_params(&self.params));
        ckpt.write_atomic(path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, [u8; 32])> {
        let ckpt = Checkpoint::read_from(path)?;
        let tag = String::from_utf8(ckpt.require("head_kind")?.to_vec())
            .map_err(|_| PipelineError::contract("head_kind section is not utf-8"))?;
        let kind = HeadKind::from_tag(&tag)?;
        let dim_bytes = ckpt.require("latent_dim")?;
        let latent_dim = u64::from_le_bytes(
            dim_bytes
                .try_into()
                .map_err(|_| PipelineError::contract("bad latent_dim section"))?,
        ) as usize;
        let mut head = PredictionHead::init(kind, latent_dim, 0);
        decode_params_into(ckpt.require("params")?, &mut head.params)?;
        Ok((head, ckpt.config_hash))
    }
}

/// Training targets; the variant must match the head kind.
#[derive(Debug, Clone)]
pub enum HeadTargets {
    Regression(Vec<f32>),
    Classification(Vec<usize>),
}

/// Head optimization settings (plain ADAM).
#[derive(Debug, Clone)]
pub struct HeadTrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Report of a head-training run.
pub struct HeadTrainReport {
    pub head: PredictionHead,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Fit a head on latent codes with minibatch ADAM; mean squared error for
/// regression, cross-entropy for softmax. Deterministic given the seed.
pub fn train_head(
    codes: &Array2<f32>,
    targets: &HeadTargets,
    kind: HeadKind,
    cfg: &HeadTrainConfig,
) -> Result<HeadTrainReport> {
    let n = codes.nrows();
    if n == 0 {
        return Err(PipelineError::contract("train_head: empty code matrix"));
    }
    let target_len = match targets {
        HeadTargets::Regression(t) => t.len(),
        HeadTargets::Classification(t) => t.len(),
    };
    if target_len != n {
        return Err(PipelineError::contract(format!(
            "train_head: {n} codes but {target_len} targets"
        )));
    }
    match (&kind, targets) {
        (HeadKind::LinearSoftmax { classes }, HeadTargets::Classification(t)) => {
            if let Some(&bad) = t.iter().find(|&&c| c >= *classes) {
                return Err(PipelineError::contract(format!(
                    "class index {bad} outside [0, {classes})"
                )));
            }
        }
        (HeadKind::LinearSoftmax { .. }, HeadTargets::Regression(_)) => {
            return Err(PipelineError::contract(
                "softmax head requires classification targets",
            ));
        }
        (_, HeadTargets::Classification(_)) => {
            return Err(PipelineError::contract(
                "regression head requires regression targets",
            ));
        }
        _ => {}
    }

    let mut head = PredictionHead::init(kind, codes.ncols(), cfg.seed);
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999, &head.params);
    let mut shuffle_rng = seeded_stream(cfg.seed, 1);

    let full_loss = |head: &PredictionHead| -> f64 {
        batch_loss(head, codes, targets, &(0..n).collect::<Vec<_>>()) as f64
    };
    let initial_loss = full_loss(&head);

    let batch = cfg.batch_size.max(1).min(n);
    for _epoch in 0..cfg.epochs {
        let order = shuffled_indices(n, &mut shuffle_rng);
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let leaves = head.params.bind(&mut tape);
            let loss = loss_on_tape(&head, &mut tape, &leaves, codes, targets, chunk);
            let grads = tape.grad(loss, &leaves);
            let grads: Vec<Option<ArrayD<f32>>> = grads
                .into_iter()
                .map(|g| g.map(|v| tape.value(v).clone()))
                .collect();
            opt.step(&mut head.params, &grads);
        }
    }

    let final_loss = full_loss(&head);
    Ok(HeadTrainReport {
        head,
        initial_loss,
        final_loss,
    })
}

fn gather_rows(codes: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    let mut out = Array2::zeros((idx.len(), codes.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&codes.row(i));
    }
    out
}

fn loss_on_tape(
    head: &PredictionHead,
    tape: &mut Tape,
    leaves: &[Var],
    codes: &Array2<f32>,
    targets: &HeadTargets,
    idx: &[usize],
) -> Var {
    let x = tape.leaf(gather_rows(codes, idx).into_dyn());
    let out = head.forward(tape, x, leaves);
    match targets {
        HeadTargets::Regression(t) => {
            let y: Vec<f32> = idx.iter().map(|&i| t[i]).collect();
            let y = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[idx.len(), 1]), y).unwrap());
            tape.mse(out, y)
        }
        HeadTargets::Classification(t) => {
            let classes = match head.kind {
                HeadKind::LinearSoftmax { classes } => classes,
                _ => unreachable!("validated above"),
            };
            let logp = tape.log_softmax(out);
            let mut onehot = ArrayD::zeros(IxDyn(&[idx.len(), classes]));
            for (r, &i) in idx.iter().enumerate() {
                onehot[[r, t[i]]] = 1.0f32;
            }
            let mask = tape.leaf(onehot);
            let picked = tape.mul(logp, mask);
            let s = tape.sum_all(picked);
            let nll = tape.mul_scalar(s, -1.0 / idx.len() as f32);
            nll
        }
    }
}

fn batch_loss(
    head: &PredictionHead,
    codes: &Array2<f32>,
    targets: &HeadTargets,
    idx: &[usize],
) -> f32 {
    let mut tape = Tape::new();
    let leaves = head.params.bind_frozen(&mut tape);
    let loss = loss_on_tape(head, &mut tape, &leaves, codes, targets, idx);
    tape.scalar_value(loss)
}

// ---- ROC / AUC ----

/// ROC curve plus the exact Mann-Whitney AUC.
#[derive(Debug, Clone)]
pub struct RocResult {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// AUC as the pair statistic P(score+ > score-) + 1/2 P(tie), computed with
/// integer counts so it matches brute-force pair enumeration exactly; the
/// curve sweeps a threshold over the distinct scores, predicting positive at
/// score >= threshold.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(PipelineError::contract(format!(
            "roc_auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PipelineError::contract("roc_auc: non-finite score"));
    }
    let pos_total = labels.iter().filter(|&&l| l).count() as u64;
    let neg_total = labels.len() as u64 - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return Err(PipelineError::contract(
            "roc_auc undefined: needs at least one positive and one negative label",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Ascending sweep: for every positive, count negatives strictly below
    // (doubled) plus tied negatives (once) — 2*AUC*P*N as an exact integer.
    let mut doubled: u64 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        let group_neg = (j - i) as u64 - group_pos;
        doubled += group_pos * (2 * negatives_below + group_neg);
        negatives_below += group_neg;
        i = j;
    }
    let auc = doubled as f64 / (2 * pos_total * neg_total) as f64;

    // Curve: descending distinct thresholds; point k = rates after
    // classifying everything with score >= threshold_k as positive.
    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = order.len();
    while i > 0 {
        let mut j = i;
        while j > 0 && scores[order[j - 1]] == scores[order[i - 1]] {
            j -= 1;
        }
        for &k in &order[j..i] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        thresholds.push(scores[order[j]]);
        tpr.push(tp as f64 / pos_total as f64);
        fpr.push(fp as f64 / neg_total as f64);
        i = j;
    }

    Ok(RocResult {
        thresholds,
        tpr,
        fpr,
        auc,
    })
}

/// Binary heart-failure labels from scaled regression targets.
pub fn bnp_labels(scaled_targets: &[f64]) -> Vec<bool> {
    scaled_targets
        .iter()
        .map(|&t| t > BNP_THRESHOLD_SCALED)
        .collect()
}

/// Classification accuracy.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    assert!(!predicted.is_empty());
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / predicted.len() as f64
}
