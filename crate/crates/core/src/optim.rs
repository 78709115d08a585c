//! SGD with momentum, step learning-rate decay, penalty handling, layer freezing and
//! early stopping.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::{augment, ten_crops, AugmentOptions, Dataset};
use crate::error::{Error, Result};
use crate::net::{Network, ParamVector};
use crate::penalties::PenaltyConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UpdateMode {
    /// Momentum step on the loss plus the smoothed penalty.
    Smoothed,
    /// Momentum step on the loss and head term, then the penalty's proximal map.
    ProxSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CropMode {
    Central,
    /// Average over four corners and the center of the zero-padded image, plus mirrors.
    TenCrop { pad: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { patience: 10, eval_every: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub total_iters: usize,
    pub decay_at: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub mode: UpdateMode,
    /// The first `frozen_layers` parameterized body layers keep their initial values.
    pub frozen_layers: usize,
    pub early_stop: Option<EarlyStop>,
    pub seed: u64,
    pub augment: AugmentOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            total_iters: 3000,
            decay_at: 2000,
            decay_factor: 0.1,
            batch_size: 64,
            mode: UpdateMode::Smoothed,
            frozen_layers: 0,
            early_stop: None,
            seed: 0,
            augment: AugmentOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.decay_at > self.total_iters {
            return bad(format!("decay_at {} exceeds total_iters {}", self.decay_at, self.total_iters));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay_factor must be positive, got {}", self.decay_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some(es) = self.early_stop {
            if es.eval_every == 0 || es.patience == 0 {
                return bad("early stopping needs positive patience and eval_every".into());
            }
        }
        Ok(())
    }
}

/// Learning rate at iteration `t`.
pub fn lr_schedule(cfg: &TrainConfig, t: usize) -> f64 {
    if t >= cfg.decay_at {
        cfg.base_lr * cfg.decay_factor
    } else {
        cfg.base_lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub loss: f64,
    pub penalty: f64,
    pub objective: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub stop_reason: StopReason,
    /// Iteration whose parameters were returned (the best evaluation under early stopping).
    pub returned_iter: usize,
}

impl TrainHistory {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path.as_ref(), &self.steps)
    }

    pub fn write_eval_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path.as_ref(), &self.evals)
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.val_accuracy).fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }
}

/// Serialize rows to CSV and write them atomically.
pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Generic momentum SGD over a parameter vector.
///
/// `loss` returns the (stochastic) smooth loss and its gradient at iteration `t`;
/// `eval` scores a snapshot for early stopping (higher is better). Entries with
/// `frozen[j]` set are never modified.
pub fn run_sgd(
    init: &ParamVector,
    frozen: &[bool],
    penalty: &PenaltyConfig,
    cfg: &TrainConfig,
    mut loss: impl FnMut(&ParamVector, usize) -> Result<(f64, Vec<f64>)>,
    mut eval: Option<&mut dyn FnMut(&ParamVector) -> Result<f64>>,
) -> Result<(ParamVector, TrainHistory)> {
    cfg.validate()?;
    if frozen.len() != init.len() {
        return Err(Error::Shape(format!("frozen mask has {} entries for {} parameters", frozen.len(), init.len())));
    }
    if cfg.mode == UpdateMode::ProxSplit && !penalty.kind.has_prox() {
        return Err(Error::Penalty(format!("{} cannot be used in PROX_SPLIT mode", penalty.kind)));
    }
    let early = match (cfg.early_stop, eval.is_some()) {
        (Some(_), false) => return Err(Error::Config("early stopping needs a validation set".into())),
        (es, _) => es,
    };
    let mut w = init.clone();
    let mut velocity = vec![0.0; w.len()];
    let mut steps = Vec::with_capacity(cfg.total_iters);
    let mut evals = Vec::new();
    let mut best: Option<(f64, ParamVector, usize)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::Completed;

    for t in 0..cfg.total_iters {
        let lr = lr_schedule(cfg, t);
        let (j, mut grad) = loss(&w, t)?;
        if !j.is_finite() {
            return Err(Error::Divergence(format!("loss became {j} at iteration {t}")));
        }
        let omega = penalty.value(&w)?;
        steps.push(StepRecord { iter: t, loss: j, penalty: omega, objective: j + omega, lr });
        match cfg.mode {
            UpdateMode::Smoothed => penalty.add_gradient(&w, &mut grad)?,
            UpdateMode::ProxSplit => penalty.add_fresh_gradient(&w, &mut grad),
        }
        for j in 0..w.len() {
            if frozen[j] {
                continue;
            }
            velocity[j] = cfg.momentum * velocity[j] - lr * grad[j];
            w.values[j] += velocity[j];
        }
        if cfg.mode == UpdateMode::ProxSplit {
            let before: Vec<(usize, f64)> = (0..w.len()).filter(|&j| frozen[j]).map(|j| (j, w.values[j])).collect();
            penalty.prox_in_place(&mut w, lr)?;
            for (j, v) in before {
                w.values[j] = v;
            }
        }
        if w.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("parameters became non-finite at iteration {t}")));
        }

        let done = t + 1 == cfg.total_iters;
        if let (Some(es), Some(eval)) = (early, eval.as_deref_mut()) {
            if (t + 1) % es.eval_every == 0 || done {
                let acc = eval(&w)?;
                evals.push(EvalRecord { iter: t + 1, val_accuracy: acc });
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, w.clone(), t + 1));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= es.patience && !done {
                        stop_reason = StopReason::EarlyStopped;
                        break;
                    }
                }
            }
        }
    }
    let (w, returned_iter) = match best {
        Some((_, bw, it)) => (bw, it),
        None => (w, cfg.total_iters),
    };
    Ok((w, TrainHistory { steps, evals, stop_reason, returned_iter }))
}

/// Mask of parameters belonging to the first `k` parameterized body layers.
pub fn frozen_mask(net: &Network, k: usize) -> Result<Vec<bool>> {
    let body = net.body_slices();
    if k > body.len() {
        return Err(Error::Config(format!(
            "cannot freeze {k} layers: the network has {} parameterized body layers",
            body.len()
        )));
    }
    let mut mask = vec![false; net.num_params()];
    for s in &body[..k] {
        mask[s.range()].iter_mut().for_each(|m| *m = true);
    }
    Ok(mask)
}

fn draw_batch(order: &mut Vec<usize>, n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if order.len() < size {
        let mut epoch: Vec<usize> = (0..n).collect();
        epoch.shuffle(rng);
        // Unused tail of the previous epoch is dropped.
        *order = epoch;
    }
    order.drain(..size).collect()
}

/// Fine-tune or train `net` on `data` with the given penalty.
///
/// Under early stopping the parameters of the best validation evaluation (central-crop
/// accuracy on `val`) are returned; ties keep the earlier snapshot.
pub fn train(
    net: &Network,
    data: &Dataset,
    val: Option<&Dataset>,
    penalty: &PenaltyConfig,
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if data.shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "training data shape {:?} does not match network input {:?}",
            data.shape(),
            net.input_shape()
        )));
    }
    let frozen = frozen_mask(net, cfg.frozen_layers)?;
    let size = cfg.batch_size.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = Vec::new();
    let mut work = net.clone();
    let loss = |w: &ParamVector, t: usize| {
        let idx = draw_batch(&mut order, data.len(), size, &mut rng);
        let mut x = data.images.gather(&idx);
        if !cfg.augment.is_identity() {
            x = augment(&x, cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), &cfg.augment);
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        work.params.values.copy_from_slice(&w.values);
        work.loss_and_grad_skipping(&x, &labels, cfg.frozen_layers)
    };
    let mut probe = net.clone();
    let mut eval_fn = |w: &ParamVector| {
        probe.params.values.copy_from_slice(&w.values);
        evaluate(&probe, val.expect("checked by run_sgd"), CropMode::Central)
    };
    let eval: Option<&mut dyn FnMut(&ParamVector) -> Result<f64>> =
        if val.is_some() { Some(&mut eval_fn) } else { None };
    let (w, history) = run_sgd(&net.params, &frozen, penalty, cfg, loss, eval)?;
    let mut out = net.clone();
    out.params = w;
    Ok((out, history))
}

/// Class probabilities under a crop mode.
pub fn predict_probs(net: &Network, images: &Tensor, mode: CropMode) -> Result<Tensor> {
    match mode {
        CropMode::Central => net.predict(images),
        CropMode::TenCrop { pad } => {
            let sh = images.shape().to_vec();
            let s = net.input_shape();
            let k = net.num_classes();
            let mut out = Vec::with_capacity(images.batch() * k);
            for i in 0..images.batch() {
                let views: Vec<f64> = ten_crops(images.item(i), s, pad).into_iter().flatten().collect();
                let p = net.predict(&Tensor::new(vec![10, sh[1], sh[2], sh[3]], views)?)?;
                for c in 0..k {
                    out.push((0..10).map(|v| p.item(v)[c]).sum::<f64>() / 10.0);
                }
            }
            Tensor::new(vec![images.batch(), k], out)
        }
    }
}

/// Fraction of examples whose arg-max prediction equals the label.
pub fn evaluate(net: &Network, data: &Dataset, mode: CropMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("cannot evaluate on an empty dataset".into()));
    }
    let probs = predict_probs(net, &data.images, mode)?;
    let correct = (0..data.len()).filter(|&i| argmax(probs.item(i)) == data.labels[i]).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean negative log-likelihood over a whole dataset.
pub fn dataset_loss(net: &Network, data: &Dataset) -> Result<f64> {
    let probs = net.predict(&data.images)?;
    let total: f64 = (0..data.len()).map(|i| -probs.item(i)[data.labels[i]].max(f64::MIN_POSITIVE).ln()).sum();
    Ok(total / data.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
