//! Pretraining, fine-tuning under each penalty, cross-validated sweeps, freezing
//! ablation, forgetting measurement and per-unit R² activation analysis.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TransferTaskPair};
use crate::error::{Error, Result};
use crate::fisher::{pearson, FisherDiag};
use crate::net::{LayerSpec, Network, Shape3};
use crate::optim::{evaluate, train, write_records, CropMode, TrainConfig, TrainHistory};
use crate::penalties::{build_channel_groups, PenaltyConfig, PenaltyKind, DEFAULT_EPSILON};

/// Regularizer choice for one fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, alpha: f64, beta: f64) -> Self {
        Self { kind, alpha, beta, epsilon: DEFAULT_EPSILON }
    }
}

/// Check that two networks agree on everything but the head.
pub fn check_same_body(a: &Network, b: &Network) -> Result<()> {
    let body = |n: &Network| n.layers()[..n.layers().len() - 1].to_vec();
    if a.input_shape() != b.input_shape() || body(a) != body(b) {
        return Err(Error::Architecture("networks differ below the classification head".into()));
    }
    Ok(())
}

/// Build the penalty for `net`, whose shared part is pulled toward the shared part of
/// `reference`. Fisher kinds need `fisher`; group kinds use one group per channel.
pub fn build_penalty(
    spec: &PenaltySpec,
    net: &Network,
    reference: &Network,
    fisher: Option<&FisherDiag>,
) -> Result<PenaltyConfig> {
    check_same_body(net, reference)?;
    let mut b = PenaltyConfig::builder(spec.kind, spec.alpha, spec.beta).epsilon(spec.epsilon);
    if spec.kind.needs_reference() {
        b = b.reference(reference.params.shared_values());
    }
    if spec.kind.needs_fisher() {
        let f = fisher.ok_or_else(|| Error::Config(format!("{} needs a Fisher diagonal (sidecar file)", spec.kind)))?;
        b = b.fisher(f.values.clone());
    }
    if spec.kind.needs_groups() {
        b = b.groups(build_channel_groups(net)?);
    }
    b.build(&net.params)
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub net: Network,
    pub history: TrainHistory,
    pub source_test_accuracy: Option<f64>,
}

/// Train `arch` from scratch on the source task (weight decay only, `alpha` on every layer).
pub fn pretrain(
    source: &Dataset,
    source_test: Option<&Dataset>,
    arch: Vec<LayerSpec>,
    weight_decay: f64,
    cfg: &TrainConfig,
) -> Result<Pretrained> {
    if source.is_empty() {
        return Err(Error::InsufficientData("empty source dataset".into()));
    }
    let arch = with_head_classes(arch, source.num_classes)?;
    let net = Network::new(source.shape(), arch, cfg.seed)?;
    let penalty = PenaltyConfig::builder(PenaltyKind::L2, weight_decay, weight_decay).build(&net.params)?;
    let (net, history) = train(&net, source, None, &penalty, cfg)?;
    let source_test_accuracy = source_test.map(|t| evaluate(&net, t, CropMode::Central)).transpose()?;
    Ok(Pretrained { net, history, source_test_accuracy })
}

/// Replace the class count of the final head layer.
pub fn with_head_classes(mut arch: Vec<LayerSpec>, classes: usize) -> Result<Vec<LayerSpec>> {
    match arch.last_mut() {
        Some(LayerSpec::SoftmaxHead { num_classes }) => {
            *num_classes = classes;
            Ok(arch)
        }
        _ => Err(Error::Architecture("architecture must end in a softmax head".into())),
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub net: Network,
    pub history: TrainHistory,
    pub test_accuracy: f64,
}

/// Start from `pretrained` with a fresh head for the training set's classes, train under
/// the penalty, and evaluate once on `test`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_on(
    train_set: &Dataset,
    val: Option<&Dataset>,
    test: &Dataset,
    pretrained: &Network,
    fisher: Option<&FisherDiag>,
    spec: &PenaltySpec,
    cfg: &TrainConfig,
    crop: CropMode,
) -> Result<FinetuneOutcome> {
    let start = pretrained.replace_head(train_set.num_classes, cfg.seed)?;
    let penalty = build_penalty(spec, &start, pretrained, fisher)?;
    let (net, history) = train(&start, train_set, val, &penalty, cfg)?;
    let test_accuracy = evaluate(&net, test, crop)?;
    Ok(FinetuneOutcome { net, history, test_accuracy })
}

/// Fine-tune on `target_train` (early stopping on `target_val` when configured) and
/// report central-crop accuracy on `target_test`.
pub fn finetune(
    task: &TransferTaskPair,
    pretrained: &Network,
    fisher: Option<&FisherDiag>,
    spec: &PenaltySpec,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let val = cfg.early_stop.map(|_| &task.target_val);
    finetune_on(&task.target_train, val, &task.target_test, pretrained, fisher, spec, cfg, CropMode::Central)
}

/// Stratified fold assignment: within each class, a seeded shuffle dealt round-robin.
pub fn stratified_folds(data: &Dataset, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    for (c, mut idx) in data.class_indices().into_iter().enumerate() {
        if idx.len() < folds {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} examples, fewer than {folds} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (i, j) in idx.into_iter().enumerate() {
            out[i % folds].push(j);
        }
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub alpha: f64,
    pub beta: f64,
    pub fold: usize,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub kind: PenaltyKind,
    pub cells: Vec<SweepCell>,
    pub best: (f64, f64),
    pub selection_rule: &'static str,
}

pub const SELECTION_RULE: &str = "max mean fold accuracy; ties prefer larger alpha, then larger beta";

impl SweepResult {
    pub fn surface(&self) -> Vec<SurfaceRow> {
        self.cells
            .iter()
            .flat_map(|c| {
                c.fold_accuracies.iter().enumerate().map(|(fold, &val_acc)| SurfaceRow {
                    alpha: c.alpha,
                    beta: c.beta,
                    fold,
                    val_acc,
                })
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path.as_ref(), &self.surface())
    }

    pub fn best_cell(&self) -> &SweepCell {
        self.cells.iter().find(|c| (c.alpha, c.beta) == self.best).expect("best is a grid cell")
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Grid search by k-fold cross-validation on `target_train ∪ target_val`.
///
/// Fold runs ignore `cfg.early_stop` (the held-out fold is the only validation data).
/// Jobs run on the current rayon pool; results are assembled in grid order.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    task: &TransferTaskPair,
    pretrained: &Network,
    fisher: Option<&FisherDiag>,
    kind: PenaltyKind,
    alphas: &[f64],
    betas: &[f64],
    folds: usize,
    cfg: &TrainConfig,
) -> Result<SweepResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::InvalidArgument("sweep grids must be nonempty".into()));
    }
    let merged = task.target_train.concat(&task.target_val)?;
    let assignment = stratified_folds(&merged, folds, cfg.seed)?;
    let fold_cfg = TrainConfig { early_stop: None, ..cfg.clone() };
    let jobs: Vec<(f64, f64, usize)> = alphas
        .iter()
        .flat_map(|&a| betas.iter().flat_map(move |&b| (0..folds).map(move |f| (a, b, f))))
        .collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(alpha, beta, f)| {
            let held = &assignment[f];
            let rest: Vec<usize> = (0..folds).filter(|&g| g != f).flat_map(|g| assignment[g].iter().copied()).collect();
            let spec = PenaltySpec::new(kind, alpha, beta);
            let out = finetune_on(
                &merged.subset(&rest),
                None,
                &merged.subset(held),
                pretrained,
                fisher,
                &spec,
                &fold_cfg,
                CropMode::Central,
            )?;
            Ok(out.test_accuracy)
        })
        .collect::<Result<_>>()?;
    let cells: Vec<SweepCell> = accs
        .chunks(folds)
        .zip(jobs.chunks(folds))
        .map(|(acc, job)| {
            let (mean, std) = mean_std(acc);
            SweepCell { alpha: job[0].0, beta: job[0].1, fold_accuracies: acc.to_vec(), mean, std }
        })
        .collect();
    let best = cells
        .iter()
        .max_by(|x, y| {
            x.mean.total_cmp(&y.mean).then(x.alpha.total_cmp(&y.alpha)).then(x.beta.total_cmp(&y.beta))
        })
        .map(|c| (c.alpha, c.beta))
        .expect("nonempty grid");
    Ok(SweepResult { kind, cells, best, selection_rule: SELECTION_RULE })
}

/// Retrain on the merged train+val data with the selected cell and test once.
pub fn refit_best(
    task: &TransferTaskPair,
    pretrained: &Network,
    fisher: Option<&FisherDiag>,
    result: &SweepResult,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let merged = task.target_train.concat(&task.target_val)?;
    let spec = PenaltySpec::new(result.kind, result.best.0, result.best.1);
    let cfg = TrainConfig { early_stop: None, ..cfg.clone() };
    finetune_on(&merged, None, &task.target_test, pretrained, fisher, &spec, &cfg, CropMode::Central)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub penalty: String,
    pub k: usize,
    pub seed: u64,
    pub test_acc: f64,
}

/// Accuracy for every (penalty, frozen-layer count, replicate). Each replicate is a task
/// split with its seed; the seed also drives head initialization and batch order.
pub fn freezing_ablation(
    replicates: &[(u64, TransferTaskPair)],
    pretrained: &Network,
    fisher: Option<&FisherDiag>,
    specs: &[PenaltySpec],
    k_values: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let n_body = pretrained.body_slices().len();
    if let Some(&k) = k_values.iter().find(|&&k| k > n_body) {
        return Err(Error::Config(format!("cannot freeze {k} of {n_body} parameterized body layers")));
    }
    let jobs: Vec<(&PenaltySpec, usize, &(u64, TransferTaskPair))> = specs
        .iter()
        .flat_map(|s| k_values.iter().flat_map(move |&k| replicates.iter().map(move |r| (s, k, r))))
        .collect();
    jobs.par_iter()
        .map(|&(spec, k, (seed, task))| {
            let cfg = TrainConfig { frozen_layers: k, seed: *seed, ..cfg.clone() };
            let out = finetune(task, pretrained, fisher, spec, &cfg)?;
            Ok(AblationRow { penalty: spec.kind.name().to_string(), k, seed: *seed, test_acc: out.test_accuracy })
        })
        .collect()
}

/// Source-task accuracy of a fine-tuned network wearing the original source head.
pub fn source_accuracy_after(finetuned: &Network, pretrained: &Network, source_test: &Dataset) -> Result<f64> {
    check_same_body(finetuned, pretrained)?;
    let grafted = finetuned.with_head_from(pretrained)?;
    evaluate(&grafted, source_test, CropMode::Central)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub penalty: String,
    pub seed: u64,
    pub source_acc_before: f64,
    pub source_acc_after: f64,
}

impl ForgettingRow {
    pub fn drop(&self) -> f64 {
        self.source_acc_before - self.source_acc_after
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingReport {
    pub source_acc_pretrained: f64,
    pub rows: Vec<ForgettingRow>,
}

impl ForgettingReport {
    pub fn drops(&self, penalty: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.penalty == penalty).map(ForgettingRow::drop).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path.as_ref(), &self.rows)
    }
}

/// Measure forgetting for each `(penalty name, seed, fine-tuned network)`.
pub fn forgetting(
    finetuned: &[(String, u64, &Network)],
    pretrained: &Network,
    source_test: &Dataset,
) -> Result<ForgettingReport> {
    let before = evaluate(pretrained, source_test, CropMode::Central)?;
    let rows = finetuned
        .iter()
        .map(|(penalty, seed, net)| {
            Ok(ForgettingRow {
                penalty: penalty.clone(),
                seed: *seed,
                source_acc_before: before,
                source_acc_after: source_accuracy_after(net, pretrained, source_test)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ForgettingReport { source_acc_pretrained: before, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R2Row {
    pub layer: usize,
    pub unit: usize,
    /// NaN when undefined.
    pub r2: f64,
    pub defined_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerR2 {
    /// Index of the parameterized layer in the layer list.
    pub layer: usize,
    /// Index of the activation that was compared (the following ReLU when present).
    pub activation: usize,
    pub r2: Vec<Option<f64>>,
}

impl LayerR2 {
    pub fn defined(&self) -> Vec<f64> {
        self.r2.iter().flatten().copied().collect()
    }

    pub fn median(&self) -> Option<f64> {
        median(&self.defined())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct R2Report {
    pub layers: Vec<LayerR2>,
}

impl R2Report {
    pub fn rows(&self) -> Vec<R2Row> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.r2.iter().enumerate().map(|(unit, r)| R2Row {
                    layer: l.layer,
                    unit,
                    r2: r.unwrap_or(f64::NAN),
                    defined_flag: r.is_some(),
                })
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path.as_ref(), &self.rows())
    }
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Activations compared for each shared parameterized layer: its output after the
/// following ReLU when there is one.
fn probe_points(net: &Network) -> Vec<(usize, usize)> {
    net.body_slices()
        .iter()
        .map(|s| {
            let act = if matches!(net.layers().get(s.layer + 1), Some(LayerSpec::Relu)) { s.layer + 1 } else { s.layer };
            (s.layer, act)
        })
        .collect()
}

/// Per-unit squared correlation between pretrained and fine-tuned activations on `probe`.
/// Conv channels pool spatial positions into the sample. Units with zero variance in
/// either network are undefined.
pub fn r2_analysis(pretrained: &Network, finetuned: &Network, probe: &Dataset) -> Result<R2Report> {
    check_same_body(pretrained, finetuned)?;
    if probe.is_empty() {
        return Err(Error::InsufficientData("empty probe set".into()));
    }
    let points = probe_points(pretrained);
    let shapes: Vec<Shape3> = points.iter().map(|&(_, a)| pretrained.output_shape(a)).collect();
    let mut samples: Vec<Vec<(Vec<f64>, Vec<f64>)>> =
        shapes.iter().map(|s| vec![(Vec::new(), Vec::new()); s.c]).collect();
    const CHUNK: usize = 256;
    for start in (0..probe.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(probe.len())).collect();
        let x = probe.images.gather(&idx);
        let fa = pretrained.forward(&x)?;
        let fb = finetuned.forward(&x)?;
        for (p, &(_, act)) in points.iter().enumerate() {
            let s = shapes[p];
            let hw = s.h * s.w;
            let (ta, tb) = (&fa.activations[act], &fb.activations[act]);
            for b in 0..idx.len() {
                for c in 0..s.c {
                    samples[p][c].0.extend_from_slice(&ta.item(b)[c * hw..(c + 1) * hw]);
                    samples[p][c].1.extend_from_slice(&tb.item(b)[c * hw..(c + 1) * hw]);
                }
            }
        }
    }
    let layers = points
        .iter()
        .zip(samples)
        .map(|(&(layer, activation), units)| LayerR2 {
            layer,
            activation,
            r2: units.iter().map(|(a, b)| pearson(a, b).map(|r| (r * r).min(1.0))).collect(),
        })
        .collect();
    Ok(R2Report { layers })
}

/// Result of one fine-tuning replicate in a multi-seed study.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub spec: PenaltySpec,
    pub seed: u64,
    pub per_class_train: usize,
    pub outcome: FinetuneOutcome,
}

/// Fine-tune every `(spec, replicate)` pair; results come back in input order.
pub fn run_replicates(
    replicates: &[(u64, TransferTaskPair)],
    pretrained: &Network,
    fisher: Option<&FisherDiag>,
    specs: &[PenaltySpec],
    cfg: &TrainConfig,
) -> Result<Vec<Replicate>> {
    let jobs: Vec<(&PenaltySpec, &(u64, TransferTaskPair))> =
        specs.iter().flat_map(|s| replicates.iter().map(move |r| (s, r))).collect();
    jobs.par_iter()
        .map(|&(spec, (seed, task))| {
            let cfg = TrainConfig { seed: *seed, ..cfg.clone() };
            let outcome = finetune(task, pretrained, fisher, spec, &cfg)?;
            Ok(Replicate { spec: *spec, seed: *seed, per_class_train: task.per_class_train, outcome })
        })
        .collect()
}

/// `sqrt((s_a² + s_b²) / 2)`
pub fn pooled_std(a: &[f64], b: &[f64]) -> f64 {
    let (_, sa) = mean_std(a);
    let (_, sb) = mean_std(b);
    ((sa * sa + sb * sb) / 2.0).sqrt()
}
