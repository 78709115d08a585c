//! The `spft` command line: experiment configs, subcommands and run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{fisher_sidecar_path, load_checkpoint, save_checkpoint, write_atomic};
use crate::data::{
    default_data_dir, generate_synthetic_pair, load_idx_dir, make_split_transfer_seeded, SyntheticOptions,
    TransferTaskPair,
};
use crate::error::{Error, Result};
use crate::fisher::{default_sample_size, estimate_fisher_diag, FisherDiag};
use crate::net::{desknet, LayerSpec, Network, Shape3};
use crate::optim::{write_records, TrainConfig};
use crate::penalties::PenaltyKind;
use crate::theory::{run_trials, write_trials_csv};
use crate::transfer::{
    forgetting, freezing_ablation, pretrain, r2_analysis, refit_best, run_replicates, sweep, PenaltySpec,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    /// IDX digit files split by class into a source and a target task.
    Digits {
        #[serde(default)]
        data_dir: Option<PathBuf>,
        #[serde(default = "default_downsample")]
        downsample: usize,
        source_classes: Vec<usize>,
        target_classes: Vec<usize>,
        per_class_train: usize,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        /// Seed of the source holdout split; replicate seeds vary only the target split.
        #[serde(default)]
        source_seed: u64,
    },
    /// Gaussian-blob tasks, generated once from `seed`; replicate seeds vary training only.
    Synthetic {
        dims: [usize; 3],
        source_k: usize,
        target_k: usize,
        shift: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        options: SyntheticOptions,
    },
}

fn default_downsample() -> usize {
    2
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    pub train: TrainConfig,
    pub weight_decay: f64,
    /// Fisher sample size; defaults to the source size capped at 5000.
    pub fisher_samples: Option<usize>,
    pub fisher_seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            train: TrainConfig { base_lr: 0.05, total_iters: 1500, decay_at: 1000, ..TrainConfig::default() },
            weight_decay: 1e-4,
            fisher_samples: None,
            fisher_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub kind: PenaltyKind,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySpec {
    pub trials: usize,
    pub max_d: usize,
    /// Trial `i` uses `alphas[i % len]`.
    pub alphas: Vec<f64>,
    pub seed: u64,
}

impl Default for TheorySpec {
    fn default() -> Self {
        Self { trials: 100, max_d: 50, alphas: vec![0.1, 1.0, 10.0], seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    /// Layer list; the head's class count is set from the task. Defaults to DeskNet.
    #[serde(default)]
    pub arch: Option<Vec<LayerSpec>>,
    #[serde(default)]
    pub pretrain: PretrainSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub penalties: Vec<PenaltySpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_k_values")]
    pub freeze_k: Vec<usize>,
    #[serde(default)]
    pub theory: TheorySpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Defaults to `<output_dir>/pretrained.spft`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_k_values() -> Vec<usize> {
    vec![0, 1, 2]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("spft-out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task: None,
            arch: None,
            pretrain: PretrainSpec::default(),
            train: TrainConfig::default(),
            penalties: Vec::new(),
            sweep: None,
            freeze_k: default_k_values(),
            theory: TheorySpec::default(),
            seeds: default_seeds(),
            checkpoint: None,
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.pretrain.train.validate().map_err(|e| Error::Config(format!("pretrain.train: {e}")))?;
        for (i, p) in self.penalties.iter().enumerate() {
            if !(p.alpha >= 0.0 && p.beta >= 0.0 && p.epsilon > 0.0) {
                return bad(format!("penalties[{i}]: alpha, beta must be ≥ 0 and epsilon > 0"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.alphas.is_empty() || s.betas.is_empty() {
                return bad("sweep: alphas and betas must be nonempty".into());
            }
        }
        if let Some(TaskSpec::Digits { downsample, per_class_train, .. }) = &self.task {
            if *downsample == 0 || *per_class_train == 0 {
                return bad("task: downsample and per_class_train must be positive".into());
            }
        }
        Ok(())
    }

    fn task(&self) -> Result<&TaskSpec> {
        self.task.as_ref().ok_or_else(|| Error::Config("task: missing (required by this command)".into()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("pretrained.spft"))
    }

    fn arch(&self) -> Vec<LayerSpec> {
        self.arch.clone().unwrap_or_else(|| desknet(2))
    }

    fn penalties(&self) -> Result<&[PenaltySpec]> {
        if self.penalties.is_empty() {
            return Err(Error::Config("penalties: at least one penalty is required by this command".into()));
        }
        Ok(&self.penalties)
    }

    fn needs_fisher(&self) -> bool {
        self.penalties.iter().any(|p| p.kind.needs_fisher()) || self.sweep.as_ref().is_some_and(|s| s.kind.needs_fisher())
    }
}

/// Normalized task for one replicate seed.
pub fn load_task(spec: &TaskSpec, seed: u64) -> Result<TransferTaskPair> {
    let task = match spec {
        TaskSpec::Digits {
            data_dir,
            downsample,
            source_classes,
            target_classes,
            per_class_train,
            val_fraction,
            source_seed,
        } => {
            let dir = data_dir.clone().unwrap_or_else(default_data_dir);
            if !dir.is_dir() {
                let origin = if data_dir.is_some() { "task.data_dir" } else { "task.data_dir (unset; SPFT_DATA_DIR fallback)" };
                return Err(Error::Config(format!("{origin}: directory {} does not exist", dir.display())));
            }
            let mut data = load_idx_dir(&dir)?;
            if *downsample > 1 {
                data = data.downsampled(*downsample)?;
            }
            make_split_transfer_seeded(
                &data,
                source_classes,
                target_classes,
                *per_class_train,
                *val_fraction,
                *source_seed,
                seed,
            )?
        }
        TaskSpec::Synthetic { dims, source_k, target_k, shift, seed: gen_seed, options } => {
            generate_synthetic_pair(*gen_seed, Shape3::new(dims[0], dims[1], dims[2]), *source_k, *target_k, *shift, *options)?
        }
    };
    task.normalized()
}

#[derive(Debug, Parser)]
#[command(name = "spft", version, about = "Starting-point regularized fine-tuning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run a single replicate seed (overrides `seeds`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for independent jobs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model; `--fisher` also writes the Fisher sidecar.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        fisher: bool,
    },
    /// Fine-tune with every configured penalty and seed.
    Finetune(CommonArgs),
    /// Cross-validated grid search over alpha and beta.
    Sweep(CommonArgs),
    /// Accuracy with the first k parameterized layers frozen.
    AblateFreeze(CommonArgs),
    /// Source accuracy after fine-tuning, using the original source head.
    Forgetting(CommonArgs),
    /// Per-unit R² between pretrained and fine-tuned activations.
    R2(CommonArgs),
    /// Closed-form quadratic minimizer against gradient descent on random models.
    Theory(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Pretrain { common, .. } => common,
            Command::Finetune(c)
            | Command::Sweep(c)
            | Command::AblateFreeze(c)
            | Command::Forgetting(c)
            | Command::R2(c)
            | Command::Theory(c) => c,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Sweep(_) => "sweep",
            Command::AblateFreeze(_) => "ablate-freeze",
            Command::Forgetting(_) => "forgetting",
            Command::R2(_) => "r2",
            Command::Theory(_) => "theory",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub schema_version: u32,
    pub crate_version: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub timestamp_unix: u64,
    pub outputs: Vec<String>,
}

/// Collects output files of one command run.
struct Run {
    out: PathBuf,
    outputs: Vec<String>,
}

impl Run {
    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        write_records(&self.out.join(name), rows)?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

/// Resolve the config for a command: file (or defaults for `theory`) plus flag overrides.
pub fn resolve_config(command: &Command) -> Result<ExperimentConfig> {
    let common = command.common();
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if matches!(command, Command::Theory(_)) => ExperimentConfig::default(),
        None => return Err(Error::Config("--config is required for this command".into())),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if common.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    Ok(cfg)
}

/// Execute a parsed command line. Returns the output directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(&cli.command)?;
    let jobs = cli.command.common().jobs;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut run = Run { out: cfg.output_dir.clone(), outputs: Vec::new() };
    pool.install(|| execute(&cli.command, &cfg, &mut run))?;

    let config_json = cfg.to_json();
    write_atomic(&run.out.join("config.json"), config_json.as_bytes())?;
    let manifest = Manifest {
        command: cli.command.name().to_string(),
        schema_version: SCHEMA_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: hex::encode(Sha256::digest(config_json.as_bytes())),
        seeds: cfg.seeds.clone(),
        jobs,
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        outputs: run.outputs.clone(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&run.out.join(format!("manifest-{}.json", manifest.command)), manifest_json.as_bytes())?;
    Ok(run.out)
}

fn load_pretrained(cfg: &ExperimentConfig) -> Result<(Network, Option<FisherDiag>)> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(Error::Config(format!(
            "checkpoint: {} not found (run `spft pretrain` first)",
            path.display()
        )));
    }
    let net = load_checkpoint(&path)?;
    let fisher = if cfg.needs_fisher() {
        let side = fisher_sidecar_path(&path);
        if !side.is_file() {
            return Err(Error::Config(format!(
                "Fisher sidecar {} not found (run `spft pretrain --fisher`)",
                side.display()
            )));
        }
        Some(FisherDiag::load(&side, &net)?)
    } else {
        None
    };
    Ok((net, fisher))
}

fn replicates(cfg: &ExperimentConfig) -> Result<Vec<(u64, TransferTaskPair)>> {
    let spec = cfg.task()?;
    cfg.seeds.iter().map(|&s| Ok((s, load_task(spec, s)?))).collect()
}

#[derive(Debug, Clone, Serialize)]
struct PretrainRow {
    source_train_size: usize,
    source_test_size: usize,
    source_test_acc: f64,
    fisher_samples: usize,
}

#[derive(Debug, Clone, Serialize)]
struct FinetuneRow {
    penalty: String,
    alpha: f64,
    beta: f64,
    seed: u64,
    per_class_train: usize,
    test_acc: f64,
    best_val_acc: f64,
    returned_iter: usize,
}

#[derive(Debug, Clone, Serialize)]
struct SweepBestRow {
    penalty: String,
    alpha: f64,
    beta: f64,
    mean_val_acc: f64,
    std_val_acc: f64,
    test_acc: f64,
}

#[derive(Debug, Clone, Serialize)]
struct R2SummaryRow {
    penalty: String,
    seed: u64,
    layer: usize,
    units: usize,
    defined_units: usize,
    median_r2: f64,
}

fn execute(command: &Command, cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    match command {
        Command::Pretrain { fisher, .. } => {
            let task = load_task(cfg.task()?, cfg.pretrain.train.seed)?;
            let pre = pretrain(&task.source, Some(&task.source_test), cfg.arch(), cfg.pretrain.weight_decay, &cfg.pretrain.train)?;
            let path = cfg.checkpoint_path();
            save_checkpoint(&pre.net, &path)?;
            run.outputs.push(path.display().to_string());
            let mut m = 0;
            if *fisher {
                m = cfg.pretrain.fisher_samples.unwrap_or_else(|| default_sample_size(&task.source));
                let f = estimate_fisher_diag(&pre.net, &task.source, m, cfg.pretrain.fisher_seed)?;
                let side = fisher_sidecar_path(&path);
                f.save(&side)?;
                run.outputs.push(side.display().to_string());
            }
            run.csv("pretrain_history.csv", &pre.history.steps)?;
            run.csv(
                "pretrain.csv",
                &[PretrainRow {
                    source_train_size: task.source.len(),
                    source_test_size: task.source_test.len(),
                    source_test_acc: pre.source_test_accuracy.unwrap_or(f64::NAN),
                    fisher_samples: m,
                }],
            )
        }
        Command::Finetune(_) => {
            let (net, fisher) = load_pretrained(cfg)?;
            let reps = replicates(cfg)?;
            let results = run_replicates(&reps, &net, fisher.as_ref(), cfg.penalties()?, &cfg.train)?;
            let mut rows = Vec::new();
            for r in &results {
                let stem = format!("history_{}_seed{}", r.spec.kind.name(), r.seed);
                run.csv(&format!("{stem}.csv"), &r.outcome.history.steps)?;
                run.csv(&format!("{stem}_eval.csv"), &r.outcome.history.evals)?;
                rows.push(FinetuneRow {
                    penalty: r.spec.kind.name().to_string(),
                    alpha: r.spec.alpha,
                    beta: r.spec.beta,
                    seed: r.seed,
                    per_class_train: r.per_class_train,
                    test_acc: r.outcome.test_accuracy,
                    best_val_acc: r.outcome.history.best_val_accuracy().unwrap_or(f64::NAN),
                    returned_iter: r.outcome.history.returned_iter,
                });
            }
            run.csv("finetune.csv", &rows)
        }
        Command::Sweep(_) => {
            let spec = cfg.sweep.as_ref().ok_or_else(|| Error::Config("sweep: missing".into()))?;
            let (net, fisher) = load_pretrained(cfg)?;
            let seed = cfg.seeds[0];
            let task = load_task(cfg.task()?, seed)?;
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let result = sweep(&task, &net, fisher.as_ref(), spec.kind, &spec.alphas, &spec.betas, spec.folds, &train_cfg)?;
            run.csv(&format!("sweep_{}.csv", spec.kind.name()), &result.surface())?;
            let refit = refit_best(&task, &net, fisher.as_ref(), &result, &train_cfg)?;
            let best = result.best_cell();
            run.csv(
                "sweep_best.csv",
                &[SweepBestRow {
                    penalty: spec.kind.name().to_string(),
                    alpha: best.alpha,
                    beta: best.beta,
                    mean_val_acc: best.mean,
                    std_val_acc: best.std,
                    test_acc: refit.test_accuracy,
                }],
            )
        }
        Command::AblateFreeze(_) => {
            let (net, fisher) = load_pretrained(cfg)?;
            let reps = replicates(cfg)?;
            let rows = freezing_ablation(&reps, &net, fisher.as_ref(), cfg.penalties()?, &cfg.freeze_k, &cfg.train)?;
            run.csv("ablation.csv", &rows)
        }
        Command::Forgetting(_) => {
            let (net, fisher) = load_pretrained(cfg)?;
            let reps = replicates(cfg)?;
            let results = run_replicates(&reps, &net, fisher.as_ref(), cfg.penalties()?, &cfg.train)?;
            let tuned: Vec<(String, u64, &Network)> =
                results.iter().map(|r| (r.spec.kind.name().to_string(), r.seed, &r.outcome.net)).collect();
            let report = forgetting(&tuned, &net, &reps[0].1.source_test)?;
            run.csv("forgetting.csv", &report.rows)
        }
        Command::R2(_) => {
            let (net, fisher) = load_pretrained(cfg)?;
            let reps = replicates(cfg)?;
            let results = run_replicates(&reps, &net, fisher.as_ref(), cfg.penalties()?, &cfg.train)?;
            let mut summary = Vec::new();
            for r in &results {
                let probe = &reps.iter().find(|(s, _)| *s == r.seed).expect("seed has a task").1.target_test;
                let report = r2_analysis(&net, &r.outcome.net, probe)?;
                run.csv(&format!("r2_{}_seed{}.csv", r.spec.kind.name(), r.seed), &report.rows())?;
                for l in &report.layers {
                    summary.push(R2SummaryRow {
                        penalty: r.spec.kind.name().to_string(),
                        seed: r.seed,
                        layer: l.layer,
                        units: l.r2.len(),
                        defined_units: l.defined().len(),
                        median_r2: l.median().unwrap_or(f64::NAN),
                    });
                }
            }
            run.csv("r2_summary.csv", &summary)
        }
        Command::Theory(_) => {
            let t = &cfg.theory;
            let rows = run_trials(t.trials, t.max_d, &t.alphas, t.seed)?;
            let name = "theory.csv";
            write_trials_csv(&rows, run.out.join(name))?;
            run.outputs.push(name.to_string());
            Ok(())
        }
    }
}

/// Parse arguments, run, and map errors to a one-line diagnostic and exit code 1.
pub fn main_from_args() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            println!("{} finished; outputs in {}", cli.command.name(), out.display());
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
