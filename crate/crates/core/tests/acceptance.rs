//! Acceptance gate. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-4, 9 and 10 are contracts and fail the test. Criteria 5-8 compare
//! regularizers on the desk digit task; they are reported but do not abort the run.

use std::io::Write;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sp_transfer::data::{default_data_dir, load_idx_dir, make_split_transfer_seeded, Dataset};
use sp_transfer::fisher::split_half_correlation;
use sp_transfer::penalties::PenaltyConfig;
use sp_transfer::theory::{analytic_sp_minimizer, mixing_coefficients, run_trials, QuadraticModel};
use sp_transfer::transfer::{
    build_penalty, pooled_std, pretrain, r2_analysis, run_replicates, source_accuracy_after, PenaltySpec,
    Replicate,
};
use sp_transfer::{
    desknet, estimate_fisher_diag, train, FisherDiag, GroupStructure, LayerSpec, Network, ParamVector,
    PenaltyKind, Shape3, Tensor, TrainConfig, TransferTaskPair,
};

// Tolerances.
const FD_REL_TOL: f64 = 1e-6;
const PROX_GRID_TOL: f64 = 1e-6;
const THEORY_TOL: f64 = 1e-8;
const BERNOULLI_TOL: f64 = 1e-10;
const SPLIT_HALF_MIN: f64 = 0.9;
const PIN_REL_TOL: f64 = 1e-3;

// Desk protocol.
const SOURCE: [usize; 5] = [0, 1, 2, 3, 4];
const TARGET: [usize; 5] = [5, 6, 7, 8, 9];
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DOWNSAMPLE: usize = 2;
const VAL_FRACTION: f64 = 0.2;
const FISHER_M: usize = 2000;
const BETA: f64 = 0.01;
const ALPHA_L2: f64 = 1e-3;
const ALPHA_L2SP: f64 = 1e-2;
const ALPHA_FISHER: f64 = 10.0;

fn pretrain_cfg() -> TrainConfig {
    TrainConfig { base_lr: 0.05, total_iters: 1500, decay_at: 1000, ..TrainConfig::default() }
}

fn finetune_cfg() -> TrainConfig {
    TrainConfig { base_lr: 0.01, total_iters: 600, decay_at: 400, ..TrainConfig::default() }
}

struct Gate {
    failures: Vec<usize>,
}

impl Gate {
    fn report(&mut self, item: usize, name: &str, pass: bool, detail: String, started: Instant, hard: bool) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        say(format!("[{verdict}] {item:>2} {name}: {detail} ({:.1}s)", started.elapsed().as_secs_f64()));
        if !pass && hard {
            self.failures.push(item);
        }
    }
}

/// Straight to stdout, past the test harness capture, so the gate shows in plain `cargo test` logs.
fn say(line: String) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn pv(values: Vec<f64>, shared: usize) -> ParamVector {
    let n = values.len();
    ParamVector { values, layout: Vec::new(), shared: (0..n).map(|j| j < shared).collect() }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn penalty_correctness(gate: &mut Gate) {
    let t = Instant::now();
    let (shared, fresh) = (12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_fd = 0.0f64;
    let mut ok = true;
    for _ in 0..200 {
        let w0 = uniform(&mut rng, shared, -2.0, 2.0);
        let fisher = uniform(&mut rng, shared, 0.1, 3.0);
        let (alpha, beta) = (rng.random_range(0.01..5.0), rng.random_range(0.01..5.0));
        // Keep every coordinate at least 1e-2 from the reference, where differences resolve the smoothing.
        let mut values: Vec<f64> = w0
            .iter()
            .map(|r| r + rng.random_range(0.01..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        values.extend(uniform(&mut rng, fresh, -2.0, 2.0));
        let mut w = pv(values, shared);
        let sizes = [1usize, 3, 2, 4, 2];
        let mut groups = Vec::new();
        let mut start = 0;
        for s in sizes {
            groups.push((start..start + s).collect::<Vec<_>>());
            start += s;
        }
        let prov = (0..groups.len()).map(|g| (0, g)).collect();
        let groups = GroupStructure::new(groups, prov).unwrap();
        for kind in PenaltyKind::ALL {
            let cfg = PenaltyConfig::builder(kind, alpha, beta)
                .reference(w0.clone())
                .fisher(fisher.clone())
                .groups(groups.clone())
                .build(&w)
                .unwrap();
            ok &= cfg.value(&w).unwrap() >= 0.0;
            let g = cfg.gradient(&w).unwrap();
            for j in 0..w.len() {
                let h = 1e-4;
                let mut at = |x: f64| {
                    let orig = w.values[j];
                    w.values[j] = orig + x;
                    let v = cfg.surrogate_value(&w).unwrap();
                    w.values[j] = orig;
                    v
                };
                let d1 = (at(h) - at(-h)) / (2.0 * h);
                let d2 = (at(h / 2.0) - at(-h / 2.0)) / h;
                let fd = (4.0 * d2 - d1) / 3.0;
                worst_fd = worst_fd.max((g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-3));
            }
        }
        // Reductions, compared bit for bit.
        let zeros = vec![0.0; shared];
        let l2 = PenaltyConfig::builder(PenaltyKind::L2, alpha, alpha).build(&w).unwrap();
        let l2sp0 = PenaltyConfig::builder(PenaltyKind::L2Sp, alpha, alpha).reference(zeros).build(&w).unwrap();
        ok &= l2.value(&w).unwrap() == l2sp0.value(&w).unwrap() && l2.gradient(&w).unwrap() == l2sp0.gradient(&w).unwrap();
        let sp = PenaltyConfig::builder(PenaltyKind::L2Sp, alpha, beta).reference(w0.clone()).build(&w).unwrap();
        let spf = PenaltyConfig::builder(PenaltyKind::L2SpFisher, alpha, beta)
            .reference(w0.clone())
            .fisher(vec![1.0; shared])
            .build(&w)
            .unwrap();
        ok &= sp.value(&w).unwrap() == spf.value(&w).unwrap() && sp.gradient(&w).unwrap() == spf.gradient(&w).unwrap();
        let singles = GroupStructure::with_weights(
            (0..shared).map(|j| vec![j]).collect(),
            vec![1.0; shared],
            (0..shared).map(|j| (0, j)).collect(),
        )
        .unwrap();
        let gl = PenaltyConfig::builder(PenaltyKind::GlSp, alpha, beta).reference(w0.clone()).groups(singles).build(&w).unwrap();
        let l1 = PenaltyConfig::builder(PenaltyKind::L1Sp, alpha, beta).reference(w0).build(&w).unwrap();
        // Singleton group norms take a different arithmetic path, so gradients agree to rounding.
        let grad_gap = gl.gradient(&w).unwrap().iter().zip(l1.gradient(&w).unwrap()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ok &= gl.value(&w).unwrap() == l1.value(&w).unwrap()
            && gl.surrogate_value(&w).unwrap() == l1.surrogate_value(&w).unwrap()
            && grad_gap <= 1e-12 * alpha.max(1.0);
    }
    let pass = ok && worst_fd < FD_REL_TOL;
    gate.report(1, "penalty correctness", pass, format!("200 cases x 6 kinds, worst FD rel err {worst_fd:.2e}, reductions exact: {ok}"), t, true);
}

fn prox_oracles(gate: &mut Gate) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::NEG_INFINITY;
    let mut identity = true;
    let groups = GroupStructure::new(vec![vec![0, 1, 2]], vec![(0, 0)]).unwrap();
    for _ in 0..100 {
        let w = pv(uniform(&mut rng, 3, -2.0, 2.0), 3);
        let w0 = uniform(&mut rng, 3, -2.0, 2.0);
        let alpha = rng.random_range(0.0..2.0);
        let eta = rng.random_range(0.01..2.0);
        for kind in [PenaltyKind::L1Sp, PenaltyKind::GlSp] {
            let cfg = PenaltyConfig::builder(kind, alpha, 0.0).reference(w0.clone()).groups(groups.clone()).build(&w).unwrap();
            let objective = |u: &ParamVector| {
                let dist: f64 = u.values.iter().zip(&w.values).map(|(a, b)| (a - b).powi(2)).sum();
                dist / (2.0 * eta) + cfg.value(u).unwrap()
            };
            let f_best = objective(&cfg.prox_step(&w, eta).unwrap());
            let steps = 12;
            for i in 0..=steps {
                for j in 0..=steps {
                    for k in 0..=steps {
                        let cand: Vec<f64> = [i, j, k]
                            .iter()
                            .enumerate()
                            .map(|(d, &s)| {
                                let lo = w.values[d].min(w0[d]) - 0.5;
                                let hi = w.values[d].max(w0[d]) + 0.5;
                                lo + (hi - lo) * s as f64 / steps as f64
                            })
                            .collect();
                        worst = worst.max(f_best - objective(&pv(cand, 3)));
                    }
                }
            }
            let zero = PenaltyConfig::builder(kind, 0.0, 0.0).reference(w0.clone()).groups(groups.clone()).build(&w).unwrap();
            identity &= zero.prox_step(&w, eta).unwrap().values == w.values;
        }
    }
    let pass = worst <= PROX_GRID_TOL && identity;
    gate.report(2, "prox oracles", pass, format!("100 instances, max(prox - best grid) {worst:.2e}, zero-strength identity: {identity}"), t, true);
}

fn theory_exactness(gate: &mut Gate) {
    let t = Instant::now();
    let rows = run_trials(100, 50, &[0.1, 1.0, 10.0], 3).unwrap();
    let worst = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    let mut convex = true;
    let mut monotone = true;
    for trial in 0..100u64 {
        let m = QuadraticModel::random(1 + (trial as usize * 13) % 50, 500 + trial).unwrap();
        for e in -3..=3 {
            for (a, b) in mixing_coefficients(&m, 10f64.powi(e)).unwrap() {
                convex &= (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && (a + b - 1.0).abs() < 1e-15;
            }
        }
        let mut prev = f64::INFINITY;
        for e in -4..=4 {
            let w = analytic_sp_minimizer(&m, 10f64.powi(e)).unwrap();
            let gap = w.iter().zip(&m.w0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            monotone &= gap <= prev + 1e-12;
            prev = gap;
        }
    }
    let pass = rows.len() == 100 && worst < THEORY_TOL && convex && monotone;
    gate.report(3, "quadratic closed form", pass, format!("100 models d<=50, max |descent - closed form| {worst:.2e}, convex {convex}, monotone {monotone}"), t, true);
}

fn fisher_checks(gate: &mut Gate, study: &Study) {
    let t = Instant::now();
    let nonneg = study.fisher.values.iter().all(|&v| v >= 0.0);

    let mut bern = Network::with_zero_params(
        Shape3::new(1, 1, 1),
        vec![LayerSpec::FullyConnected { out_dim: 1 }, LayerSpec::SoftmaxHead { num_classes: 2 }],
    )
    .unwrap();
    let off = bern.head_slice().offset;
    bern.params.values[off] = 1.0;
    let one = Dataset::new(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), vec![0], 2, "x=1").unwrap();
    let fb = estimate_fisher_diag(&bern, &one, 1, 0).unwrap();
    let bern_err = fb.values.iter().map(|v| (v - 0.25).abs()).fold(0.0, f64::max);

    // Hidden unit 1 feeds the head with zero weights, so its fan-in has no influence.
    let mut dead = Network::new(
        Shape3::new(1, 1, 3),
        vec![LayerSpec::FullyConnected { out_dim: 2 }, LayerSpec::Relu, LayerSpec::SoftmaxHead { num_classes: 3 }],
        5,
    )
    .unwrap();
    let head = dead.head_slice();
    for k in 0..3 {
        dead.params.values[head.offset + k * 2 + 1] = 0.0;
    }
    let xs = Dataset::new(
        Tensor::new(vec![3, 1, 1, 3], vec![0.4, -0.1, 0.9, -0.5, 0.8, 0.3, 1.0, 1.0, 1.0]).unwrap(),
        vec![0, 1, 2],
        3,
        "probe",
    )
    .unwrap();
    let fd = estimate_fisher_diag(&dead, &xs, 3, 0).unwrap();
    let shared = dead.params.shared_indices();
    let influence_free = dead.params.layout[0]
        .channel_indices(1)
        .iter()
        .all(|j| fd.values[shared.iter().position(|s| s == j).unwrap()] == 0.0);

    let corr = split_half_correlation(&study.pretrained, &study.tasks[0].source, FISHER_M / 2, 0).unwrap();
    let pass = nonneg && bern_err < BERNOULLI_TOL && influence_free && corr > SPLIT_HALF_MIN;
    gate.report(
        4,
        "Fisher estimator",
        pass,
        format!("nonneg {nonneg}, Bernoulli err {bern_err:.1e}, influence-free zero {influence_free}, split-half r {corr:.4} at m={FISHER_M}"),
        t,
        true,
    );
}

struct Study {
    pretrained: Network,
    source_acc: f64,
    fisher: FisherDiag,
    tasks: Vec<TransferTaskPair>,
    runs_30: Vec<Replicate>,
    runs_200: Vec<Replicate>,
}

impl Study {
    fn accs(runs: &[Replicate], kind: PenaltyKind) -> Vec<f64> {
        runs.iter().filter(|r| r.spec.kind == kind).map(|r| r.outcome.test_accuracy).collect()
    }

    fn nets(&self, kind: PenaltyKind) -> Vec<(u64, &Network)> {
        self.runs_30.iter().filter(|r| r.spec.kind == kind).map(|r| (r.seed, &r.outcome.net)).collect()
    }
}

fn specs() -> Vec<PenaltySpec> {
    vec![
        PenaltySpec::new(PenaltyKind::L2, ALPHA_L2, BETA),
        PenaltySpec::new(PenaltyKind::L2Sp, ALPHA_L2SP, BETA),
        PenaltySpec::new(PenaltyKind::L2SpFisher, ALPHA_FISHER, BETA),
    ]
}

fn build_study() -> Study {
    let t = Instant::now();
    let digits = load_idx_dir(default_data_dir()).expect("digit IDX files").downsampled(DOWNSAMPLE).unwrap();
    let split = |per_class: usize, seed: u64| {
        make_split_transfer_seeded(&digits, &SOURCE, &TARGET, per_class, VAL_FRACTION, 0, seed).unwrap().normalized().unwrap()
    };
    let tasks: Vec<_> = SEEDS.iter().map(|&s| split(30, s)).collect();
    let tasks_200: Vec<_> = SEEDS.iter().map(|&s| split(200, s)).collect();
    let pre = pretrain(&tasks[0].source, Some(&tasks[0].source_test), desknet(SOURCE.len()), 1e-4, &pretrain_cfg()).unwrap();
    let fisher = estimate_fisher_diag(&pre.net, &tasks[0].source, FISHER_M, 0).unwrap();
    let reps = |ts: &[TransferTaskPair]| SEEDS.iter().copied().zip(ts.iter().cloned()).collect::<Vec<_>>();
    let runs_30 = run_replicates(&reps(&tasks), &pre.net, Some(&fisher), &specs(), &finetune_cfg()).unwrap();
    let runs_200 = run_replicates(&reps(&tasks_200), &pre.net, Some(&fisher), &specs()[..2], &finetune_cfg()).unwrap();
    say(format!(
        "study: source acc {:.4}, {} fine-tuning runs ({:.1}s)",
        pre.source_test_accuracy.unwrap(),
        runs_30.len() + runs_200.len(),
        t.elapsed().as_secs_f64()
    ));
    Study { source_acc: pre.source_test_accuracy.unwrap(), pretrained: pre.net, fisher, tasks, runs_30, runs_200 }
}

fn target_accuracy_direction(gate: &mut Gate, study: &Study) {
    let t = Instant::now();
    let l2 = Study::accs(&study.runs_30, PenaltyKind::L2);
    let sp = Study::accs(&study.runs_30, PenaltyKind::L2Sp);
    let spf = Study::accs(&study.runs_30, PenaltyKind::L2SpFisher);
    let l2_200 = Study::accs(&study.runs_200, PenaltyKind::L2);
    let sp_200 = Study::accs(&study.runs_200, PenaltyKind::L2Sp);
    let gap30 = mean(&sp) - mean(&l2);
    let gap200 = mean(&sp_200) - mean(&l2_200);
    let sd = pooled_std(&sp_200, &l2_200);
    let pass = mean(&sp) > mean(&l2) && mean(&spf) > mean(&l2) && gap30 >= gap200 - sd;
    gate.report(
        5,
        "target accuracy vs L2",
        pass,
        format!(
            "30/class mean L2 {:.4} L2SP {:.4} L2SP_FISHER {:.4}; gap30 {gap30:+.4} gap200 {gap200:+.4} pooled sd {sd:.4}",
            mean(&l2),
            mean(&sp),
            mean(&spf)
        ),
        t,
        false,
    );
}

fn forgetting_direction(gate: &mut Gate, study: &Study) {
    let t = Instant::now();
    let drops: Vec<(PenaltyKind, Vec<f64>)> = [PenaltyKind::L2, PenaltyKind::L2Sp, PenaltyKind::L2SpFisher]
        .into_iter()
        .map(|kind| {
            let d = study
                .nets(kind)
                .into_iter()
                .map(|(seed, net)| {
                    let src = &study.tasks[seed as usize].source_test;
                    study.source_acc - source_accuracy_after(net, &study.pretrained, src).unwrap()
                })
                .collect();
            (kind, d)
        })
        .collect();
    let (l2, sp, spf) = (&drops[0].1, &drops[1].1, &drops[2].1);
    let pass = mean(l2) > mean(sp) && mean(spf) <= mean(sp) + pooled_std(spf, sp);
    gate.report(
        6,
        "source-task forgetting",
        pass,
        format!("mean drop L2 {:.4} L2SP {:.4} L2SP_FISHER {:.4} (pooled sd {:.4})", mean(l2), mean(sp), mean(spf), pooled_std(spf, sp)),
        t,
        false,
    );
}

fn freezing_direction(gate: &mut Gate, study: &Study) {
    let t = Instant::now();
    let reps: Vec<_> = SEEDS.iter().copied().zip(study.tasks.iter().cloned()).collect();
    let l2 = [PenaltySpec::new(PenaltyKind::L2, ALPHA_L2, BETA)];
    let mut by_k = vec![(0usize, Study::accs(&study.runs_30, PenaltyKind::L2))];
    for k in [1usize, 2] {
        let cfg = TrainConfig { frozen_layers: k, ..finetune_cfg() };
        let runs = run_replicates(&reps, &study.pretrained, None, &l2, &cfg).unwrap();
        by_k.push((k, runs.iter().map(|r| r.outcome.test_accuracy).collect()));
    }
    let sp0 = Study::accs(&study.runs_30, PenaltyKind::L2Sp);
    let (best_k, best) = by_k.iter().max_by(|a, b| mean(&a.1).total_cmp(&mean(&b.1))).unwrap();
    let sd = pooled_std(best, &sp0);
    let pass = mean(best) <= mean(&sp0) + sd;
    let per_k: Vec<String> = by_k.iter().map(|(k, a)| format!("k={k} {:.4}", mean(a))).collect();
    gate.report(
        7,
        "freezing vs L2SP",
        pass,
        format!("L2 {}; best k={best_k}; L2SP k=0 {:.4} (pooled sd {sd:.4})", per_k.join(", "), mean(&sp0)),
        t,
        false,
    );
}

fn r2_direction(gate: &mut Gate, study: &Study) {
    let t = Instant::now();
    let mut in_range = true;
    let per_layer = |kind: PenaltyKind, in_range: &mut bool| -> Vec<(usize, f64)> {
        let mut medians: Vec<(usize, Vec<f64>)> = Vec::new();
        for (seed, net) in study.nets(kind) {
            let report = r2_analysis(&study.pretrained, net, &study.tasks[seed as usize].target_test).unwrap();
            for layer in &report.layers {
                *in_range &= layer.defined().iter().all(|v| (0.0..=1.0).contains(v));
                match medians.iter_mut().find(|(l, _)| *l == layer.layer) {
                    Some((_, m)) => m.push(layer.median().unwrap_or(f64::NAN)),
                    None => medians.push((layer.layer, vec![layer.median().unwrap_or(f64::NAN)])),
                }
            }
        }
        medians.into_iter().map(|(l, m)| (l, mean(&m))).collect()
    };
    let l2 = per_layer(PenaltyKind::L2, &mut in_range);
    let sp = per_layer(PenaltyKind::L2Sp, &mut in_range);
    let ordered = l2.iter().zip(&sp).all(|(a, b)| b.1 >= a.1);
    let own = r2_analysis(&study.pretrained, &study.pretrained, &study.tasks[0].target_test).unwrap();
    let self_one = own.layers.iter().all(|l| l.defined().iter().all(|v| (v - 1.0).abs() < 1e-12));
    let pass = ordered && in_range && self_one;
    let detail: Vec<String> = l2.iter().zip(&sp).map(|(a, b)| format!("layer {} L2 {:.3} L2SP {:.3}", a.0, a.1, b.1)).collect();
    gate.report(8, "activation R2", pass, format!("{}; in [0,1] {in_range}; self R2=1 {self_one}", detail.join(", ")), t, false);
}

fn contracts(gate: &mut Gate, study: &Study) {
    let t = Instant::now();
    let task = &study.tasks[0];
    let start = study.pretrained.replace_head(TARGET.len(), 0).unwrap();
    let short = TrainConfig { total_iters: 100, decay_at: 80, ..finetune_cfg() };

    let frozen_cfg = TrainConfig { frozen_layers: 1, ..short.clone() };
    let p = build_penalty(&PenaltySpec::new(PenaltyKind::L2Sp, ALPHA_L2SP, BETA), &start, &study.pretrained, None).unwrap();
    let (tuned, _) = train(&start, &task.target_train, None, &p, &frozen_cfg).unwrap();
    let first = start.body_slices()[0].range();
    let frozen_ok = tuned.params.values[first.clone()] == start.params.values[first.clone()]
        && tuned.params.values[start.body_slices()[1].range()] != start.params.values[start.body_slices()[1].range()];

    // Start away from w⁰ so the pull is exercised; lr·α stays inside the stable range.
    let mut moved = start.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for j in moved.params.shared_indices() {
        moved.params.values[j] += rng.random_range(-0.05..0.05);
    }
    let pin = build_penalty(&PenaltySpec::new(PenaltyKind::L2Sp, 1e8, BETA), &moved, &study.pretrained, None).unwrap();
    let pin_cfg = TrainConfig { base_lr: 1e-9, total_iters: 300, decay_at: 300, ..short.clone() };
    let (pinned, _) = train(&moved, &task.target_train, None, &pin, &pin_cfg).unwrap();
    let w0 = study.pretrained.params.shared_values();
    let ws = pinned.params.shared_values();
    let rel = ws.iter().zip(&w0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        / w0.iter().map(|v| v * v).sum::<f64>().sqrt();

    let zero = build_penalty(&PenaltySpec::new(PenaltyKind::L2Sp, 0.0, 0.0), &start, &study.pretrained, None).unwrap();
    let (a, _) = train(&start, &task.target_train, None, &zero, &short).unwrap();
    let (b, _) = train(&start, &task.target_train, None, &PenaltyConfig::none(&start.params), &short).unwrap();
    let zero_ok = a.params == b.params;

    let pass = frozen_ok && rel < PIN_REL_TOL && zero_ok;
    gate.report(9, "freezing and limit contracts", pass, format!("frozen bit-identical {frozen_ok}, alpha=1e8 rel dist {rel:.2e}, zero penalty bit-exact {zero_ok}"), t, true);
}

fn determinism(gate: &mut Gate, study: &Study) {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    // Library rerun of one fine-tuning replicate.
    let rep = vec![(SEEDS[1], study.tasks[1].clone())];
    let spec = [PenaltySpec::new(PenaltyKind::L2SpFisher, ALPHA_FISHER, BETA)];
    let again = run_replicates(&rep, &study.pretrained, Some(&study.fisher), &spec, &finetune_cfg()).unwrap();
    let original = study.runs_30.iter().find(|r| r.seed == SEEDS[1] && r.spec.kind == PenaltyKind::L2SpFisher).unwrap();
    original.outcome.history.write_csv(dir.path().join("a.csv")).unwrap();
    again[0].outcome.history.write_csv(dir.path().join("b.csv")).unwrap();
    let lib_ok = std::fs::read(dir.path().join("a.csv")).unwrap() == std::fs::read(dir.path().join("b.csv")).unwrap();

    // Command rerun with a different worker count.
    let run = |out: &str, jobs: &str| {
        let out = dir.path().join(out);
        let status = Command::new(env!("CARGO_BIN_EXE_spft"))
            .args(["theory", "--out", out.to_str().unwrap(), "--jobs", jobs])
            .output()
            .unwrap();
        assert!(status.status.success());
        std::fs::read(out.join("theory.csv")).unwrap()
    };
    let cli_ok = run("t1", "1") == run("t2", "2");
    gate.report(10, "determinism", lib_ok && cli_ok, format!("fine-tuning history identical {lib_ok}, theory command identical {cli_ok}"), t, true);
}

#[test]
fn acceptance() {
    let total = Instant::now();
    let mut gate = Gate { failures: Vec::new() };
    penalty_correctness(&mut gate);
    prox_oracles(&mut gate);
    theory_exactness(&mut gate);
    let study = build_study();
    fisher_checks(&mut gate, &study);
    target_accuracy_direction(&mut gate, &study);
    forgetting_direction(&mut gate, &study);
    freezing_direction(&mut gate, &study);
    r2_direction(&mut gate, &study);
    contracts(&mut gate, &study);
    determinism(&mut gate, &study);
    say(format!("acceptance finished in {:.1}s", total.elapsed().as_secs_f64()));
    assert!(gate.failures.is_empty(), "contract criteria failed: {:?}", gate.failures);
}
