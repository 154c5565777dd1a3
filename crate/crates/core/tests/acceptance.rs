//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (visible without `--nocapture`) before asserting.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use optrf::experiments::{
    circle_points, group_stats, log_dof_fit, margin_violations, reference_sphere_task, sample_labeled,
    spectral_decay_fit, sweep_error_vs_m, sweep_error_vs_n, unlabeled_points, MetricsRecord, PipelineConfig,
    SamplerKind, SyntheticTask,
};
use optrf::leverage::{
    sample_conventional, sample_from_table, sample_optimized_rejection, tabulate_optimized, FrequencyGrid,
    RejectionOptions, SpectralModel,
};
use optrf::rng::seeded;
use optrf::sgd::{
    grad_estimate, regularized_empirical_loss, ridge_oracle, theorem_lambda, train, Classifier, IidResampler,
    TrainOptions,
};
use optrf::store::CellBits;
use optrf::{CountTree, FeatureMode, GaussianKernel, GridSpec, Points};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

const SEED: u64 = 2026;
const TRIALS: usize = 10;

fn report(n: u32, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

fn task() -> &'static SyntheticTask {
    static TASK: OnceLock<SyntheticTask> = OnceLock::new();
    TASK.get_or_init(|| reference_sphere_task(0.5).unwrap())
}

/// Default ridge parameter from the schedule with `q_min = 0.5`, `p = 0.1`.
fn lambda() -> f64 {
    let t = task();
    theorem_lambda(t.delta(), t.f_norm(), 0.5, 0.1, 1.0).unwrap()
}

fn base_config(mode: FeatureMode, m: usize, n: usize) -> PipelineConfig {
    PipelineConfig {
        mode,
        lambda: lambda(),
        m,
        n,
        q_min: 0.5,
        eta_c: 1.0,
        n0: 200,
        test_size: 10_000,
        sampler: SamplerKind::Rejection(RejectionOptions::default()),
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Records with the wall time the sweep took.
type Sweep = (Vec<MetricsRecord>, f64);

fn timed(f: impl FnOnce() -> Vec<MetricsRecord>) -> Sweep {
    let start = Instant::now();
    let recs = f();
    (recs, start.elapsed().as_secs_f64())
}

fn n_sweep() -> &'static Sweep {
    static RECORDS: OnceLock<Sweep> = OnceLock::new();
    RECORDS.get_or_init(|| timed(|| {
        std::env::set_var("OPTRF_QUIET", "1");
        let grid: Vec<usize> = (7..=14).map(|e| 1usize << e).collect();
        let cfg = base_config(FeatureMode::Optimized, 32, grid[0]);
        sweep_error_vs_n(task(), &cfg, &grid, TRIALS, SEED, jobs()).unwrap()
    }))
}

const M_GRID: [usize; 6] = [2, 4, 8, 16, 32, 64];

fn m_sweep() -> &'static Sweep {
    static RECORDS: OnceLock<Sweep> = OnceLock::new();
    RECORDS.get_or_init(|| timed(|| {
        std::env::set_var("OPTRF_QUIET", "1");
        let cfg = base_config(FeatureMode::Optimized, M_GRID[0], 1 << 13);
        let modes = [FeatureMode::Conventional, FeatureMode::Optimized];
        sweep_error_vs_m(task(), &cfg, &M_GRID, &modes, TRIALS, SEED, jobs()).unwrap()
    }))
}

#[test]
fn criterion_1_kernel_approximation() {
    let start = Instant::now();
    let k = GaussianKernel::new(1.0, 5).unwrap();
    let m = 4096;
    let bound = 5.0 / (m as f64).sqrt();
    let mut rng = seeded(SEED);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
        .map(|_| {
            let mut draw = || (0..5).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
            (draw(), draw())
        })
        .collect();
    let mut good = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let fs = sample_conventional(&k, m, &mut rng).unwrap();
        let err = pairs
            .iter()
            .map(|(x, y)| (fs.kernel_mc_estimate(x, y).unwrap() - k.eval(x, y).unwrap()).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        good += (err <= bound) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = good >= 48 && secs < 10.0;
    report(1, pass, format!("{good}/50 sets within {bound:.4} (worst {worst:.4}), {secs:.1}s"));
    assert!(pass);
}

#[test]
fn criterion_2_leverage_normalization() {
    let start = Instant::now();
    let t = task();
    let pts = unlabeled_points(t, SEED, 200);
    let base = SpectralModel::build(pts, *t.kernel(), 0.1).unwrap();
    let mut rng = seeded(SEED + 2);
    let draws: Vec<Vec<f64>> = (0..100_000).map(|_| t.kernel().sample_tau(&mut rng)).collect();
    let mut pass = true;
    let mut detail = Vec::new();
    for lam in [1e-1, 1e-2, 1e-3] {
        let model = base.with_lambda(lam).unwrap();
        let vals: Vec<f64> = draws.iter().map(|v| model.unnormalized_leverage(v).unwrap()).collect();
        let (mean, se) = common::mean_and_se(&vals);
        let d = model.dof();
        let gap = (model.degree_of_freedom_trace(lam).unwrap() - d).abs();
        let ok = (mean - d).abs() <= 3.0 * se && gap <= 1e-8;
        pass &= ok;
        detail.push(format!("lambda={lam}: mean={mean:.4} d={d:.4} se={se:.4} trace_gap={gap:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 30.0;
    report(2, pass, format!("{} ({secs:.1}s)", detail.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_3_sampler_correctness() {
    let start = Instant::now();
    let k = GaussianKernel::new(1.0, 1).unwrap();
    let mut rng = seeded(SEED + 3);
    let rows: Vec<[f64; 1]> = (0..50).map(|_| [rng.gen_range(-1.0..1.0)]).collect();
    let model = SpectralModel::build(Points::from_rows(1, &rows).unwrap(), k, 0.01).unwrap();
    let n = 100_000;
    let bins = 200;
    // 20 fine cells per histogram bin, same range
    let grid = FrequencyGrid {
        half_width: 6.0,
        cells_per_axis: bins * 20,
    };
    let table = tabulate_optimized(&model, &grid).unwrap();
    let mut exact: Vec<f64> = table.probs().chunks(20).map(|c| c.iter().sum()).collect();
    exact.push(0.0);
    let (lo, hi) = (table.lower(), -table.lower());

    let (rej, _) = sample_optimized_rejection(&model, n, &mut rng, &RejectionOptions::default()).unwrap();
    let rej_v: Vec<f64> = rej.freqs().rows().map(|v| v[0]).collect();
    let rej_h = common::histogram(&rej_v, lo, hi, bins);
    let grd = sample_from_table(&model, &table, n, &mut rng).unwrap();
    let grd_v: Vec<f64> = grd.freqs().rows().map(|v| v[0]).collect();
    let grd_h = common::histogram(&grd_v, lo, hi, bins);
    let tv_exact = common::tv(&rej_h, &exact);
    let tv_pair = common::tv(&rej_h, &grd_h);

    let single = SpectralModel::build(Points::from_rows(1, &[[0.3]]).unwrap(), k, 0.01).unwrap();
    let (deg, _) = sample_optimized_rejection(&single, n, &mut rng, &RejectionOptions::default()).unwrap();
    let deg_v: Vec<f64> = deg.freqs().rows().map(|v| v[0]).collect();
    let tau = Normal::new(0.0, k.tau_std()).unwrap();
    let ks = common::ks_distance(&deg_v, |x| tau.cdf(x));

    let secs = start.elapsed().as_secs_f64();
    let pass = tv_exact <= 0.02 && tv_pair <= 0.03 && ks <= 0.02 && secs < 60.0;
    report(
        3,
        pass,
        format!("TV(rejection, table)={tv_exact:.4} TV(rejection, grid)={tv_pair:.4} KS(N0=1)={ks:.4}, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_leverage_envelope() {
    let t = task();
    let model = SpectralModel::build(unlabeled_points(t, SEED, 200), *t.kernel(), lambda()).unwrap();
    let bound = model.q_max_bound();
    let s = t.kernel().tau_std();
    let mut rng = seeded(SEED + 4);
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for i in 0..10_000 {
        // half from tau, half spread uniformly far into the tails
        let v: Vec<f64> = if i % 2 == 0 {
            t.kernel().sample_tau(&mut rng)
        } else {
            (0..2).map(|_| rng.gen_range(-8.0 * s..8.0 * s)).collect()
        };
        let q = model.leverage_score(&v).unwrap();
        worst = worst.max(q / bound);
        violations += (q > bound * (1.0 + 1e-12)) as usize;
    }
    let pass = violations == 0;
    report(4, pass, format!("{violations} violations, max q/bound = {worst:.6}"));
    assert!(pass);
}

#[test]
fn criterion_5_sgd_correctness() {
    let start = Instant::now();
    let t = task();
    let mut rng = seeded(SEED + 5);
    let lam = lambda();
    let cfg_model = base_config(FeatureMode::Optimized, 32, 50_000);
    let model = SpectralModel::build(unlabeled_points(t, SEED, cfg_model.n0), *t.kernel(), lam).unwrap();
    let (fs, _) = sample_optimized_rejection(&model, 32, &mut rng, &RejectionOptions::default()).unwrap();
    let data = sample_labeled(t, 1000, &mut rng).unwrap();
    let cfg = cfg_model.train_config(t).unwrap();

    // (a) averaged stochastic gradient against central differences
    let alpha: Vec<f64> = (0..64).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let mut mean = vec![0.0; alpha.len()];
    for s in &data {
        let g = grad_estimate(&alpha, &fs, &s.x, s.y, &cfg).unwrap();
        mean.iter_mut().zip(&g).for_each(|(m, gi)| *m += gi / data.len() as f64);
    }
    let loss_at = |a: Vec<f64>| regularized_empirical_loss(&Classifier::new(fs.clone(), a).unwrap(), &data, &cfg).unwrap();
    let h = 1e-5;
    let fd_err = (0..alpha.len())
        .map(|i| {
            let mut up = alpha.clone();
            let mut dn = alpha.clone();
            up[i] += h;
            dn[i] -= h;
            ((loss_at(up) - loss_at(dn)) / (2.0 * h) - mean[i]).abs()
        })
        .fold(0.0, f64::max);

    // (b) and (c) on a 50,000-step resampled stream
    let stream = IidResampler::new(&data, seeded(SEED + 6)).unwrap();
    let (clf, trace) = train(&fs, stream, &cfg, TrainOptions { keep_iterates: true }).unwrap();
    let r = cfg.radius();
    let max_norm = trace
        .iterates
        .as_ref()
        .unwrap()
        .iter()
        .map(|a| a.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let ridge = ridge_oracle(&fs, &data, &cfg).unwrap();
    let best = loss_at(ridge.alpha.clone());
    let got = regularized_empirical_loss(&clf, &data, &cfg).unwrap();
    let gap = (got - best) / best;

    let secs = start.elapsed().as_secs_f64();
    let pass = fd_err <= 1e-5 && max_norm <= r * (1.0 + 1e-12) && gap <= 0.10 && secs < 120.0;
    report(
        5,
        pass,
        format!(
            "(a) max |mean grad - fd| = {fd_err:.2e}; (b) max |alpha| = {max_norm:.4} <= R = {r:.4}; \
             (c) loss {got:.5} vs ridge {best:.5}, gap {:.2}%; {secs:.1}s",
            100.0 * gap
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_excess_error_vanishes_in_n() {
    let (recs, secs) = n_sweep();
    let secs = *secs;
    let stats = group_stats(recs, |r| r.n, |r| r.excess_err);
    let means: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let inversions = means.windows(2).filter(|w| w[1] > w[0]).count();
    let n_max = stats.last().unwrap().0;
    let zeros = recs.iter().filter(|r| r.n == n_max && r.excess_err == 0.0).count();
    let pass = inversions <= 2 && zeros >= 8 && secs < 600.0;
    let curve: Vec<String> = stats.iter().map(|(n, m, _, _)| format!("{n}:{m:.4}")).collect();
    report(
        6,
        pass,
        format!(
            "lambda={:.4} mean excess [{}], {inversions} inversions, {zeros}/{TRIALS} zero at N={n_max}, {secs:.1}s",
            lambda(),
            curve.join(" ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_optimized_needs_fewer_features() {
    let (recs, secs) = m_sweep();
    let secs = *secs;
    let stats = group_stats(recs, |r| (r.m, r.mode), |r| r.excess_err);
    let curve = |mode: FeatureMode| -> Vec<(usize, f64, f64)> {
        stats.iter().filter(|s| s.0 .1 == mode).map(|s| (s.0 .0, s.1, s.2)).collect()
    };
    let conv = curve(FeatureMode::Conventional);
    let opt = curve(FeatureMode::Optimized);
    let first = |c: &[(usize, f64, f64)]| c.iter().find(|x| x.1 <= 0.01).map(|x| x.0);
    let (m_conv, m_opt) = (first(&conv), first(&opt));
    let smaller = match (m_opt, m_conv) {
        (Some(o), Some(c)) => o < c,
        (Some(_), None) => true,
        _ => false,
    };
    let dominated: Vec<bool> = conv
        .iter()
        .zip(&opt)
        .map(|(c, o)| o.1 <= c.1 + (c.2 * c.2 + o.2 * o.2).sqrt())
        .collect();
    let pass = smaller && dominated.iter().all(|&b| b) && secs < 900.0;
    let table: Vec<String> = conv
        .iter()
        .zip(&opt)
        .map(|(c, o)| format!("M={}: conv {:.4}±{:.4} opt {:.4}±{:.4}", c.0, c.1, c.2, o.1, o.2))
        .collect();
    report(
        7,
        pass,
        format!(
            "first M with mean excess <= 0.01: optimized {m_opt:?}, conventional {m_conv:?}; [{}]; {secs:.1}s",
            table.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_spectral_decay() {
    let k = GaussianKernel::new(1.0, 2).unwrap();
    let model = SpectralModel::build(circle_points(200), k, 0.1).unwrap();
    let (slope, _, r2) = spectral_decay_fit(model.eigenvalues(), 1, 20);
    let lambdas: Vec<f64> = (0..13).map(|i| 10f64.powf(-4.0 + 0.25 * i as f64)).collect();
    let dofs: Vec<f64> = lambdas.iter().map(|&l| model.degree_of_freedom(l).unwrap()).collect();
    let (a, b, worst) = log_dof_fit(&lambdas, &dofs);
    let pass = r2 >= 0.95 && worst <= 0.15;
    report(
        8,
        pass,
        format!("log mu_i slope {slope:.3} R2={r2:.4}; d(lambda) ~ {a:.3} + {b:.3} log(1/lambda), max residual {worst:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_count_tree() {
    let mut rng = seeded(SEED + 9);
    let mut parent_ok = true;
    let mut touch_ok = true;
    for case in 0..1000 {
        let dim = 1 + case % 3;
        let delta = [0.5, 0.25, 0.1][case % 3];
        let spec = GridSpec::new(vec![-1.0; dim], vec![1.0; dim], delta).unwrap();
        let depth = spec.depth();
        let mut tree = CountTree::new(spec);
        let inserts = rng.gen_range(1..60);
        for _ in 0..inserts {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            touch_ok &= tree.increment(&x).unwrap() == depth + 1;
        }
        parent_ok &= tree.total() == inserts as u64;
        for (node, count) in tree.nodes() {
            if node.len() < depth {
                parent_ok &= tree.count(&node.child(false)) + tree.count(&node.child(true)) == count;
            }
        }
    }

    let mut worst_p: f64 = 1.0;
    for (case, leaves_cap) in [(0u64, 16usize), (1, 64), (2, 256)] {
        let spec = GridSpec::new(vec![0.0], vec![1.0], 1.0 / leaves_cap as f64).unwrap();
        let mut tree = CountTree::new(spec);
        let mut r = seeded(SEED + 90 + case);
        for _ in 0..2000 {
            let u: f64 = r.gen();
            tree.increment(&[u * u]).unwrap();
        }
        let leaves = tree.leaf_distribution();
        assert!(leaves.len() <= 256);
        let total = tree.total() as f64;
        let probs: Vec<f64> = leaves.iter().map(|(_, c)| *c as f64 / total).collect();
        let index: std::collections::BTreeMap<CellBits, usize> =
            leaves.iter().enumerate().map(|(i, (c, _))| (c.clone(), i)).collect();
        let mut observed = vec![0u64; leaves.len()];
        for _ in 0..100_000 {
            let (cell, _) = tree.sample_cell(&mut r).unwrap();
            observed[index[&cell]] += 1;
        }
        worst_p = worst_p.min(common::chi_square_p(&observed, &probs));
    }
    let pass = parent_ok && touch_ok && worst_p > 1e-3;
    report(
        9,
        pass,
        format!("parent sums {parent_ok}, touches = depth + 1 {touch_ok}, min chi-square p = {worst_p:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_sub_margin_classifiers_are_bayes_optimal() {
    let all: Vec<MetricsRecord> = n_sweep().0.iter().chain(&m_sweep().0).cloned().collect();
    let inside = all.iter().filter(|r| r.linf < r.delta).count();
    let violations = margin_violations(&all).len();
    let pass = violations == 0;
    report(
        10,
        pass,
        format!("{} records, {inside} with probe Linf < delta, {violations} with nonzero excess", all.len()),
    );
    assert!(pass);
}
