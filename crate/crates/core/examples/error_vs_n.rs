//! Excess classification error as the number of labeled examples grows.

use optrf::experiments::{group_stats, reference_sphere_task, sweep_error_vs_n, PipelineConfig, SamplerKind};
use optrf::leverage::RejectionOptions;
use optrf::sgd::theorem_lambda;
use optrf::FeatureMode;

fn main() -> optrf::Result<()> {
    let task = reference_sphere_task(0.5)?;
    let grid: Vec<usize> = (7..=12).map(|e| 1 << e).collect();
    let cfg = PipelineConfig {
        mode: FeatureMode::Optimized,
        lambda: theorem_lambda(task.delta(), task.f_norm(), 0.5, 0.1, 1.0)?,
        m: 32,
        n: grid[0],
        q_min: 0.5,
        eta_c: 1.0,
        n0: 200,
        test_size: 5000,
        sampler: SamplerKind::Rejection(RejectionOptions::default()),
    };
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let records = sweep_error_vs_n(&task, &cfg, &grid, 5, 11, jobs)?;
    for (n, mean, se, _) in group_stats(&records, |r| r.n, |r| r.excess_err) {
        println!("N = {n:5}  excess {mean:.4} ± {se:.4}");
    }
    Ok(())
}
