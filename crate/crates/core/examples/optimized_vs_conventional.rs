//! Paired comparison of optimized and conventional features across M.

use optrf::experiments::{group_stats, reference_sphere_task, sweep_error_vs_m, PipelineConfig, SamplerKind};
use optrf::leverage::RejectionOptions;
use optrf::sgd::theorem_lambda;
use optrf::FeatureMode;

fn main() -> optrf::Result<()> {
    let task = reference_sphere_task(0.5)?;
    let cfg = PipelineConfig {
        mode: FeatureMode::Optimized,
        lambda: theorem_lambda(task.delta(), task.f_norm(), 0.5, 0.1, 1.0)?,
        m: 2,
        n: 4096,
        q_min: 0.5,
        eta_c: 1.0,
        n0: 200,
        test_size: 5000,
        sampler: SamplerKind::Rejection(RejectionOptions::default()),
    };
    let modes = [FeatureMode::Conventional, FeatureMode::Optimized];
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let records = sweep_error_vs_m(&task, &cfg, &[2, 4, 8, 16, 32], &modes, 5, 11, jobs)?;
    for ((m, mode), mean, se, _) in group_stats(&records, |r| (r.m, r.mode), |r| r.excess_err) {
        println!("M = {m:3}  {:<12}  excess {mean:.4} ± {se:.4}", mode.to_string());
    }
    Ok(())
}
