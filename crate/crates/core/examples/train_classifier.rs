//! One end-to-end run: sample optimized features, train with SGD, evaluate.

use optrf::experiments::{
    evaluate, reference_sphere_task, sample_features, test_set, train_on_task, trial_seed, PipelineConfig,
    SamplerKind,
};
use optrf::leverage::RejectionOptions;
use optrf::sgd::theorem_lambda;
use optrf::FeatureMode;

fn main() -> optrf::Result<()> {
    let task = reference_sphere_task(0.5)?;
    let cert = task.certificate();
    println!(
        "task {}: |f*| in [{:.3}, {:.3}], RKHS norm {:.3}, Bayes error {:.4}",
        task.name(),
        cert.min_abs,
        cert.max_abs,
        cert.f_norm,
        cert.bayes_error
    );
    let cfg = PipelineConfig {
        mode: FeatureMode::Optimized,
        lambda: theorem_lambda(task.delta(), task.f_norm(), 0.5, 0.1, 1.0)?,
        m: 32,
        n: 4096,
        q_min: 0.5,
        eta_c: 1.0,
        n0: 200,
        test_size: 10_000,
        sampler: SamplerKind::Rejection(RejectionOptions::default()),
    };
    let seed = trial_seed(42, 0);
    let draw = sample_features(&task, &cfg, seed)?;
    let clf = train_on_task(&task, &draw.features, &cfg, seed)?;
    let test = test_set(&task, seed, cfg.test_size)?;
    let ev = evaluate(&task, &clf, &cfg.train_config(&task)?, &test)?;
    println!("lambda {:.4}, acceptance {:.3}", cfg.lambda, draw.accept_rate());
    println!(
        "error {:.4}  excess {:.4}  L2 {:.4}  Linf {:.4}",
        ev.class_err, ev.excess_err, ev.l2, ev.linf
    );
    Ok(())
}
