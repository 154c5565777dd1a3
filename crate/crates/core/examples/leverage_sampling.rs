//! Drawing leverage-weighted frequencies with the rejection and grid samplers.

use optrf::experiments::{reference_sphere_task, unlabeled_points};
use optrf::leverage::{sample_optimized_grid, sample_optimized_rejection, FrequencyGrid, RejectionOptions};
use optrf::rng::seeded;
use optrf::SpectralModel;

fn main() -> optrf::Result<()> {
    let task = reference_sphere_task(0.5)?;
    let pts = unlabeled_points(&task, 1, 200);
    for lambda in [0.1, 0.01, 0.001] {
        let model = SpectralModel::build(pts.clone(), *task.kernel(), lambda)?;
        let (fs, stats) = sample_optimized_rejection(&model, 64, &mut seeded(2), &RejectionOptions::default())?;
        let q = fs.leverage_values().unwrap_or(&[]);
        let q_mean = q.iter().sum::<f64>() / q.len() as f64;
        println!(
            "lambda {lambda:<6} d = {:.3}  acceptance {:.4} (expected {:.4})  mean q of draws {q_mean:.3}  bound {:.1}",
            model.dof(),
            stats.acceptance_rate,
            stats.expected_acceptance,
            model.q_max_bound()
        );
    }
    let model = SpectralModel::build(pts, *task.kernel(), 0.01)?;
    let grid = sample_optimized_grid(&model, 8, &FrequencyGrid::default(), &mut seeded(5))?;
    for i in 0..grid.len() {
        let v = grid.freq(i);
        println!("grid draw v = ({:+.4}, {:+.4})", v[0], v[1]);
    }
    Ok(())
}
