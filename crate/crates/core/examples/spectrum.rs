//! Eigenvalue decay and degrees of freedom for points on the unit circle.

use optrf::experiments::{circle_points, log_dof_fit, spectral_decay_fit};
use optrf::{GaussianKernel, SpectralModel};

fn main() -> optrf::Result<()> {
    let model = SpectralModel::build(circle_points(200), GaussianKernel::new(1.0, 2)?, 0.01)?;
    for (i, mu) in model.eigenvalues().iter().take(12).enumerate() {
        println!("mu_{:<2} = {mu:.3e}", i + 1);
    }
    let (slope, _, r2) = spectral_decay_fit(model.eigenvalues(), 1, 20);
    println!("log mu_i ~ {slope:.3} i  (R2 {r2:.4}), rank {}", model.rank());
    let lambdas: Vec<f64> = (0..13).map(|i| 10f64.powf(-4.0 + 0.25 * i as f64)).collect();
    let dofs: Vec<f64> = lambdas
        .iter()
        .map(|&l| model.degree_of_freedom(l))
        .collect::<optrf::Result<_>>()?;
    for (l, d) in lambdas.iter().zip(&dofs) {
        println!("lambda {l:.1e}  d {d:.3}");
    }
    let (a, b, worst) = log_dof_fit(&lambdas, &dofs);
    println!("d(lambda) ~ {a:.3} + {b:.3} log(1/lambda), worst relative residual {worst:.3}");
    Ok(())
}
