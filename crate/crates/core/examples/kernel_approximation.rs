//! Monte Carlo approximation of a Gaussian kernel with random Fourier features.

use optrf::leverage::sample_conventional;
use optrf::rng::seeded;
use optrf::GaussianKernel;

fn main() -> optrf::Result<()> {
    let k = GaussianKernel::new(1.0, 3)?;
    let (x, y) = ([0.2, -0.1, 0.4], [-0.3, 0.5, 0.1]);
    let exact = k.eval(&x, &y)?;
    println!("k(x, y) = {exact:.6}");
    let mut rng = seeded(7);
    for m in [16, 64, 256, 1024, 4096] {
        let fs = sample_conventional(&k, m, &mut rng)?;
        let est = fs.kernel_mc_estimate(&x, &y)?;
        println!("M = {m:5}  estimate {est:.6}  error {:.2e}", (est - exact).abs());
    }
    Ok(())
}
