//! Empirical integral operator, degree of freedom, leverage scores, and
//! samplers for the leverage-weighted Fourier measure.
//!
//! The integral operator is represented by `K / N0` on the unlabeled points.
//! For a frequency `v` let `c_j = cos(2 pi v.x_j)` and `s_j = sin(2 pi v.x_j)`;
//! the unnormalized leverage is
//!
//! ```text
//! l(v) = (c' A^-1 c + s' A^-1 s) / N0,    A = K / N0 + lambda I,
//! ```
//!
//! its mean over `v ~ tau` is exactly `d(lambda) = tr[(K/N0) A^-1]`, and the
//! leverage score is `q(v) = l(v) / d(lambda)`, a density with respect to `tau`
//! bounded by `1 / (lambda d(lambda))`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use statrs::function::erf::erfc;

use crate::error::{check_dim, Error, Result};
use crate::kernel::{FeatureMode, FeatureSet, GaussianKernel};
use crate::points::{dot, Points};

/// Eigenvalues below this are treated as zero when counting rank.
pub const RANK_TOL: f64 = 1e-12;

/// Negative eigenvalues of `K / N0` beyond this magnitude are reported.
pub const INDEFINITE_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SpectralModel {
    points: Points,
    kern: GaussianKernel,
    gram: DMatrix<f64>,
    /// Eigenvalues of `K / N0`, descending, clipped at zero.
    eigvals: Vec<f64>,
    /// Row `i` is the unit eigenvector for `eigvals[i]`.
    eigvecs: Vec<f64>,
    lambda: f64,
    dof: f64,
    /// Eigen-directions whose weight `mu / (mu + lambda)` is non-negligible.
    active: usize,
}

impl SpectralModel {
    pub fn build(points: Points, kern: GaussianKernel, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if points.is_empty() {
            return Err(Error::Empty("unlabeled points"));
        }
        if !points.all_finite() {
            return Err(Error::NonFinite("unlabeled points".into()));
        }
        let gram = kern.gram(&points)?;
        let n = points.len();
        let eig = (&gram / n as f64).symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let smallest = eig.eigenvalues.min();
        if smallest < -INDEFINITE_TOL {
            return Err(Error::IndefiniteGram(smallest));
        }
        let eigvals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let mut eigvecs = Vec::with_capacity(n * n);
        for &i in &order {
            eigvecs.extend(eig.eigenvectors.column(i).iter());
        }
        let mut model = SpectralModel {
            points,
            kern,
            gram,
            eigvals,
            eigvecs,
            lambda,
            dof: 0.0,
            active: 0,
        };
        model.set_lambda(lambda);
        Ok(model)
    }

    /// Same operator, different regularization; reuses the eigendecomposition.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let mut m = self.clone();
        m.set_lambda(lambda);
        Ok(m)
    }

    fn set_lambda(&mut self, lambda: f64) {
        self.lambda = lambda;
        self.dof = dof_from_eigs(&self.eigvals, lambda);
        self.active = self
            .eigvals
            .iter()
            .take_while(|&&mu| mu / (mu + lambda) > 1e-16)
            .count();
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &Points {
        &self.points
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kern
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rank(&self) -> usize {
        self.eigvals.iter().filter(|&&mu| mu > RANK_TOL).count()
    }

    /// `d(lambda)` at the model's own regularization.
    pub fn dof(&self) -> f64 {
        self.dof
    }

    /// `sum_i mu_i / (mu_i + lambda)`.
    pub fn degree_of_freedom(&self, lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        Ok(dof_from_eigs(&self.eigvals, lambda))
    }

    /// `tr[(K/N0)(K/N0 + lambda I)^-1]` through a Cholesky solve, independent
    /// of the eigendecomposition.
    pub fn degree_of_freedom_trace(&self, lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        let n = self.n();
        let s = &self.gram / n as f64;
        let a = &s + DMatrix::identity(n, n) * lambda;
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::invalid("regularized operator is not positive definite"))?;
        let x = chol.solve(&s);
        Ok(x.trace())
    }

    /// `(1/N0) conj(z)' (K/N0 + lambda I)^-1 z` with `z_j = exp(-2 pi i v.x_j)`.
    pub fn unnormalized_leverage(&self, v: &[f64]) -> Result<f64> {
        check_dim(self.kern.dim(), v.len())?;
        let n = self.n();
        let mut c = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        for x in self.points.rows() {
            let (sn, cs) = (2.0 * PI * dot(v, x)).sin_cos();
            c.push(cs);
            s.push(sn);
        }
        // A^-1 = (I - U diag(mu / (mu + lambda)) U') / lambda and |z|^2 = N0, so
        // only directions with non-negligible weight contribute.
        let mut proj = 0.0;
        for (i, &mu) in self.eigvals[..self.active].iter().enumerate() {
            let u = &self.eigvecs[i * n..(i + 1) * n];
            let (wc, ws) = (dot(u, &c), dot(u, &s));
            proj += mu / (mu + self.lambda) * (wc * wc + ws * ws);
        }
        let value = (1.0 - proj / n as f64) / self.lambda;
        Ok(value.max(f64::MIN_POSITIVE))
    }

    /// Leverage score `q(v) = l(v) / d(lambda)`.
    pub fn leverage_score(&self, v: &[f64]) -> Result<f64> {
        Ok(self.unnormalized_leverage(v)? / self.dof)
    }

    /// Envelope `1 / (lambda d(lambda))` dominating every leverage score.
    pub fn q_max_bound(&self) -> f64 {
        1.0 / (self.lambda * self.dof)
    }

    /// Mean acceptance probability of the rejection sampler, `lambda d(lambda)`.
    pub fn expected_acceptance(&self) -> f64 {
        self.lambda * self.dof
    }

    pub fn write_spectrum_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "i,mu_i")?;
        for (i, mu) in self.eigvals.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, mu)?;
        }
        Ok(())
    }

    pub fn write_dof_sweep_csv<W: Write>(&self, w: &mut W, lambdas: &[f64]) -> Result<()> {
        writeln!(w, "lambda,dof,q_max_bound,expected_acceptance")?;
        for &l in lambdas {
            let d = self.degree_of_freedom(l)?;
            writeln!(w, "{},{},{},{}", l, d, 1.0 / (l * d), l * d)?;
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda must be positive, got {lambda}")))
    }
}

fn dof_from_eigs(eigs: &[f64], lambda: f64) -> f64 {
    eigs.iter().map(|mu| mu / (mu + lambda)).sum()
}

/// `M` independent draws from the Fourier measure.
pub fn sample_conventional<R: Rng + ?Sized>(
    kern: &GaussianKernel,
    m: usize,
    rng: &mut R,
) -> Result<FeatureSet> {
    if m == 0 {
        return Err(Error::invalid("feature count must be at least 1"));
    }
    let mut freqs = Points::with_capacity(kern.dim(), m);
    let mut v = vec![0.0; kern.dim()];
    for _ in 0..m {
        kern.sample_tau_into(rng, &mut v);
        freqs.push(&v)?;
    }
    FeatureSet::conventional(freqs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionOptions {
    /// Abort once `trial_budget` proposals have run with acceptance below this.
    pub acceptance_floor: f64,
    pub trial_budget: u64,
    /// Draw each feature from `tau` with probability 1/2 and from the
    /// leverage-weighted measure otherwise; the recorded weight becomes
    /// `q / 2 + 1 / 2`, so the minimal weight is at least 1/2.
    pub bottom_raised: bool,
}

impl Default for RejectionOptions {
    fn default() -> Self {
        RejectionOptions {
            acceptance_floor: 1e-6,
            trial_budget: 10_000_000,
            bottom_raised: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerStats {
    pub proposals: u64,
    pub accepted: u64,
    pub acceptance_rate: f64,
    pub expected_acceptance: f64,
    /// Leverage evaluations spent per returned feature.
    pub proposals_per_feature: f64,
}

/// Rejection sampling from `q(v) tau(dv)` with envelope `1 / (lambda d(lambda))`.
pub fn sample_optimized_rejection<R: Rng + ?Sized>(
    model: &SpectralModel,
    m: usize,
    rng: &mut R,
    opts: &RejectionOptions,
) -> Result<(FeatureSet, SamplerStats)> {
    if m == 0 {
        return Err(Error::invalid("feature count must be at least 1"));
    }
    if !(opts.acceptance_floor >= 0.0 && opts.acceptance_floor < 1.0) {
        return Err(Error::invalid("acceptance floor must lie in [0, 1)"));
    }
    let kern = model.kernel();
    let envelope = model.q_max_bound();
    let mut freqs = Points::with_capacity(kern.dim(), m);
    let mut weights = Vec::with_capacity(m);
    let mut v = vec![0.0; kern.dim()];
    let (mut proposals, mut accepted) = (0u64, 0u64);
    while freqs.len() < m {
        if opts.bottom_raised && rng.gen_bool(0.5) {
            kern.sample_tau_into(rng, &mut v);
            let q = model.leverage_score(&v)?;
            freqs.push(&v)?;
            weights.push(0.5 * q + 0.5);
            continue;
        }
        loop {
            kern.sample_tau_into(rng, &mut v);
            proposals += 1;
            let q = model.leverage_score(&v)?;
            if rng.gen::<f64>() * envelope < q {
                accepted += 1;
                freqs.push(&v)?;
                weights.push(if opts.bottom_raised { 0.5 * q + 0.5 } else { q });
                break;
            }
            if proposals >= opts.trial_budget
                && (accepted as f64) < opts.acceptance_floor * proposals as f64
            {
                return Err(Error::SamplerAbort {
                    proposals,
                    accepted,
                    rate: accepted as f64 / proposals as f64,
                    expected: model.expected_acceptance(),
                    floor: opts.acceptance_floor,
                });
            }
        }
    }
    let stats = SamplerStats {
        proposals,
        accepted,
        acceptance_rate: if proposals == 0 {
            1.0
        } else {
            accepted as f64 / proposals as f64
        },
        expected_acceptance: model.expected_acceptance(),
        proposals_per_feature: proposals as f64 / m as f64,
    };
    let fs = FeatureSet::new(
        freqs,
        FeatureMode::Optimized,
        Some(weights),
        Some(model.lambda()),
    )?;
    Ok((fs, stats))
}

/// Regular grid over `[-half_width, half_width]^D` in units of the Fourier
/// measure's standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyGrid {
    pub half_width: f64,
    pub cells_per_axis: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        FrequencyGrid {
            half_width: 6.0,
            cells_per_axis: 400,
        }
    }
}

/// Minimum Fourier-measure mass the frequency grid must cover.
pub const GRID_MASS_REQUIRED: f64 = 1.0 - 1e-6;

/// Tabulated, normalized probabilities of `q(v) tau(dv)` on grid cells.
#[derive(Debug, Clone)]
pub struct GridTable {
    dim: usize,
    lower: f64,
    step: f64,
    cells_per_axis: usize,
    probs: Vec<f64>,
    raw_mass: f64,
}

impl GridTable {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Sum of `q(center) tau(cell)` before normalization; close to 1.
    pub fn raw_mass(&self) -> f64 {
        self.raw_mass
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    /// Lower corner of cell `idx` (row-major over axes, first axis slowest).
    pub fn cell_corner(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut rem = idx;
        for d in (0..self.dim).rev() {
            out[d] = self.lower + (rem % self.cells_per_axis) as f64 * self.step;
            rem /= self.cells_per_axis;
        }
        out
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Tabulates `q(v) tau(cell)` with `q` evaluated at the cell centre.
pub fn tabulate_optimized(model: &SpectralModel, grid: &FrequencyGrid) -> Result<GridTable> {
    let dim = model.kernel().dim();
    if dim > 2 {
        return Err(Error::invalid(format!(
            "grid sampler supports dimension at most 2, got {dim}"
        )));
    }
    if grid.cells_per_axis == 0 || !(grid.half_width > 0.0) {
        return Err(Error::invalid("frequency grid needs cells and a positive half width"));
    }
    let covered = (1.0 - 2.0 * std_normal_cdf(-grid.half_width)).powi(dim as i32);
    if covered < GRID_MASS_REQUIRED {
        return Err(Error::GridMassDeficit {
            covered,
            required: GRID_MASS_REQUIRED,
        });
    }
    let sd = model.kernel().tau_std();
    let k = grid.cells_per_axis;
    let lower = -grid.half_width * sd;
    let step = 2.0 * grid.half_width * sd / k as f64;
    let axis_mass: Vec<f64> = (0..k)
        .map(|i| {
            let a = lower + i as f64 * step;
            std_normal_cdf((a + step) / sd) - std_normal_cdf(a / sd)
        })
        .collect();
    let total = k.pow(dim as u32);
    let mut probs = Vec::with_capacity(total);
    let mut center = vec![0.0; dim];
    for idx in 0..total {
        let mut rem = idx;
        let mut tau_mass = 1.0;
        for d in (0..dim).rev() {
            let i = rem % k;
            rem /= k;
            center[d] = lower + (i as f64 + 0.5) * step;
            tau_mass *= axis_mass[i];
        }
        probs.push(model.leverage_score(&center)? * tau_mass);
    }
    let raw_mass: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= raw_mass;
    }
    Ok(GridTable {
        dim,
        lower,
        step,
        cells_per_axis: k,
        probs,
        raw_mass,
    })
}

/// Inverse-CDF sampling from a tabulated grid, jittered uniformly inside cells.
pub fn sample_from_table<R: Rng + ?Sized>(
    model: &SpectralModel,
    table: &GridTable,
    m: usize,
    rng: &mut R,
) -> Result<FeatureSet> {
    if m == 0 {
        return Err(Error::invalid("feature count must be at least 1"));
    }
    let cdf: Vec<f64> = table
        .probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let mut freqs = Points::with_capacity(table.dim, m);
    let mut weights = Vec::with_capacity(m);
    for _ in 0..m {
        let u: f64 = rng.gen::<f64>() * cdf[cdf.len() - 1];
        let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let mut v = table.cell_corner(idx);
        for c in &mut v {
            *c += rng.gen::<f64>() * table.step;
        }
        weights.push(model.leverage_score(&v)?);
        freqs.push(&v)?;
    }
    FeatureSet::new(
        freqs,
        FeatureMode::Optimized,
        Some(weights),
        Some(model.lambda()),
    )
}

/// Exact desk-scale sampler for `D <= 2`: tabulate, then invert the CDF.
pub fn sample_optimized_grid<R: Rng + ?Sized>(
    model: &SpectralModel,
    m: usize,
    grid: &FrequencyGrid,
    rng: &mut R,
) -> Result<FeatureSet> {
    let table = tabulate_optimized(model, grid)?;
    sample_from_table(model, &table, m, rng)
}
