//! Coefficient fitting: projected SGD with suffix averaging on the
//! ridge-regularized square loss, plus the closed-form ridge solution used as
//! a reference.
//!
//! For features `phi(x) = [cos(-2 pi v_0.x), sin(-2 pi v_0.x), ...]` the loss is
//!
//! ```text
//! L(a) = E (y - a.phi(x))^2 + lambda M q_min |a|^2
//! ```
//!
//! and one example gives the unbiased gradient `C phi(x) + 2 lambda M q_min a`
//! with the shared prefactor `C = 2 (a.phi(x) - y)`.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::kernel::{parse_num, FeatureSet};
use crate::points::{dot, norm2};

/// One labeled example. Labels are `+1`/`-1` for classification tasks; the
/// optimizer itself accepts any finite target.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl LabeledSample {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        LabeledSample { x, y }
    }
}

/// Learned hypothesis: frequencies plus `2M` coefficients, `alpha[2m]` for the
/// cosine of feature `m` and `alpha[2m + 1]` for its sine.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    features: FeatureSet,
    alpha: Vec<f64>,
}

impl Classifier {
    pub fn new(features: FeatureSet, alpha: Vec<f64>) -> Result<Self> {
        check_dim(2 * features.len(), alpha.len())?;
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("classifier coefficients".into()));
        }
        Ok(Classifier { features, alpha })
    }

    pub fn zeros(features: FeatureSet) -> Self {
        let alpha = vec![0.0; 2 * features.len()];
        Classifier { features, alpha }
    }

    pub fn features(&self) -> &FeatureSet {
        &self.features
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        predict_with(&self.features, &self.alpha, x)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.features.write_to(w)?;
        let row: Vec<String> = self.alpha.iter().map(f64::to_string).collect();
        writeln!(w, "{}", row.join(" "))?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let features = FeatureSet::read_from(r)?;
        let lineno = features.len() + 2;
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::parse(lineno, "missing coefficient line"));
        }
        let alpha: Vec<f64> = line
            .split_whitespace()
            .map(|t| parse_num(t, lineno))
            .collect::<Result<_>>()?;
        if alpha.len() != 2 * features.len() {
            return Err(Error::parse(
                lineno,
                format!("expected {} coefficients, found {}", 2 * features.len(), alpha.len()),
            ));
        }
        Classifier::new(features, alpha)
    }
}

fn predict_with(fs: &FeatureSet, alpha: &[f64], x: &[f64]) -> Result<f64> {
    check_dim(fs.dim(), x.len())?;
    check_dim(2 * fs.len(), alpha.len())?;
    let mut f = 0.0;
    for m in 0..fs.len() {
        let (c, s) = crate::kernel::feature_pair_unchecked(fs.freq(m), x);
        f += alpha[2 * m] * c + alpha[2 * m + 1] * s;
    }
    Ok(f)
}

/// Hyperparameters of the SGD half of the algorithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    lambda: f64,
    m: usize,
    n: usize,
    q_min: f64,
    f_norm: f64,
    eta_c: f64,
}

impl TrainConfig {
    pub fn new(lambda: f64, m: usize, n: usize, q_min: f64, f_norm: f64, eta_c: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
        }
        if m == 0 {
            return Err(Error::invalid("feature count M must be at least 1"));
        }
        if n == 0 || n % 2 != 0 {
            return Err(Error::invalid(format!("N must be a positive even number, got {n}")));
        }
        if !(q_min > 0.0 && q_min <= 1.0) {
            return Err(Error::invalid(format!("q_min must lie in (0, 1], got {q_min}")));
        }
        if !(f_norm.is_finite() && f_norm > 0.0) {
            return Err(Error::invalid(format!("f_norm must be positive, got {f_norm}")));
        }
        if !(eta_c.is_finite() && eta_c > 0.0) {
            return Err(Error::invalid(format!("eta_c must be positive, got {eta_c}")));
        }
        Ok(TrainConfig {
            lambda,
            m,
            n,
            q_min,
            f_norm,
            eta_c,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q_min(&self) -> f64 {
        self.q_min
    }

    pub fn f_norm(&self) -> f64 {
        self.f_norm
    }

    pub fn eta_c(&self) -> f64 {
        self.eta_c
    }

    /// Strong-convexity constant used by the step schedule, `lambda M q_min`.
    pub fn mu(&self) -> f64 {
        self.lambda * self.m as f64 * self.q_min
    }

    /// Coefficient of `|a|^2` in the loss; equals [`TrainConfig::mu`].
    pub fn reg(&self) -> f64 {
        self.mu()
    }

    /// Radius of the feasible ball, `2 sqrt(2) |f*| / sqrt(M q_min)`.
    pub fn radius(&self) -> f64 {
        2.0 * std::f64::consts::SQRT_2 * self.f_norm / (self.m as f64 * self.q_min).sqrt()
    }

    pub fn with_n(&self, n: usize) -> Result<Self> {
        TrainConfig::new(self.lambda, self.m, n, self.q_min, self.f_norm, self.eta_c)
    }
}

/// `eta_c / (mu (t + 1))`.
pub fn step_size(t: usize, cfg: &TrainConfig) -> f64 {
    cfg.eta_c / (cfg.mu() * (t as f64 + 1.0))
}

/// Scales `alpha` back onto the ball of radius `r` if it lies outside.
/// Returns whether it was scaled.
pub fn project_ball(alpha: &mut [f64], r: f64) -> bool {
    let norm = norm2(alpha);
    if norm > r {
        let s = r / norm;
        alpha.iter_mut().for_each(|a| *a *= s);
        true
    } else {
        false
    }
}

/// `(1/n) sum_i (y_i - f(x_i))^2 + lambda M q_min |alpha|^2`.
pub fn regularized_empirical_loss(
    c: &Classifier,
    data: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    loss_at(c.features(), c.alpha(), data, cfg.reg())
}

fn loss_at(fs: &FeatureSet, alpha: &[f64], data: &[LabeledSample], reg: f64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("labeled data"));
    }
    let mut sum = 0.0;
    for s in data {
        let r = s.y - predict_with(fs, alpha, &s.x)?;
        sum += r * r;
    }
    Ok(sum / data.len() as f64 + reg * dot(alpha, alpha))
}

/// Exact gradient of [`regularized_empirical_loss`] with respect to `alpha`.
pub fn regularized_loss_gradient(
    c: &Classifier,
    data: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("labeled data"));
    }
    let fs = c.features();
    let mut grad = vec![0.0; c.alpha().len()];
    let mut phi = vec![0.0; grad.len()];
    for s in data {
        fs.features_into(&s.x, &mut phi)?;
        let r = 2.0 * (dot(c.alpha(), &phi) - s.y) / data.len() as f64;
        grad.iter_mut().zip(&phi).for_each(|(g, p)| *g += r * p);
    }
    let reg = 2.0 * cfg.reg();
    grad.iter_mut().zip(c.alpha()).for_each(|(g, a)| *g += reg * a);
    Ok(grad)
}

#[cfg(test)]
thread_local! {
    static PREFACTOR_EVALS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Single-example gradient with regularization coefficient `reg`
/// (`lambda M q_min`). Writes into `out` and returns the prefactor.
pub fn grad_estimate_into(
    alpha: &[f64],
    fs: &FeatureSet,
    x: &[f64],
    y: f64,
    reg: f64,
    phi: &mut [f64],
    out: &mut [f64],
) -> Result<f64> {
    check_dim(2 * fs.len(), alpha.len())?;
    check_dim(alpha.len(), out.len())?;
    fs.features_into(x, phi)?;
    let prefactor = 2.0 * (dot(alpha, phi) - y);
    #[cfg(test)]
    PREFACTOR_EVALS.with(|c| c.set(c.get() + 1));
    for ((o, p), a) in out.iter_mut().zip(phi.iter()).zip(alpha) {
        *o = prefactor * p + 2.0 * reg * a;
    }
    Ok(prefactor)
}

pub fn grad_estimate(
    alpha: &[f64],
    fs: &FeatureSet,
    x: &[f64],
    y: f64,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut phi = vec![0.0; alpha.len()];
    let mut out = vec![0.0; alpha.len()];
    grad_estimate_into(alpha, fs, x, y, cfg.reg(), &mut phi, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    /// `(y_t - f(x_t))^2 + lambda M q_min |alpha_t|^2` at the pre-update iterate.
    pub loss: f64,
    /// Norm of the post-projection iterate `alpha_{t+1}`.
    pub alpha_norm: f64,
    pub eta: f64,
    pub projected: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    /// `alpha_1 ..= alpha_N` when requested through [`TrainOptions`].
    pub iterates: Option<Vec<Vec<f64>>>,
    pub suffix_average: Vec<f64>,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "t,loss,alpha_norm,eta,projected")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.t, r.loss, r.alpha_norm, r.eta, r.projected as u8
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    pub keep_iterates: bool,
}

/// Runs `N` projected SGD steps from the origin, consuming one example per
/// step, and returns the average of iterates `N/2 + 1 ..= N`.
pub fn train<I>(
    fs: &FeatureSet,
    stream: I,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<(Classifier, TrainTrace)>
where
    I: IntoIterator<Item = LabeledSample>,
{
    check_dim(cfg.m(), fs.len())?;
    let n = cfg.n();
    let dim = 2 * fs.len();
    let radius = cfg.radius();
    let reg = cfg.reg();
    let mut alpha = vec![0.0; dim];
    let mut phi = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut suffix = vec![0.0; dim];
    let mut trace = TrainTrace {
        records: Vec::with_capacity(n),
        iterates: opts.keep_iterates.then(|| Vec::with_capacity(n)),
        suffix_average: Vec::new(),
    };
    let mut stream = stream.into_iter();
    for t in 0..n {
        let sample = stream
            .next()
            .ok_or(Error::StreamExhausted { needed: n, got: t })?;
        let prefactor = grad_estimate_into(&alpha, fs, &sample.x, sample.y, reg, &mut phi, &mut grad)?;
        let loss = 0.25 * prefactor * prefactor + reg * dot(&alpha, &alpha);
        let eta = step_size(t, cfg);
        alpha.iter_mut().zip(&grad).for_each(|(a, g)| *a -= eta * g);
        let projected = project_ball(&mut alpha, radius);
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteUpdate(t));
        }
        // alpha now holds alpha_{t+1}
        if t + 1 > n / 2 {
            suffix.iter_mut().zip(&alpha).for_each(|(s, a)| *s += a);
        }
        trace.records.push(TraceRecord {
            t,
            loss,
            alpha_norm: norm2(&alpha),
            eta,
            projected,
        });
        if let Some(its) = trace.iterates.as_mut() {
            its.push(alpha.clone());
        }
    }
    let scale = 2.0 / n as f64;
    suffix.iter_mut().for_each(|s| *s *= scale);
    trace.suffix_average = suffix.clone();
    Ok((Classifier::new(fs.clone(), suffix)?, trace))
}

/// Endless stream drawing uniformly with replacement from a fixed dataset.
pub struct IidResampler<'a, R> {
    data: &'a [LabeledSample],
    rng: R,
}

impl<'a, R: Rng> IidResampler<'a, R> {
    pub fn new(data: &'a [LabeledSample], rng: R) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("resampled dataset"));
        }
        Ok(IidResampler { data, rng })
    }
}

impl<R: Rng> Iterator for IidResampler<'_, R> {
    type Item = LabeledSample;

    fn next(&mut self) -> Option<LabeledSample> {
        let i = self.rng.gen_range(0..self.data.len());
        Some(self.data[i].clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    /// Unconstrained minimizer of the regularized empirical loss.
    pub alpha: Vec<f64>,
    /// Its projection onto the feasible ball (equal to `alpha` when inside).
    pub projected: Vec<f64>,
    pub inside: bool,
}

/// Solves `(Phi'Phi/n + lambda M q_min I) a = Phi'y/n`.
pub fn ridge_oracle(
    fs: &FeatureSet,
    data: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<RidgeSolution> {
    if data.is_empty() {
        return Err(Error::Empty("labeled data"));
    }
    let dim = 2 * fs.len();
    let n = data.len() as f64;
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    let mut phi = vec![0.0; dim];
    for s in data {
        fs.features_into(&s.x, &mut phi)?;
        let p = DVector::from_column_slice(&phi);
        gram.syger(1.0 / n, &p, &p, 1.0);
        rhs.axpy(s.y / n, &p, 1.0);
    }
    gram.fill_upper_triangle_with_lower_triangle();
    for i in 0..dim {
        gram[(i, i)] += cfg.reg();
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("ridge system is not positive definite"))?;
    let alpha: Vec<f64> = chol.solve(&rhs).iter().copied().collect();
    let mut projected = alpha.clone();
    let inside = !project_ball(&mut projected, cfg.radius());
    Ok(RidgeSolution {
        alpha,
        projected,
        inside,
    })
}

/// Multiplicative constants hidden in the asymptotic hyperparameter schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConstants {
    pub c_lambda: f64,
    pub c_m: f64,
    pub c_n: f64,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        ScheduleConstants {
            c_lambda: 1.0,
            c_m: 1.0,
            c_n: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub lambda: f64,
    pub m: usize,
    pub n: usize,
}

/// The regularization part of [`theorem_hyperparams`], which needs no `d(lambda)`.
pub fn theorem_lambda(delta: f64, f_norm: f64, q_min: f64, p: f64, c_lambda: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1], got {delta}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("p must lie in (0, 1), got {p}")));
    }
    if !(q_min > 0.0 && q_min <= 1.0) {
        return Err(Error::invalid(format!("q_min must lie in (0, 1], got {q_min}")));
    }
    if !(f_norm.is_finite() && f_norm > 0.0) {
        return Err(Error::invalid(format!("f_norm must be positive, got {f_norm}")));
    }
    if !(c_lambda.is_finite() && c_lambda > 0.0) {
        return Err(Error::invalid(format!("c_lambda must be positive, got {c_lambda}")));
    }
    Ok(c_lambda * (delta * delta / (f_norm * f_norm))
        * (delta / (f_norm * q_min.sqrt())).powf(-2.0 * p / (1.0 + p)))
}

/// Regularization, feature count and sample count from the margin `delta`,
/// the norm of the Bayes classifier, `q_min`, the target excess error
/// `epsilon` and the interpolation exponent `p`:
///
/// ```text
/// lambda = c_l (delta^2 / F^2) (delta / (F sqrt q))^(-2p/(1+p))
/// M      = c_m d(lambda) log(d(lambda) / epsilon)
/// N      = c_n log(1/epsilon) F^4 / (delta^4 q^2) (F / (lambda delta sqrt q))^(4p/(1-p))
/// ```
///
/// `M` is rounded up (at least 1) and `N` up to the next even number.
pub fn theorem_hyperparams(
    delta: f64,
    f_norm: f64,
    q_min: f64,
    epsilon: f64,
    p: f64,
    dof: impl Fn(f64) -> f64,
    k: &ScheduleConstants,
) -> Result<Hyperparams> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1], got {delta}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("p must lie in (0, 1), got {p}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(q_min > 0.0 && q_min <= 1.0) {
        return Err(Error::invalid(format!("q_min must lie in (0, 1], got {q_min}")));
    }
    let lambda = theorem_lambda(delta, f_norm, q_min, p, k.c_lambda)?;
    let sq = q_min.sqrt();
    let d = dof(lambda);
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::invalid(format!("degree of freedom must be positive, got {d}")));
    }
    let m_raw = k.c_m * d * (d / epsilon).ln();
    let m = if m_raw.is_finite() { m_raw.ceil().max(1.0) as usize } else { usize::MAX };
    let n_raw = k.c_n
        * (1.0 / epsilon).ln()
        * f_norm.powi(4)
        / (delta.powi(4) * q_min * q_min)
        * (f_norm / (lambda * delta * sq)).powf(4.0 * p / (1.0 - p));
    let n_ceil = n_raw.ceil().max(2.0);
    if !(n_ceil.is_finite() && n_ceil < usize::MAX as f64 / 2.0) {
        return Err(Error::invalid(format!("sample count overflows: {n_raw:e}")));
    }
    let mut n = n_ceil as usize;
    if n % 2 == 1 {
        n += 1;
    }
    Ok(Hyperparams { lambda, m, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::FeatureMode;
    use crate::points::Points;
    use crate::rng::seeded;
    use std::f64::consts::PI;

    fn zero_freq() -> FeatureSet {
        FeatureSet::conventional(Points::from_rows(2, &[[0.0, 0.0]]).unwrap()).unwrap()
    }

    fn random_features(m: usize, seed: u64) -> FeatureSet {
        let k = crate::GaussianKernel::new(1.0, 2).unwrap();
        crate::leverage::sample_conventional(&k, m, &mut seeded(seed)).unwrap()
    }

    fn random_data(n: usize, seed: u64) -> Vec<LabeledSample> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let x = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let y = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                LabeledSample::new(x, y)
            })
            .collect()
    }

    #[test]
    fn predict_cases() {
        let c = Classifier::zeros(random_features(3, 1));
        assert_eq!(c.predict(&[0.3, 0.1]).unwrap(), 0.0);
        let c = Classifier::new(zero_freq(), vec![1.5, -2.0]).unwrap();
        assert_eq!(c.predict(&[9.0, -4.0]).unwrap(), 1.5);
        assert!(c.predict(&[1.0]).is_err());
    }

    #[test]
    fn predict_matches_naive_double_loop() {
        let fs = random_features(7, 2);
        let mut rng = seeded(3);
        let alpha: Vec<f64> = (0..14).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = Classifier::new(fs.clone(), alpha.clone()).unwrap();
        let x = [0.37, -0.81];
        let mut naive = 0.0;
        for m in 0..7 {
            let mut vx = 0.0;
            for d in 0..2 {
                vx += fs.freq(m)[d] * x[d];
            }
            naive += alpha[2 * m] * (-2.0 * PI * vx).cos() + alpha[2 * m + 1] * (-2.0 * PI * vx).sin();
        }
        assert!((c.predict(&x).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn config_validation_and_derived_values() {
        assert!(TrainConfig::new(0.1, 4, 3, 0.5, 1.0, 1.0).is_err());
        assert!(TrainConfig::new(0.0, 4, 4, 0.5, 1.0, 1.0).is_err());
        assert!(TrainConfig::new(0.1, 4, 4, 1.5, 1.0, 1.0).is_err());
        let cfg = TrainConfig::new(0.1, 8, 4, 0.5, 2.0, 1.0).unwrap();
        assert!((cfg.mu() - 0.4).abs() < 1e-15);
        assert!((cfg.radius() - 2.0 * 2f64.sqrt() * 2.0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_data_is_an_error() {
        let cfg = TrainConfig::new(0.1, 1, 2, 0.5, 1.0, 1.0).unwrap();
        let c = Classifier::zeros(zero_freq());
        assert!(regularized_empirical_loss(&c, &[], &cfg).is_err());
        assert!(ridge_oracle(&zero_freq(), &[], &cfg).is_err());
    }

    #[test]
    fn loss_at_zero_is_mean_square_label() {
        let cfg = TrainConfig::new(0.1, 5, 2, 0.5, 1.0, 1.0).unwrap();
        let c = Classifier::zeros(random_features(5, 4));
        let data = random_data(50, 5);
        assert!((regularized_empirical_loss(&c, &data, &cfg).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn regularizer_strictly_increases_loss() {
        let fs = random_features(4, 6);
        let data = random_data(30, 7);
        let alpha = vec![0.2, -0.1, 0.3, 0.0, 0.5, 0.1, -0.2, 0.05];
        let c = Classifier::new(fs, alpha).unwrap();
        let lo = TrainConfig::new(1e-9, 4, 2, 0.5, 1.0, 1.0).unwrap();
        let hi = TrainConfig::new(0.1, 4, 2, 0.5, 1.0, 1.0).unwrap();
        assert!(
            regularized_empirical_loss(&c, &data, &hi).unwrap()
                > regularized_empirical_loss(&c, &data, &lo).unwrap()
        );
    }

    #[test]
    fn gradient_cases() {
        let fs = random_features(3, 8);
        let cfg = TrainConfig::new(0.1, 3, 2, 0.5, 1.0, 1.0).unwrap();
        let x = [0.2, -0.4];
        let g = grad_estimate(&[0.0; 6], &fs, &x, 1.0, &cfg).unwrap();
        let phi = fs.features(&x).unwrap();
        for (gi, pi) in g.iter().zip(&phi) {
            assert!((gi + 2.0 * pi).abs() < 1e-15);
        }
        // residual zero and no regularization
        let fs0 = zero_freq();
        let mut phi = [0.0; 2];
        let mut out = [1.0; 2];
        let pre = grad_estimate_into(&[1.0, 0.7], &fs0, &x, 1.0, 0.0, &mut phi, &mut out).unwrap();
        assert_eq!(pre, 0.0);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn prefactor_computed_once_per_step() {
        let fs = random_features(16, 9);
        let cfg = TrainConfig::new(0.1, 16, 10, 0.5, 1.0, 1.0).unwrap();
        let data = random_data(10, 10);
        PREFACTOR_EVALS.with(|c| c.set(0));
        let _ = grad_estimate(&[0.1; 32], &fs, &data[0].x, 1.0, &cfg).unwrap();
        assert_eq!(PREFACTOR_EVALS.with(|c| c.get()), 1);
        PREFACTOR_EVALS.with(|c| c.set(0));
        train(&fs, data, &cfg, TrainOptions::default()).unwrap();
        assert_eq!(PREFACTOR_EVALS.with(|c| c.get()), 10);
    }

    #[test]
    fn projection_cases() {
        let mut a = [0.3, 0.4];
        assert!(!project_ball(&mut a, 1.0));
        assert_eq!(a, [0.3, 0.4]);
        let mut a = [3.0, 4.0];
        assert!(project_ball(&mut a, 1.0));
        assert!((a[0] - 0.6).abs() < 1e-15 && (a[1] - 0.8).abs() < 1e-15);
        let once = a;
        project_ball(&mut a, 1.0);
        assert_eq!(a, once);
    }

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::new(0.5, 1, 2, 1.0, 1.0, 1.0).unwrap();
        assert!((step_size(0, &cfg) - 2.0).abs() < 1e-15);
        for t in [1usize, 5, 40] {
            let ratio = step_size(2 * t, &cfg) / step_size(t, &cfg);
            assert!((ratio - (t as f64 + 1.0) / (2.0 * t as f64 + 1.0)).abs() < 1e-14);
        }
        let n = 100_000;
        let sum: f64 = (0..n).map(|t| step_size(t, &cfg)).sum();
        let want = (cfg.eta_c() / cfg.mu()) * ((n as f64).ln() + 0.577_215_664_9);
        assert!((sum - want).abs() < 1e-3 * want);
    }

    #[test]
    fn zero_residual_stream_is_a_fixed_point() {
        let cfg = TrainConfig::new(0.3, 1, 2, 1.0, 1.0, 1.0).unwrap();
        let stream = vec![LabeledSample::new(vec![0.1, 0.2], 0.0); 2];
        let (c, trace) = train(&zero_freq(), stream, &cfg, TrainOptions { keep_iterates: true }).unwrap();
        assert_eq!(c.alpha(), &[0.0, 0.0]);
        assert!(trace.iterates.unwrap().iter().all(|a| a == &[0.0, 0.0]));
    }

    #[test]
    fn stream_exhaustion_reported() {
        let cfg = TrainConfig::new(0.3, 1, 4, 1.0, 1.0, 1.0).unwrap();
        let stream = vec![LabeledSample::new(vec![0.1, 0.2], 1.0); 3];
        assert!(matches!(
            train(&zero_freq(), stream, &cfg, TrainOptions::default()),
            Err(Error::StreamExhausted { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let fs = random_features(8, 11);
        let data = random_data(40, 12);
        let cfg = TrainConfig::new(0.05, 8, 200, 0.5, 2.0, 1.0).unwrap();
        let run = || {
            let s = IidResampler::new(&data, seeded(13)).unwrap();
            train(&fs, s, &cfg, TrainOptions::default()).unwrap()
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta.records, tb.records);
    }

    #[test]
    fn suffix_average_matches_stored_iterates() {
        let fs = random_features(6, 14);
        let data = random_data(40, 15);
        let cfg = TrainConfig::new(0.05, 6, 64, 0.5, 2.0, 1.0).unwrap();
        let s = IidResampler::new(&data, seeded(16)).unwrap();
        let (c, trace) = train(&fs, s, &cfg, TrainOptions { keep_iterates: true }).unwrap();
        let its = trace.iterates.unwrap();
        // its[k] is alpha_{k+1}; average alpha_{33} ..= alpha_{64}
        let mut mean = vec![0.0; 12];
        for a in &its[32..64] {
            mean.iter_mut().zip(a).for_each(|(m, v)| *m += v / 32.0);
        }
        for (m, a) in mean.iter().zip(c.alpha()) {
            assert!((m - a).abs() < 1e-12);
        }
    }

    #[test]
    fn ridge_large_regularization_is_zero() {
        let fs = random_features(4, 17);
        let data = random_data(20, 18);
        let cfg = TrainConfig::new(1e6, 4, 2, 1.0, 1.0, 1.0).unwrap();
        let sol = ridge_oracle(&fs, &data, &cfg).unwrap();
        assert!(norm2(&sol.alpha) <= 1e-5);
    }

    #[test]
    fn ridge_single_zero_frequency() {
        // Phi = [1, 0]; (diag(1, 0) + r I) a = (y, 0) gives a = (y / (1 + r), 0)
        let cfg = TrainConfig::new(0.25, 1, 2, 0.8, 10.0, 1.0).unwrap();
        let r = 0.25 * 0.8;
        let data = [LabeledSample::new(vec![0.4, -0.3], -1.0)];
        let sol = ridge_oracle(&zero_freq(), &data, &cfg).unwrap();
        assert!((sol.alpha[0] - (-1.0 / (1.0 + r))).abs() < 1e-14);
        assert!(sol.alpha[1].abs() < 1e-14);
        assert!(sol.inside);
    }

    #[test]
    fn ridge_solution_is_stationary() {
        let fs = random_features(5, 19);
        let data = random_data(60, 20);
        let cfg = TrainConfig::new(0.01, 5, 2, 0.5, 100.0, 1.0).unwrap();
        let sol = ridge_oracle(&fs, &data, &cfg).unwrap();
        let c = Classifier::new(fs, sol.alpha).unwrap();
        let g = regularized_loss_gradient(&c, &data, &cfg).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-8), "{g:?}");
    }

    #[test]
    fn ridge_projection_when_outside() {
        let fs = random_features(5, 21);
        let data = random_data(60, 22);
        let cfg = TrainConfig::new(1e-4, 5, 2, 1.0, 1e-3, 1.0).unwrap();
        let sol = ridge_oracle(&fs, &data, &cfg).unwrap();
        assert!(!sol.inside);
        assert!((norm2(&sol.projected) - cfg.radius()).abs() < 1e-12);
    }

    #[test]
    fn classifier_file_round_trip() {
        let fs = FeatureSet::new(
            Points::from_rows(1, &[[0.25], [-1.0 / 3.0]]).unwrap(),
            FeatureMode::Optimized,
            Some(vec![0.9, 1.1]),
            Some(0.02),
        )
        .unwrap();
        let c = Classifier::new(fs, vec![0.1, -0.2, 1e-300, 3.0]).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Classifier::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn schedule_rounding_and_limits() {
        let k = ScheduleConstants::default();
        let dof = |l: f64| 1.0 / l.sqrt();
        let h = theorem_hyperparams(0.5, 2.0, 0.5, 0.01, 1e-12, dof, &k).unwrap();
        assert!((h.lambda - 0.25 / 4.0).abs() < 1e-9);
        let n_limit = (100f64).ln() * 16.0 / (0.0625 * 0.25);
        assert!((h.n as f64 - n_limit).abs() <= 2.0);
        assert_eq!(h.n % 2, 0);
        for (eps, p) in [(0.5, 0.3), (1e-6, 0.6), (0.1, 0.01)] {
            let h = theorem_hyperparams(0.3, 1.5, 0.7, eps, p, dof, &k).unwrap();
            assert!(h.m >= 1 && h.n % 2 == 0 && h.n >= 2);
        }
        assert!(theorem_hyperparams(0.0, 1.0, 0.5, 0.1, 0.5, dof, &k).is_err());
        assert!(theorem_hyperparams(0.5, 1.0, 0.5, 1.0, 0.5, dof, &k).is_err());
        assert!(theorem_hyperparams(0.5, 1.0, 0.5, 0.1, 1.0, dof, &k).is_err());
    }

    #[test]
    fn halving_epsilon_adds_log_two_increment() {
        let k = ScheduleConstants { c_n: 50.0, ..Default::default() };
        let dof = |_: f64| 3.0;
        let (delta, f, q, p) = (0.5, 2.0, 0.5, 0.2);
        let a = theorem_hyperparams(delta, f, q, 0.1, p, dof, &k).unwrap();
        let b = theorem_hyperparams(delta, f, q, 0.05, p, dof, &k).unwrap();
        let lambda = a.lambda;
        let prefactor = f.powi(4) / (delta.powi(4) * q * q)
            * (f / (lambda * delta * q.sqrt())).powf(4.0 * p / (1.0 - p));
        let want = 50.0 * 2f64.ln() * prefactor;
        assert!(((b.n as f64 - a.n as f64) - want).abs() <= 2.0);
    }
}
