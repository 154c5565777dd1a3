//! Synthetic low-noise classification tasks and the sweeps run on them.
//!
//! A task fixes an input distribution and a Bayes classifier
//! `f*(x) = s sum_a c_a k(x, anchor_a)` lying in the kernel's RKHS. Labels are
//! drawn with `P(y = 1 | x) = (1 + f*(x)) / 2`, so `E[y | x] = f*(x)`, and the
//! scale `s` is chosen so that `delta <= |f*| <= 1` on a dense probe of the
//! support. That margin is certified when the task is built.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::kernel::{header_field, parse_header, parse_num, FeatureMode, FeatureSet, GaussianKernel};
use crate::leverage::{
    sample_conventional, sample_optimized_grid, sample_optimized_rejection, FrequencyGrid,
    RejectionOptions, SamplerStats, SpectralModel,
};
use crate::points::{dot, norm2, Points};
use crate::rng::{derive_seed, seeded, StdRng};
use crate::sgd::{train, Classifier, TrainConfig, TrainOptions};

pub use crate::sgd::LabeledSample;

/// Number of probe points used to certify the margin.
pub const PROBE_COUNT: usize = 10_000;
const PROBE_SEED: u64 = 0x05ee_d0f9_a0be;
/// The rescale puts `max |f*|` at this value when the margin allows it.
const TARGET_MAX: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub enum InputDist {
    /// Uniform on the sphere of the given radius; with `cap`, restricted to
    /// points within geodesic angle `cap` of some anchor direction.
    Sphere { radius: f64, cap: Option<f64> },
    /// Equal-weight mixture of isotropic Gaussians, each truncated to the box
    /// `center +- trunc * std`.
    SubGaussian {
        centers: Points,
        std: f64,
        trunc: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub min_abs: f64,
    pub max_abs: f64,
    pub f_norm: f64,
    pub bayes_error: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    name: String,
    kern: GaussianKernel,
    dist: InputDist,
    anchors: Points,
    coeffs: Vec<f64>,
    delta: f64,
    rescale: f64,
    certificate: Certificate,
}

impl SyntheticTask {
    /// Builds the task, choosing the rescale factor and certifying the margin.
    pub fn new(
        name: &str,
        kern: GaussianKernel,
        dist: InputDist,
        anchors: Points,
        coeffs: Vec<f64>,
        delta: f64,
    ) -> Result<Self> {
        let mut task = SyntheticTask::unscaled(name, kern, dist, anchors, coeffs, delta)?;
        let probes = task.probe_points();
        let (lo, hi) = task.raw_range(&probes);
        if lo <= 0.0 {
            return Err(Error::Certification(format!(
                "f* vanishes on the support (min |g| = {lo:e})"
            )));
        }
        let floor = delta / lo;
        let ceil = 1.0 / hi;
        if floor > ceil {
            return Err(Error::Certification(format!(
                "no scale gives delta <= |f*| <= 1: need max/min <= {:.4}, have {:.4}",
                1.0 / delta,
                hi / lo
            )));
        }
        task.rescale = (TARGET_MAX / hi).clamp(floor, ceil);
        task.certificate = task.certify(&probes)?;
        Ok(task)
    }

    /// Rebuilds a stored task with a known scale and re-checks the margin.
    pub fn with_rescale(
        name: &str,
        kern: GaussianKernel,
        dist: InputDist,
        anchors: Points,
        coeffs: Vec<f64>,
        delta: f64,
        rescale: f64,
    ) -> Result<Self> {
        let mut task = SyntheticTask::unscaled(name, kern, dist, anchors, coeffs, delta)?;
        if !(rescale.is_finite() && rescale > 0.0) {
            return Err(Error::invalid("rescale must be positive"));
        }
        task.rescale = rescale;
        let probes = task.probe_points();
        task.certificate = task.certify(&probes)?;
        Ok(task)
    }

    fn unscaled(
        name: &str,
        kern: GaussianKernel,
        dist: InputDist,
        anchors: Points,
        coeffs: Vec<f64>,
        delta: f64,
    ) -> Result<Self> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::invalid("task name must be a non-empty word"));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1], got {delta}")));
        }
        check_dim(kern.dim(), anchors.dim())?;
        check_dim(anchors.len(), coeffs.len())?;
        if anchors.is_empty() {
            return Err(Error::Empty("anchors"));
        }
        if !anchors.all_finite() || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("task anchors or coefficients".into()));
        }
        match &dist {
            InputDist::Sphere { radius, cap } => {
                if !(*radius > 0.0) {
                    return Err(Error::invalid("sphere radius must be positive"));
                }
                if let Some(c) = cap {
                    if !(*c > 0.0 && *c <= PI) {
                        return Err(Error::invalid("cap angle must lie in (0, pi]"));
                    }
                    if anchors.rows().any(|a| norm2(a) == 0.0) {
                        return Err(Error::invalid("cap directions need non-zero anchors"));
                    }
                }
            }
            InputDist::SubGaussian {
                centers,
                std,
                trunc,
            } => {
                check_dim(kern.dim(), centers.dim())?;
                if centers.is_empty() || !(*std > 0.0) || !(*trunc > 0.0) {
                    return Err(Error::invalid(
                        "sub-Gaussian input needs centers, std > 0 and trunc > 0",
                    ));
                }
            }
        }
        Ok(SyntheticTask {
            name: name.to_string(),
            kern,
            dist,
            anchors,
            coeffs,
            delta,
            rescale: 1.0,
            certificate: Certificate {
                min_abs: 0.0,
                max_abs: 0.0,
                f_norm: 0.0,
                bayes_error: 0.0,
            },
        })
    }

    fn probe_points(&self) -> Points {
        gen_inputs(self, PROBE_COUNT, &mut seeded(PROBE_SEED))
    }

    fn raw_value(&self, x: &[f64]) -> f64 {
        self.anchors
            .rows()
            .zip(&self.coeffs)
            .map(|(a, c)| c * self.kern.eval_unchecked(x, a))
            .sum()
    }

    fn raw_range(&self, probes: &Points) -> (f64, f64) {
        probes.rows().fold((f64::INFINITY, 0.0f64), |(lo, hi), x| {
            let g = self.raw_value(x).abs();
            (lo.min(g), hi.max(g))
        })
    }

    fn certify(&self, probes: &Points) -> Result<Certificate> {
        let (lo, hi) = self.raw_range(probes);
        let (min_abs, max_abs) = (self.rescale * lo, self.rescale * hi);
        if min_abs < self.delta || max_abs > 1.0 {
            return Err(Error::Certification(format!(
                "probe range of |f*| is [{min_abs}, {max_abs}], need [{}, 1]",
                self.delta
            )));
        }
        let bayes_error = probes
            .rows()
            .map(|x| (1.0 - self.bayes_classifier(x).abs()) / 2.0)
            .sum::<f64>()
            / probes.len() as f64;
        Ok(Certificate {
            min_abs,
            max_abs,
            f_norm: self.rescale * self.raw_rkhs_norm(),
            bayes_error,
        })
    }

    /// `sqrt(c' K_anchor c)` before rescaling.
    fn raw_rkhs_norm(&self) -> f64 {
        let n = self.anchors.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += self.coeffs[i]
                    * self.coeffs[j]
                    * self.kern.eval_unchecked(self.anchors.row(i), self.anchors.row(j));
            }
        }
        s.max(0.0).sqrt()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kern
    }

    pub fn dim(&self) -> usize {
        self.kern.dim()
    }

    pub fn dist(&self) -> &InputDist {
        &self.dist
    }

    pub fn anchors(&self) -> &Points {
        &self.anchors
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn rescale(&self) -> f64 {
        self.rescale
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    /// RKHS norm of the Bayes classifier.
    pub fn f_norm(&self) -> f64 {
        self.certificate.f_norm
    }

    pub fn bayes_classifier(&self, x: &[f64]) -> f64 {
        self.rescale * self.raw_value(x)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let dist = match &self.dist {
            InputDist::Sphere { radius, cap } => format!(
                "dist=sphere radius={} cap={}",
                radius,
                cap.map_or("none".to_string(), |c| c.to_string())
            ),
            InputDist::SubGaussian {
                centers,
                std,
                trunc,
            } => format!(
                "dist=subgaussian std={} trunc={} centers={}",
                std,
                trunc,
                centers.len()
            ),
        };
        writeln!(
            w,
            "# task name={} D={} gamma={} delta={} rescale={} anchors={} {}",
            self.name,
            self.dim(),
            self.kern.gamma(),
            self.delta,
            self.rescale,
            self.anchors.len(),
            dist
        )?;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        for (a, c) in self.anchors.rows().zip(&self.coeffs) {
            writeln!(w, "anchor {} coeff {}", join(a), c)?;
        }
        if let InputDist::SubGaussian { centers, .. } = &self.dist {
            for c in centers.rows() {
                writeln!(w, "center {}", join(c))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing task header"))??;
        let fields = parse_header(&header, 1)?;
        let field = |k: &str| header_field(&fields, k, 1);
        let name = field("name")?.to_string();
        let d: usize = parse_num(field("D")?, 1)?;
        let gamma: f64 = parse_num(field("gamma")?, 1)?;
        let delta: f64 = parse_num(field("delta")?, 1)?;
        let rescale: f64 = parse_num(field("rescale")?, 1)?;
        let n_anchors: usize = parse_num(field("anchors")?, 1)?;
        if d == 0 {
            return Err(Error::parse(1, "D must be positive"));
        }
        let kern = GaussianKernel::new(gamma, d).map_err(|e| Error::parse(1, e.to_string()))?;
        let mut anchors = Points::new(d);
        let mut coeffs = Vec::new();
        let mut centers = Points::new(d);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.first() {
                None => continue,
                Some(&"anchor") => {
                    if toks.len() != d + 3 || toks[d + 1] != "coeff" {
                        return Err(Error::parse(lineno, "expected `anchor <D values> coeff <c>`"));
                    }
                    let row: Vec<f64> = toks[1..=d]
                        .iter()
                        .map(|t| parse_num(t, lineno))
                        .collect::<Result<_>>()?;
                    anchors.push(&row)?;
                    coeffs.push(parse_num(toks[d + 2], lineno)?);
                }
                Some(&"center") => {
                    if toks.len() != d + 1 {
                        return Err(Error::parse(lineno, "expected `center <D values>`"));
                    }
                    let row: Vec<f64> = toks[1..]
                        .iter()
                        .map(|t| parse_num(t, lineno))
                        .collect::<Result<_>>()?;
                    centers.push(&row)?;
                }
                Some(other) => {
                    return Err(Error::parse(lineno, format!("unknown record {other:?}")));
                }
            }
        }
        if anchors.len() != n_anchors {
            return Err(Error::parse(
                1,
                format!("header promises {n_anchors} anchors, found {}", anchors.len()),
            ));
        }
        let dist = match field("dist")? {
            "sphere" => InputDist::Sphere {
                radius: parse_num(field("radius")?, 1)?,
                cap: match field("cap")? {
                    "none" => None,
                    s => Some(parse_num(s, 1)?),
                },
            },
            "subgaussian" => {
                let n_centers: usize = parse_num(field("centers")?, 1)?;
                if centers.len() != n_centers {
                    return Err(Error::parse(1, "center count does not match header"));
                }
                InputDist::SubGaussian {
                    centers,
                    std: parse_num(field("std")?, 1)?,
                    trunc: parse_num(field("trunc")?, 1)?,
                }
            }
            other => return Err(Error::parse(1, format!("unknown distribution {other:?}"))),
        };
        SyntheticTask::with_rescale(&name, kern, dist, anchors, coeffs, delta, rescale)
    }
}

/// `D = 2` circle task: `anchors` unit-circle anchors with alternating signs,
/// support restricted to arcs of half-width `cap` around them.
pub fn sphere_task(gamma: f64, delta: f64, anchors: usize, cap: f64) -> Result<SyntheticTask> {
    let kern = GaussianKernel::new(gamma, 2)?;
    let rows: Vec<[f64; 2]> = (0..anchors)
        .map(|a| {
            let t = 2.0 * PI * a as f64 / anchors as f64;
            [t.cos(), t.sin()]
        })
        .collect();
    let coeffs = (0..anchors).map(|a| if a % 2 == 0 { 1.0 } else { -1.0 }).collect();
    SyntheticTask::new(
        "sphere",
        kern,
        InputDist::Sphere {
            radius: 1.0,
            cap: Some(cap),
        },
        Points::from_rows(2, &rows)?,
        coeffs,
        delta,
    )
}

/// Reference circle task: gamma = 1, six alternating anchors, arcs of +-15 degrees.
pub fn reference_sphere_task(delta: f64) -> Result<SyntheticTask> {
    sphere_task(1.0, delta, 6, PI / 12.0)
}

/// Reference sub-Gaussian task: two truncated clusters at `(+-1, 0)` carrying
/// opposite-sign anchors.
pub fn reference_subgaussian_task(delta: f64) -> Result<SyntheticTask> {
    let kern = GaussianKernel::new(1.0, 2)?;
    let centers = Points::from_rows(2, &[[1.0, 0.0], [-1.0, 0.0]])?;
    SyntheticTask::new(
        "subgaussian",
        kern,
        InputDist::SubGaussian {
            centers: centers.clone(),
            std: 0.2,
            trunc: 2.5,
        },
        centers,
        vec![1.0, -1.0],
        delta,
    )
}

/// Draws `n` inputs from the task's distribution.
pub fn gen_inputs<R: Rng + ?Sized>(task: &SyntheticTask, n: usize, rng: &mut R) -> Points {
    let d = task.dim();
    let mut pts = Points::with_capacity(d, n);
    let mut x = vec![0.0; d];
    while pts.len() < n {
        match &task.dist {
            InputDist::Sphere { radius, cap } => {
                let nrm = loop {
                    for c in x.iter_mut() {
                        *c = rng.sample(StandardNormal);
                    }
                    let nrm = norm2(&x);
                    if nrm > 0.0 {
                        break nrm;
                    }
                };
                x.iter_mut().for_each(|c| *c *= radius / nrm);
                if let Some(cap) = cap {
                    let cos_cap = cap.cos();
                    let inside = task.anchors.rows().any(|a| {
                        dot(&x, a) / (radius * norm2(a)) >= cos_cap
                    });
                    if !inside {
                        continue;
                    }
                }
            }
            InputDist::SubGaussian {
                centers,
                std,
                trunc,
            } => {
                let k = rng.gen_range(0..centers.len());
                let c = centers.row(k);
                for (xi, ci) in x.iter_mut().zip(c) {
                    *xi = loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= *trunc {
                            break ci + std * z;
                        }
                    };
                }
            }
        }
        pts.push(&x).expect("task dimension");
    }
    pts
}

/// Draws `y = +1` with probability `(1 + f*(x)) / 2`.
pub fn sample_label<R: Rng + ?Sized>(task: &SyntheticTask, x: &[f64], rng: &mut R) -> Result<f64> {
    check_dim(task.dim(), x.len())?;
    let f = task.bayes_classifier(x);
    if !(f.abs() <= 1.0) {
        return Err(Error::Certification(format!("|f*(x)| = {} exceeds 1", f.abs())));
    }
    Ok(if rng.gen::<f64>() < (1.0 + f) / 2.0 { 1.0 } else { -1.0 })
}

pub fn sample_labeled<R: Rng + ?Sized>(
    task: &SyntheticTask,
    n: usize,
    rng: &mut R,
) -> Result<Vec<LabeledSample>> {
    let xs = gen_inputs(task, n, rng);
    xs.rows()
        .map(|x| Ok(LabeledSample::new(x.to_vec(), sample_label(task, x, rng)?)))
        .collect()
}

/// Endless stream of fresh labeled examples from the task.
pub struct TaskStream<'a, R> {
    task: &'a SyntheticTask,
    rng: R,
}

impl<'a, R: Rng> TaskStream<'a, R> {
    pub fn new(task: &'a SyntheticTask, rng: R) -> Self {
        TaskStream { task, rng }
    }
}

impl<R: Rng> Iterator for TaskStream<'_, R> {
    type Item = LabeledSample;

    fn next(&mut self) -> Option<LabeledSample> {
        let x = gen_inputs(self.task, 1, &mut self.rng);
        let y = sample_label(self.task, x.row(0), &mut self.rng).ok()?;
        Some(LabeledSample::new(x.row(0).to_vec(), y))
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Fraction of examples with `sign(f(x)) != y`, where `sign(0) = +1`.
pub fn classification_error<F: Fn(&[f64]) -> f64>(f: F, test: &[LabeledSample]) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let wrong = test.iter().filter(|s| sign(f(&s.x)) != s.y).count();
    wrong as f64 / test.len() as f64
}

/// Paired estimate: error of `f` minus error of the Bayes classifier on the
/// same labeled examples.
pub fn excess_error<F: Fn(&[f64]) -> f64>(f: F, task: &SyntheticTask, test: &[LabeledSample]) -> f64 {
    classification_error(f, test) - classification_error(|x| task.bayes_classifier(x), test)
}

/// Monte-Carlo estimate of the Bayes error, the mean of `(1 - |f*|) / 2`.
pub fn bayes_error(task: &SyntheticTask, probes: &Points) -> f64 {
    if probes.is_empty() {
        return 0.0;
    }
    probes
        .rows()
        .map(|x| (1.0 - task.bayes_classifier(x).abs()) / 2.0)
        .sum::<f64>()
        / probes.len() as f64
}

/// Root-mean-square and maximum of `|f - f*|` over the probe points.
pub fn function_distances<F: Fn(&[f64]) -> f64>(
    f: F,
    task: &SyntheticTask,
    probes: &Points,
) -> Result<(f64, f64)> {
    if probes.is_empty() {
        return Err(Error::Empty("probe points"));
    }
    check_dim(task.dim(), probes.dim())?;
    let (mut ss, mut mx) = (0.0, 0.0f64);
    for x in probes.rows() {
        let d = (f(x) - task.bayes_classifier(x)).abs();
        ss += d * d;
        mx = mx.max(d);
    }
    Ok(((ss / probes.len() as f64).sqrt(), mx))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerKind {
    Rejection(RejectionOptions),
    Grid(FrequencyGrid),
}

/// Everything one pipeline run needs besides the task and the seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub mode: FeatureMode,
    pub lambda: f64,
    pub m: usize,
    pub n: usize,
    pub q_min: f64,
    pub eta_c: f64,
    /// Unlabeled examples defining the empirical integral operator.
    pub n0: usize,
    pub test_size: usize,
    pub sampler: SamplerKind,
}

impl PipelineConfig {
    /// `q_min` seen by training: conventional features have weight 1 everywhere.
    pub fn effective_q_min(&self) -> f64 {
        match self.mode {
            FeatureMode::Conventional => 1.0,
            FeatureMode::Optimized => self.q_min,
        }
    }

    pub fn train_config(&self, task: &SyntheticTask) -> Result<TrainConfig> {
        TrainConfig::new(
            self.lambda,
            self.m,
            self.n,
            self.effective_q_min(),
            task.f_norm(),
            self.eta_c,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 || self.test_size == 0 {
            return Err(Error::invalid("n0 and test_size must be positive"));
        }
        TrainConfig::new(self.lambda, self.m, self.n, self.q_min, 1.0, self.eta_c).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub task: String,
    pub mode: FeatureMode,
    pub dim: usize,
    pub gamma: f64,
    pub delta: f64,
    pub lambda: f64,
    pub m: usize,
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    pub class_err: f64,
    pub bayes_err: f64,
    pub excess_err: f64,
    pub l2: f64,
    pub linf: f64,
    pub loss: f64,
    pub accept_rate: f64,
    pub wall_ms: f64,
}

pub const RECORD_HEADER: &str = "task,mode,D,gamma,delta,lambda,M,N,trial,seed,class_err,bayes_err,excess_err,l2,linf,loss,accept_rate,wall_ms";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.task,
            self.mode,
            self.dim,
            self.gamma,
            self.delta,
            self.lambda,
            self.m,
            self.n,
            self.trial,
            self.seed,
            self.class_err,
            self.bayes_err,
            self.excess_err,
            self.l2,
            self.linf,
            self.loss,
            self.accept_rate,
            self.wall_ms
        )
    }

    /// Same record with the timing field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> MetricsRecord {
        MetricsRecord {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

pub fn write_records<W: Write>(w: &mut W, records: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "{RECORD_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(r: &mut R) -> Result<Vec<MetricsRecord>> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::parse(1, "missing header"))??;
    if header.trim() != RECORD_HEADER {
        return Err(Error::parse(1, "unexpected records header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 18 {
            return Err(Error::parse(lineno, format!("expected 18 fields, found {}", f.len())));
        }
        out.push(MetricsRecord {
            task: f[0].to_string(),
            mode: f[1].parse().map_err(|e: Error| Error::parse(lineno, e.to_string()))?,
            dim: parse_num(f[2], lineno)?,
            gamma: parse_num(f[3], lineno)?,
            delta: parse_num(f[4], lineno)?,
            lambda: parse_num(f[5], lineno)?,
            m: parse_num(f[6], lineno)?,
            n: parse_num(f[7], lineno)?,
            trial: parse_num(f[8], lineno)?,
            seed: parse_num(f[9], lineno)?,
            class_err: parse_num(f[10], lineno)?,
            bayes_err: parse_num(f[11], lineno)?,
            excess_err: parse_num(f[12], lineno)?,
            l2: parse_num(f[13], lineno)?,
            linf: parse_num(f[14], lineno)?,
            loss: parse_num(f[15], lineno)?,
            accept_rate: parse_num(f[16], lineno)?,
            wall_ms: parse_num(f[17], lineno)?,
        });
    }
    Ok(out)
}

// Labels for the sub-streams derived from a trial seed.
const STREAM_UNLABELED: u64 = 1;
const STREAM_LABELED: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_FEATURES: u64 = 4;

/// Held-out labeled examples for a trial; shared by every cell of that trial.
pub fn test_set(task: &SyntheticTask, trial_seed: u64, size: usize) -> Result<Vec<LabeledSample>> {
    sample_labeled(task, size, &mut seeded(derive_seed(trial_seed, &[STREAM_TEST])))
}

/// Unlabeled examples defining the empirical integral operator for a trial.
pub fn unlabeled_points(task: &SyntheticTask, trial_seed: u64, n0: usize) -> Points {
    gen_inputs(task, n0, &mut seeded(derive_seed(trial_seed, &[STREAM_UNLABELED])))
}

/// Features drawn for one trial plus what the sampler reported.
#[derive(Debug, Clone)]
pub struct FeatureDraw {
    pub features: FeatureSet,
    /// Rejection-sampler diagnostics; `None` for conventional or grid draws.
    pub stats: Option<SamplerStats>,
    /// `d(lambda)` of the empirical operator; `None` for conventional draws.
    pub dof: Option<f64>,
}

impl FeatureDraw {
    /// Accepted fraction of proposals; 1 when every draw is kept.
    pub fn accept_rate(&self) -> f64 {
        self.stats.map_or(1.0, |s| s.acceptance_rate)
    }
}

/// Spectral model of the trial's unlabeled examples at `cfg.lambda`.
pub fn trial_model(task: &SyntheticTask, cfg: &PipelineConfig, trial_seed: u64) -> Result<SpectralModel> {
    let pts = unlabeled_points(task, trial_seed, cfg.n0);
    SpectralModel::build(pts, *task.kernel(), cfg.lambda)
}

/// Draws features for one trial. The stream depends on the mode and `M` only,
/// so every `N` of a trial sees the same features.
pub fn sample_features(
    task: &SyntheticTask,
    cfg: &PipelineConfig,
    trial_seed: u64,
) -> Result<FeatureDraw> {
    sample_features_with(task, cfg, trial_seed, None)
}

/// As [`sample_features`], reusing a model built by [`trial_model`].
pub fn sample_features_with(
    task: &SyntheticTask,
    cfg: &PipelineConfig,
    trial_seed: u64,
    model: Option<&SpectralModel>,
) -> Result<FeatureDraw> {
    let mode_tag = match cfg.mode {
        FeatureMode::Conventional => 0,
        FeatureMode::Optimized => 1,
    };
    let mut rng = seeded(derive_seed(trial_seed, &[STREAM_FEATURES, mode_tag, cfg.m as u64]));
    if cfg.mode == FeatureMode::Conventional {
        return Ok(FeatureDraw {
            features: sample_conventional(task.kernel(), cfg.m, &mut rng)?,
            stats: None,
            dof: None,
        });
    }
    let built;
    let model = match model {
        Some(m) if m.lambda() == cfg.lambda => m,
        _ => {
            built = trial_model(task, cfg, trial_seed)?;
            &built
        }
    };
    let (features, stats) = match &cfg.sampler {
        SamplerKind::Rejection(opts) => {
            let (fs, st) = sample_optimized_rejection(model, cfg.m, &mut rng, opts)?;
            (fs, Some(st))
        }
        SamplerKind::Grid(grid) => (sample_optimized_grid(model, cfg.m, grid, &mut rng)?, None),
    };
    Ok(FeatureDraw {
        features,
        stats,
        dof: Some(model.dof()),
    })
}

/// The trial's stream of fresh labeled training examples.
pub fn labeled_stream(task: &SyntheticTask, trial_seed: u64) -> TaskStream<'_, StdRng> {
    TaskStream::new(task, seeded(derive_seed(trial_seed, &[STREAM_LABELED])))
}

/// Trains on `N` fresh examples of the trial's labeled stream.
pub fn train_on_task(
    task: &SyntheticTask,
    fs: &FeatureSet,
    cfg: &PipelineConfig,
    trial_seed: u64,
) -> Result<Classifier> {
    let tc = cfg.train_config(task)?;
    let stream = labeled_stream(task, trial_seed);
    let (c, _) = train(fs, stream, &tc, TrainOptions::default())?;
    Ok(c)
}

/// Scores a classifier on a held-out labeled set drawn from the task.
pub fn evaluate(
    task: &SyntheticTask,
    c: &Classifier,
    cfg: &TrainConfig,
    test: &[LabeledSample],
) -> Result<Evaluation> {
    let preds: Vec<f64> = test
        .iter()
        .map(|s| c.predict(&s.x))
        .collect::<Result<_>>()?;
    let mut wrong = 0usize;
    let mut bayes_wrong = 0usize;
    let (mut ss, mut mx, mut sq_loss, mut bayes_err) = (0.0, 0.0f64, 0.0, 0.0);
    for (s, &p) in test.iter().zip(&preds) {
        let fstar = task.bayes_classifier(&s.x);
        wrong += (sign(p) != s.y) as usize;
        bayes_wrong += (sign(fstar) != s.y) as usize;
        let d = (p - fstar).abs();
        ss += d * d;
        mx = mx.max(d);
        sq_loss += (s.y - p) * (s.y - p);
        bayes_err += (1.0 - fstar.abs()) / 2.0;
    }
    let n = test.len().max(1) as f64;
    Ok(Evaluation {
        class_err: wrong as f64 / n,
        bayes_err: bayes_err / n,
        excess_err: (wrong as f64 - bayes_wrong as f64) / n,
        l2: (ss / n).sqrt(),
        linf: mx,
        loss: sq_loss / n + cfg.reg() * dot(c.alpha(), c.alpha()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub class_err: f64,
    pub bayes_err: f64,
    pub excess_err: f64,
    pub l2: f64,
    pub linf: f64,
    pub loss: f64,
}

/// One full run: sample features, train, evaluate on the trial's test set.
pub fn run_pipeline(
    task: &SyntheticTask,
    cfg: &PipelineConfig,
    trial: usize,
    trial_seed: u64,
    test: &[LabeledSample],
) -> Result<MetricsRecord> {
    run_pipeline_with(task, cfg, trial, trial_seed, test, None)
}

/// As [`run_pipeline`], reusing the trial's spectral model when given.
pub fn run_pipeline_with(
    task: &SyntheticTask,
    cfg: &PipelineConfig,
    trial: usize,
    trial_seed: u64,
    test: &[LabeledSample],
    model: Option<&SpectralModel>,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let draw = sample_features_with(task, cfg, trial_seed, model)?;
    let accept_rate = draw.accept_rate();
    let c = train_on_task(task, &draw.features, cfg, trial_seed)?;
    let ev = evaluate(task, &c, &cfg.train_config(task)?, test)?;
    Ok(MetricsRecord {
        task: task.name().to_string(),
        mode: cfg.mode,
        dim: task.dim(),
        gamma: task.kernel().gamma(),
        delta: task.delta(),
        lambda: cfg.lambda,
        m: cfg.m,
        n: cfg.n,
        trial,
        seed: trial_seed,
        class_err: ev.class_err,
        bayes_err: ev.bayes_err,
        excess_err: ev.excess_err,
        l2: ev.l2,
        linf: ev.linf,
        loss: ev.loss,
        accept_rate,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn log_cell(r: &MetricsRecord) {
    if std::env::var_os("OPTRF_QUIET").is_none() {
        eprintln!(
            "cell mode={} M={} N={} trial={} excess={:.4} linf={:.3} ms={:.1}",
            r.mode, r.m, r.n, r.trial, r.excess_err, r.linf, r.wall_ms
        );
    }
}

pub fn trial_seed(base: u64, trial: usize) -> u64 {
    derive_seed(base, &[trial as u64])
}

fn run_cells(
    task: &SyntheticTask,
    cells: Vec<(PipelineConfig, usize)>,
    trials: usize,
    base_seed: u64,
    test_size: usize,
    jobs: usize,
) -> Result<Vec<MetricsRecord>> {
    let tests: Vec<Vec<LabeledSample>> = (0..trials)
        .map(|t| test_set(task, trial_seed(base_seed, t), test_size))
        .collect::<Result<_>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut records: Vec<MetricsRecord> = pool.install(|| {
        // one model per (trial, lambda) serves every optimized cell of that trial
        let mut keys: Vec<(usize, u64, usize)> = cells
            .iter()
            .filter(|(c, _)| c.mode == FeatureMode::Optimized)
            .map(|(c, t)| (*t, c.lambda.to_bits(), c.n0))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let models: Vec<((usize, u64, usize), SpectralModel)> = keys
            .par_iter()
            .map(|&(t, bits, n0)| {
                let cfg = cells
                    .iter()
                    .find(|(c, tt)| *tt == t && c.lambda.to_bits() == bits && c.n0 == n0)
                    .map(|(c, _)| *c)
                    .expect("key comes from cells");
                trial_model(task, &cfg, trial_seed(base_seed, t)).map(|m| ((t, bits, n0), m))
            })
            .collect::<Result<_>>()?;
        cells
            .par_iter()
            .map(|(cfg, trial)| {
                let model = models
                    .iter()
                    .find(|(k, _)| *k == (*trial, cfg.lambda.to_bits(), cfg.n0))
                    .map(|(_, m)| m);
                let rec = run_pipeline_with(
                    task,
                    cfg,
                    *trial,
                    trial_seed(base_seed, *trial),
                    &tests[*trial],
                    model,
                )?;
                log_cell(&rec);
                Ok(rec)
            })
            .collect::<Result<_>>()
    })?;
    records.sort_by(|a, b| {
        (a.n, a.m, a.mode, a.trial).cmp(&(b.n, b.m, b.mode, b.trial))
    });
    Ok(records)
}

/// Excess error against the number of labeled examples.
pub fn sweep_error_vs_n(
    task: &SyntheticTask,
    base: &PipelineConfig,
    n_grid: &[usize],
    trials: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<MetricsRecord>> {
    base.validate()?;
    let mut cells = Vec::new();
    for &n in n_grid {
        let cfg = PipelineConfig { n, ..*base };
        cfg.validate()?;
        for t in 0..trials {
            cells.push((cfg, t));
        }
    }
    run_cells(task, cells, trials, seed, base.test_size, jobs)
}

/// Excess error against the number of features, for each feature mode.
/// Trials are paired: both modes share unlabeled data, labels and test sets.
pub fn sweep_error_vs_m(
    task: &SyntheticTask,
    base: &PipelineConfig,
    m_grid: &[usize],
    modes: &[FeatureMode],
    trials: usize,
    seed: u64,
    jobs: usize,
) -> Result<Vec<MetricsRecord>> {
    base.validate()?;
    let mut cells = Vec::new();
    for &m in m_grid {
        for &mode in modes {
            let cfg = PipelineConfig { m, mode, ..*base };
            cfg.validate()?;
            for t in 0..trials {
                cells.push((cfg, t));
            }
        }
    }
    run_cells(task, cells, trials, seed, base.test_size, jobs)
}

/// Records whose probe sup-distance to `f*` is below the margin yet show a
/// nonzero excess error. Sign agreement under the margin makes this empty.
pub fn margin_violations(records: &[MetricsRecord]) -> Vec<&MetricsRecord> {
    records
        .iter()
        .filter(|r| r.linf < r.delta && r.excess_err != 0.0)
        .collect()
}

/// Mean and standard error of a field grouped by a key, in key order.
pub fn group_stats<K: Ord + Copy>(
    records: &[MetricsRecord],
    key: impl Fn(&MetricsRecord) -> K,
    value: impl Fn(&MetricsRecord) -> f64,
) -> Vec<(K, f64, f64, usize)> {
    let mut groups: std::collections::BTreeMap<K, Vec<f64>> = Default::default();
    for r in records {
        groups.entry(key(r)).or_default().push(value(r));
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (k, mean, (var / n).sqrt(), v.len())
        })
        .collect()
}

/// Least-squares line through `(x_i, y_i)`; returns `(slope, intercept, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Fit of `log mu_i` against `i` over eigenvalue indices `first..=last` (1-based).
pub fn spectral_decay_fit(eigs: &[f64], first: usize, last: usize) -> (f64, f64, f64) {
    let idx: Vec<f64> = (first..=last).map(|i| i as f64).collect();
    let logs: Vec<f64> = (first..=last).map(|i| eigs[i - 1].max(f64::MIN_POSITIVE).ln()).collect();
    linear_fit(&idx, &logs)
}

/// Fit `d(lambda) ~ a + b log(1/lambda)`; returns `(a, b, max relative residual)`.
pub fn log_dof_fit(lambdas: &[f64], dofs: &[f64]) -> (f64, f64, f64) {
    let x: Vec<f64> = lambdas.iter().map(|l| (1.0 / l).ln()).collect();
    let (b, a, _) = linear_fit(&x, dofs);
    let worst = x
        .iter()
        .zip(dofs)
        .map(|(xi, d)| ((a + b * xi) - d).abs() / d)
        .fold(0.0, f64::max);
    (a, b, worst)
}

/// `n` points evenly spaced on the unit circle, starting at angle 0.
pub fn circle_points(n: usize) -> Points {
    let rows: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / n as f64;
            [t.cos(), t.sin()]
        })
        .collect();
    Points::from_rows(2, &rows).expect("two columns")
}

/// `n` points drawn uniformly from the unit circle.
pub fn random_circle_points<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Points {
    let rows: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let t = rng.gen_range(0.0..2.0 * PI);
            [t.cos(), t.sin()]
        })
        .collect();
    Points::from_rows(2, &rows).expect("two columns")
}
