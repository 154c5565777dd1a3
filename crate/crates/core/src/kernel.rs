//! Gaussian kernel, its Fourier measure, and random Fourier feature maps.
//!
//! The kernel is `k(x, x') = exp(-gamma |x - x'|^2)`. With the feature map
//! `phi(v, x) = exp(-2 pi i v.x)` it is the expectation of
//! `conj(phi(v, x)) phi(v, x')` over `v ~ tau`, where `tau` is the centred
//! Gaussian with per-coordinate variance `gamma / (2 pi^2)`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::points::{dot, sq_dist, Points};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    gamma: f64,
    dim: usize,
}

impl GaussianKernel {
    pub fn new(gamma: f64, dim: usize) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        if dim == 0 {
            return Err(Error::invalid("kernel dimension must be at least 1"));
        }
        Ok(GaussianKernel { gamma, dim })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, y.len())?;
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        (-self.gamma * sq_dist(x, y)).exp()
    }

    /// Per-coordinate variance of the Fourier measure, `gamma / (2 pi^2)`.
    pub fn tau_variance(&self) -> f64 {
        self.gamma / (2.0 * PI * PI)
    }

    pub fn tau_std(&self) -> f64 {
        self.tau_variance().sqrt()
    }

    /// Density of the Fourier measure at `v`.
    pub fn tau_density(&self, v: &[f64]) -> f64 {
        let var = self.tau_variance();
        let r2: f64 = v.iter().map(|c| c * c).sum();
        (-(r2) / (2.0 * var)).exp() / (2.0 * PI * var).powf(self.dim as f64 / 2.0)
    }

    /// Draws one frequency from the Fourier measure.
    pub fn sample_tau<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let sd = self.tau_std();
        (0..self.dim)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub(crate) fn sample_tau_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let sd = self.tau_std();
        for o in out.iter_mut() {
            *o = sd * rng.sample::<f64, _>(StandardNormal);
        }
    }

    pub fn gram(&self, pts: &Points) -> Result<nalgebra::DMatrix<f64>> {
        check_dim(self.dim, pts.dim())?;
        let n = pts.len();
        let mut k = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = 1.0;
            for j in 0..i {
                let v = self.eval_unchecked(pts.row(i), pts.row(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }
}

/// Returns `(cos(-2 pi v.x), sin(-2 pi v.x))`.
pub fn feature_pair(v: &[f64], x: &[f64]) -> Result<(f64, f64)> {
    check_dim(v.len(), x.len())?;
    Ok(feature_pair_unchecked(v, x))
}

#[inline]
pub(crate) fn feature_pair_unchecked(v: &[f64], x: &[f64]) -> (f64, f64) {
    let (s, c) = (-2.0 * PI * dot(v, x)).sin_cos();
    (c, s)
}

/// Frequency plus phase for the real-valued feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RealFeatureParams {
    v: Vec<f64>,
    b: f64,
}

impl RealFeatureParams {
    pub fn new(v: Vec<f64>, b: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::invalid(format!("phase b must lie in [0, 1], got {b}")));
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("frequency".into()));
        }
        Ok(RealFeatureParams { v, b })
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

/// `sqrt(2) cos(-2 pi v.x + 2 pi b)`.
pub fn feature_real(p: &RealFeatureParams, x: &[f64]) -> Result<f64> {
    check_dim(p.v.len(), x.len())?;
    Ok(SQRT_2 * (-2.0 * PI * dot(&p.v, x) + 2.0 * PI * p.b).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureMode {
    Conventional,
    Optimized,
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::Conventional => "conventional",
            FeatureMode::Optimized => "optimized",
        })
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(FeatureMode::Conventional),
            "optimized" => Ok(FeatureMode::Optimized),
            other => Err(Error::invalid(format!(
                "mode must be conventional or optimized, got {other:?}"
            ))),
        }
    }
}

/// `M` sampled frequencies, optionally with the leverage value each was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    freqs: Points,
    mode: FeatureMode,
    leverage: Option<Vec<f64>>,
    lambda: Option<f64>,
}

impl FeatureSet {
    pub fn new(
        freqs: Points,
        mode: FeatureMode,
        leverage: Option<Vec<f64>>,
        lambda: Option<f64>,
    ) -> Result<Self> {
        if freqs.is_empty() {
            return Err(Error::Empty("feature set"));
        }
        if !freqs.all_finite() {
            return Err(Error::NonFinite("frequencies".into()));
        }
        if let Some(q) = &leverage {
            check_dim(freqs.len(), q.len())?;
            if q.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
                return Err(Error::invalid("leverage values must be positive"));
            }
        }
        if let Some(l) = lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::invalid(format!("lambda must be positive, got {l}")));
            }
        }
        Ok(FeatureSet {
            freqs,
            mode,
            leverage,
            lambda,
        })
    }

    pub fn conventional(freqs: Points) -> Result<Self> {
        FeatureSet::new(freqs, FeatureMode::Conventional, None, None)
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.freqs.dim()
    }

    pub fn freq(&self, m: usize) -> &[f64] {
        self.freqs.row(m)
    }

    pub fn freqs(&self) -> &Points {
        &self.freqs
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    pub fn leverage_values(&self) -> Option<&[f64]> {
        self.leverage.as_deref()
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    /// Writes `[cos(-2 pi v_0.x), sin(-2 pi v_0.x), ...]` into `out` (length `2M`).
    pub fn features_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), x.len())?;
        check_dim(2 * self.len(), out.len())?;
        for (m, v) in self.freqs.rows().enumerate() {
            let (c, s) = feature_pair_unchecked(v, x);
            out[2 * m] = c;
            out[2 * m + 1] = s;
        }
        Ok(())
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; 2 * self.len()];
        self.features_into(x, &mut out)?;
        Ok(out)
    }

    /// Plain Monte-Carlo kernel estimate `(1/M) sum_m Re[conj(phi_m(x)) phi_m(x')]`.
    pub fn kernel_mc_estimate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), y.len())?;
        let sum: f64 = self.freqs.rows().map(|v| pair_product(v, x, y)).sum();
        Ok(sum / self.len() as f64)
    }

    /// Importance-weighted estimate `sum_m Re[conj(phi_m(x)) phi_m(x')] / (M q_m)`.
    pub fn kernel_importance_estimate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let q = self
            .leverage
            .as_deref()
            .ok_or_else(|| Error::invalid("feature set carries no leverage values"))?;
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), y.len())?;
        let m = self.len() as f64;
        Ok(self
            .freqs
            .rows()
            .zip(q)
            .map(|(v, &qm)| pair_product(v, x, y) / (m * qm))
            .sum())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let lambda = match self.lambda {
            Some(l) => l.to_string(),
            None => "none".to_string(),
        };
        writeln!(
            w,
            "# mode={} M={} D={} lambda={}",
            self.mode,
            self.len(),
            self.dim(),
            lambda
        )?;
        for (m, v) in self.freqs.rows().enumerate() {
            let row: Vec<String> = v.iter().map(f64::to_string).collect();
            write!(w, "{}", row.join(" "))?;
            if let Some(q) = &self.leverage {
                write!(w, " q={}", q[m])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads a feature set written by [`FeatureSet::write_to`].
    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing feature-set header"))?;
        let header = header?;
        let fields = parse_header(&header, 1)?;
        let mode: FeatureMode = header_field(&fields, "mode", 1)?
            .parse()
            .map_err(|e: Error| Error::parse(1, e.to_string()))?;
        let m: usize = parse_num(header_field(&fields, "M", 1)?, 1)?;
        let d: usize = parse_num(header_field(&fields, "D", 1)?, 1)?;
        let lambda = match header_field(&fields, "lambda", 1)? {
            "none" => None,
            s => Some(parse_num::<f64>(s, 1)?),
        };
        let mut freqs = Points::with_capacity(d.max(1), m);
        let mut leverage: Vec<f64> = Vec::new();
        for _ in 0..m {
            let (idx, line) = lines
                .next()
                .ok_or_else(|| Error::parse(m + 1, "feature set truncated"))?;
            let line = line?;
            let lineno = idx + 1;
            let mut row = Vec::with_capacity(d);
            for tok in line.split_whitespace() {
                if let Some(q) = tok.strip_prefix("q=") {
                    leverage.push(parse_num(q, lineno)?);
                } else {
                    row.push(parse_num::<f64>(tok, lineno)?);
                }
            }
            if row.len() != d {
                return Err(Error::parse(
                    lineno,
                    format!("expected {d} coordinates, found {}", row.len()),
                ));
            }
            freqs.push(&row)?;
        }
        let leverage = match leverage.len() {
            0 => None,
            n if n == m => Some(leverage),
            n => {
                return Err(Error::parse(
                    m + 1,
                    format!("{n} of {m} rows carry leverage values"),
                ))
            }
        };
        FeatureSet::new(freqs, mode, leverage, lambda)
    }
}

#[inline]
fn pair_product(v: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let (cx, sx) = feature_pair_unchecked(v, x);
    let (cy, sy) = feature_pair_unchecked(v, y);
    cx * cy + sx * sy
}

pub(crate) fn parse_header(line: &str, lineno: usize) -> Result<Vec<(String, String)>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(lineno, "header must start with '#'"))?;
    body.split_whitespace()
        .filter(|tok| tok.contains('='))
        .map(|tok| {
            let (k, v) = tok.split_once('=').expect("filtered on '='");
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

pub(crate) fn header_field<'a>(
    fields: &'a [(String, String)],
    key: &str,
    lineno: usize,
) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::parse(lineno, format!("header is missing `{key}`")))
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str, lineno: usize) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(lineno, format!("cannot parse {s:?} as a number")))
}
