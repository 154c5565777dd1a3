//! Command-line front end for the `optrf` binary.
//!
//! Every subcommand reads its settings from flags and, optionally, from a flat
//! `key = value` file given with `--config`; flags win over the file. Keys are
//! the long flag names, with `-` and `_` interchangeable.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::error::Error;
use crate::experiments::{
    self, circle_points, evaluate, gen_inputs, group_stats, labeled_stream, log_dof_fit,
    margin_violations, reference_subgaussian_task, sample_features, spectral_decay_fit,
    sphere_task, test_set, trial_seed, write_records, MetricsRecord, PipelineConfig, SamplerKind,
    SyntheticTask, RECORD_HEADER,
};
use crate::kernel::{FeatureMode, FeatureSet, GaussianKernel};
use crate::leverage::{FrequencyGrid, RejectionOptions, SpectralModel};
use crate::points::Points;
use crate::rng::seeded;
use crate::sgd::{theorem_lambda, train, Classifier, TrainConfig, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CERTIFICATION: i32 = 3;
pub const EXIT_SAMPLER: i32 = 4;
pub const EXIT_IO: i32 = 5;

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  1  numerical failure during a run
  2  configuration error (bad flag, bad config key or value, output exists without --force)
  3  margin certification failure
  4  sampler abort (acceptance floor or grid mass)
  5  I/O or file-format error";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            msg: msg.into(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_IO,
            msg: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidParameter(_) => EXIT_CONFIG,
            Error::Certification(_) => EXIT_CERTIFICATION,
            Error::SamplerAbort { .. } | Error::GridMassDeficit { .. } => EXIT_SAMPLER,
            Error::Io(_) | Error::Parse { .. } => EXIT_IO,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "optrf",
    version,
    about = "Classification with leverage-optimized random Fourier features",
    after_help = EXIT_HELP
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic task, certify its margin and write the task file.
    GenTask(GenTaskArgs),
    /// Draw conventional or optimized features for a task.
    SampleFeatures(SampleArgs),
    /// Fit a classifier on a fresh labeled stream from the task.
    Train(TrainArgs),
    /// Score a classifier on held-out task data and append a record.
    Eval(EvalArgs),
    /// Excess error against the number of labeled examples N.
    SweepN(SweepNArgs),
    /// Excess error against the number of features M, per feature mode.
    SweepM(SweepMArgs),
    /// Eigenvalues of the empirical operator and d(lambda) over a grid.
    Spectrum(SpectrumArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value file; flags override its entries
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// [key: seed] base seed for every random stream, u64 (default 0)
    #[arg(long)]
    pub seed: Option<u64>,
    /// [key: force] overwrite existing output files
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Sphere,
    Subgaussian,
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sphere" => Ok(TaskKind::Sphere),
            "subgaussian" => Ok(TaskKind::Subgaussian),
            _ => Err(format!("unknown task kind {s:?} (sphere|subgaussian)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerChoice {
    Rejection,
    Grid,
}

impl FromStr for SamplerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rejection" => Ok(SamplerChoice::Rejection),
            "grid" => Ok(SamplerChoice::Grid),
            _ => Err(format!("unknown sampler {s:?} (rejection|grid)")),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenTaskArgs {
    #[command(flatten)]
    pub common: Common,
    /// [key: out] task file to write (required)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [key: kind] sphere | subgaussian (default sphere)
    #[arg(long)]
    pub kind: Option<TaskKind>,
    /// [key: gamma] kernel width, > 0 (default 1; the sub-Gaussian task uses 1)
    #[arg(long)]
    pub gamma: Option<f64>,
    /// [key: delta] low-noise margin, in (0, 1] (default 0.5 sphere, 0.25 subgaussian)
    #[arg(long)]
    pub delta: Option<f64>,
    /// [key: anchors] sphere only: anchor count, even and >= 2 (default 6)
    #[arg(long)]
    pub anchors: Option<usize>,
    /// [key: cap_deg] sphere only: arc half-width in degrees, in (0, 180] (default 15)
    #[arg(long)]
    pub cap_deg: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// [key: mode] conventional | optimized (default optimized)
    #[arg(long)]
    pub mode: Option<FeatureMode>,
    /// [key: lambda] ridge parameter, > 0 (default: schedule value from delta, |f*|, q_min, p)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// [key: p] schedule exponent used when lambda is not given, in (0, 1) (default 0.1)
    #[arg(long)]
    pub p: Option<f64>,
    /// [key: c_lambda] schedule constant for lambda, > 0 (default 1)
    #[arg(long)]
    pub c_lambda: Option<f64>,
    /// [key: q_min] minimal leverage weight for optimized features, in (0, 1] (default 0.5)
    #[arg(long)]
    pub q_min: Option<f64>,
    /// [key: n0] unlabeled examples behind the leverage score, >= 1 (default 200)
    #[arg(long)]
    pub n0: Option<usize>,
    /// [key: sampler] rejection | grid; grid needs D <= 2 (default rejection)
    #[arg(long)]
    pub sampler: Option<SamplerChoice>,
    /// [key: acceptance_floor] rejection abort threshold, in [0, 1) (default 1e-6)
    #[arg(long)]
    pub acceptance_floor: Option<f64>,
    /// [key: trial_budget] proposals before the floor is enforced, >= 1 (default 10000000)
    #[arg(long)]
    pub trial_budget: Option<u64>,
    /// [key: bottom_raised] mix each draw with the Fourier measure half of the time, bool (default false)
    #[arg(long)]
    pub bottom_raised: Option<bool>,
    /// [key: grid_cells] grid sampler cells per axis, >= 2 (default 400)
    #[arg(long)]
    pub grid_cells: Option<usize>,
    /// [key: grid_half_width] grid half-width in Fourier-measure std units, > 0 (default 6)
    #[arg(long)]
    pub grid_half_width: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    /// [key: task] task file (required)
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// [key: m] number of features M, >= 1 (default 32)
    #[arg(long)]
    pub m: Option<usize>,
    #[command(flatten)]
    pub features: FeatureArgs,
    /// [key: out] feature file to write (required)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [key: diagnostics] CSV to append sampler diagnostics to
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// [key: task] task file (required)
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// [key: features] feature file (required)
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// [key: n] labeled examples N, even and >= 2 (default 8192)
    #[arg(long)]
    pub n: Option<usize>,
    /// [key: lambda] ridge parameter, > 0 (default: the feature file's, else the schedule value)
    #[arg(long)]
    pub lambda: Option<f64>,
    /// [key: p] schedule exponent used when lambda is unknown, in (0, 1) (default 0.1)
    #[arg(long)]
    pub p: Option<f64>,
    /// [key: c_lambda] schedule constant for lambda, > 0 (default 1)
    #[arg(long)]
    pub c_lambda: Option<f64>,
    /// [key: q_min] q_min for optimized features, in (0, 1]; conventional features use 1 (default 0.5)
    #[arg(long)]
    pub q_min: Option<f64>,
    /// [key: eta_c] step-size constant c in c / (mu (t + 1)), > 0 (default 1)
    #[arg(long)]
    pub eta_c: Option<f64>,
    /// [key: out] classifier file to write (required)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [key: trace] CSV of the per-step trace
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// [key: task] task file (required)
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// [key: classifier] classifier file written by `train` (required)
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// [key: test_size] held-out labeled examples, >= 1 (default 10000)
    #[arg(long)]
    pub test_size: Option<usize>,
    /// [key: out] records CSV to append the result to
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepShared {
    /// [key: task] task file (required)
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// [key: trials] independent trials per grid point, >= 1 (default 10)
    #[arg(long)]
    pub trials: Option<usize>,
    /// [key: eta_c] step-size constant, > 0 (default 1)
    #[arg(long)]
    pub eta_c: Option<f64>,
    /// [key: test_size] held-out labeled examples per trial, >= 1 (default 10000)
    #[arg(long)]
    pub test_size: Option<usize>,
    /// [key: jobs] worker threads for sweep cells, >= 1 (default: available cores)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// [key: out] records CSV to write (required)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepNArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sweep: SweepShared,
    #[command(flatten)]
    pub features: FeatureArgs,
    /// [key: m] number of features M, >= 1 (default 32)
    #[arg(long)]
    pub m: Option<usize>,
    /// [key: n_grid] comma list of even N >= 2 (default 128,256,...,16384)
    #[arg(long)]
    pub n_grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepMArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub sweep: SweepShared,
    #[command(flatten)]
    pub features: FeatureArgs,
    /// [key: n] labeled examples N, even and >= 2 (default 8192)
    #[arg(long)]
    pub n: Option<usize>,
    /// [key: m_grid] comma list of M >= 1 (default 2,4,8,16,32,64)
    #[arg(long)]
    pub m_grid: Option<String>,
    /// [key: modes] comma list of feature modes (default conventional,optimized)
    #[arg(long)]
    pub modes: Option<String>,
}

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub common: Common,
    /// [key: task] task file whose inputs define the operator; without it, evenly spaced circle points
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// [key: gamma] kernel width for circle points, > 0 (default 1)
    #[arg(long)]
    pub gamma: Option<f64>,
    /// [key: n0] number of points, >= 1 (default 200)
    #[arg(long)]
    pub n0: Option<usize>,
    /// [key: lambda_grid] comma list of lambda > 0 (default 13 log-spaced values in [1e-4, 1e-1])
    #[arg(long)]
    pub lambda_grid: Option<String>,
    /// [key: spectrum_out] CSV of eigenvalues `i,mu_i` (required)
    #[arg(long)]
    pub spectrum_out: Option<PathBuf>,
    /// [key: dof_out] CSV of `lambda,dof,q_max_bound,expected_acceptance` (required)
    #[arg(long)]
    pub dof_out: Option<PathBuf>,
}

/// Values from the `--config` file, keyed with underscores.
struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

impl Settings {
    fn load(path: Option<&Path>, subcommand: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        let Some(path) = path else {
            return Ok(Settings { values });
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let allowed = allowed_keys(subcommand);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            let key = normalize_key(k);
            if !allowed.contains(&key) {
                return Err(CliError::config(format!(
                    "{}:{}: unknown key {key:?} for {subcommand}",
                    path.display(),
                    i + 1
                )));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Settings { values })
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| CliError::config(format!("config key {key}: {e}"))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str, flag: Option<T>) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key, flag)?
            .ok_or_else(|| CliError::config(format!("missing required setting `{key}`")))
    }

    fn flag(&self, key: &str, flag: bool) -> CliResult<bool> {
        Ok(flag || self.get::<bool>(key, None)?.unwrap_or(false))
    }
}

fn allowed_keys(subcommand: &str) -> Vec<String> {
    let cmd = Cli::command();
    cmd.find_subcommand(subcommand)
        .map(|c| {
            c.get_arguments()
                .map(|a| a.get_id().as_str().to_string())
                .filter(|id| id != "config" && id != "help")
                .collect()
        })
        .unwrap_or_default()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> CliResult<()> {
    if cond {
        Ok(())
    } else {
        Err(CliError::config(msg()))
    }
}

fn parse_list<T: FromStr>(key: &str, s: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let out: Vec<T> = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| CliError::config(format!("{key}: {e}")))
        })
        .collect::<CliResult<_>>()?;
    check(!out.is_empty(), || format!("{key} must not be empty"))?;
    Ok(out)
}

fn ensure_writable(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::config(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Writes through a sibling temp file renamed into place.
fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> crate::error::Result<()>,
) -> CliResult<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| -> CliResult<()> {
        let file = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush().map_err(|e| CliError::io(&tmp, e))?;
        drop(w);
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Appends rows to a CSV, writing `header` first when the file is new.
fn append_csv(path: &Path, header: &str, rows: &[String]) -> CliResult<()> {
    let existing = if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if text.lines().next().map(str::trim) != Some(header) {
            return Err(CliError {
                code: EXIT_IO,
                msg: format!("{}: header does not match `{header}`", path.display()),
            });
        }
        text
    } else {
        format!("{header}\n")
    };
    write_atomic(path, |w| {
        w.write_all(existing.as_bytes())?;
        for r in rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })
}

fn open(path: &Path) -> CliResult<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(path, e))
}

fn load_task(path: &Path) -> CliResult<SyntheticTask> {
    Ok(SyntheticTask::read_from(&mut open(path)?)?)
}

/// Training metadata appended after the coefficients of a classifier file.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TrainedMeta {
    n: usize,
    lambda: f64,
    q_min: f64,
    eta_c: f64,
    seed: u64,
}

fn write_classifier<W: Write>(w: &mut W, c: &Classifier, meta: &TrainedMeta) -> crate::error::Result<()> {
    c.write_to(w)?;
    writeln!(
        w,
        "# trained N={} lambda={} q_min={} eta_c={} seed={}",
        meta.n, meta.lambda, meta.q_min, meta.eta_c, meta.seed
    )?;
    Ok(())
}

fn read_classifier(path: &Path) -> CliResult<(Classifier, TrainedMeta)> {
    let mut r = open(path)?;
    let c = Classifier::read_from(&mut r)?;
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| CliError::io(path, e))?;
    let bad = || CliError {
        code: EXIT_IO,
        msg: format!("{}: missing or malformed `# trained` line", path.display()),
    };
    let body = line.trim().strip_prefix("# trained").ok_or_else(bad)?;
    let fields: BTreeMap<&str, &str> = body
        .split_whitespace()
        .filter_map(|t| t.split_once('='))
        .collect();
    let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
    let num = |k: &str| -> CliResult<f64> { get(k)?.parse().map_err(|_| bad()) };
    Ok((
        c,
        TrainedMeta {
            n: get("N")?.parse().map_err(|_| bad())?,
            lambda: num("lambda")?,
            q_min: num("q_min")?,
            eta_c: num("eta_c")?,
            seed: get("seed")?.parse().map_err(|_| bad())?,
        },
    ))
}

/// Pipeline settings shared by `sample-features` and the sweeps.
fn feature_config(
    s: &Settings,
    a: &FeatureArgs,
    task: &SyntheticTask,
    m: usize,
) -> CliResult<PipelineConfig> {
    let mode = s.or("mode", a.mode, FeatureMode::Optimized)?;
    let q_min = s.or("q_min", a.q_min, 0.5)?;
    check(q_min > 0.0 && q_min <= 1.0, || format!("q_min must lie in (0, 1], got {q_min}"))?;
    let lambda = resolve_lambda(s, a.lambda, a.p, a.c_lambda, task, q_min)?;
    let n0 = s.or("n0", a.n0, 200)?;
    check(n0 >= 1, || "n0 must be at least 1".into())?;
    check(m >= 1, || "m must be at least 1".into())?;
    let sampler = match s.or("sampler", a.sampler, SamplerChoice::Rejection)? {
        SamplerChoice::Rejection => {
            let floor = s.or("acceptance_floor", a.acceptance_floor, 1e-6)?;
            check((0.0..1.0).contains(&floor), || {
                format!("acceptance_floor must lie in [0, 1), got {floor}")
            })?;
            let budget = s.or("trial_budget", a.trial_budget, 10_000_000)?;
            check(budget >= 1, || "trial_budget must be at least 1".into())?;
            SamplerKind::Rejection(RejectionOptions {
                acceptance_floor: floor,
                trial_budget: budget,
                bottom_raised: s.or("bottom_raised", a.bottom_raised, false)?,
            })
        }
        SamplerChoice::Grid => {
            check(task.dim() <= 2, || "the grid sampler needs D <= 2".into())?;
            let cells = s.or("grid_cells", a.grid_cells, 400)?;
            check(cells >= 2, || "grid_cells must be at least 2".into())?;
            let hw = s.or("grid_half_width", a.grid_half_width, 6.0)?;
            check(hw > 0.0, || "grid_half_width must be positive".into())?;
            SamplerKind::Grid(FrequencyGrid {
                half_width: hw,
                cells_per_axis: cells,
            })
        }
    };
    Ok(PipelineConfig {
        mode,
        lambda,
        m,
        n: 2,
        q_min,
        eta_c: 1.0,
        n0,
        test_size: 1,
        sampler,
    })
}

fn resolve_lambda(
    s: &Settings,
    lambda: Option<f64>,
    p: Option<f64>,
    c_lambda: Option<f64>,
    task: &SyntheticTask,
    q_min: f64,
) -> CliResult<f64> {
    match s.get("lambda", lambda)? {
        Some(l) => {
            check(l.is_finite() && l > 0.0, || format!("lambda must be positive, got {l}"))?;
            Ok(l)
        }
        None => Ok(theorem_lambda(
            task.delta(),
            task.f_norm(),
            q_min,
            s.or("p", p, 0.1)?,
            s.or("c_lambda", c_lambda, 1.0)?,
        )?),
    }
}

fn cmd_gen_task(a: &GenTaskArgs) -> CliResult<String> {
    let s = Settings::load(a.common.config.as_deref(), "gen-task")?;
    let out: PathBuf = s.required("out", a.out.clone())?;
    ensure_writable(&out, s.flag("force", a.common.force)?)?;
    let kind = s.or("kind", a.kind, TaskKind::Sphere)?;
    let task = match kind {
        TaskKind::Sphere => {
            let gamma = s.or("gamma", a.gamma, 1.0)?;
            let delta = s.or("delta", a.delta, 0.5)?;
            let anchors = s.or("anchors", a.anchors, 6)?;
            let cap = s.or("cap_deg", a.cap_deg, 15.0)?;
            check(gamma > 0.0, || "gamma must be positive".into())?;
            check(delta > 0.0 && delta <= 1.0, || "delta must lie in (0, 1]".into())?;
            check(anchors >= 2 && anchors % 2 == 0, || {
                "anchors must be even and at least 2".into()
            })?;
            check(cap > 0.0 && cap <= 180.0, || "cap_deg must lie in (0, 180]".into())?;
            sphere_task(gamma, delta, anchors, cap.to_radians())?
        }
        TaskKind::Subgaussian => {
            let delta = s.or("delta", a.delta, 0.25)?;
            check(delta > 0.0 && delta <= 1.0, || "delta must lie in (0, 1]".into())?;
            reference_subgaussian_task(delta)?
        }
    };
    write_atomic(&out, |w| task.write_to(w))?;
    let c = task.certificate();
    Ok(format!(
        "task={} min|f*|={} max|f*|={} f_norm={} bayes_error={} delta={}\n",
        task.name(),
        c.min_abs,
        c.max_abs,
        c.f_norm,
        c.bayes_error,
        task.delta()
    ))
}

const DIAGNOSTICS_HEADER: &str =
    "mode,M,D,lambda,dof,sampler,proposals,accepted,accept_rate,expected_accept,proposals_per_feature,wall_ms,seed";

fn cmd_sample_features(a: &SampleArgs) -> CliResult<String> {
    let s = Settings::load(a.common.config.as_deref(), "sample-features")?;
    let task = load_task(&s.required::<PathBuf>("task", a.task.clone())?)?;
    let out: PathBuf = s.required("out", a.out.clone())?;
    ensure_writable(&out, s.flag("force", a.common.force)?)?;
    let m = s.or("m", a.m, 32)?;
    let cfg = feature_config(&s, &a.features, &task, m)?;
    let seed = s.or("seed", a.common.seed, 0)?;
    let start = Instant::now();
    let draw = sample_features(&task, &cfg, trial_seed(seed, 0))?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    write_atomic(&out, |w| draw.features.write_to(w))?;
    let sampler = match cfg.sampler {
        SamplerKind::Rejection(_) => "rejection",
        SamplerKind::Grid(_) => "grid",
    };
    let (prop, acc, rate, expected, ppf) = match draw.stats {
        Some(st) => (
            st.proposals,
            st.accepted,
            st.acceptance_rate,
            st.expected_acceptance,
            st.proposals_per_feature,
        ),
        None => (m as u64, m as u64, 1.0, 1.0, 1.0),
    };
    let row = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        cfg.mode,
        m,
        task.dim(),
        cfg.lambda,
        draw.dof.map_or("none".to_string(), |d| d.to_string()),
        if cfg.mode == FeatureMode::Conventional { "direct" } else { sampler },
        prop,
        acc,
        rate,
        expected,
        ppf,
        wall_ms,
        seed
    );
    if let Some(path) = s.get::<PathBuf>("diagnostics", a.diagnostics.clone())? {
        append_csv(&path, DIAGNOSTICS_HEADER, std::slice::from_ref(&row))?;
    }
    Ok(format!("{DIAGNOSTICS_HEADER}\n{row}\n"))
}

fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let s = Settings::load(a.common.config.as_deref(), "train")?;
    let task = load_task(&s.required::<PathBuf>("task", a.task.clone())?)?;
    let fpath: PathBuf = s.required("features", a.features.clone())?;
    let fs = FeatureSet::read_from(&mut open(&fpath)?)?;
    if fs.dim() != task.dim() {
        return Err(CliError::config(format!(
            "features have D={} but the task has D={}",
            fs.dim(),
            task.dim()
        )));
    }
    let out: PathBuf = s.required("out", a.out.clone())?;
    let force = s.flag("force", a.common.force)?;
    ensure_writable(&out, force)?;
    let trace_path = s.get::<PathBuf>("trace", a.trace.clone())?;
    if let Some(t) = &trace_path {
        ensure_writable(t, force)?;
    }
    let n = s.or("n", a.n, 8192)?;
    check(n >= 2 && n % 2 == 0, || format!("n must be even and at least 2, got {n}"))?;
    let q_cfg = s.or("q_min", a.q_min, 0.5)?;
    check(q_cfg > 0.0 && q_cfg <= 1.0, || format!("q_min must lie in (0, 1], got {q_cfg}"))?;
    let q_min = match fs.mode() {
        FeatureMode::Conventional => 1.0,
        FeatureMode::Optimized => q_cfg,
    };
    let lambda = match (s.get("lambda", a.lambda)?, fs.lambda()) {
        (Some(l), _) => l,
        (None, Some(l)) => l,
        (None, None) => resolve_lambda(&s, None, a.p, a.c_lambda, &task, q_cfg)?,
    };
    let eta_c = s.or("eta_c", a.eta_c, 1.0)?;
    let seed = s.or("seed", a.common.seed, 0)?;
    let tc = TrainConfig::new(lambda, fs.len(), n, q_min, task.f_norm(), eta_c)?;
    let stream = labeled_stream(&task, trial_seed(seed, 0));
    let (c, trace) = train(&fs, stream, &tc, TrainOptions::default())?;
    let meta = TrainedMeta {
        n,
        lambda,
        q_min,
        eta_c,
        seed,
    };
    write_atomic(&out, |w| write_classifier(w, &c, &meta))?;
    if let Some(t) = trace_path {
        write_atomic(&t, |w| trace.write_csv(w))?;
    }
    let projected = trace.records.iter().filter(|r| r.projected).count();
    Ok(format!(
        "trained M={} N={} lambda={} q_min={} radius={} projected_steps={}\n",
        fs.len(),
        n,
        lambda,
        q_min,
        tc.radius(),
        projected
    ))
}

fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let s = Settings::load(a.common.config.as_deref(), "eval")?;
    let task = load_task(&s.required::<PathBuf>("task", a.task.clone())?)?;
    let (c, meta) = read_classifier(&s.required::<PathBuf>("classifier", a.classifier.clone())?)?;
    if c.features().dim() != task.dim() {
        return Err(CliError::config("classifier and task dimensions differ"));
    }
    let test_size = s.or("test_size", a.test_size, 10_000)?;
    check(test_size >= 1, || "test_size must be at least 1".into())?;
    let seed = s.or("seed", a.common.seed, meta.seed)?;
    let start = Instant::now();
    let ts = trial_seed(seed, 0);
    let test = test_set(&task, ts, test_size)?;
    let tc = TrainConfig::new(
        meta.lambda,
        c.features().len(),
        meta.n,
        meta.q_min,
        task.f_norm(),
        meta.eta_c,
    )?;
    let ev = evaluate(&task, &c, &tc, &test)?;
    let rec = MetricsRecord {
        task: task.name().to_string(),
        mode: c.features().mode(),
        dim: task.dim(),
        gamma: task.kernel().gamma(),
        delta: task.delta(),
        lambda: meta.lambda,
        m: c.features().len(),
        n: meta.n,
        trial: 0,
        seed: ts,
        class_err: ev.class_err,
        bayes_err: ev.bayes_err,
        excess_err: ev.excess_err,
        l2: ev.l2,
        linf: ev.linf,
        loss: ev.loss,
        accept_rate: f64::NAN,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    if let Some(path) = s.get::<PathBuf>("out", a.out.clone())? {
        append_csv(&path, RECORD_HEADER, &[rec.csv_row()])?;
    }
    Ok(format!("{RECORD_HEADER}\n{}\n", rec.csv_row()))
}

struct SweepSetup {
    task: SyntheticTask,
    trials: usize,
    seed: u64,
    jobs: usize,
    out: PathBuf,
    eta_c: f64,
    test_size: usize,
}

fn sweep_setup(s: &Settings, c: &Common, w: &SweepShared) -> CliResult<SweepSetup> {
    let task = load_task(&s.required::<PathBuf>("task", w.task.clone())?)?;
    let out: PathBuf = s.required("out", w.out.clone())?;
    ensure_writable(&out, s.flag("force", c.force)?)?;
    let trials = s.or("trials", w.trials, 10)?;
    check(trials >= 1, || "trials must be at least 1".into())?;
    let default_jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let jobs = s.or("jobs", w.jobs, default_jobs)?;
    check(jobs >= 1, || "jobs must be at least 1".into())?;
    let eta_c = s.or("eta_c", w.eta_c, 1.0)?;
    check(eta_c > 0.0, || "eta_c must be positive".into())?;
    let test_size = s.or("test_size", w.test_size, 10_000)?;
    check(test_size >= 1, || "test_size must be at least 1".into())?;
    Ok(SweepSetup {
        task,
        trials,
        seed: s.or("seed", c.seed, 0)?,
        jobs,
        out,
        eta_c,
        test_size,
    })
}

fn summarize(records: &[MetricsRecord], by_m: bool) -> String {
    let mut text = String::new();
    let stats = group_stats(
        records,
        |r| (if by_m { r.m } else { r.n }, r.mode),
        |r| r.excess_err,
    );
    for ((k, mode), mean, se, count) in stats {
        text.push_str(&format!(
            "{}={k} mode={mode} mean_excess={mean:.5} se={se:.5} trials={count}\n",
            if by_m { "M" } else { "N" }
        ));
    }
    text.push_str(&format!(
        "margin_violations={}\n",
        margin_violations(records).len()
    ));
    text
}

fn cmd_sweep_n(a: &SweepNArgs) -> CliResult<String> {
    let s = Settings::load(a.common.config.as_deref(), "sweep-n")?;
    let w = sweep_setup(&s, &a.common, &a.sweep)?;
    let m = s.or("m", a.m, 32)?;
    let mut cfg = feature_config(&s, &a.features, &w.task, m)?;
    let grid: Vec<usize> = match s.get::<String>("n_grid", a.n_grid.clone())? {
        Some(list) => parse_list("n_grid", &list)?,
        None => (7..=14).map(|e| 1usize << e).collect(),
    };
    for &n in &grid {
        check(n >= 2 && n % 2 == 0, || format!("n_grid entries must be even and >= 2, got {n}"))?;
    }
    cfg.eta_c = w.eta_c;
    cfg.test_size = w.test_size;
    cfg.n = grid[0];
    let records =
        experiments::sweep_error_vs_n(&w.task, &cfg, &grid, w.trials, w.seed, w.jobs)?;
    write_atomic(&w.out, |o| write_records(o, &records))?;
    Ok(summarize(&records, false))
}

fn cmd_sweep_m(a: &SweepMArgs) -> CliResult<String> {
    let s = Settings::load(a.common.config.as_deref(), "sweep-m")?;
    let w = sweep_setup(&s, &a.common, &a.sweep)?;
    let grid: Vec<usize> = match s.get::<String>("m_grid", a.m_grid.clone())? {
        Some(list) => parse_list("m_grid", &list)?,
        None => vec![2, 4, 8, 16, 32, 64],
    };
    for &m in &grid {
        check(m >= 1, || "m_grid entries must be at least 1".into())?;
    }
    let modes: Vec<FeatureMode> = match s.get::<String>("modes", a.modes.clone())? {
        Some(list) => parse_list("modes", &list)?,
        None => vec![FeatureMode::Conventional, FeatureMode::Optimized],
    };
    let mut cfg = feature_config(&s, &a.features, &w.task, grid[0])?;
    let n = s.or("n", a.n, 8192)?;
    check(n >= 2 && n % 2 == 0, || format!("n must be even and at least 2, got {n}"))?;
    cfg.n = n;
    cfg.eta_c = w.eta_c;
    cfg.test_size = w.test_size;
    let records =
        experiments::sweep_error_vs_m(&w.task, &cfg, &grid, &modes, w.trials, w.seed, w.jobs)?;
    write_atomic(&w.out, |o| write_records(o, &records))?;
    Ok(summarize(&records, true))
}

fn cmd_spectrum(a: &SpectrumArgs) -> CliResult<String> {
    let s = Settings::load(a.common.config.as_deref(), "spectrum")?;
    let force = s.flag("force", a.common.force)?;
    let spec_out: PathBuf = s.required("spectrum_out", a.spectrum_out.clone())?;
    let dof_out: PathBuf = s.required("dof_out", a.dof_out.clone())?;
    ensure_writable(&spec_out, force)?;
    ensure_writable(&dof_out, force)?;
    let n0 = s.or("n0", a.n0, 200)?;
    check(n0 >= 1, || "n0 must be at least 1".into())?;
    let seed = s.or("seed", a.common.seed, 0)?;
    let (points, kern): (Points, GaussianKernel) =
        match s.get::<PathBuf>("task", a.task.clone())? {
            Some(p) => {
                let task = load_task(&p)?;
                (gen_inputs(&task, n0, &mut seeded(seed)), *task.kernel())
            }
            None => {
                let gamma = s.or("gamma", a.gamma, 1.0)?;
                (circle_points(n0), GaussianKernel::new(gamma, 2)?)
            }
        };
    let lambdas: Vec<f64> = match s.get::<String>("lambda_grid", a.lambda_grid.clone())? {
        Some(list) => parse_list("lambda_grid", &list)?,
        None => (0..13).map(|i| 10f64.powf(-4.0 + 0.25 * i as f64)).collect(),
    };
    for &l in &lambdas {
        check(l.is_finite() && l > 0.0, || format!("lambda_grid entries must be positive, got {l}"))?;
    }
    let model = SpectralModel::build(points, kern, lambdas[0])?;
    write_atomic(&spec_out, |w| model.write_spectrum_csv(w))?;
    write_atomic(&dof_out, |w| model.write_dof_sweep_csv(w, &lambdas))?;
    let eigs = model.eigenvalues();
    let mut text = format!("points={} rank={}\n", model.n(), model.rank());
    let last = eigs.iter().take(20).take_while(|&&m| m > 0.0).count();
    if last >= 3 {
        let (slope, _, r2) = spectral_decay_fit(eigs, 1, last);
        text.push_str(&format!("log-eigenvalue fit i=1..{last}: slope={slope:.4} r2={r2:.4}\n"));
    }
    let dofs: Vec<f64> = lambdas
        .iter()
        .map(|&l| model.degree_of_freedom(l))
        .collect::<crate::error::Result<_>>()?;
    if lambdas.len() >= 2 {
        let (a0, b, worst) = log_dof_fit(&lambdas, &dofs);
        text.push_str(&format!(
            "d(lambda) ~ {a0:.4} + {b:.4} log(1/lambda), max relative residual {worst:.4}\n"
        ));
    }
    Ok(text)
}

/// Dispatches a parsed command, returning the text for stdout.
pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::GenTask(a) => cmd_gen_task(a),
        Command::SampleFeatures(a) => cmd_sample_features(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SweepN(a) => cmd_sweep_n(a),
        Command::SweepM(a) => cmd_sweep_m(a),
        Command::Spectrum(a) => cmd_spectrum(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}
