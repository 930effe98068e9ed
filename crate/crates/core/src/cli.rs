//! The `betafact` command line: `phantom`, `fit`, `sweep` and `eval`.
//!
//! Every command accepts `--config FILE` holding `key = value` lines named
//! after its long flags (dashes or underscores). Flags override file values.
//! Each command writes a `manifest.cfg` with every resolved setting; passing
//! it back through `--config` reproduces the run.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or input error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rayon::prelude::*;

use crate::divergence::{floor_data, Beta};
use crate::error::{Error, Result};
use crate::init::{
    init_factors_random, init_internal_random, init_proportions_random, kmeans, nearest_labels,
    proportions_from_labels, InitMethod, InitSpec, DEFAULT_KMEANS_ITERS, LABEL_SMOOTHING,
};
use crate::io::{fmt_f64, read_matrix, write_matrix, write_trace_csv, RunConfig};
use crate::metrics::{mean_std, report, MetricRecord};
use crate::models::{DataMatrix, ModelKind, ModelSpec, Theta};
use crate::phantom::{generate, GroundTruth, NoiseModel, PhantomSpec, Preset};
use crate::solvers::{fit, FitResult, SolverConfig, DEFAULT_MAX_ITER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable capping the sweep's worker threads.
pub const THREADS_ENV: &str = "BETAFACT_THREADS";

pub const DEFAULT_B_SCALE: f64 = 0.1;

#[derive(Debug, Parser)]
#[command(name = "betafact", version, about = "Beta-divergence factor analysis of dynamic images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom and its ground truth.
    Phantom(PhantomArgs),
    /// Fit a factor model to a data matrix.
    Fit(FitArgs),
    /// Fit over a grid of betas and seeds and summarize the metrics.
    Sweep(SweepArgs),
    /// Score fitted factors against a ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub voxels: Option<usize>,
    #[arg(long)]
    pub factors: Option<usize>,
    /// Rank of the variability basis (slmm).
    #[arg(long)]
    pub nv: Option<usize>,
    #[arg(long)]
    pub model: Option<String>,
    /// none, gaussian, poisson, gamma or poisson-gaussian.
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub shape: Option<f64>,
    /// 6it or 50it noise regime.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
}

/// Solver and initialization flags shared by `fit` and `sweep`.
#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Take lambda from the 6it or 50it table when --lambda is absent.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Number of factors K.
    #[arg(long)]
    pub factors: Option<usize>,
    /// kmeans, random or file.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub m_init: Option<PathBuf>,
    #[arg(long)]
    pub a_init: Option<PathBuf>,
    #[arg(long)]
    pub b_init: Option<PathBuf>,
    /// Variability basis V (required for slmm).
    #[arg(long)]
    pub v: Option<PathBuf>,
    /// Keep M at its initial value.
    #[arg(long)]
    pub fix_factors: bool,
    /// Hold the first factor fixed (default: on for slmm).
    #[arg(long)]
    pub pin_sbf: Option<bool>,
    /// Clamp data entries to at least this value.
    #[arg(long)]
    pub floor_data: Option<f64>,
    /// Apply the xi(beta) exponent to the B update.
    #[arg(long)]
    pub use_xi: bool,
    /// Upper bound of the random B initialization.
    #[arg(long)]
    pub b_scale: Option<f64>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Data matrix Y (.bfmat or CSV).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub solve: SolveArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated betas.
    #[arg(long)]
    pub betas: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Phantom directory; each seed redraws its noise.
    #[arg(long)]
    pub phantom: Option<PathBuf>,
    /// Fixed data matrix (with --gt).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Ground-truth directory (with --data).
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub solve: SolveArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `fit`.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Directory written by `phantom`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Metrics CSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const PHANTOM_KEYS: &[&str] = &[
    "out",
    "frames",
    "voxels",
    "factors",
    "nv",
    "model",
    "noise",
    "sigma",
    "scale",
    "shape",
    "preset",
    "seed",
    "noise_seed",
];
const SOLVE_KEYS: &[&str] = &[
    "model",
    "lambda",
    "preset",
    "epsilon",
    "max_iter",
    "factors",
    "init",
    "m_init",
    "a_init",
    "b_init",
    "v",
    "fix_factors",
    "pin_sbf",
    "floor_data",
    "use_xi",
    "b_scale",
    "kmeans_iters",
];
const FIT_EXTRA_KEYS: &[&str] = &["data", "out", "beta", "seed"];
const SWEEP_EXTRA_KEYS: &[&str] = &["betas", "seeds", "phantom", "data", "gt", "out"];
const EVAL_KEYS: &[&str] = &["fit", "gt", "out"];

fn keys(parts: &[&[&'static str]]) -> Vec<&'static str> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Builds the effective configuration: file values, then flags on top.
struct Overlay {
    cfg: RunConfig,
}

impl Overlay {
    fn new(config: &Option<PathBuf>, allowed: &[&str]) -> Result<Self> {
        let cfg = match config {
            Some(p) => RunConfig::load(p, allowed)?,
            None => RunConfig::new(),
        };
        Ok(Overlay { cfg })
    }

    fn put<T: ToString>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.cfg.set(key, v.to_string());
        }
    }

    fn put_path(&mut self, key: &str, value: &Option<PathBuf>) {
        if let Some(v) = value {
            self.cfg.set(key, v.display());
        }
    }

    fn flag(&mut self, key: &str, on: bool) {
        if on {
            self.cfg.set(key, "true");
        }
    }
}

fn put_solve(o: &mut Overlay, s: &SolveArgs) {
    o.put("model", &s.model);
    o.put("lambda", &s.lambda);
    o.put("preset", &s.preset);
    o.put("epsilon", &s.epsilon);
    o.put("max_iter", &s.max_iter);
    o.put("factors", &s.factors);
    o.put("init", &s.init);
    o.put_path("m_init", &s.m_init);
    o.put_path("a_init", &s.a_init);
    o.put_path("b_init", &s.b_init);
    o.put_path("v", &s.v);
    o.flag("fix_factors", s.fix_factors);
    o.put("pin_sbf", &s.pin_sbf);
    o.put("floor_data", &s.floor_data);
    o.flag("use_xi", s.use_xi);
    o.put("b_scale", &s.b_scale);
    o.put("kmeans_iters", &s.kmeans_iters);
}

fn parse_list<T>(text: &str, what: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<T>().map_err(|e| usage(format!("{what}: '{s}': {e}"))))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(usage(format!("{what} must not be empty")));
    }
    Ok(items)
}

fn parse_noise(cfg: &RunConfig) -> Result<(NoiseModel, Option<Preset>)> {
    let preset = cfg.parsed::<Preset>("preset")?;
    let sigma = cfg.parsed::<f64>("sigma")?;
    let scale = cfg.parsed::<f64>("scale")?;
    let shape = cfg.parsed::<f64>("shape")?;
    let need =
        |v: Option<f64>, flag: &str, kind: &str| v.ok_or_else(|| usage(format!("--noise {kind} needs --{flag}")));
    let noise = match cfg.get("noise") {
        None if preset.is_some() => preset.unwrap().noise(),
        None | Some("none") => NoiseModel::Gaussian { sigma: 0.0 },
        Some("gaussian") => NoiseModel::Gaussian { sigma: need(sigma, "sigma", "gaussian")? },
        Some("poisson") => NoiseModel::Poisson { scale: need(scale, "scale", "poisson")? },
        Some("gamma") => NoiseModel::Gamma { shape: need(shape, "shape", "gamma")? },
        Some("poisson-gaussian") => NoiseModel::PoissonGaussian {
            scale: need(scale, "scale", "poisson-gaussian")?,
            sigma: need(sigma, "sigma", "poisson-gaussian")?,
        },
        Some(other) => return Err(usage(format!("unknown noise family '{other}'"))),
    };
    Ok((noise, preset))
}

/// Phantom parameters from a phantom configuration or manifest.
pub fn phantom_spec_from_config(cfg: &RunConfig) -> Result<(PhantomSpec, Option<Preset>)> {
    let d = PhantomSpec::default();
    let (noise, preset) = parse_noise(cfg)?;
    let spec = PhantomSpec {
        frames: cfg.parsed("frames")?.unwrap_or(d.frames),
        voxels: cfg.parsed("voxels")?.unwrap_or(d.voxels),
        factors: cfg.parsed("factors")?.unwrap_or(d.factors),
        variability_rank: cfg.parsed("nv")?.unwrap_or(d.variability_rank),
        kind: cfg.parsed("model")?.unwrap_or(d.kind),
        noise,
        seed: cfg.parsed("seed")?.unwrap_or(d.seed),
        noise_seed: cfg.parsed("noise_seed")?,
    };
    spec.validate()?;
    Ok((spec, preset))
}

fn phantom_manifest(spec: &PhantomSpec, preset: Option<Preset>, out: &Path) -> RunConfig {
    let mut m = RunConfig::new();
    m.set("out", out.display());
    m.set("frames", spec.frames);
    m.set("voxels", spec.voxels);
    m.set("factors", spec.factors);
    m.set("nv", spec.variability_rank);
    m.set("model", spec.kind);
    m.set("seed", spec.seed);
    if let Some(s) = spec.noise_seed {
        m.set("noise_seed", s);
    }
    if let Some(p) = preset {
        m.set("preset", p.as_str());
    }
    match spec.noise {
        NoiseModel::Gaussian { sigma: 0.0 } => m.set("noise", "none"),
        NoiseModel::Gaussian { sigma } => {
            m.set("noise", "gaussian");
            m.set("sigma", fmt_f64(sigma));
        }
        NoiseModel::Poisson { scale } => {
            m.set("noise", "poisson");
            m.set("scale", fmt_f64(scale));
        }
        NoiseModel::Gamma { shape } => {
            m.set("noise", "gamma");
            m.set("shape", fmt_f64(shape));
        }
        NoiseModel::PoissonGaussian { scale, sigma } => {
            m.set("noise", "poisson-gaussian");
            m.set("scale", fmt_f64(scale));
            m.set("sigma", fmt_f64(sigma));
        }
    }
    m
}

fn write_truth(dir: &Path, truth: &GroundTruth) -> Result<()> {
    write_matrix(&dir.join("gt_M.bfmat"), &truth.m)?;
    write_matrix(&dir.join("gt_A.bfmat"), &truth.a)?;
    write_matrix(&dir.join("gt_X.bfmat"), &truth.x)?;
    if let (Some(v), Some(b)) = (&truth.v, &truth.b) {
        write_matrix(&dir.join("gt_V.bfmat"), v)?;
        write_matrix(&dir.join("gt_B.bfmat"), b)?;
    }
    Ok(())
}

/// Reads the `gt_*.bfmat` files of a phantom directory.
pub fn read_truth(dir: &Path) -> Result<GroundTruth> {
    let opt = |name: &str| -> Result<Option<Array2<f64>>> {
        let p = dir.join(name);
        if p.exists() {
            read_matrix(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let m = read_matrix(&dir.join("gt_M.bfmat"))?;
    let a = read_matrix(&dir.join("gt_A.bfmat"))?;
    let x = read_matrix(&dir.join("gt_X.bfmat"))?;
    let v = opt("gt_V.bfmat")?;
    let b = opt("gt_B.bfmat")?;
    let manifest = dir.join("manifest.cfg");
    let kind =
        if manifest.exists() { RunConfig::load(&manifest, PHANTOM_KEYS)?.parsed::<ModelKind>("model")? } else { None };
    let kind = kind.unwrap_or(if b.is_some() { ModelKind::Slmm } else { ModelKind::Lmm });
    Ok(GroundTruth { m, a, v, b, x, kind })
}

fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let mut o = Overlay::new(&args.config, PHANTOM_KEYS)?;
    o.put_path("out", &args.out);
    o.put("frames", &args.frames);
    o.put("voxels", &args.voxels);
    o.put("factors", &args.factors);
    o.put("nv", &args.nv);
    o.put("model", &args.model);
    o.put("noise", &args.noise);
    o.put("sigma", &args.sigma);
    o.put("scale", &args.scale);
    o.put("shape", &args.shape);
    o.put("preset", &args.preset);
    o.put("seed", &args.seed);
    o.put("noise_seed", &args.noise_seed);
    let cfg = o.cfg;
    let out = cfg.path("out").ok_or_else(|| usage("phantom needs --out DIR"))?;
    let (spec, preset) = phantom_spec_from_config(&cfg)?;
    let phantom = generate(&spec)?;
    fs::create_dir_all(&out)?;
    write_matrix(&out.join("Y.bfmat"), phantom.data.values())?;
    write_truth(&out, &phantom.truth)?;
    let mut frames = String::from("frame,duration,mid_time\n");
    let durations = phantom.data.frame_durations.clone().unwrap_or_default();
    for (l, (d, t)) in durations.iter().zip(&phantom.frame_times).enumerate() {
        let _ = writeln!(frames, "{l},{},{}", fmt_f64(*d), fmt_f64(*t));
    }
    fs::write(out.join("frames.csv"), frames)?;
    phantom_manifest(&spec, preset, &out).save(&out.join("manifest.cfg"))?;
    Ok(())
}

/// Resolved solver and initialization settings.
#[derive(Debug, Clone)]
pub struct SolvePlan {
    pub model: ModelKind,
    pub lambda: Option<f64>,
    pub preset: Option<Preset>,
    pub epsilon: Option<f64>,
    pub max_iter: usize,
    pub factors: Option<usize>,
    pub init: InitMethod,
    pub m_init: Option<PathBuf>,
    pub a_init: Option<PathBuf>,
    pub b_init: Option<PathBuf>,
    pub v: Option<PathBuf>,
    pub fix_factors: bool,
    pub pin_sbf: Option<bool>,
    pub floor_data: Option<f64>,
    pub use_xi: bool,
    pub b_scale: f64,
    pub kmeans_iters: usize,
}

impl SolvePlan {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let model = cfg.parsed::<ModelKind>("model")?.ok_or_else(|| usage("missing --model"))?;
        let plan = SolvePlan {
            model,
            lambda: cfg.parsed("lambda")?,
            preset: cfg.parsed("preset")?,
            epsilon: cfg.parsed("epsilon")?,
            max_iter: cfg.parsed("max_iter")?.unwrap_or(DEFAULT_MAX_ITER),
            factors: cfg.parsed("factors")?,
            init: cfg.parsed("init")?.unwrap_or(InitMethod::KMeans),
            m_init: cfg.path("m_init"),
            a_init: cfg.path("a_init"),
            b_init: cfg.path("b_init"),
            v: cfg.path("v"),
            fix_factors: cfg.parsed("fix_factors")?.unwrap_or(false),
            pin_sbf: cfg.parsed("pin_sbf")?,
            floor_data: cfg.parsed("floor_data")?,
            use_xi: cfg.parsed("use_xi")?.unwrap_or(false),
            b_scale: cfg.parsed("b_scale")?.unwrap_or(DEFAULT_B_SCALE),
            kmeans_iters: cfg.parsed("kmeans_iters")?.unwrap_or(DEFAULT_KMEANS_ITERS),
        };
        if plan.init == InitMethod::FromFile && (plan.m_init.is_none() || plan.a_init.is_none()) {
            return Err(usage("--init file needs --m-init and --a-init"));
        }
        Ok(plan)
    }

    /// λ for `beta`: explicit, else from the preset table (slmm only).
    pub fn lambda_for(&self, beta: Beta) -> Result<f64> {
        match (self.model, self.lambda, self.preset) {
            (_, Some(l), _) => Ok(l),
            (ModelKind::Slmm, None, Some(p)) => Ok(p.lambda(beta.value())),
            (ModelKind::Slmm, None, None) => Err(usage("slmm needs --lambda or --preset")),
            _ => Ok(0.0),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(SolverConfig::with_factors_fixed(self.fix_factors).epsilon)
    }

    pub fn solver_config(&self, seed: u64) -> SolverConfig {
        let mut cfg = SolverConfig::with_factors_fixed(self.fix_factors);
        cfg.epsilon = self.epsilon();
        cfg.max_iter = self.max_iter;
        cfg.use_xi_exponent = self.use_xi;
        cfg.rng_seed = seed;
        cfg
    }

    fn write_into(&self, m: &mut RunConfig) {
        m.set("model", self.model);
        if let Some(l) = self.lambda {
            m.set("lambda", fmt_f64(l));
        }
        if let Some(p) = self.preset {
            m.set("preset", p.as_str());
        }
        m.set("epsilon", fmt_f64(self.epsilon()));
        m.set("max_iter", self.max_iter);
        if let Some(k) = self.factors {
            m.set("factors", k);
        }
        m.set(
            "init",
            match self.init {
                InitMethod::KMeans => "kmeans",
                InitMethod::Random => "random",
                InitMethod::FromFile => "file",
            },
        );
        for (key, p) in [("m_init", &self.m_init), ("a_init", &self.a_init), ("b_init", &self.b_init), ("v", &self.v)] {
            if let Some(p) = p {
                m.set(key, p.display());
            }
        }
        m.set("fix_factors", self.fix_factors);
        if let Some(p) = self.pin_sbf {
            m.set("pin_sbf", p);
        }
        if let Some(f) = self.floor_data {
            m.set("floor_data", fmt_f64(f));
        }
        m.set("use_xi", self.use_xi);
        m.set("b_scale", fmt_f64(self.b_scale));
        m.set("kmeans_iters", self.kmeans_iters);
    }
}

/// Optional overrides used by `sweep` when working from a phantom.
#[derive(Debug, Clone, Default)]
pub struct InitOverrides {
    pub m: Option<Array2<f64>>,
    pub v: Option<Array2<f64>>,
}

/// Applies the data floor and builds the model spec, solver config and
/// starting point for one run.
pub fn prepare_run(
    plan: &SolvePlan,
    data: DataMatrix,
    beta: Beta,
    seed: u64,
    overrides: &InitOverrides,
) -> Result<(DataMatrix, ModelSpec, SolverConfig, Theta)> {
    let data = match plan.floor_data {
        Some(eps) => {
            let durations = data.frame_durations.clone();
            let mut values = data.into_inner();
            floor_data(&mut values, eps)?;
            let d = DataMatrix::new(values)?;
            match durations {
                Some(dur) => d.with_frame_durations(dur)?,
                None => d,
            }
        }
        None => data,
    };
    let spec = ModelSpec::new(plan.model, beta, plan.lambda_for(beta)?)?;
    let cfg = plan.solver_config(seed);
    let init = InitSpec { method: plan.init, seed, kmeans_iters: plan.kmeans_iters, path: plan.m_init.clone() };
    init.validate()?;

    let file_m = match &plan.m_init {
        Some(p) => Some(read_matrix(p)?),
        None => overrides.m.clone(),
    };
    let k = match (&file_m, plan.factors) {
        (Some(m), Some(k)) if m.ncols() != k => {
            return Err(usage(format!("--factors {k} disagrees with the {} columns of the initial M", m.ncols())))
        }
        (Some(m), _) => m.ncols(),
        (None, Some(k)) => k,
        (None, None) => return Err(usage("missing --factors (or an initial M)")),
    };
    if k > data.frames().min(data.voxels()) {
        return Err(usage(format!("K = {k} exceeds min(L, N)")));
    }

    let mut labels = None;
    let m = match file_m {
        Some(m) => m,
        None => match plan.init {
            InitMethod::KMeans => {
                let km = kmeans(data.view(), k, seed, plan.kmeans_iters)?;
                labels = Some(km.labels);
                km.centroids
            }
            InitMethod::Random => init_factors_random(&data, k, &init)?.m,
            InitMethod::FromFile => unreachable!("validated in SolvePlan::from_config"),
        },
    };
    let a = match &plan.a_init {
        Some(p) => read_matrix(p)?,
        None => match plan.init {
            InitMethod::KMeans => {
                let labels = labels.unwrap_or_else(|| nearest_labels(data.view(), &m));
                proportions_from_labels(&labels, k, LABEL_SMOOTHING)?.a
            }
            _ => init_proportions_random(k, data.voxels(), &init, plan.model.is_mixing()).a,
        },
    };
    let mut theta = Theta::new(m, a).pinned(plan.pin_sbf.unwrap_or(plan.model == ModelKind::Slmm));
    if plan.model == ModelKind::Slmm {
        let v = match (&plan.v, &overrides.v) {
            (Some(p), _) => read_matrix(p)?,
            (None, Some(v)) => v.clone(),
            (None, None) => return Err(usage("--model slmm needs --v")),
        };
        let b = match &plan.b_init {
            Some(p) => read_matrix(p)?,
            None => init_internal_random(v.ncols(), data.voxels(), &init, plan.b_scale)?,
        };
        theta = theta.with_variability(v, b);
    }
    theta.check_against(plan.model, data.frames(), data.voxels())?;
    Ok((data, spec, cfg, theta))
}

fn write_fit_outputs(out: &Path, res: &FitResult, manifest: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    write_matrix(&out.join("M.bfmat"), res.theta.m())?;
    write_matrix(&out.join("A.bfmat"), res.theta.a())?;
    if let Some(vs) = &res.theta.variability {
        write_matrix(&out.join("B.bfmat"), &vs.b)?;
        write_matrix(&out.join("V.bfmat"), &vs.v)?;
    }
    write_trace_csv(&out.join("objective_trace.csv"), &res.objective_trace)?;
    manifest.save(&out.join("manifest.cfg"))?;
    let mut result = String::new();
    let _ = writeln!(result, "iterations = {}", res.iterations);
    let _ = writeln!(result, "termination = {}", res.termination);
    let _ = writeln!(result, "objective = {}", fmt_f64(*res.objective_trace.last().unwrap()));
    let _ = writeln!(result, "monotonicity_violations = {}", res.monotonicity_violations);
    fs::write(out.join("result.cfg"), result)?;
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let mut o = Overlay::new(&args.config, &keys(&[SOLVE_KEYS, FIT_EXTRA_KEYS]))?;
    o.put_path("data", &args.data);
    o.put_path("out", &args.out);
    o.put("beta", &args.beta);
    o.put("seed", &args.seed);
    put_solve(&mut o, &args.solve);
    let cfg = o.cfg;

    let plan = SolvePlan::from_config(&cfg)?;
    let data_path = cfg.path("data").ok_or_else(|| usage("missing --data"))?;
    let out = cfg.path("out").ok_or_else(|| usage("missing --out"))?;
    let beta = Beta::new(cfg.parsed("beta")?.ok_or_else(|| usage("missing --beta"))?)?;
    let seed: u64 = cfg.parsed("seed")?.unwrap_or(0);
    if plan.model == ModelKind::Slmm && plan.v.is_none() {
        return Err(usage("--model slmm needs --v"));
    }

    let data = DataMatrix::new(read_matrix(&data_path)?)?;
    let (data, spec, solver, theta0) = prepare_run(&plan, data, beta, seed, &InitOverrides::default())?;
    let res = fit(&data, &spec, &theta0, &solver)?;

    let mut manifest = RunConfig::new();
    plan.write_into(&mut manifest);
    manifest.set("lambda", fmt_f64(spec.lambda));
    manifest.set("data", data_path.display());
    manifest.set("out", out.display());
    manifest.set("beta", fmt_f64(beta.value()));
    manifest.set("seed", seed);
    write_fit_outputs(&out, &res, &manifest)?;
    println!(
        "{} after {} iterations, objective {}",
        res.termination,
        res.iterations,
        fmt_f64(*res.objective_trace.last().unwrap())
    );
    Ok(())
}

/// Outcome of one (β, seed) cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub beta: f64,
    pub seed: u64,
    pub outcome: std::result::Result<(MetricRecord, usize, String), String>,
    pub seconds: f64,
}

enum SweepSource {
    Phantom(PhantomSpec),
    Fixed(Box<(DataMatrix, GroundTruth)>),
}

fn sweep_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
}

fn run_cell(plan: &SolvePlan, source: &SweepSource, beta: f64, seed: u64) -> SweepCell {
    let start = Instant::now();
    let outcome = (|| -> Result<(MetricRecord, usize, String)> {
        let beta_v = Beta::new(beta)?;
        let (data, truth) = match source {
            SweepSource::Phantom(spec) => {
                let p = generate(&PhantomSpec { noise_seed: Some(seed), ..spec.clone() })?;
                (p.data, p.truth)
            }
            SweepSource::Fixed(fixed) => (fixed.0.clone(), fixed.1.clone()),
        };
        let overrides = InitOverrides {
            m: if plan.fix_factors && plan.m_init.is_none() { Some(truth.m.clone()) } else { None },
            v: truth.v.clone(),
        };
        let (data, spec, cfg, theta0) = prepare_run(plan, data, beta_v, seed, &overrides)?;
        let res = fit(&data, &spec, &theta0, &cfg)?;
        let record = report(&res.theta, &truth)?;
        Ok((record, res.iterations, res.termination.to_string()))
    })()
    .map_err(|e| e.to_string());
    SweepCell { beta, seed, outcome, seconds: start.elapsed().as_secs_f64() }
}

fn sanitize(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Renders the sweep summary: one row per cell in (β, seed) order, then one
/// aggregate row per β with the mean and sample standard deviation of every
/// metric. Infinite PSNRs are left out of the PSNR aggregate and counted.
pub fn render_summary(cells: &[SweepCell], betas: &[f64]) -> String {
    let mut s = String::from("kind,beta,seed,status,iterations,termination");
    for h in MetricRecord::HEADER {
        let _ = write!(s, ",{h},{h}_std");
    }
    s.push('\n');
    for c in cells {
        let _ = write!(s, "cell,{},{}", fmt_f64(c.beta), c.seed);
        match &c.outcome {
            Ok((rec, iters, term)) => {
                let _ = write!(s, ",ok,{iters},{term}");
                for v in rec.values() {
                    let _ = write!(s, ",{},", opt(v));
                }
            }
            Err(e) => {
                let _ = write!(s, ",error: {},,", sanitize(e));
                for _ in MetricRecord::HEADER {
                    s.push_str(",,");
                }
            }
        }
        s.push('\n');
    }
    for &beta in betas {
        let group: Vec<&SweepCell> = cells.iter().filter(|c| c.beta == beta).collect();
        let ok: Vec<&(MetricRecord, usize, String)> = group.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
        let failed = group.len() - ok.len();
        let inf = ok.iter().filter(|(r, _, _)| r.psnr.is_infinite()).count();
        let iters: Vec<f64> = ok.iter().map(|(_, i, _)| *i as f64).collect();
        let _ = write!(
            s,
            "aggregate,{},n={},inf_excluded={};failed={},{},",
            fmt_f64(beta),
            ok.len(),
            inf,
            failed,
            opt(mean_std(&iters).map(|m| m.0))
        );
        for idx in 0..MetricRecord::HEADER.len() {
            let vals: Vec<f64> = ok.iter().filter_map(|(r, _, _)| r.values()[idx]).collect();
            match mean_std(&vals) {
                Some((m, sd)) => {
                    let _ = write!(s, ",{},{}", fmt_f64(m), fmt_f64(sd));
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut o = Overlay::new(&args.config, &keys(&[SOLVE_KEYS, SWEEP_EXTRA_KEYS]))?;
    o.put("betas", &args.betas);
    o.put("seeds", &args.seeds);
    o.put_path("phantom", &args.phantom);
    o.put_path("data", &args.data);
    o.put_path("gt", &args.gt);
    o.put_path("out", &args.out);
    put_solve(&mut o, &args.solve);
    let cfg = o.cfg;

    let mut plan = SolvePlan::from_config(&cfg)?;
    let betas: Vec<f64> = parse_list(cfg.get("betas").ok_or_else(|| usage("missing --betas"))?, "betas")?;
    for &b in &betas {
        Beta::new(b)?;
    }
    let seeds: Vec<u64> = parse_list(cfg.get("seeds").ok_or_else(|| usage("missing --seeds"))?, "seeds")?;
    let out = cfg.path("out").ok_or_else(|| usage("missing --out"))?;

    let source = match (cfg.path("phantom"), cfg.path("data"), cfg.path("gt")) {
        (Some(dir), None, None) => {
            let pcfg = RunConfig::load(&dir.join("manifest.cfg"), PHANTOM_KEYS)?;
            let (spec, preset) = phantom_spec_from_config(&pcfg)?;
            if plan.preset.is_none() {
                plan.preset = preset;
            }
            SweepSource::Phantom(spec)
        }
        (None, Some(data), Some(gt)) => {
            SweepSource::Fixed(Box::new((DataMatrix::new(read_matrix(&data)?)?, read_truth(&gt)?)))
        }
        _ => return Err(usage("sweep needs either --phantom DIR or both --data and --gt")),
    };
    if plan.factors.is_none() && plan.m_init.is_none() {
        plan.factors = Some(match &source {
            SweepSource::Phantom(spec) => spec.factors,
            SweepSource::Fixed(fixed) => fixed.1.m.ncols(),
        });
    }
    if plan.model == ModelKind::Slmm && plan.lambda.is_none() && plan.preset.is_none() {
        return Err(usage("slmm needs --lambda or --preset"));
    }

    let grid: Vec<(f64, u64)> = betas.iter().flat_map(|&b| seeds.iter().map(move |&s| (b, s))).collect();
    let work = || grid.par_iter().map(|&(b, s)| run_cell(&plan, &source, b, s)).collect::<Vec<_>>();
    let cells = match sweep_threads() {
        Some(n) => {
            rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| usage(e.to_string()))?.install(work)
        }
        None => work(),
    };

    fs::create_dir_all(&out)?;
    fs::write(out.join("summary.csv"), render_summary(&cells, &betas))?;
    let mut timings = String::from("beta,seed,seconds\n");
    for c in &cells {
        let _ = writeln!(timings, "{},{},{:.6}", fmt_f64(c.beta), c.seed, c.seconds);
    }
    fs::write(out.join("timings.csv"), timings)?;

    let mut manifest = RunConfig::new();
    plan.write_into(&mut manifest);
    for key in ["phantom", "data", "gt"] {
        if let Some(v) = cfg.get(key) {
            manifest.set(key, v);
        }
    }
    manifest.set("betas", betas.iter().map(|b| fmt_f64(*b)).collect::<Vec<_>>().join(","));
    manifest.set("seeds", seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    manifest.set("out", out.display());
    manifest.save(&out.join("manifest.cfg"))?;

    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    println!("{} cells, {} failed", cells.len(), failed);
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut o = Overlay::new(&args.config, EVAL_KEYS)?;
    o.put_path("fit", &args.fit);
    o.put_path("gt", &args.gt);
    o.put_path("out", &args.out);
    let cfg = o.cfg;
    let fit_dir = cfg.path("fit").ok_or_else(|| usage("missing --fit"))?;
    let gt_dir = cfg.path("gt").ok_or_else(|| usage("missing --gt"))?;

    let truth = read_truth(&gt_dir)?;
    let mut theta = Theta::new(read_matrix(&fit_dir.join("M.bfmat"))?, read_matrix(&fit_dir.join("A.bfmat"))?);
    let b_path = fit_dir.join("B.bfmat");
    if b_path.exists() {
        theta = theta.with_variability(read_matrix(&fit_dir.join("V.bfmat"))?, read_matrix(&b_path)?);
    }
    theta.check_shapes()?;
    let rec = report(&theta, &truth)?;
    let mut s = MetricRecord::HEADER.join(",");
    s.push('\n');
    s.push_str(&rec.values().iter().map(|v| opt(*v)).collect::<Vec<_>>().join(","));
    s.push('\n');
    match cfg.path("out") {
        Some(p) => fs::write(p, &s)?,
        None => print!("{s}"),
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_layout_and_aggregation() {
        let rec = |psnr| MetricRecord {
            psnr,
            nmse_a1: 0.5,
            nmse_a_rest: Some(0.25),
            nmse_m1: 0.0,
            nmse_sbf_tacs: None,
            nmse_m_rest: Some(0.1),
            nmse_a1b: None,
        };
        let cells = vec![
            SweepCell { beta: 1.0, seed: 1, outcome: Ok((rec(20.0), 10, "converged".into())), seconds: 0.1 },
            SweepCell { beta: 1.0, seed: 2, outcome: Ok((rec(f64::INFINITY), 12, "converged".into())), seconds: 0.1 },
            SweepCell { beta: 2.0, seed: 1, outcome: Err("domain error: y, z".into()), seconds: 0.1 },
            SweepCell { beta: 2.0, seed: 2, outcome: Ok((rec(30.0), 8, "max_iter".into())), seconds: 0.1 },
        ];
        let s = render_summary(&cells, &[1.0, 2.0]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 2);
        let width = lines[0].split(',').count();
        assert_eq!(width, 6 + 2 * 7);
        for l in &lines {
            assert_eq!(l.split(',').count(), width, "{l}");
        }
        assert!(lines[2].contains(",inf,"));
        assert!(lines[3].starts_with("cell,2,1,error: domain error: y; z"));
        let agg1: Vec<&str> = lines[5].split(',').collect();
        assert_eq!(agg1[..4], ["aggregate", "1", "n=2", "inf_excluded=1;failed=0"]);
        assert_eq!(agg1[4], "11");
        assert_eq!((agg1[6], agg1[7]), ("20", "0"));
        let agg2: Vec<&str> = lines[6].split(',').collect();
        assert_eq!(agg2[3], "inf_excluded=0;failed=1");
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list::<f64>("0, 0.5,1", "betas").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_list::<u64>("", "seeds").is_err());
        assert!(parse_list::<u64>("1,x", "seeds").is_err());
    }

    #[test]
    fn noise_resolution() {
        let mut cfg = RunConfig::new();
        assert_eq!(parse_noise(&cfg).unwrap().0, NoiseModel::Gaussian { sigma: 0.0 });
        cfg.set("preset", "6it");
        assert_eq!(parse_noise(&cfg).unwrap().0, Preset::SixIt.noise());
        cfg.set("noise", "poisson");
        assert!(parse_noise(&cfg).is_err());
        cfg.set("scale", "100");
        assert_eq!(parse_noise(&cfg).unwrap().0, NoiseModel::Poisson { scale: 100.0 });
    }

    #[test]
    fn lambda_resolution() {
        let mut cfg = RunConfig::new();
        cfg.set("model", "slmm");
        let plan = SolvePlan::from_config(&cfg).unwrap();
        assert!(plan.lambda_for(Beta::KL).is_err());
        cfg.set("preset", "6it");
        let plan = SolvePlan::from_config(&cfg).unwrap();
        assert_eq!(plan.lambda_for(Beta::KL).unwrap(), 1.3e-3);
        cfg.set("lambda", "0.5");
        assert_eq!(SolvePlan::from_config(&cfg).unwrap().lambda_for(Beta::KL).unwrap(), 0.5);
        let mut cfg = RunConfig::new();
        cfg.set("model", "lmm");
        assert_eq!(SolvePlan::from_config(&cfg).unwrap().lambda_for(Beta::KL).unwrap(), 0.0);
        cfg.set("init", "file");
        assert!(SolvePlan::from_config(&cfg).is_err());
    }

    #[test]
    fn epsilon_defaults_follow_fixed_factors() {
        let mut cfg = RunConfig::new();
        cfg.set("model", "nmf");
        assert_eq!(SolvePlan::from_config(&cfg).unwrap().epsilon(), 1e-4);
        cfg.set("fix_factors", "true");
        assert_eq!(SolvePlan::from_config(&cfg).unwrap().epsilon(), 1e-5);
    }
}
