//! Experiment configuration, orchestration, persistence and reports.
//!
//! An experiment is a grid of cells `(σ, T, seed)`. Cells are independent and
//! run on a rayon pool; results are merged in sorted cell order so output does
//! not depend on the worker count. Traces land in
//! `<out>/<preset>/<problem>/<sigma>/T<T>_seed<seed>.csv` with a
//! `.meta.json` sidecar next to each.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{self, BoundInputs, BoundReport, CheckRecord, DeltaMaxSource, MdsGenerator, MgfSequence, RateFit, Verdict};
use crate::error::{Error, Result};
use crate::optimizers::{self, Metric, RunMeta, RunSummary, RunTrace};
use crate::oracle::{self, NoiseKind, NoiseModel};
use crate::problems::{self, FiniteSumProblem, Problem};
use crate::rng;
use crate::schedules::{self, Averaging, Preset, PresetKind};

pub const DEFAULT_DELTA: f64 = 1e-3;
pub const DEFAULT_QUANTILE: f64 = 0.9;
pub const WORKERS_ENV: &str = "AGD_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Quadratic {
        eigenvalues: Vec<f64>,
    },
    Welsch {
        dim: usize,
    },
    Cosine {
        dim: usize,
    },
    /// Sigmoid least squares on a CSV file (features then label per row).
    Sigmoid {
        csv: PathBuf,
    },
    /// Sigmoid least squares on synthetic data drawn from `data_seed`.
    SigmoidSynthetic {
        n: usize,
        dim: usize,
        #[serde(default)]
        data_seed: u64,
    },
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Problem> {
        match self {
            ProblemSpec::Quadratic { eigenvalues } => problems::make_quadratic(eigenvalues.len(), eigenvalues),
            ProblemSpec::Welsch { dim } => problems::make_welsch_sum(*dim),
            ProblemSpec::Cosine { dim } => problems::make_cosine_valley(*dim),
            ProblemSpec::Sigmoid { csv } => {
                let fs = FiniteSumProblem::from_csv(csv)?;
                problems::make_sigmoid_least_squares(fs.features().to_vec(), fs.labels().to_vec())
            }
            ProblemSpec::SigmoidSynthetic { n, dim, data_seed } => {
                if *n == 0 || *dim == 0 {
                    return Err(Error::config("sigmoid_synthetic needs n > 0 and dim > 0"));
                }
                let (a, y) = problems::synthetic_sigmoid_data(*n, *dim, &mut rng::seeded(*data_seed));
                problems::make_sigmoid_least_squares(a, y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl NoiseSpec {
    pub fn exact() -> Self {
        NoiseSpec {
            kind: NoiseKind::Exact,
            sigma: 0.0,
            clip: None,
            batch_size: None,
        }
    }

    /// Noise model for `problem`, with `sigma` overriding its own value.
    pub fn build(&self, problem: &Problem, sigma: Option<f64>) -> Result<NoiseModel> {
        let s = sigma.unwrap_or(self.sigma);
        let model = match self.kind {
            NoiseKind::Exact if s != 0.0 => return Err(Error::config("exact noise requires sigma = 0")),
            NoiseKind::Exact => NoiseModel::exact(),
            NoiseKind::BoundedSphere => NoiseModel::bounded_sphere(s),
            NoiseKind::TruncatedGaussian => NoiseModel::truncated_gaussian(s, self.clip),
            NoiseKind::SubgaussianGaussian => NoiseModel::subgaussian_gaussian(s),
            NoiseKind::Minibatch => {
                if sigma.is_some() {
                    return Err(Error::config("sigma sweeps are not defined for minibatch noise"));
                }
                let b = self.batch_size.ok_or_else(|| Error::config("minibatch noise requires batch_size"))?;
                NoiseModel::minibatch(problem, b)?
            }
        };
        model.validate(problem)?;
        Ok(model)
    }
}

/// Either an explicit list or `count` seeds derived from `master`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    Derived { count: usize, master: u64 },
}

impl SeedSpec {
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            SeedSpec::List(v) => v.clone(),
            SeedSpec::Derived { count, master } => (0..*count as u64).map(|i| rng::derive_seed(*master, i)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Horizon,
    Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Axis values; for the horizon axis, defaults to `horizons`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub noise: NoiseSpec,
    pub preset: Preset,
    pub horizons: Vec<usize>,
    pub seeds: SeedSpec,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub high_prob_checks: bool,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    /// Start point; defaults to the problem's own choice per seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<Vec<f64>>,
}

fn default_metric() -> Metric {
    Metric::AvgGradSq
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_quantile() -> f64 {
    DEFAULT_QUANTILE
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() {
            return Err(Error::config("horizons must not be empty"));
        }
        if self.horizons[0] == 0 || self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("horizons must be positive and strictly increasing"));
        }
        let seeds = self.seeds.seeds();
        if seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds must be distinct"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.high_prob_checks && self.delta >= (-1.0f64).exp() {
            return Err(Error::config(format!(
                "high-probability checks need delta < 1/e, got {}",
                self.delta
            )));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::config(format!("quantile must lie in (0, 1), got {}", self.quantile)));
        }
        if self.parallelism == Some(0) {
            return Err(Error::config("parallelism must be positive"));
        }
        self.preset.validate()?;
        let problem = self.problem.build()?;
        for sigma in self.sigmas() {
            let noise = self.noise.build(&problem, sigma)?;
            if self.preset.kind.is_adaptive() && self.preset.g0 == 0.0 && noise.kind != NoiseKind::Exact {
                return Err(Error::config("G0 = 0 is only allowed with the exact oracle"));
            }
        }
        if let Some(x1) = &self.x1 {
            if x1.len() != problem.dim() {
                return Err(Error::config(format!("x1 has dimension {}, problem has {}", x1.len(), problem.dim())));
            }
        }
        Ok(())
    }

    /// Sweep preconditions on top of [`ExperimentConfig::validate`].
    pub fn validate_sweep(&self) -> Result<()> {
        self.validate()?;
        let sweep = self.sweep.as_ref().ok_or_else(|| Error::config("sweep requires a 'sweep' section"))?;
        let n_values = match sweep.axis {
            SweepAxis::Horizon => self.sweep_horizons()?.len(),
            SweepAxis::Sigma => sweep.values.as_ref().map_or(0, Vec::len),
        };
        if n_values < 3 {
            return Err(Error::config(format!("sweep axis needs at least 3 values, got {n_values}")));
        }
        let problem = self.problem.build()?;
        let stochastic = self
            .sigmas()
            .into_iter()
            .map(|s| self.noise.build(&problem, s))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .any(|n| n.kind != NoiseKind::Exact);
        let n_seeds = self.seeds.seeds().len();
        if stochastic && n_seeds < analysis::MIN_SEEDS {
            return Err(Error::config(format!(
                "stochastic sweeps need at least {} seeds, got {n_seeds}",
                analysis::MIN_SEEDS
            )));
        }
        Ok(())
    }

    fn sweep_horizons(&self) -> Result<Vec<usize>> {
        match self.sweep.as_ref().and_then(|s| (s.axis == SweepAxis::Horizon).then_some(s.values.as_ref())) {
            Some(Some(values)) => values
                .iter()
                .map(|v| {
                    if *v >= 1.0 && v.fract() == 0.0 {
                        Ok(*v as usize)
                    } else {
                        Err(Error::config(format!("horizon sweep value {v} is not a positive integer")))
                    }
                })
                .collect(),
            _ => Ok(self.horizons.clone()),
        }
    }

    /// `None` stands for the noise spec's own σ.
    fn sigmas(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(SweepSpec {
                axis: SweepAxis::Sigma,
                values: Some(v),
            }) => v.iter().map(|s| Some(*s)).collect(),
            _ => vec![None],
        }
    }
}

/// Command-line overrides of top-level scalar keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Overrides {
    /// `seed` replaces the master seed of a derived seed list, or the whole
    /// list with `[seed]` for an explicit one.
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.seeds = match cfg.seeds {
                SeedSpec::Derived { count, .. } => SeedSpec::Derived { count, master: seed },
                SeedSpec::List(_) => SeedSpec::List(vec![seed]),
            };
        }
        if let Some(out) = &self.output_dir {
            cfg.output_dir = out.clone();
        }
        if let Some(w) = self.workers {
            cfg.parallelism = Some(w);
        }
    }
}

/// One `(σ, T, seed)` cell of an experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sigma_index: usize,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Diverged { iteration: usize },
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub sigma: f64,
    pub horizon: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<RunMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
}

impl CellResult {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        let s = self.summary.as_ref()?;
        match m {
            Metric::AvgGradSq => Some(s.avg_grad_sq),
            Metric::MinGradSq => Some(s.min_grad_sq),
            Metric::FinalSub => s.final_sub,
            Metric::DeltaMax => Some(s.delta_max),
        }
    }
}

/// Directory name of a preset: its kind, plus the averaging when it is not
/// the default for that kind.
pub fn preset_label(p: &Preset) -> String {
    match (p.kind, p.averaging) {
        (PresetKind::AdagradAveraging | PresetKind::Rsag, Averaging::Uniform) => {
            format!("{}_uniform", p.kind.as_str())
        }
        _ => p.kind.as_str().to_string(),
    }
}

pub fn trace_path(out: &Path, preset: &Preset, problem: &str, sigma: f64, horizon: usize, seed: u64) -> PathBuf {
    out.join(preset_label(preset))
        .join(problem)
        .join(sigma.to_string())
        .join(format!("T{horizon}_seed{seed}.csv"))
}

/// Start point for `seed`: the configured one, or the problem's default
/// drawn from a stream disjoint from the run's.
pub fn start_point(cfg_x1: Option<&[f64]>, problem: &Problem, seed: u64) -> Vec<f64> {
    match cfg_x1 {
        Some(x) => x.to_vec(),
        None => problem.default_start(&mut rng::substream(seed, 1)),
    }
}

/// Resolved grid and shared inputs of an experiment.
pub struct Plan {
    pub problem: Problem,
    pub noises: Vec<NoiseModel>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Plan {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let problem = cfg.problem.build()?;
        let noises = cfg
            .sigmas()
            .into_iter()
            .map(|s| cfg.noise.build(&problem, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Plan {
            noises,
            horizons: cfg.sweep_horizons()?,
            seeds: cfg.seeds.seeds(),
            problem,
        })
    }

    /// Cells in `(σ, T, seed)` order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::with_capacity(self.noises.len() * self.horizons.len() * self.seeds.len());
        for sigma_index in 0..self.noises.len() {
            for &horizon in &self.horizons {
                for &seed in &self.seeds {
                    out.push(Cell {
                        sigma_index,
                        horizon,
                        seed,
                    });
                }
            }
        }
        out
    }
}

/// Run every cell, writing traces under `out` when given.
pub fn execute(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<CellResult>> {
    let plan = Plan::new(cfg)?;
    let cells = plan.cells();
    let work = || -> Vec<CellResult> {
        cells
            .par_iter()
            .map(|cell| run_cell(cfg, &plan, cell, out))
            .collect()
    };
    let results = match cfg.parallelism {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?
            .install(work),
        None => work(),
    };
    Ok(results)
}

fn run_cell(cfg: &ExperimentConfig, plan: &Plan, cell: &Cell, out: Option<&Path>) -> CellResult {
    let noise = &plan.noises[cell.sigma_index];
    let x1 = start_point(cfg.x1.as_deref(), &plan.problem, cell.seed);
    let mut result = CellResult {
        sigma: noise.sigma,
        horizon: cell.horizon,
        seed: cell.seed,
        status: CellStatus::Ok,
        path: None,
        meta: None,
        summary: None,
    };
    let trace = match optimizers::run(&plan.problem, noise, &cfg.preset, cell.horizon, cell.seed, &x1) {
        Ok(t) => t,
        Err(Error::Divergence { iteration, partial }) => {
            result.status = CellStatus::Diverged { iteration };
            result.meta = Some(partial.meta);
            return result;
        }
        Err(e) => {
            result.status = CellStatus::Failed { message: e.to_string() };
            return result;
        }
    };
    match trace.summary() {
        Ok(s) => result.summary = Some(s),
        Err(e) => result.status = CellStatus::Failed { message: e.to_string() },
    }
    if let Some(dir) = out {
        let path = trace_path(dir, &cfg.preset, plan.problem.name(), noise.sigma, cell.horizon, cell.seed);
        if let Err(e) = trace.write(&path) {
            result.status = CellStatus::Failed { message: e.to_string() };
        }
        result.path = Some(path);
    }
    result.meta = Some(trace.meta);
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub code_version: String,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Provenance {
            config_hash: cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub provenance: Provenance,
    pub runs: Vec<CellResult>,
}

impl RunOutput {
    pub fn any_failed(&self) -> bool {
        self.runs.iter().any(|r| r.status != CellStatus::Ok)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// `run`: one trace per `(seed, T)` plus `summary.json`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let runs = execute(cfg, Some(&cfg.output_dir))?;
    let out = RunOutput {
        provenance: Provenance::of(cfg),
        runs,
    };
    write_json(&cfg.output_dir.join("summary.json"), &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub horizon: usize,
    pub n_runs: usize,
    pub n_failed: usize,
    pub mean: f64,
    pub median: f64,
    pub quantile: f64,
    /// `1 - 8 ln(T) δ` when high-probability checks apply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highprob_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub highprob_quantile: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaGroup {
    pub sigma: f64,
    pub noise: NoiseModel,
    pub rows: Vec<TableRow>,
    /// Fit of the per-horizon quantile against `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_fit: Option<RateFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub config: ExperimentConfig,
    pub metric: Metric,
    pub quantile: f64,
    pub groups: Vec<SigmaGroup>,
    /// `(σ, slope)` for σ sweeps.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma_slopes: Vec<(f64, f64)>,
    /// Whether `|slope|` is non-increasing in `σ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slopes_monotone: Option<bool>,
    pub failures: Vec<CellResult>,
    /// Set when the preset is a baseline outside the adaptive family.
    pub baseline: bool,
}

/// Theoretical bound for `metric` at horizon `T`, given run metadata.
///
/// `Δ₁` is the largest over the supplied runs. Returns `None` where no
/// theorem covers the configuration.
pub fn theoretical_bound(metas: &[&RunMeta], metric: Metric, delta: f64, horizon: usize) -> Option<BoundReport> {
    let meta = *metas.first()?;
    let delta1 = metas.iter().map(|m| m.delta1).fold(f64::NEG_INFINITY, f64::max);
    let t = horizon as f64;
    let l = meta.smoothness;
    let preset = meta.preset;
    let sigma = meta.noise.sigma;
    if !preset.kind.is_adaptive() || meta.f_star_source != optimizers::FStarSource::Known {
        return None;
    }
    let exact = meta.noise.kind == NoiseKind::Exact;
    let mut inputs = BoundInputs {
        delta_max: f64::NAN,
        l,
        g: meta.gradient_bound.unwrap_or(f64::NAN),
        g_hat: meta.stochastic_gradient_bound.unwrap_or(f64::NAN),
        sigma,
        g0: preset.g0,
        delta,
        horizon: t,
    };
    match metric {
        Metric::AvgGradSq if exact && preset.g0 == 0.0 && preset.kind == PresetKind::Adagrad => {
            let theoretical = analysis::bound_deterministic_adagrad(delta1, l) / t;
            let mut map = BTreeMap::from([("delta1".to_string(), delta1), ("L".to_string(), l), ("T".to_string(), t)]);
            map.insert("G0".to_string(), 0.0);
            Some(BoundReport::new("deterministic_adagrad", theoretical, f64::NAN, map, None))
        }
        Metric::AvgGradSq if preset.g0 > 0.0 => {
            if meta.noise.kind == NoiseKind::SubgaussianGaussian {
                let dmax = analysis::bound_subgaussian_delta(delta1, l, inputs.g, sigma, preset.g0, delta, t).ok()?;
                let theoretical = analysis::bound_subgaussian_rate(dmax, l, sigma, preset.g0, delta, t);
                if preset.kind != PresetKind::Adagrad || !theoretical.is_finite() {
                    return None;
                }
                inputs.delta_max = dmax;
                inputs.g_hat = f64::NAN;
                let map = inputs.to_map().into_iter().filter(|(_, v)| !v.is_nan()).collect();
                return Some(BoundReport::new(
                    "subgaussian_adagrad",
                    theoretical,
                    f64::NAN,
                    map,
                    Some(DeltaMaxSource::SubgaussianTheorem),
                ));
            }
            if !(inputs.g.is_finite() && inputs.g_hat.is_finite()) {
                return None;
            }
            inputs.delta_max = analysis::function_bound_delta_max(delta1, &inputs, t).ok()?;
            let (name, theoretical) = match preset.kind {
                PresetKind::Adagrad => ("highprob_adagrad", analysis::bound_highprob_adagrad(&inputs)),
                _ => ("highprob_rsag", analysis::bound_rsag(&inputs)),
            };
            let mut map = inputs.to_map();
            map.insert("delta1".to_string(), delta1);
            Some(BoundReport::new(name, theoretical, f64::NAN, map, Some(DeltaMaxSource::FunctionBound)))
        }
        Metric::DeltaMax if preset.g0 > 0.0 && preset.kind == PresetKind::Adagrad => {
            if meta.noise.kind == NoiseKind::SubgaussianGaussian {
                let v = analysis::bound_subgaussian_delta(delta1, l, inputs.g, sigma, preset.g0, delta, t).ok()?;
                let map = BTreeMap::from([("delta1".to_string(), delta1), ("T".to_string(), t)]);
                return v.is_finite().then(|| BoundReport::new("subgaussian_delta_max", v, f64::NAN, map, None));
            }
            if !(inputs.g.is_finite() && inputs.g_hat.is_finite()) {
                return None;
            }
            let v = analysis::function_bound_delta_max(delta1, &inputs, t).ok()?;
            let mut map = inputs.to_map();
            map.remove("delta_max");
            map.insert("delta1".to_string(), delta1);
            Some(BoundReport::new("function_bound_delta_max", v, f64::NAN, map, None))
        }
        _ => None,
    }
}

/// Statistics of one group of runs at one horizon.
pub fn table_row(
    horizon: usize,
    results: &[&CellResult],
    metric: Metric,
    q: f64,
    delta: f64,
    high_prob: bool,
) -> Result<TableRow> {
    let values: Vec<f64> = results.iter().filter_map(|r| r.metric(metric)).collect();
    let n_failed = results.len() - values.len();
    if values.is_empty() {
        return Err(Error::Numeric(format!("no successful runs at T={horizon}")));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut row = TableRow {
        horizon,
        n_runs: results.len(),
        n_failed,
        mean,
        median: analysis::quantile(&values, 0.5)?,
        quantile: analysis::quantile(&values, q)?,
        highprob_level: None,
        highprob_quantile: None,
        bound: None,
        note: None,
    };
    let metas: Vec<&RunMeta> = results.iter().filter_map(|r| r.meta.as_ref()).collect();
    if !high_prob {
        return Ok(row);
    }
    let Some(mut bound) = theoretical_bound(&metas, metric, delta, horizon) else {
        return Ok(row);
    };
    let deterministic = metas.iter().all(|m| m.noise.kind == NoiseKind::Exact);
    let empirical = if deterministic {
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        match analysis::highprob_quantile_level(horizon, delta) {
            Some(level) => {
                let v = analysis::quantile(&values, level)?;
                row.highprob_level = Some(level);
                row.highprob_quantile = Some(v);
                v
            }
            None => {
                row.note = Some("vacuous failure-budget: 8 ln(T) delta >= 1, check skipped".into());
                return Ok(row);
            }
        }
    };
    bound.empirical = empirical;
    bound.holds = empirical <= bound.theoretical;
    row.bound = Some(bound);
    Ok(row)
}

/// `sweep`: run the grid, write traces, and aggregate into a report.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate_sweep()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let results = execute(cfg, Some(&cfg.output_dir))?;
    let report = build_report(cfg, &results)?;
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Rebuild a sweep report from the traces under `cfg.output_dir`.
///
/// Serializing the result reproduces the `report.json` written by
/// [`cmd_sweep`] byte for byte when every run succeeded; diverged runs leave
/// no trace and come back as failures.
pub fn regenerate_report(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate_sweep()?;
    let plan = Plan::new(cfg)?;
    let mut results = Vec::new();
    for cell in plan.cells() {
        let noise = &plan.noises[cell.sigma_index];
        let path = trace_path(&cfg.output_dir, &cfg.preset, plan.problem.name(), noise.sigma, cell.horizon, cell.seed);
        let mut result = CellResult {
            sigma: noise.sigma,
            horizon: cell.horizon,
            seed: cell.seed,
            status: CellStatus::Ok,
            path: Some(path.clone()),
            meta: None,
            summary: None,
        };
        if path.exists() {
            let trace = RunTrace::read(&path)?;
            result.summary = Some(trace.summary()?);
            result.meta = Some(trace.meta);
        } else {
            result.path = None;
            result.status = CellStatus::Failed {
                message: format!("missing trace {}", path.display()),
            };
        }
        results.push(result);
    }
    build_report(cfg, &results)
}

pub fn report_json(report: &ExperimentReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

pub fn build_report(cfg: &ExperimentConfig, results: &[CellResult]) -> Result<ExperimentReport> {
    let plan = Plan::new(cfg)?;
    let mut groups = Vec::new();
    for (i, noise) in plan.noises.iter().enumerate() {
        let n_h = plan.horizons.len();
        let n_s = plan.seeds.len();
        let block = &results[i * n_h * n_s..(i + 1) * n_h * n_s];
        let mut rows = Vec::new();
        for (j, &horizon) in plan.horizons.iter().enumerate() {
            let cell_results: Vec<&CellResult> = block[j * n_s..(j + 1) * n_s].iter().collect();
            rows.push(table_row(horizon, &cell_results, cfg.metric, cfg.quantile, cfg.delta, cfg.high_prob_checks)?);
        }
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.horizon as f64, r.quantile)).collect();
        let rate_fit = if points.len() >= 3 { analysis::fit_rate(&points).ok() } else { None };
        groups.push(SigmaGroup {
            sigma: noise.sigma,
            noise: noise.clone(),
            rows,
            rate_fit,
        });
    }
    let sigma_axis = matches!(cfg.sweep, Some(SweepSpec { axis: SweepAxis::Sigma, .. }));
    let sigma_slopes: Vec<(f64, f64)> = if sigma_axis {
        groups.iter().filter_map(|g| g.rate_fit.as_ref().map(|f| (g.sigma, f.slope))).collect()
    } else {
        Vec::new()
    };
    let slopes_monotone = (sigma_axis && sigma_slopes.len() == groups.len()).then(|| slopes_monotone(&sigma_slopes));
    Ok(ExperimentReport {
        provenance: Provenance::of(cfg),
        config: cfg.clone(),
        metric: cfg.metric,
        quantile: cfg.quantile,
        groups,
        sigma_slopes,
        slopes_monotone,
        failures: results.iter().filter(|r| r.status != CellStatus::Ok).cloned().collect(),
        baseline: !cfg.preset.kind.is_adaptive(),
    })
}

/// `|slope|` non-increasing as `σ` grows, i.e. the rate degrades
/// monotonically from `1/T` toward `1/√T`.
pub fn slopes_monotone(by_sigma: &[(f64, f64)]) -> bool {
    let mut v = by_sigma.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v.windows(2).all(|w| w[1].1.abs() <= w[0].1.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemmas,
    Concentration,
    Pathwise,
    Bounds,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemmas" => Ok(Suite::Lemmas),
            "concentration" => Ok(Suite::Concentration),
            "pathwise" => Ok(Suite::Pathwise),
            "bounds" => Ok(Suite::Bounds),
            "all" => Ok(Suite::All),
            other => Err(Error::config(format!("unknown suite '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Multiplies the declared `L` of every problem (negative control).
    pub l_scale: f64,
    /// Monte-Carlo trials for the lemma checks.
    pub trials: usize,
    /// Trials for the max-noise check.
    pub max_noise_trials: usize,
    /// Random configurations in the pathwise suite.
    pub pathwise_configs: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            l_scale: 1.0,
            trials: 100_000,
            max_noise_trials: 10_000,
            pathwise_configs: 10,
        }
    }
}

fn count_record(check: &str, params: serde_json::Value, violations: usize) -> CheckRecord {
    CheckRecord {
        check: check.to_string(),
        params,
        estimate: violations as f64,
        stderr: 0.0,
        bound: 0.0,
        verdict: if violations == 0 { Verdict::Pass } else { Verdict::Fail },
        note: None,
    }
}

fn random_sequence(r: &mut rng::Rng) -> Vec<f64> {
    let len = r.random_range(1..=200);
    let scale = 10f64.powf(r.random_range(-3.0..3.0));
    (0..len)
        .map(|_| {
            if r.random::<f64>() < 0.1 {
                0.0
            } else {
                scale * r.random::<f64>()
            }
        })
        .collect()
}

/// Violation counts of the sum lemmas over a random corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SumLemmaViolations {
    pub sqrt: usize,
    /// `Σ aᵢ/Sᵢ ≤ 1 + ln(1 + S)` as stated; not scale invariant, so it can
    /// fail when the leading mass is below 1.
    pub log: usize,
    /// `Σ aᵢ/Sᵢ ≤ 1 + ln(S / a₁)`, `a₁` the first nonzero term.
    pub log_scale_free: usize,
}

/// Sequences of length 1..=200 with magnitudes log-uniform over six decades
/// and 10% exact zeros.
pub fn sum_lemma_violations(n_sequences: usize, seed: u64, slack: f64) -> SumLemmaViolations {
    let mut r = rng::seeded(seed);
    let mut v = SumLemmaViolations {
        sqrt: 0,
        log: 0,
        log_scale_free: 0,
    };
    for _ in 0..n_sequences {
        let a = random_sequence(&mut r);
        let mut prefix = 0.0;
        let mut first = 0.0;
        let (mut s_sqrt, mut s_log) = (0.0, 0.0);
        for x in &a {
            prefix += x;
            if prefix > 0.0 {
                if first == 0.0 {
                    first = *x;
                }
                s_sqrt += x / prefix.sqrt();
                s_log += x / prefix;
            }
        }
        let total = prefix;
        if !(total.sqrt() <= s_sqrt * (1.0 + slack) && s_sqrt <= 2.0 * total.sqrt() * (1.0 + slack)) {
            v.sqrt += 1;
        }
        if s_log > (1.0 + (1.0 + total).ln()) * (1.0 + slack) {
            v.log += 1;
        }
        if total > 0.0 && s_log > (1.0 + (total / first).ln()) * (1.0 + slack) {
            v.log_scale_free += 1;
        }
    }
    v
}

fn lemma_checks(opts: &VerifyOptions) -> Vec<CheckRecord> {
    let v = sum_lemma_violations(1000, opts.seed, 1e-9);
    let params = json!({"n_sequences": 1000, "max_len": 200, "slack": 1e-9, "seed": opts.seed});
    let mut log = count_record("log_sum_lemma", params.clone(), v.log);
    if v.log > 0 {
        log.note = Some("bound is not scale invariant; fails when the leading mass is below 1".into());
    }
    let mut out = vec![
        count_record("sqrt_sum_lemma", params.clone(), v.sqrt),
        log,
        count_record("log_sum_lemma_scale_free", params, v.log_scale_free),
    ];
    let mut star_bad = 0;
    for horizon in 1..=500 {
        let w = schedules::term_star_all(Averaging::Weighted, horizon);
        let u = schedules::term_star_all(Averaging::Uniform, horizon);
        let lb = (horizon as f64 + 1.0).ln();
        star_bad += w.iter().filter(|v| **v > 2.0).count() + u.iter().filter(|v| **v > lb).count();
    }
    out.push(count_record("term_star_bounds", json!({"max_T": 500}), star_bad));
    let w = schedules::gamma_seq(Averaging::Weighted, 10_000);
    let u = schedules::gamma_seq(Averaging::Uniform, 10_000);
    let gamma_bad = (2..=10_000usize)
        .filter(|&t| {
            let tf = t as f64;
            let cw = 2.0 / (tf * (tf + 1.0));
            let cu = 1.0 / tf;
            ((w[t - 1] - cw) / cw).abs() > 1e-12 || ((u[t - 1] - cu) / cu).abs() > 1e-12
        })
        .count();
    out.push(count_record("gamma_closed_forms", json!({"max_T": 10_000, "tolerance": 1e-12}), gamma_bad));
    out
}

fn concentration_checks(opts: &VerifyOptions) -> Result<Vec<CheckRecord>> {
    let s = opts.seed;
    let n = opts.trials;
    let mut out = Vec::new();
    let gens = [
        MdsGenerator::Rademacher { b: 1.0 },
        MdsGenerator::Rademacher { b: 0.5 },
        MdsGenerator::Asymmetric { b: 1.0, p: 0.2 },
        MdsGenerator::Adaptive { b: 1.0 },
        MdsGenerator::Zero,
    ];
    for (i, g) in gens.iter().enumerate() {
        for (j, delta) in [0.01, 0.05].into_iter().enumerate() {
            out.push(analysis::freedman_check(*g, 100, delta, n, rng::derive_seed(s, (10 * i + j) as u64))?);
        }
    }
    let v = vec![1.0, -0.5, 0.25, 2.0];
    let seqs = [
        MgfSequence::Inner {
            v: v.clone(),
            sigma: 1.0,
            lambda: 1.0,
        },
        MgfSequence::Inner { v, sigma: 1.0, lambda: 0.5 },
        MgfSequence::SquaredNorm { dim: 4, sigma: 1.0 },
        MgfSequence::Zero,
    ];
    for (i, seq) in seqs.iter().enumerate() {
        out.push(analysis::mgf_mds_check(seq, 50, 0.05, n, rng::derive_seed(s, 100 + i as u64))?);
    }
    out.push(analysis::max_noise_check(
        &NoiseModel::subgaussian_gaussian(1.0),
        4,
        100,
        0.05,
        opts.max_noise_trials,
        rng::derive_seed(s, 200),
    )?);
    out.push(analysis::max_noise_check(
        &NoiseModel::bounded_sphere(1.0),
        4,
        10,
        0.5,
        opts.max_noise_trials,
        rng::derive_seed(s, 201),
    )?);
    out.extend(oracle_checks(opts)?);
    Ok(out)
}

fn oracle_checks(opts: &VerifyOptions) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    let welsch = problems::make_welsch_sum(4)?;
    let x = vec![0.7, -1.3, 2.0, 0.1];
    let (a, y) = problems::synthetic_sigmoid_data(50, 4, &mut rng::seeded(opts.seed));
    let sigmoid = problems::make_sigmoid_least_squares(a, y)?;
    let cases: Vec<(&Problem, NoiseModel)> = vec![
        (&welsch, NoiseModel::exact()),
        (&welsch, NoiseModel::bounded_sphere(1.0)),
        (&welsch, NoiseModel::truncated_gaussian(1.0, None)),
        (&welsch, NoiseModel::subgaussian_gaussian(1.0)),
        (&sigmoid, NoiseModel::minibatch(&sigmoid, 5)?),
    ];
    for (i, (p, model)) in cases.into_iter().enumerate() {
        let v = oracle::verify_unbiased(p, &x, &model, 100_000, &mut rng::substream(opts.seed, 300 + i as u64))?;
        out.push(CheckRecord {
            check: "unbiased".into(),
            params: json!({"problem": p.name(), "noise": model, "n_samples": v.n_samples}),
            estimate: v.max_z,
            stderr: 0.0,
            bound: 5.0,
            verdict: if v.pass { Verdict::Pass } else { Verdict::Fail },
            note: Some("estimate is max_i |mean_i| / SE_i".into()),
        });
    }
    let m = oracle::verify_subgaussian_mgf(
        &NoiseModel::subgaussian_gaussian(1.0),
        4,
        100_000,
        0.1,
        &mut rng::substream(opts.seed, 310),
    )?;
    let e = std::f64::consts::E;
    out.push(CheckRecord {
        check: "subgaussian_mgf".into(),
        params: json!({"sigma": 1.0, "dim": 4, "n_samples": m.n_samples}),
        estimate: m.estimate,
        stderr: m.stderr,
        bound: e * 1.1,
        verdict: if m.estimate >= 0.9 * e && m.estimate <= 1.1 * e { Verdict::Pass } else { Verdict::Fail },
        note: None,
    });
    Ok(out)
}

/// Problems used by the pathwise suite, with declared `L` scaled by `l_scale`.
fn verify_problems(seed: u64, l_scale: f64) -> Result<Vec<Problem>> {
    let (a, y) = problems::synthetic_sigmoid_data(40, 3, &mut rng::seeded(seed));
    Ok(vec![
        problems::make_quadratic(3, &[0.5, 1.0, 4.0])?,
        problems::make_welsch_sum(5)?,
        problems::make_cosine_valley(4)?,
        problems::make_sigmoid_least_squares(a, y)?,
    ]
    .into_iter()
    .map(|p| if l_scale == 1.0 { p } else { p.with_scaled_smoothness(l_scale) })
    .collect())
}

/// A random `(problem, noise, preset, T)` configuration for the pathwise suite.
pub fn random_pathwise_config(problems: &[Problem], r: &mut rng::Rng) -> Result<(usize, NoiseModel, Preset, usize)> {
    let pi = r.random_range(0..problems.len());
    let p = &problems[pi];
    let sigma = [0.1, 0.5, 1.0, 2.0][r.random_range(0..4)];
    let noise = match r.random_range(0..5) {
        0 => NoiseModel::exact(),
        1 => NoiseModel::bounded_sphere(sigma),
        2 if p.gradient_bound().finite().is_some() => NoiseModel::truncated_gaussian(sigma, None),
        3 => NoiseModel::subgaussian_gaussian(sigma),
        4 if p.finite_sum().is_some() => NoiseModel::minibatch(p, r.random_range(1..=10))?,
        _ => NoiseModel::bounded_sphere(sigma),
    };
    let g0 = [0.01, 0.1, 1.0][r.random_range(0..3)];
    let averaging = if r.random::<bool>() { Averaging::Weighted } else { Averaging::Uniform };
    let preset = match r.random_range(0..4) {
        0 => Preset::adagrad(g0),
        1 => Preset::adagrad_averaging(g0, averaging),
        2 => Preset::rsag(g0, averaging),
        _ => Preset::sgd_fixed([0.05, 0.2][r.random_range(0..2)]),
    };
    let horizon = r.random_range(20..=2000);
    Ok((pi, noise, preset, horizon))
}

/// Pathwise inequality checks on `n_configs` random runs.
pub fn pathwise_checks(n_configs: usize, seed: u64, l_scale: f64) -> Result<Vec<CheckRecord>> {
    let problems = verify_problems(seed, l_scale)?;
    let mut r = rng::seeded(seed);
    let configs: Vec<_> = (0..n_configs)
        .map(|i| random_pathwise_config(&problems, &mut r).map(|c| (i, c)))
        .collect::<Result<_>>()?;
    let per_run: Vec<Result<Vec<CheckRecord>>> = configs
        .par_iter()
        .map(|(i, (pi, noise, preset, horizon))| {
            let p = &problems[*pi];
            let run_seed = rng::derive_seed(seed, *i as u64);
            let x1 = start_point(None, p, run_seed);
            let trace = optimizers::run(p, noise, preset, *horizon, run_seed, &x1)?;
            let params = json!({
                "problem": p.name(), "L": p.smoothness(), "noise": noise, "preset": preset,
                "T": horizon, "seed": run_seed,
            });
            let mut out = Vec::new();
            let mut checks = Vec::new();
            if preset.averaging == Averaging::None {
                checks.push(analysis::check_intuition2(&trace, p.smoothness())?);
            }
            if preset.kind.is_adaptive() {
                checks.push(analysis::check_main_bound(&trace, p.smoothness())?);
            }
            for c in checks {
                out.push(CheckRecord {
                    check: format!("pathwise_{}", c.name),
                    params: params.clone(),
                    estimate: c.lhs,
                    stderr: 0.0,
                    bound: c.rhs,
                    verdict: if c.holds { Verdict::Pass } else { Verdict::Fail },
                    note: None,
                });
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_run {
        out.extend(r?);
    }
    for (i, p) in problems.iter().enumerate() {
        out.push(analysis::descent_lemma_check(p, 1000, 4.0, rng::derive_seed(seed, 1000 + i as u64)));
    }
    Ok(out)
}

fn bound_checks(opts: &VerifyOptions) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    // Deterministic rate: every run with G0 = 0 and the exact oracle.
    let problems = verify_problems(opts.seed, opts.l_scale)?;
    for (i, p) in problems.iter().enumerate().filter(|(_, p)| p.f_star().is_some()) {
        for horizon in [10, 100, 1000] {
            let seed = rng::derive_seed(opts.seed, 2000 + i as u64);
            let x1 = start_point(None, p, seed);
            let trace = optimizers::run(p, &NoiseModel::exact(), &Preset::adagrad(0.0), horizon, seed, &x1)?;
            let avg = optimizers::report_metric(&trace, Metric::AvgGradSq)?;
            let bound = analysis::bound_deterministic_adagrad(trace.meta.delta1, p.smoothness()) / horizon as f64;
            out.push(CheckRecord {
                check: "deterministic_bound".into(),
                params: json!({"problem": p.name(), "T": horizon, "delta1": trace.meta.delta1, "L": p.smoothness()}),
                estimate: avg,
                stderr: 0.0,
                bound,
                verdict: if avg <= bound * (1.0 + 1e-8) { Verdict::Pass } else { Verdict::Fail },
                note: None,
            });
        }
    }
    // High-probability dominance on a small stochastic experiment.
    for preset in [Preset::adagrad(0.01), Preset::rsag(0.01, Averaging::Weighted)] {
        let cfg = ExperimentConfig {
            problem: ProblemSpec::Welsch { dim: 4 },
            noise: NoiseSpec {
                kind: NoiseKind::TruncatedGaussian,
                sigma: 1.0,
                clip: None,
                batch_size: None,
            },
            preset,
            horizons: vec![100, 1000],
            seeds: SeedSpec::Derived {
                count: 40,
                master: opts.seed,
            },
            metric: Metric::AvgGradSq,
            delta: DEFAULT_DELTA,
            high_prob_checks: true,
            quantile: DEFAULT_QUANTILE,
            output_dir: PathBuf::new(),
            parallelism: None,
            sweep: None,
            x1: None,
        };
        let results = execute(&cfg, None)?;
        let report = build_report(&cfg, &results)?;
        for row in &report.groups[0].rows {
            if let Some(b) = &row.bound {
                out.push(CheckRecord {
                    check: format!("{}_dominance", b.bound_name),
                    params: json!({"preset": preset, "T": row.horizon, "level": row.highprob_level, "seeds": 40}),
                    estimate: b.empirical,
                    stderr: 0.0,
                    bound: b.theoretical,
                    verdict: if b.holds { Verdict::Pass } else { Verdict::Fail },
                    note: None,
                });
            }
        }
    }
    Ok(out)
}

/// `verify`: verdicts for one suite, in a deterministic order.
pub fn cmd_verify(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckRecord>> {
    if !(opts.l_scale > 0.0 && opts.l_scale.is_finite()) {
        return Err(Error::config(format!("l_scale must be positive, got {}", opts.l_scale)));
    }
    let mut out = Vec::new();
    if matches!(suite, Suite::Lemmas | Suite::All) {
        out.extend(lemma_checks(opts));
    }
    if matches!(suite, Suite::Concentration | Suite::All) {
        out.extend(concentration_checks(opts)?);
    }
    if matches!(suite, Suite::Pathwise | Suite::All) {
        out.extend(pathwise_checks(opts.pathwise_configs, opts.seed, opts.l_scale)?);
    }
    if matches!(suite, Suite::Bounds | Suite::All) {
        out.extend(bound_checks(opts)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub delta: f64,
    pub quantile: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            delta: DEFAULT_DELTA,
            quantile: DEFAULT_QUANTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub table: String,
    pub csv: String,
    pub n_traces: usize,
}

fn is_trace_file(path: &Path) -> bool {
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
        return false;
    };
    name.starts_with('T') && name.contains("_seed") && name.ends_with(".csv")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6e}"))
}

/// `report`: per-group tables of every metric, grouped by the
/// `<preset>/<problem>/<sigma>` path of each trace.
pub fn cmd_report(dir: &Path, opts: &ReportOptions) -> Result<ReportOutput> {
    if !dir.is_dir() {
        return Err(Error::config(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| p.is_file() && is_trace_file(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config("no traces found"));
    }
    let mut groups: BTreeMap<String, BTreeMap<usize, Vec<CellResult>>> = BTreeMap::new();
    for path in &paths {
        let trace = RunTrace::read(path)?;
        let key = path
            .parent()
            .and_then(|p| p.strip_prefix(dir).ok())
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_default();
        let summary = trace.summary()?;
        groups.entry(key).or_default().entry(trace.meta.horizon).or_default().push(CellResult {
            sigma: trace.meta.noise.sigma,
            horizon: trace.meta.horizon,
            seed: trace.meta.seed,
            status: CellStatus::Ok,
            path: None,
            meta: Some(trace.meta),
            summary: Some(summary),
        });
    }
    let mut table = String::new();
    let mut csv_w = csv::Writer::from_writer(Vec::new());
    let header = ["group", "metric", "T", "n", "mean", "median", "quantile", "bound", "holds"];
    csv_w.write_record(header).map_err(|e| Error::Numeric(e.to_string()))?;
    for (group, by_t) in &groups {
        let baseline = by_t.values().flatten().any(|r| r.meta.as_ref().is_some_and(|m| m.baseline));
        let _ = writeln!(table, "== {group}{}", if baseline { " (baseline, not adaptive)" } else { "" });
        for metric in Metric::ALL {
            let _ = writeln!(table, "  {}", metric.as_str());
            let _ = writeln!(
                table,
                "  {:>8} {:>5} {:>14} {:>14} {:>14} {:>14} {:>6}",
                "T", "n", "mean", "median", format!("q{}", opts.quantile), "bound", "holds"
            );
            for (t, runs) in by_t {
                let refs: Vec<&CellResult> = runs.iter().collect();
                let Ok(row) = table_row(*t, &refs, metric, opts.quantile, opts.delta, true) else {
                    continue;
                };
                let bound = row.bound.as_ref().map(|b| b.theoretical);
                let holds = row.bound.as_ref().map_or("-".to_string(), |b| b.holds.to_string());
                let _ = writeln!(
                    table,
                    "  {:>8} {:>5} {:>14} {:>14} {:>14} {:>14} {:>6}",
                    t,
                    row.n_runs,
                    fmt_opt(Some(row.mean)),
                    fmt_opt(Some(row.median)),
                    fmt_opt(Some(row.quantile)),
                    fmt_opt(bound),
                    holds
                );
                csv_w
                    .write_record([
                        group.clone(),
                        metric.as_str().to_string(),
                        t.to_string(),
                        row.n_runs.to_string(),
                        row.mean.to_string(),
                        row.median.to_string(),
                        row.quantile.to_string(),
                        bound.map_or(String::new(), |b| b.to_string()),
                        holds,
                    ])
                    .map_err(|e| Error::Numeric(e.to_string()))?;
            }
        }
    }
    let csv = String::from_utf8(csv_w.into_inner().map_err(|e| Error::Numeric(e.to_string()))?)
        .map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(ReportOutput {
        table,
        csv,
        n_traces: paths.len(),
    })
}

/// Process exit code for an error: 2 for usage and configuration problems,
/// 3 for runtime and numeric failures.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidParameter(_) | Error::Configuration(_) | Error::Parse { .. } | Error::Io { .. } => 2,
        Error::Numeric(_) | Error::ZeroAccumulator | Error::Divergence { .. } => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "problem": {"kind": "welsch", "dim": 4},
                "noise": {"kind": "exact"},
                "preset": {"kind": "adagrad", "averaging": "none", "g0": 0.0},
                "horizons": [100],
                "seeds": [0]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = minimal();
        cfg.sweep = Some(SweepSpec {
            axis: SweepAxis::Sigma,
            values: Some(vec![0.0, 0.1, 1.0]),
        });
        cfg.seeds = SeedSpec::Derived { count: 20, master: 7 };
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn config_validation() {
        assert!(minimal().validate().is_ok());
        let mut c = minimal();
        c.horizons = vec![100, 100];
        assert!(c.validate().is_err());
        let mut c = minimal();
        c.seeds = SeedSpec::List(vec![1, 1]);
        assert!(c.validate().is_err());
        let mut c = minimal();
        c.high_prob_checks = true;
        c.delta = 0.5;
        assert!(matches!(c.validate(), Err(Error::Configuration(_))));
        let mut c = minimal();
        c.noise = NoiseSpec {
            kind: NoiseKind::BoundedSphere,
            sigma: 1.0,
            clip: None,
            batch_size: None,
        };
        assert!(c.validate().is_err(), "G0 = 0 with a stochastic oracle");
        assert!(ExperimentConfig::from_json(r#"{"problem": {"kind": "welsch", "dim": 4}}"#).is_err());
    }

    #[test]
    fn sweep_needs_three_values_and_twenty_seeds() {
        let mut c = minimal();
        c.horizons = vec![10, 100];
        c.sweep = Some(SweepSpec {
            axis: SweepAxis::Horizon,
            values: None,
        });
        assert!(c.validate_sweep().is_err());
        c.horizons = vec![10, 100, 1000];
        assert!(c.validate_sweep().is_ok());
        c.preset = Preset::adagrad(0.01);
        c.noise.kind = NoiseKind::BoundedSphere;
        c.noise.sigma = 1.0;
        assert!(c.validate_sweep().is_err());
        c.seeds = SeedSpec::Derived { count: 20, master: 0 };
        assert!(c.validate_sweep().is_ok());
    }

    #[test]
    fn overrides_apply_to_top_level_keys() {
        let mut c = minimal();
        Overrides {
            seed: Some(9),
            output_dir: Some("elsewhere".into()),
            workers: Some(2),
        }
        .apply(&mut c);
        assert_eq!(c.seeds, SeedSpec::List(vec![9]));
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.parallelism, Some(2));
    }

    #[test]
    fn trace_layout() {
        let p = trace_path(Path::new("out"), &Preset::rsag(0.01, Averaging::Uniform), "welsch", 0.3, 100, 7);
        assert_eq!(p, PathBuf::from("out/rsag_uniform/welsch/0.3/T100_seed7.csv"));
        assert!(is_trace_file(&p));
        assert!(!is_trace_file(Path::new("out/summary.csv")));
    }

    #[test]
    fn monotone_slopes_compare_magnitudes() {
        assert!(slopes_monotone(&[(0.0, -1.0), (0.3, -0.8), (3.0, -0.5)]));
        assert!(!slopes_monotone(&[(0.0, -0.5), (3.0, -1.0)]));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::ZeroAccumulator), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let mut c = minimal();
        c.preset = Preset::adagrad(0.01);
        c.noise = NoiseSpec {
            kind: NoiseKind::BoundedSphere,
            sigma: 0.5,
            clip: None,
            batch_size: None,
        };
        c.seeds = SeedSpec::Derived { count: 6, master: 3 };
        c.horizons = vec![10, 50];
        c.parallelism = Some(1);
        let a = execute(&c, None).unwrap();
        c.parallelism = Some(4);
        let b = execute(&c, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
    }
}
