//! The generic AGD template and its presets.
//!
//! One iteration:
//!
//! ```text
//! x̄_t     = α_t x_t + (1 - α_t) x̃_t
//! g_t     = oracle(x̄_t)
//! x_{t+1} = x_t - η_t g_t
//! x̃_{t+1} = x̄_t - γ_t g_t
//! ```
//!
//! with `(η_t, γ_t)` and `α_t` supplied by a [`Preset`]. Plain AdaGrad-Norm
//! is the `α_t = 1, η_t = γ_t` row, where all three sequences coincide.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::oracle::{GradientOracle, NoiseModel};
use crate::problems::Problem;
use crate::rng::{self, Rng};
use crate::schedules::{self, Accumulator, Preset};

/// Iterates beyond this magnitude are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

pub const CSV_HEADER: [&str; 9] = [
    "t",
    "f_sub",
    "grad_sq_bar",
    "grad_sq_stoch",
    "eta",
    "gamma",
    "alpha",
    "acc",
    "delta_max",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AgdState {
    pub x: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub x_bar: Vec<f64>,
    pub acc: Accumulator,
    /// Index of the next iteration (starts at 1).
    pub t: usize,
}

impl AgdState {
    pub fn new(x1: Vec<f64>, g0: f64) -> Self {
        AgdState {
            x_tilde: x1.clone(),
            x_bar: x1.clone(),
            x: x1,
            acc: Accumulator::new(g0),
            t: 1,
        }
    }
}

/// One row of a trace.
///
/// `f_sub` and `delta_max` are filled once the run finishes, because `f*`
/// may be the best value observed over the whole run. `noise_inner` and
/// `eta_tilde` are kept in memory only and are not part of the CSV schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub f_sub: f64,
    pub grad_sq_bar: f64,
    pub grad_sq_stoch: f64,
    pub eta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub acc: f64,
    pub delta_max: f64,
    #[serde(skip, default = "nan")]
    pub f_value: f64,
    /// `-⟨ḡ_t, ξ_t⟩`
    #[serde(skip, default = "nan")]
    pub noise_inner: f64,
    #[serde(skip, default = "nan")]
    pub eta_tilde: f64,
}

fn nan() -> f64 {
    f64::NAN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FStarSource {
    Known,
    /// Minimum of `f(x_t)` over the run; Δ-based checks are informational.
    BestObserved,
}

/// Configuration and problem constants of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub preset: Preset,
    pub problem: String,
    pub dim: usize,
    pub noise: NoiseModel,
    pub seed: u64,
    pub horizon: usize,
    pub smoothness: f64,
    pub gradient_bound: Option<f64>,
    pub stochastic_gradient_bound: Option<f64>,
    pub f_star: f64,
    pub f_star_source: FStarSource,
    pub delta1: f64,
    /// `Δ_{T+1}`; absent for partial traces.
    pub final_sub: Option<f64>,
    /// Set when the preset is a baseline outside the adaptive family.
    pub baseline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub avg_grad_sq: f64,
    pub min_grad_sq: f64,
    pub final_sub: Option<f64>,
    pub delta_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub meta: RunMeta,
    pub records: Vec<TraceRecord>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    meta: RunMeta,
    summary: RunSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AvgGradSq,
    MinGradSq,
    FinalSub,
    DeltaMax,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::AvgGradSq, Metric::MinGradSq, Metric::FinalSub, Metric::DeltaMax];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::AvgGradSq => "avg_grad_sq",
            Metric::MinGradSq => "min_grad_sq",
            Metric::FinalSub => "final_sub",
            Metric::DeltaMax => "delta_max",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown metric '{s}'")))
    }
}

/// One template iteration. Advances `state` and returns the partial record
/// (`f_sub` and `delta_max` unset).
pub fn agd_step(
    state: &mut AgdState,
    preset: &Preset,
    problem: &Problem,
    oracle: &dyn GradientOracle,
    rng: &mut Rng,
) -> Result<TraceRecord> {
    let t = state.t;
    let alpha = schedules::alpha(preset.averaging, t)?;
    if alpha == 1.0 {
        state.x_bar.copy_from_slice(&state.x);
    } else {
        for ((b, x), xt) in state.x_bar.iter_mut().zip(&state.x).zip(&state.x_tilde) {
            *b = alpha * x + (1.0 - alpha) * xt;
        }
    }
    let f_value = problem.value(&state.x);
    let sample = oracle.sample(problem, &state.x_bar, rng)?;
    if !linalg::all_finite(&sample.g) {
        return Err(Error::Numeric(format!("non-finite stochastic gradient at t={t}")));
    }
    let grad_sq_stoch = linalg::norm_sq(&sample.g);
    state.acc.push(grad_sq_stoch);
    let (eta, gamma) = schedules::step_pair(preset, t, &state.acc)?;

    linalg::axpy(-eta, &sample.g, &mut state.x);
    if gamma == eta && alpha == 1.0 {
        state.x_tilde.copy_from_slice(&state.x);
    } else {
        for ((xt, b), g) in state.x_tilde.iter_mut().zip(&state.x_bar).zip(&sample.g) {
            *xt = b - gamma * g;
        }
    }
    state.t += 1;

    let record = TraceRecord {
        t,
        f_sub: f64::NAN,
        grad_sq_bar: linalg::norm_sq(&sample.g_bar),
        grad_sq_stoch,
        eta,
        gamma,
        alpha,
        acc: state.acc.value(),
        delta_max: f64::NAN,
        f_value,
        noise_inner: -linalg::dot(&sample.g_bar, &sample.xi),
        eta_tilde: schedules::eta_tilde(&state.acc).unwrap_or(f64::INFINITY),
    };
    let finite = [f_value, record.grad_sq_bar, grad_sq_stoch, eta, gamma].iter().all(|v| v.is_finite());
    if !finite || exceeds_limit(&state.x) || exceeds_limit(&state.x_tilde) {
        return Err(Error::Numeric(format!("iterate left the finite range at t={t}")));
    }
    Ok(record)
}

fn exceeds_limit(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

/// Run `horizon` iterations from `x1` with the stream keyed by `seed`.
pub fn run(
    problem: &Problem,
    noise: &NoiseModel,
    preset: &Preset,
    horizon: usize,
    seed: u64,
    x1: &[f64],
) -> Result<RunTrace> {
    run_with_oracle(problem, noise, noise, preset, horizon, seed, x1)
}

/// As [`run`], with the sampling done by `oracle`. `noise` is only recorded.
pub fn run_with_oracle(
    problem: &Problem,
    noise: &NoiseModel,
    oracle: &dyn GradientOracle,
    preset: &Preset,
    horizon: usize,
    seed: u64,
    x1: &[f64],
) -> Result<RunTrace> {
    if horizon < 1 {
        return Err(Error::invalid("run: horizon must be >= 1"));
    }
    if x1.len() != problem.dim() {
        return Err(Error::invalid(format!(
            "start point has dimension {}, problem has {}",
            x1.len(),
            problem.dim()
        )));
    }
    if !linalg::all_finite(x1) {
        return Err(Error::Numeric("start point is not finite".into()));
    }
    preset.validate()?;
    noise.validate(problem)?;

    let mut rng = rng::seeded(seed);
    let mut state = AgdState::new(x1.to_vec(), preset.g0);
    let mut records = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        match agd_step(&mut state, preset, problem, oracle, &mut rng) {
            Ok(r) => records.push(r),
            Err(Error::Numeric(_)) => {
                let iteration = state.t;
                let partial = finish(problem, noise, preset, horizon, seed, records, None);
                return Err(Error::Divergence {
                    iteration,
                    partial: Box::new(partial),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let f_final = problem.value(&state.x);
    if !f_final.is_finite() {
        let partial = finish(problem, noise, preset, horizon, seed, records, None);
        return Err(Error::Divergence {
            iteration: horizon + 1,
            partial: Box::new(partial),
        });
    }
    Ok(finish(problem, noise, preset, horizon, seed, records, Some(f_final)))
}

fn finish(
    problem: &Problem,
    noise: &NoiseModel,
    preset: &Preset,
    horizon: usize,
    seed: u64,
    mut records: Vec<TraceRecord>,
    f_final: Option<f64>,
) -> RunTrace {
    let (f_star, source) = match problem.f_star() {
        Some(v) => (v, FStarSource::Known),
        None => {
            let best = records
                .iter()
                .map(|r| r.f_value)
                .chain(f_final)
                .fold(f64::INFINITY, f64::min);
            (best, FStarSource::BestObserved)
        }
    };
    let mut running = f64::NEG_INFINITY;
    for r in &mut records {
        r.f_sub = r.f_value - f_star;
        running = running.max(r.f_sub);
        r.delta_max = running;
    }
    RunTrace {
        meta: RunMeta {
            preset: *preset,
            problem: problem.name().to_string(),
            dim: problem.dim(),
            noise: noise.clone(),
            seed,
            horizon,
            smoothness: problem.smoothness(),
            gradient_bound: problem.gradient_bound().finite(),
            stochastic_gradient_bound: noise.stochastic_gradient_bound(problem),
            f_star,
            f_star_source: source,
            delta1: records.first().map_or(f64::NAN, |r| r.f_sub),
            final_sub: f_final.map(|f| f - f_star),
            baseline: !preset.kind.is_adaptive(),
        },
        records,
    }
}

impl RunTrace {
    /// `Δ_max` over `t ∈ [T+1]`.
    pub fn delta_max(&self) -> f64 {
        let running = self.records.last().map_or(f64::NEG_INFINITY, |r| r.delta_max);
        match self.meta.final_sub {
            Some(f) => running.max(f),
            None => running,
        }
    }

    pub fn summary(&self) -> Result<RunSummary> {
        Ok(RunSummary {
            avg_grad_sq: report_metric(self, Metric::AvgGradSq)?,
            min_grad_sq: report_metric(self, Metric::MinGradSq)?,
            final_sub: self.meta.final_sub,
            delta_max: report_metric(self, Metric::DeltaMax)?,
        })
    }

    /// CSV body with the fixed header. Floats use the shortest
    /// representation that round-trips.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                r.f_sub.to_string(),
                r.grad_sq_bar.to_string(),
                r.grad_sq_stoch.to_string(),
                r.eta.to_string(),
                r.gamma.to_string(),
                r.alpha.to_string(),
                r.acc.to_string(),
                r.delta_max.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }

    pub fn sidecar_json(&self) -> Result<String> {
        let sidecar = Sidecar {
            meta: self.meta.clone(),
            summary: self.summary()?,
        };
        serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Numeric(e.to_string()))
    }

    /// Write `<stem>.csv` and `<stem>.meta.json` next to each other.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        if let Some(dir) = csv_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_file(csv_path, self.to_csv_string().as_bytes())?;
        write_file(&sidecar_path(csv_path), self.sidecar_json()?.as_bytes())
    }

    /// Read a trace written by [`RunTrace::write`].
    pub fn read(csv_path: &Path) -> Result<RunTrace> {
        let parse_err = |message: String| Error::Parse {
            path: csv_path.to_path_buf(),
            message,
        };
        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| parse_err(e.to_string()))?;
        let header = reader.headers().map_err(|e| parse_err(e.to_string()))?;
        if header.iter().ne(CSV_HEADER) {
            return Err(parse_err(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
        }
        let mut records = Vec::new();
        for (line, row) in reader.deserialize::<TraceRecord>().enumerate() {
            records.push(row.map_err(|e| parse_err(format!("row {}: {e}", line + 1)))?);
        }
        let side = sidecar_path(csv_path);
        let text = std::fs::read_to_string(&side).map_err(|e| parse_err(format!("sidecar {}: {e}", side.display())))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: side.clone(),
            message: e.to_string(),
        })?;
        Ok(RunTrace {
            meta: sidecar.meta,
            records,
        })
    }
}

/// `<stem>.meta.json` for `<stem>.csv`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn report_metric(trace: &RunTrace, which: Metric) -> Result<f64> {
    if trace.records.is_empty() {
        return Err(Error::invalid("report_metric: empty trace"));
    }
    let grads = trace.records.iter().map(|r| r.grad_sq_bar);
    Ok(match which {
        Metric::AvgGradSq => grads.sum::<f64>() / trace.records.len() as f64,
        Metric::MinGradSq => grads.fold(f64::INFINITY, f64::min),
        Metric::FinalSub => trace
            .meta
            .final_sub
            .ok_or_else(|| Error::invalid("report_metric: partial trace has no final value"))?,
        Metric::DeltaMax => trace.delta_max(),
    })
}
