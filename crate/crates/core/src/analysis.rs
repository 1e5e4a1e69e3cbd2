//! Concentration checks, theoretical bounds, rate fits and quantiles.
//!
//! Monte-Carlo checks run each trial on its own substream of the master
//! seed and reduce in trial order, so verdicts do not depend on the number
//! of worker threads. A check passes when the empirical frequency is at most
//! `bound + 3·SE`, with `SE = sqrt(p̂(1 - p̂)/n)`.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::linalg;
use crate::optimizers::RunTrace;
use crate::oracle::{NoiseKind, NoiseModel};
use crate::problems::Problem;
use crate::rng::{self, Rng};
use crate::schedules::{self, Averaging};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

impl Verdict {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// `{check, params, estimate, stderr, bound, verdict}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check: String,
    pub params: serde_json::Value,
    pub estimate: f64,
    pub stderr: f64,
    pub bound: f64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CheckRecord {
    pub fn passed(&self) -> bool {
        self.verdict != Verdict::Fail
    }
}

fn binomial_record(check: &str, params: serde_json::Value, violations: usize, n: usize, bound: f64) -> CheckRecord {
    let p = violations as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    CheckRecord {
        check: check.to_string(),
        params,
        estimate: p,
        stderr: se,
        bound,
        verdict: Verdict::from_bool(p <= bound + 3.0 * se),
        note: None,
    }
}

/// Count trials for which `violated(rng)` is true, trial `i` on substream `i`.
fn count_violations<F>(seed: u64, n_trials: usize, violated: F) -> usize
where
    F: Fn(&mut Rng) -> bool + Sync,
{
    (0..n_trials as u64)
        .into_par_iter()
        .map(|i| usize::from(violated(&mut rng::substream(seed, i))))
        .sum()
}

/// Bounded martingale difference sequences for [`freedman_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MdsGenerator {
    /// `X_t = ±b`.
    Rademacher { b: f64 },
    Zero,
    /// `X_t = b(1 - p)` with probability `p`, `-b p` otherwise.
    Asymmetric { b: f64, p: f64 },
    /// `X_t = ±b s_t` with `s_t = 1` while the running sum is non-positive and
    /// `1/2` otherwise: conditional variance depends on the past.
    Adaptive { b: f64 },
}

impl MdsGenerator {
    pub fn bound(&self) -> f64 {
        match *self {
            MdsGenerator::Rademacher { b } | MdsGenerator::Adaptive { b } => b,
            MdsGenerator::Asymmetric { b, p } => b * p.max(1.0 - p),
            MdsGenerator::Zero => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            MdsGenerator::Rademacher { b } | MdsGenerator::Adaptive { b } => b > 0.0 && b.is_finite(),
            MdsGenerator::Asymmetric { b, p } => b > 0.0 && b.is_finite() && p > 0.0 && p < 1.0,
            MdsGenerator::Zero => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid generator {self:?}")))
        }
    }

    /// One path: `(Σ X_t, V_T)` with `V_T` the sum of conditional variances.
    fn path(&self, horizon: usize, rng: &mut Rng) -> (f64, f64) {
        let mut sum = 0.0;
        let mut var = 0.0;
        for _ in 0..horizon {
            let (x, v) = match *self {
                MdsGenerator::Rademacher { b } => (if rng.random::<bool>() { b } else { -b }, b * b),
                MdsGenerator::Zero => (0.0, 0.0),
                MdsGenerator::Asymmetric { b, p } => {
                    let x = if rng.random::<f64>() < p { b * (1.0 - p) } else { -b * p };
                    (x, b * b * p * (1.0 - p))
                }
                MdsGenerator::Adaptive { b } => {
                    let s = if sum > 0.0 { 0.5 } else { 1.0 };
                    let x = if rng.random::<bool>() { b * s } else { -b * s };
                    (x, b * b * s * s)
                }
            };
            sum += x;
            var += v;
        }
        (sum, var)
    }
}

/// Freedman-type tail: `P(Σ X_t > max{2√V_T, 3b√ln(1/δ)} √ln(1/δ)) ≤ 4 ln(T) δ`.
pub fn freedman_check(gen: MdsGenerator, horizon: usize, delta: f64, n_trials: usize, seed: u64) -> Result<CheckRecord> {
    if !(delta > 0.0 && delta < (-1.0f64).exp()) {
        return Err(Error::invalid(format!("freedman_check: need 0 < delta < 1/e, got {delta}")));
    }
    if horizon < 3 {
        return Err(Error::invalid(format!("freedman_check: need T >= 3, got {horizon}")));
    }
    if n_trials == 0 {
        return Err(Error::invalid("freedman_check: n_trials must be positive"));
    }
    gen.validate()?;
    let b = gen.bound();
    let l = (1.0 / delta).ln();
    let violations = count_violations(seed, n_trials, |r| {
        let (sum, var) = gen.path(horizon, r);
        let threshold = (2.0 * var.sqrt()).max(3.0 * b * l.sqrt()) * l.sqrt();
        sum > threshold
    });
    let bound = 4.0 * (horizon as f64).ln() * delta;
    let params = json!({"generator": gen, "T": horizon, "delta": delta, "n_trials": n_trials, "seed": seed});
    Ok(binomial_record("freedman", params, violations, n_trials, bound))
}

/// Sequences for [`mgf_mds_check`], built from calibrated sub-Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MgfSequence {
    /// `Z_t = ⟨v, ξ_t⟩`, `Y_t = ||v|| σ`; bound `(3/4) λ Σ Y_t² + ln(1/δ)/λ`.
    Inner { v: Vec<f64>, sigma: f64, lambda: f64 },
    /// `Z_t = ||ξ_t||² - σ²`; bound `σ² ln(1/δ)`.
    SquaredNorm { dim: usize, sigma: f64 },
    /// `Z_t = 0`.
    Zero,
}

pub fn mgf_mds_check(seq: &MgfSequence, horizon: usize, delta: f64, n_trials: usize, seed: u64) -> Result<CheckRecord> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("mgf_mds_check: need 0 < delta < 1, got {delta}")));
    }
    if horizon == 0 || n_trials == 0 {
        return Err(Error::invalid("mgf_mds_check: T and n_trials must be positive"));
    }
    let l = (1.0 / delta).ln();
    let (name, bound_value, violations) = match seq {
        MgfSequence::Inner { v, sigma, lambda } => {
            if !(*sigma > 0.0 && *lambda > 0.0) || v.is_empty() {
                return Err(Error::invalid("mgf_mds_check: need sigma > 0, lambda > 0, non-empty v"));
            }
            let y_sq = linalg::norm_sq(v) * sigma * sigma;
            let rhs = 0.75 * lambda * horizon as f64 * y_sq + l / lambda;
            let s = NoiseModel::subgaussian_coordinate_variance(*sigma, v.len()).sqrt();
            let count = count_violations(seed, n_trials, |r| {
                let total: f64 = (0..horizon)
                    .map(|_| v.iter().map(|vi| vi * s * r.sample::<f64, _>(StandardNormal)).sum::<f64>())
                    .sum();
                total > rhs
            });
            ("mgf_mds", rhs, count)
        }
        MgfSequence::SquaredNorm { dim, sigma } => {
            if !(*sigma > 0.0) || *dim == 0 {
                return Err(Error::invalid("mgf_mds_check: need sigma > 0 and dim > 0"));
            }
            let rhs = sigma * sigma * l;
            let s = NoiseModel::subgaussian_coordinate_variance(*sigma, *dim).sqrt();
            let count = count_violations(seed, n_trials, |r| {
                let total: f64 = (0..horizon)
                    .map(|_| {
                        let n: f64 = (0..*dim).map(|_| (s * r.sample::<f64, _>(StandardNormal)).powi(2)).sum();
                        n - sigma * sigma
                    })
                    .sum();
                total > rhs
            });
            ("mgf_mds_squared_norm", rhs, count)
        }
        MgfSequence::Zero => ("mgf_mds", 0.0, 0),
    };
    let params = json!({"sequence": seq, "T": horizon, "delta": delta, "n_trials": n_trials, "seed": seed});
    let mut rec = binomial_record(name, params, violations, n_trials, delta);
    rec.note = Some(format!("per-trial threshold {bound_value}"));
    Ok(rec)
}

/// `max_t ||ξ_t||² ≤ σ² ln(eT/δ)` with probability at least `1 - δ`.
pub fn max_noise_check(model: &NoiseModel, dim: usize, horizon: usize, delta: f64, n_trials: usize, seed: u64) -> Result<CheckRecord> {
    if !(delta > 0.0 && delta < 1.0) || horizon == 0 || n_trials == 0 || dim == 0 {
        return Err(Error::invalid("max_noise_check: need 0 < delta < 1 and positive T, dim, n_trials"));
    }
    let sigma = model.sigma;
    let threshold = sigma * sigma * (std::f64::consts::E * horizon as f64 / delta).ln();
    let params = json!({"noise": model, "dim": dim, "T": horizon, "delta": delta, "n_trials": n_trials, "seed": seed});
    let violations = match model.kind {
        NoiseKind::Exact => 0,
        NoiseKind::SubgaussianGaussian => {
            let s = NoiseModel::subgaussian_coordinate_variance(sigma, dim).sqrt();
            count_violations(seed, n_trials, |r| {
                (0..horizon).any(|_| {
                    let n: f64 = (0..dim).map(|_| (s * r.sample::<f64, _>(StandardNormal)).powi(2)).sum();
                    n > threshold
                })
            })
        }
        NoiseKind::BoundedSphere => usize::from(sigma * sigma > threshold) * n_trials,
        other => {
            return Err(Error::invalid(format!(
                "max_noise_check: unsupported noise kind {}",
                other.as_str()
            )))
        }
    };
    Ok(binomial_record("max_noise", params, violations, n_trials, delta))
}

/// Descent-lemma audit of a problem's declared `L` on random pairs in `[-r, r]^d`.
pub fn descent_lemma_check(problem: &Problem, n_pairs: usize, radius: f64, seed: u64) -> CheckRecord {
    let l = problem.smoothness();
    let d = problem.dim();
    let mut r = rng::seeded(seed);
    let mut violations = 0usize;
    let mut worst = 0.0f64;
    for _ in 0..n_pairs {
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-radius..=radius)).collect();
        let y: Vec<f64> = (0..d).map(|_| r.random_range(-radius..=radius)).collect();
        let diff = linalg::sub(&x, &y);
        let gap = (problem.value(&x) - problem.value(&y) - linalg::dot(&problem.gradient(&y), &diff)).abs();
        let allowed = 0.5 * l * linalg::norm_sq(&diff);
        if gap > allowed + 1e-10 * allowed.max(1.0) {
            violations += 1;
        }
        if allowed > 0.0 {
            worst = worst.max(gap / allowed);
        }
    }
    CheckRecord {
        check: "descent_lemma".into(),
        params: json!({"problem": problem.name(), "L": l, "n_pairs": n_pairs, "radius": radius, "seed": seed}),
        estimate: violations as f64,
        stderr: 0.0,
        bound: 0.0,
        verdict: Verdict::from_bool(violations == 0),
        note: Some(format!("max ratio of gap to (L/2)||x-y||^2: {worst}")),
    }
}

/// `(Δ₁ + (L/2)(3 + ln(1 + L²/4)))²`, the numerator of the deterministic rate.
pub fn bound_deterministic_adagrad(delta1: f64, l: f64) -> f64 {
    (delta1 + 0.5 * l * (3.0 + (1.0 + l * l / 4.0).ln())).powi(2)
}

/// Symbols shared by the stochastic bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub delta_max: f64,
    pub l: f64,
    pub g: f64,
    pub g_hat: f64,
    pub sigma: f64,
    pub g0: f64,
    pub delta: f64,
    pub horizon: f64,
}

/// High-probability AdaGrad bound on `(1/T) Σ ||ḡ_t||²`.
pub fn bound_highprob_adagrad(b: &BoundInputs) -> f64 {
    let l = (1.0 / b.delta).ln();
    let t = b.horizon;
    let m = b.delta_max + b.l;
    (m * b.g0 + 3.0 * (b.g * b.g + b.g * b.g_hat) * l) / t + (m * b.g_hat + 2.0 * b.g * b.sigma * l.sqrt()) / t.sqrt()
}

/// High-probability bound for AdaGrad with averaging and adaptive RSAG.
pub fn bound_rsag(b: &BoundInputs) -> f64 {
    let l = (1.0 / b.delta).ln();
    let t = b.horizon;
    let inv_g0_sq = if b.g0 > 0.0 { 1.0 / (b.g0 * b.g0) } else { f64::INFINITY };
    let k = b.delta_max + 3.0 * b.l + b.l * (inv_g0_sq.max(1.0) + b.g_hat * b.g_hat * t).ln();
    (b.g0 * k + 3.0 * (b.g * b.g + b.g * b.g_hat) * l) / t + (b.g_hat * k + 2.0 * b.g * b.sigma * l.sqrt()) / t.sqrt()
}

/// Noise-adaptive bound under the sub-Gaussian model (no `Ĝ` needed).
pub fn bound_subgaussian_rate(delta_max: f64, l: f64, sigma: f64, g0: f64, delta: f64, horizon: f64) -> f64 {
    let lg = (1.0 / delta).ln();
    let m = delta_max + l;
    (32.0 * m * m + 8.0 * m * (g0 + sigma * (2.0 * lg).sqrt()) + 8.0 * sigma * sigma * lg) / horizon
        + 8.0 * std::f64::consts::SQRT_2 * m * sigma / horizon.sqrt()
}

/// High-probability bound on `Δ_{t+1}` for AdaGrad with `G₀ > 0` and a.s.
/// bounded gradients. `M₁ = 3(G² + GĜ)`, `M₂ = (2G² + GĜ)/G₀`.
pub fn function_bound_delta_max(delta1: f64, b: &BoundInputs, t: f64) -> Result<f64> {
    if !(b.g0 > 0.0) {
        return Err(Error::invalid("function bound requires G0 > 0"));
    }
    let m1 = 3.0 * (b.g * b.g + b.g * b.g_hat);
    let m2 = (2.0 * b.g * b.g + b.g * b.g_hat) / b.g0;
    Ok(delta1
        + 2.0 * b.l * (1.0 + ((b.g0 * b.g0).max(1.0) + b.g_hat * b.g_hat * t).ln())
        + (m1 + b.sigma * b.sigma) * (1.0 / b.delta).ln() / b.g0
        + m2)
}

/// High-probability bound on `Δ_{t+1}` under sub-Gaussian noise.
pub fn bound_subgaussian_delta(delta1: f64, l: f64, g: f64, sigma: f64, g0: f64, delta: f64, t: f64) -> Result<f64> {
    if !(g0 > 0.0) {
        return Err(Error::invalid("sub-Gaussian function bound requires G0 > 0"));
    }
    let s2 = sigma * sigma;
    let log_et = (std::f64::consts::E * t / delta).ln();
    Ok(delta1 + 3.0 * g * g / g0 + 2.0 * s2 * log_et / g0 + 0.75 * s2 * (1.0 / delta).ln() / g0
        + 0.5 * l * (1.0 + ((g0 * g0).max(1.0) + 2.0 * g * g * t + 2.0 * s2 * t * log_et).ln()))
}

/// Where the `Δ_max` fed to a bound came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMaxSource {
    Empirical,
    FunctionBound,
    SubgaussianTheorem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: String,
    pub theoretical: f64,
    pub empirical: f64,
    pub holds: bool,
    pub inputs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_max_source: Option<DeltaMaxSource>,
}

impl BoundReport {
    pub fn new(name: &str, theoretical: f64, empirical: f64, inputs: BTreeMap<String, f64>, source: Option<DeltaMaxSource>) -> Self {
        BoundReport {
            bound_name: name.to_string(),
            theoretical,
            empirical,
            holds: empirical <= theoretical,
            inputs,
            delta_max_source: source,
        }
    }
}

impl BoundInputs {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("delta_max".to_string(), self.delta_max),
            ("L".to_string(), self.l),
            ("G".to_string(), self.g),
            ("G_hat".to_string(), self.g_hat),
            ("sigma".to_string(), self.sigma),
            ("G0".to_string(), self.g0),
            ("delta".to_string(), self.delta),
            ("T".to_string(), self.horizon),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn fit_linear(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("fit_linear: need at least 2 paired points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("fit_linear: abscissae must not all coincide"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: Vec<(f64, f64)>,
}

/// Least squares of `ln(value)` on `ln(T)`.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::invalid(format!("fit_rate: need at least 3 points, got {}", points.len())));
    }
    if let Some(&(t, v)) = points.iter().find(|(t, v)| !(*v > 0.0 && v.is_finite() && *t > 0.0)) {
        return Err(Error::invalid(format!("fit_rate: non-positive point ({t}, {v})")));
    }
    let mut ts: Vec<f64> = points.iter().map(|p| p.0).collect();
    ts.sort_by(f64::total_cmp);
    if ts.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("fit_rate: horizons must be distinct"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let f = fit_linear(&xs, &ys)?;
    Ok(RateFit {
        slope: f.slope,
        intercept: f.intercept,
        r_squared: f.r_squared,
        points: points.to_vec(),
    })
}

/// Sample quantile by linear interpolation between order statistics
/// (`h = (n - 1) q`).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile: empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile: q must lie in [0, 1], got {q}")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

pub const MIN_SEEDS: usize = 20;

/// Per-horizon `q`-quantile of a metric across seeds.
pub fn quantile_over_seeds(groups: &BTreeMap<usize, Vec<f64>>, q: f64) -> Result<Vec<(usize, f64)>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("quantile_over_seeds: q must lie in (0, 1), got {q}")));
    }
    groups
        .iter()
        .map(|(t, values)| {
            if values.is_empty() {
                return Err(Error::invalid(format!("quantile_over_seeds: empty group for T={t}")));
            }
            if values.len() < MIN_SEEDS {
                return Err(Error::invalid(format!(
                    "quantile_over_seeds: T={t} has {} seeds, need at least {MIN_SEEDS}",
                    values.len()
                )));
            }
            Ok((*t, quantile(values, q)?))
        })
        .collect()
}

/// Quantile level `1 - 8 ln(T) δ` at which the high-probability theorems
/// are checked, or `None` when the failure budget `8 ln(T) δ` reaches 1.
pub fn highprob_quantile_level(horizon: usize, delta: f64) -> Option<f64> {
    let budget = 8.0 * (horizon as f64).ln() * delta;
    (budget < 1.0).then_some(1.0 - budget)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwiseCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

const PATHWISE_SLACK: f64 = 1e-8;

fn pathwise(name: &str, lhs: f64, rhs: f64, scale: f64) -> PathwiseCheck {
    PathwiseCheck {
        name: name.to_string(),
        lhs,
        rhs,
        holds: lhs <= rhs + PATHWISE_SLACK * scale.max(f64::MIN_POSITIVE),
    }
}

fn require_noise_terms(trace: &RunTrace) -> Result<()> {
    if trace.records.is_empty() {
        return Err(Error::invalid("pathwise check on an empty trace"));
    }
    if trace.records.iter().any(|r| r.noise_inner.is_nan()) {
        return Err(Error::invalid("pathwise checks need in-memory traces (noise terms are not persisted)"));
    }
    Ok(())
}

/// `Σ||ḡ_t||² ≤ Δ_max/η_T + Σ -⟨ḡ_t, ξ_t⟩ + (L/2) Σ η_t ||g_t||²` for runs
/// without averaging.
pub fn check_intuition2(trace: &RunTrace, l: f64) -> Result<PathwiseCheck> {
    require_noise_terms(trace)?;
    if trace.records.iter().any(|r| r.alpha != 1.0) {
        return Err(Error::invalid("intuition check applies to runs without averaging"));
    }
    let lhs: f64 = trace.records.iter().map(|r| r.grad_sq_bar).sum();
    let eta_last = trace.records.last().expect("non-empty").eta;
    let head = trace.delta_max() / eta_last;
    let noise: f64 = trace.records.iter().map(|r| r.noise_inner).sum();
    let step: f64 = 0.5 * l * trace.records.iter().map(|r| r.eta * r.grad_sq_stoch).sum::<f64>();
    let scale = lhs.abs() + head.abs() + noise.abs() + step.abs();
    Ok(pathwise("intuition", lhs, head + noise + step, scale))
}

/// `Σ||ḡ_t||² ≤ (Δ_max + 2L)/η_T + (L/(2η_T)) Σ (*)_t (η_t - γ_t)²/α_t² ||g_t||²
/// + Σ -⟨ḡ_t, ξ_t⟩` for every adaptive preset.
pub fn check_main_bound(trace: &RunTrace, l: f64) -> Result<PathwiseCheck> {
    require_noise_terms(trace)?;
    if !trace.meta.preset.kind.is_adaptive() {
        return Err(Error::invalid("main bound applies to the adaptive presets only"));
    }
    let horizon = trace.records.len();
    let averaging = trace.meta.preset.averaging;
    let stars = match averaging {
        Averaging::None => vec![0.0; horizon],
        a => schedules::term_star_all(a, horizon),
    };
    let eta_last = trace.records.last().expect("non-empty").eta;
    let lhs: f64 = trace.records.iter().map(|r| r.grad_sq_bar).sum();
    let head = (trace.delta_max() + 2.0 * l) / eta_last;
    let mix: f64 = trace
        .records
        .iter()
        .zip(&stars)
        .map(|(r, s)| s * ((r.eta - r.gamma) / r.alpha).powi(2) * r.grad_sq_stoch)
        .sum::<f64>()
        * l
        / (2.0 * eta_last);
    let noise: f64 = trace.records.iter().map(|r| r.noise_inner).sum();
    let scale = lhs.abs() + head.abs() + mix.abs() + noise.abs();
    Ok(pathwise("main_bound", lhs, head + mix + noise, scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bound_examples() {
        let v = bound_deterministic_adagrad(0.0, 2.0);
        assert!((v - (3.0 + 2f64.ln()).powi(2)).abs() < 1e-12);
        assert!((v - 13.639).abs() < 1e-3);
        let w = bound_deterministic_adagrad(1.0, 1.0);
        assert!((w - 6.8204).abs() < 1e-3);
        let big = bound_deterministic_adagrad(1e6, 1.0);
        assert!((big / 1e12 - 1.0).abs() < 1e-5);
    }

    fn ones(delta: f64, horizon: f64) -> BoundInputs {
        BoundInputs {
            delta_max: 1.0,
            l: 1.0,
            g: 1.0,
            g_hat: 1.0,
            sigma: 1.0,
            g0: 1.0,
            delta,
            horizon,
        }
    }

    #[test]
    fn highprob_bound_examples() {
        let e_inv = (-1.0f64).exp();
        assert!((bound_highprob_adagrad(&ones(e_inv, 1.0)) - 12.0).abs() < 1e-12);
        let mut b = ones(e_inv, 1e12);
        b.sigma = 0.0;
        let v = bound_highprob_adagrad(&b);
        assert!((v * 1e6 - 2.0).abs() < 1e-4);
        let (t1, t2) = (bound_highprob_adagrad(&ones(1e-3, 1e8)), bound_highprob_adagrad(&ones(1e-3, 2e8)));
        assert!(t2 / t1 > 0.5 && t2 / t1 < 1.0);
    }

    #[test]
    fn subgaussian_bound_examples() {
        let e_inv = (-1.0f64).exp();
        let v = bound_subgaussian_rate(1.0, 1.0, 1.0, 1.0, e_inv, 1.0);
        let expect = 128.0 + 16.0 * (1.0 + 2f64.sqrt()) + 8.0 + 16.0 * 2f64.sqrt();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 197.25).abs() < 1e-2);
        let a = bound_subgaussian_rate(1.0, 1.0, 0.0, 1.0, 1e-3, 100.0);
        let b = bound_subgaussian_rate(1.0, 1.0, 0.0, 1.0, 1e-3, 1000.0);
        assert!((a / b - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rsag_bound_with_zero_g_hat_is_pure_one_over_t() {
        let mut b = ones(1e-3, 100.0);
        b.g_hat = 0.0;
        b.g = 0.0;
        let v1 = bound_rsag(&b);
        b.horizon = 1000.0;
        let v2 = bound_rsag(&b);
        assert!((v1 / v2 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn function_bound_matches_hand_evaluation() {
        let b = BoundInputs {
            delta_max: f64::NAN,
            l: 1.0,
            g: 2.0,
            g_hat: 3.0,
            sigma: 0.5,
            g0: 0.1,
            delta: 1e-3,
            horizon: 100.0,
        };
        let m1 = 3.0 * (4.0 + 6.0);
        let m2 = (8.0 + 6.0) / 0.1;
        let expect = 1.5 + 2.0 * (1.0 + (1.0f64 + 9.0 * 100.0).ln()) + (m1 + 0.25) * 1000f64.ln() / 0.1 + m2;
        assert!((function_bound_delta_max(1.5, &b, 100.0).unwrap() - expect).abs() < 1e-9);
        let mut z = b;
        z.g0 = 0.0;
        assert!(function_bound_delta_max(1.5, &z, 100.0).is_err());
        assert!(bound_subgaussian_delta(1.0, 1.0, 1.0, 1.0, 0.0, 0.1, 10.0).is_err());
    }

    #[test]
    fn fit_rate_examples() {
        let f = fit_rate(&[(10.0, 1.0), (100.0, 0.1), (1000.0, 0.01)]).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        let h = fit_rate(&[(10.0, 1.0), (100.0, 10f64.powf(-0.5)), (1000.0, 0.1)]).unwrap();
        assert!((h.slope + 0.5).abs() < 1e-12);
        assert!(fit_rate(&[(10.0, 1.0), (100.0, 0.0), (1000.0, 0.1)]).is_err());
        assert!(fit_rate(&[(10.0, 1.0), (100.0, 0.5)]).is_err());
        assert!(fit_rate(&[(10.0, 1.0), (10.0, 0.5), (100.0, 0.1)]).is_err());
    }

    #[test]
    fn fit_rate_recovers_noisy_exponent() {
        let mut r = rng::seeded(9);
        let pts: Vec<(f64, f64)> = (1..=20)
            .map(|k| {
                let t = 10f64.powf(1.0 + k as f64 * 0.2);
                let noise: f64 = r.random_range(-0.05..0.05);
                (t, 3.0 * t.powf(-0.7) * noise.exp())
            })
            .collect();
        let f = fit_rate(&pts).unwrap();
        assert!((f.slope + 0.7).abs() < 0.05);
    }

    #[test]
    fn fit_rate_is_scale_equivariant_and_refits() {
        let pts = [(10.0, 0.8), (100.0, 0.31), (1000.0, 0.09), (1e4, 0.04)];
        let f = fit_rate(&pts).unwrap();
        let scaled: Vec<_> = pts.iter().map(|(t, v)| (*t, v * 7.5)).collect();
        let g = fit_rate(&scaled).unwrap();
        assert!((f.slope - g.slope).abs() < 1e-10);
        assert!((g.intercept - f.intercept - 7.5f64.ln()).abs() < 1e-10);
        let again = fit_rate(&f.points).unwrap();
        assert!((again.slope - f.slope).abs() < 1e-10 && (again.intercept - f.intercept).abs() < 1e-10);
    }

    #[test]
    fn quantile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.5).unwrap(), 50.5);
        let w: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((quantile(&w, 0.9).unwrap() - 9.1).abs() < 1e-12);
        assert_eq!(quantile(&[2.5; 30], 0.37).unwrap(), 2.5);
        assert!(quantile(&[], 0.5).is_err());
    }

    #[test]
    fn quantile_over_seeds_requires_enough_seeds() {
        let mut groups = BTreeMap::new();
        groups.insert(100, (1..=20).map(f64::from).collect::<Vec<_>>());
        let out = quantile_over_seeds(&groups, 0.5).unwrap();
        assert_eq!(out, vec![(100, 10.5)]);
        groups.insert(1000, vec![1.0; 5]);
        assert!(quantile_over_seeds(&groups, 0.5).is_err());
        groups.insert(1000, vec![]);
        assert!(quantile_over_seeds(&groups, 0.5).is_err());
    }

    #[test]
    fn highprob_level_and_vacuous_budget() {
        let lvl = highprob_quantile_level(1000, 1e-3).unwrap();
        assert!((lvl - (1.0 - 8.0 * 1000f64.ln() * 1e-3)).abs() < 1e-15);
        assert!(highprob_quantile_level(1000, 0.05).is_none());
    }

    #[test]
    fn freedman_preconditions_and_zero_sequence() {
        assert!(freedman_check(MdsGenerator::Rademacher { b: 1.0 }, 100, 0.5, 10, 0).is_err());
        assert!(freedman_check(MdsGenerator::Rademacher { b: 1.0 }, 2, 0.01, 10, 0).is_err());
        let z = freedman_check(MdsGenerator::Zero, 100, 0.01, 1000, 0).unwrap();
        assert_eq!(z.estimate, 0.0);
        assert_eq!(z.verdict, Verdict::Pass);
    }

    #[test]
    fn freedman_small_run_is_deterministic() {
        let a = freedman_check(MdsGenerator::Rademacher { b: 0.5 }, 50, 0.05, 2000, 7).unwrap();
        let b = freedman_check(MdsGenerator::Rademacher { b: 0.5 }, 50, 0.05, 2000, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.passed());
    }

    #[test]
    fn max_noise_sphere_and_exact() {
        let rec = max_noise_check(&NoiseModel::bounded_sphere(1.0), 3, 10, 0.5, 100, 0).unwrap();
        assert_eq!(rec.estimate, 0.0);
        let exact = max_noise_check(&NoiseModel::exact(), 3, 10, 0.5, 100, 0).unwrap();
        assert_eq!(exact.verdict, Verdict::Pass);
        assert!(max_noise_check(&NoiseModel::truncated_gaussian(1.0, None), 3, 10, 0.5, 10, 0).is_err());
    }

    #[test]
    fn verdict_json_shape() {
        let z = freedman_check(MdsGenerator::Zero, 10, 0.01, 10, 0).unwrap();
        let v: serde_json::Value = serde_json::to_value(&z).unwrap();
        for key in ["check", "params", "estimate", "stderr", "bound", "verdict"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["verdict"], "pass");
    }
}
