//! Stochastic first-order oracles.
//!
//! Every model returns a [`GradientSample`] carrying the stochastic gradient,
//! the true gradient at the query point and the noise `ξ = g - ḡ`. All models
//! are conditionally unbiased; all except `subgaussian_gaussian` are bounded
//! almost surely.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::problems::Problem;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Exact,
    BoundedSphere,
    TruncatedGaussian,
    SubgaussianGaussian,
    Minibatch,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Exact => "exact",
            NoiseKind::BoundedSphere => "bounded_sphere",
            NoiseKind::TruncatedGaussian => "truncated_gaussian",
            NoiseKind::SubgaussianGaussian => "subgaussian_gaussian",
            NoiseKind::Minibatch => "minibatch",
        }
    }
}

/// Immutable description of an oracle's noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Target noise scale: `E||ξ||² <= σ²`.
    pub sigma: f64,
    /// Almost-sure bound on `||g||` for the truncated model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

/// One oracle call at a query point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub g: Vec<f64>,
    pub g_bar: Vec<f64>,
    pub xi: Vec<f64>,
}

impl GradientSample {
    /// Build from the stochastic and true gradients; `xi` is computed as
    /// `g - g_bar` so that `g - g_bar - xi == 0` holds exactly.
    pub fn from_parts(g: Vec<f64>, g_bar: Vec<f64>) -> Self {
        let xi = linalg::sub(&g, &g_bar);
        GradientSample { g, g_bar, xi }
    }
}

/// Anything that answers gradient queries. Implemented by [`NoiseModel`] and
/// by test doubles.
pub trait GradientOracle {
    fn sample(&self, problem: &Problem, x: &[f64], rng: &mut Rng) -> Result<GradientSample>;

    fn is_exact(&self) -> bool {
        false
    }
}

const MAX_REJECTIONS: usize = 1_000_000;

impl NoiseModel {
    pub fn exact() -> Self {
        NoiseModel {
            kind: NoiseKind::Exact,
            sigma: 0.0,
            clip: None,
            batch_size: None,
        }
    }

    pub fn bounded_sphere(sigma: f64) -> Self {
        Self::scaled(NoiseKind::BoundedSphere, sigma)
    }

    /// Truncated Gaussian with a.s. bound `clip` (defaults to `G + 4σ`).
    pub fn truncated_gaussian(sigma: f64, clip: Option<f64>) -> Self {
        NoiseModel {
            clip,
            ..Self::scaled(NoiseKind::TruncatedGaussian, sigma)
        }
    }

    pub fn subgaussian_gaussian(sigma: f64) -> Self {
        Self::scaled(NoiseKind::SubgaussianGaussian, sigma)
    }

    /// Minibatch of `batch_size` components drawn without replacement. The
    /// declared `σ` is `G √((n - b) / (b (n - 1)))`, the finite-population
    /// bound on the minibatch variance.
    pub fn minibatch(problem: &Problem, batch_size: usize) -> Result<Self> {
        let fs = problem
            .finite_sum()
            .ok_or_else(|| Error::config("minibatch noise requires a finite-sum problem"))?;
        let n = fs.n_components();
        if batch_size == 0 || batch_size > n {
            return Err(Error::config(format!("batch size {batch_size} not in [1, {n}]")));
        }
        let g = problem.gradient_bound().finite().unwrap_or(f64::INFINITY);
        let ratio = if n == 1 {
            0.0
        } else {
            (n - batch_size) as f64 / (batch_size as f64 * (n - 1) as f64)
        };
        Ok(NoiseModel {
            kind: NoiseKind::Minibatch,
            sigma: if ratio == 0.0 { 0.0 } else { g * ratio.sqrt() },
            clip: None,
            batch_size: Some(batch_size),
        })
    }

    fn scaled(kind: NoiseKind, sigma: f64) -> Self {
        if sigma == 0.0 {
            return Self::exact();
        }
        NoiseModel {
            kind,
            sigma,
            clip: None,
            batch_size: None,
        }
    }

    /// Per-coordinate variance of the calibrated sub-Gaussian model:
    /// `s² = σ² (1 - e^{-2/d}) / 2`, so that `E exp(||ξ||²/σ²) = e` exactly.
    pub fn subgaussian_coordinate_variance(sigma: f64, d: usize) -> f64 {
        sigma * sigma * (-(-2.0 / d as f64).exp_m1()) / 2.0
    }

    /// Effective clip of the truncated model for `problem`.
    pub fn effective_clip(&self, problem: &Problem) -> Option<f64> {
        match self.kind {
            NoiseKind::TruncatedGaussian => self
                .clip
                .or_else(|| problem.gradient_bound().finite().map(|g| g + 4.0 * self.sigma)),
            _ => None,
        }
    }

    /// Almost-sure bound `Ĝ` on `||g||` when one exists for this pairing.
    pub fn stochastic_gradient_bound(&self, problem: &Problem) -> Option<f64> {
        let g = problem.gradient_bound().finite()?;
        match self.kind {
            NoiseKind::Exact | NoiseKind::Minibatch => Some(g),
            NoiseKind::BoundedSphere => Some(g + self.sigma),
            NoiseKind::TruncatedGaussian => self.effective_clip(problem),
            NoiseKind::SubgaussianGaussian => None,
        }
    }

    pub fn validate(&self, problem: &Problem) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if (self.kind == NoiseKind::Exact) != (self.sigma == 0.0) && self.kind != NoiseKind::Minibatch {
            return Err(Error::config("exact noise model must have sigma = 0 and vice versa"));
        }
        match self.kind {
            NoiseKind::TruncatedGaussian => {
                let g = problem.gradient_bound().finite().ok_or_else(|| {
                    Error::config("truncated_gaussian requires a problem with finite gradient bound")
                })?;
                let clip = self.effective_clip(problem).expect("finite G");
                if clip < g {
                    return Err(Error::config(format!("clip {clip} is below the problem's gradient bound {g}")));
                }
            }
            NoiseKind::Minibatch => {
                let fs = problem
                    .finite_sum()
                    .ok_or_else(|| Error::config("minibatch noise requires a finite-sum problem"))?;
                match self.batch_size {
                    Some(b) if b >= 1 && b <= fs.n_components() => {}
                    other => return Err(Error::config(format!("invalid minibatch size {other:?}"))),
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn gaussian(d: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
        (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

impl GradientOracle for NoiseModel {
    fn sample(&self, problem: &Problem, x: &[f64], rng: &mut Rng) -> Result<GradientSample> {
        if !linalg::all_finite(x) {
            return Err(Error::Numeric("oracle queried at a non-finite point".into()));
        }
        let g_bar = problem.gradient(x);
        let d = g_bar.len();
        let g = match self.kind {
            NoiseKind::Exact => g_bar.clone(),
            NoiseKind::BoundedSphere => {
                let z = Self::gaussian(d, 1.0, rng);
                let scale = self.sigma / linalg::norm(&z);
                g_bar.iter().zip(&z).map(|(a, b)| a + scale * b).collect()
            }
            NoiseKind::SubgaussianGaussian => {
                let s = Self::subgaussian_coordinate_variance(self.sigma, d).sqrt();
                let z = Self::gaussian(d, s, rng);
                g_bar.iter().zip(&z).map(|(a, b)| a + b).collect()
            }
            NoiseKind::TruncatedGaussian => {
                let clip = self
                    .effective_clip(problem)
                    .ok_or_else(|| Error::config("truncated_gaussian requires a finite gradient bound"))?;
                let s = self.sigma / (d as f64).sqrt();
                let mut accepted = None;
                for _ in 0..MAX_REJECTIONS {
                    let z = Self::gaussian(d, s, rng);
                    let plus: Vec<f64> = g_bar.iter().zip(&z).map(|(a, b)| a + b).collect();
                    let minus: Vec<f64> = g_bar.iter().zip(&z).map(|(a, b)| a - b).collect();
                    // Symmetric acceptance region keeps E[ξ | x] = 0.
                    if linalg::norm(&plus) <= clip && linalg::norm(&minus) <= clip {
                        accepted = Some(if rng.random::<bool>() { plus } else { minus });
                        break;
                    }
                }
                accepted.ok_or_else(|| Error::Numeric("truncated_gaussian: rejection sampler exhausted".into()))?
            }
            NoiseKind::Minibatch => {
                let fs = problem
                    .finite_sum()
                    .ok_or_else(|| Error::config("minibatch noise requires a finite-sum problem"))?;
                let b = self.batch_size.unwrap_or(1);
                let mut picks = index::sample(rng, fs.n_components(), b).into_vec();
                picks.sort_unstable();
                let mut g = vec![0.0; d];
                let scale = 1.0 / b as f64;
                for i in picks {
                    fs.add_component_gradient(i, x, scale, &mut g);
                }
                g
            }
        };
        Ok(GradientSample::from_parts(g, g_bar))
    }

    fn is_exact(&self) -> bool {
        self.kind == NoiseKind::Exact
    }
}

/// Per-coordinate sample mean of `ξ` with its standard error.
#[derive(Debug, Clone, Serialize)]
pub struct UnbiasedVerdict {
    pub n_samples: usize,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `max_i |mean_i| / stderr_i` (0 when every coordinate is identically zero).
    pub max_z: f64,
    pub pass: bool,
}

/// Monte-Carlo test of `E[ξ | x] = 0` at 5 standard errors per coordinate.
pub fn verify_unbiased(
    problem: &Problem,
    x: &[f64],
    oracle: &impl GradientOracle,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<UnbiasedVerdict> {
    let d = problem.dim();
    if oracle.is_exact() {
        return Ok(UnbiasedVerdict {
            n_samples: 0,
            mean: vec![0.0; d],
            stderr: vec![0.0; d],
            max_z: 0.0,
            pass: true,
        });
    }
    if n_samples < 10_000 {
        return Err(Error::invalid(format!("verify_unbiased needs >= 1e4 samples, got {n_samples}")));
    }
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for _ in 0..n_samples {
        let s = oracle.sample(problem, x, rng)?;
        for i in 0..d {
            sum[i] += s.xi[i];
            sum_sq[i] += s.xi[i] * s.xi[i];
        }
    }
    let n = n_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / n - m * m).max(0.0) * n / (n - 1.0)).sqrt() / n.sqrt())
        .collect();
    let mut max_z: f64 = 0.0;
    let mut pass = true;
    for (m, se) in mean.iter().zip(&stderr) {
        if *se > 0.0 {
            max_z = max_z.max(m.abs() / se);
            pass &= m.abs() <= 5.0 * se;
        } else {
            pass &= *m == 0.0;
        }
    }
    Ok(UnbiasedVerdict {
        n_samples,
        mean,
        stderr,
        max_z,
        pass,
    })
}

/// Sample estimate of `E exp(||ξ||²/σ²)` with a 3-SE normal interval.
#[derive(Debug, Clone, Serialize)]
pub struct MgfEstimate {
    pub n_samples: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// The sub-Gaussian target `e`.
    pub bound: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Estimate `E exp(||ξ||²/σ²)` from `n_samples` draws of `||ξ||²` and check
/// `estimate <= e (1 + tolerance)`.
pub fn mgf_estimate(
    sigma: f64,
    n_samples: usize,
    tolerance: f64,
    mut draw_norm_sq: impl FnMut() -> f64,
) -> MgfEstimate {
    let e = std::f64::consts::E;
    if sigma == 0.0 {
        return MgfEstimate {
            n_samples: 0,
            estimate: 1.0,
            stderr: 0.0,
            ci_low: 1.0,
            ci_high: 1.0,
            bound: e,
            tolerance,
            pass: true,
        };
    }
    let inv = 1.0 / (sigma * sigma);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let v = (draw_norm_sq() * inv).exp();
        sum += v;
        sum_sq += v * v;
    }
    let n = n_samples as f64;
    let estimate = sum / n;
    let var = (sum_sq / n - estimate * estimate).max(0.0);
    let stderr = (var / n).sqrt();
    MgfEstimate {
        n_samples,
        estimate,
        stderr,
        ci_low: estimate - 3.0 * stderr,
        ci_high: estimate + 3.0 * stderr,
        bound: e,
        tolerance,
        pass: estimate.is_finite() && estimate <= e * (1.0 + tolerance),
    }
}

/// MGF check for the sub-Gaussian and bounded-sphere models in dimension `d`.
pub fn verify_subgaussian_mgf(
    model: &NoiseModel,
    d: usize,
    n_samples: usize,
    tolerance: f64,
    rng: &mut Rng,
) -> Result<MgfEstimate> {
    if model.kind == NoiseKind::Exact || model.sigma == 0.0 {
        return Ok(mgf_estimate(0.0, 0, tolerance, || 0.0));
    }
    if !matches!(model.kind, NoiseKind::SubgaussianGaussian | NoiseKind::BoundedSphere) {
        return Err(Error::invalid(format!("MGF check undefined for {}", model.kind.as_str())));
    }
    if n_samples < 100_000 {
        return Err(Error::invalid(format!("MGF check needs >= 1e5 samples, got {n_samples}")));
    }
    let origin = crate::problems::make_quadratic(d, &vec![1.0; d])?;
    let x = vec![0.0; d];
    let mut failure = None;
    let est = mgf_estimate(model.sigma, n_samples, tolerance, || match model.sample(&origin, &x, rng) {
        Ok(s) => linalg::norm_sq(&s.xi),
        Err(e) => {
            failure.get_or_insert(e);
            0.0
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(est),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_quadratic, make_sigmoid_least_squares, make_welsch_sum, synthetic_sigmoid_data};
    use crate::rng::seeded;

    struct Biased(NoiseModel);

    impl GradientOracle for Biased {
        fn sample(&self, problem: &Problem, x: &[f64], rng: &mut Rng) -> Result<GradientSample> {
            let mut s = self.0.sample(problem, x, rng)?;
            s.g[0] += 0.1;
            Ok(GradientSample::from_parts(s.g, s.g_bar))
        }
    }

    fn sigmoid_problem() -> Problem {
        let (a, y) = synthetic_sigmoid_data(30, 3, &mut seeded(5));
        make_sigmoid_least_squares(a, y).unwrap()
    }

    #[test]
    fn exact_model_has_zero_noise() {
        let p = make_welsch_sum(3).unwrap();
        let s = NoiseModel::exact().sample(&p, &[0.3, -1.0, 2.0], &mut seeded(0)).unwrap();
        assert!(s.xi.iter().all(|v| *v == 0.0));
        assert_eq!(s.g, s.g_bar);
    }

    #[test]
    fn zero_sigma_collapses_to_exact() {
        assert_eq!(NoiseModel::subgaussian_gaussian(0.0).kind, NoiseKind::Exact);
        assert_eq!(NoiseModel::bounded_sphere(0.0), NoiseModel::exact());
    }

    #[test]
    fn subgaussian_calibration_d4() {
        let s2 = NoiseModel::subgaussian_coordinate_variance(1.0, 4);
        assert!((s2 - 0.19673).abs() < 1e-5);
        // (1 - 2 s²)^{-d/2} = e
        assert!(((1.0 - 2.0 * s2).powf(-2.0) - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn bounded_sphere_second_moment() {
        let p = make_welsch_sum(3).unwrap();
        let m = NoiseModel::bounded_sphere(0.5);
        let mut rng = seeded(9);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += linalg::norm_sq(&m.sample(&p, &[0.1, 0.2, 0.3], &mut rng).unwrap().xi);
        }
        assert!((acc / n as f64 - 0.25).abs() < 1e-6);
    }

    #[test]
    fn decomposition_is_exact_and_clip_respected() {
        let p = make_welsch_sum(4).unwrap();
        let mut rng = seeded(10);
        let models = [
            NoiseModel::bounded_sphere(1.0),
            NoiseModel::truncated_gaussian(1.0, None),
            NoiseModel::truncated_gaussian(2.0, Some(2.5)),
            NoiseModel::subgaussian_gaussian(1.0),
        ];
        for m in &models {
            m.validate(&p).unwrap();
            let clip = m.stochastic_gradient_bound(&p);
            for k in 0..2_000 {
                let x: Vec<f64> = (0..4).map(|i| ((k * 7 + i) as f64).sin() * 3.0).collect();
                let s = m.sample(&p, &x, &mut rng).unwrap();
                for i in 0..4 {
                    assert_eq!(s.g[i] - s.g_bar[i] - s.xi[i], 0.0);
                }
                if let Some(c) = clip {
                    assert!(linalg::norm(&s.g) <= c);
                }
            }
        }
    }

    #[test]
    fn truncated_clip_below_g_is_rejected() {
        let p = make_welsch_sum(4).unwrap();
        let m = NoiseModel::truncated_gaussian(1.0, Some(0.5));
        assert!(matches!(m.validate(&p), Err(Error::Configuration(_))));
        let q = make_quadratic(2, &[1.0, 1.0]).unwrap();
        assert!(NoiseModel::truncated_gaussian(1.0, None).validate(&q).is_err());
    }

    #[test]
    fn minibatch_needs_finite_sum() {
        let p = make_welsch_sum(2).unwrap();
        assert!(matches!(NoiseModel::minibatch(&p, 1), Err(Error::Configuration(_))));
    }

    #[test]
    fn full_minibatch_is_exact() {
        let p = sigmoid_problem();
        let n = p.finite_sum().unwrap().n_components();
        let m = NoiseModel::minibatch(&p, n).unwrap();
        assert_eq!(m.sigma, 0.0);
        let mut rng = seeded(1);
        for _ in 0..20 {
            let s = m.sample(&p, &[0.4, -0.3, 1.1], &mut rng).unwrap();
            assert!(s.xi.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn non_finite_query_is_numeric_error() {
        let p = make_welsch_sum(2).unwrap();
        let r = NoiseModel::exact().sample(&p, &[f64::NAN, 0.0], &mut seeded(0));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn variance_within_declared_sigma() {
        let p = sigmoid_problem();
        let w = make_welsch_sum(4).unwrap();
        let n = 20_000;
        let cases: Vec<(Problem, NoiseModel)> = vec![
            (w.clone(), NoiseModel::bounded_sphere(0.7)),
            (w.clone(), NoiseModel::truncated_gaussian(1.0, None)),
            (w.clone(), NoiseModel::subgaussian_gaussian(1.3)),
            (p.clone(), NoiseModel::minibatch(&p, 4).unwrap()),
        ];
        let mut rng = seeded(77);
        for (prob, m) in cases {
            let x = vec![0.5; prob.dim()];
            let mean_sq: f64 = (0..n)
                .map(|_| linalg::norm_sq(&m.sample(&prob, &x, &mut rng).unwrap().xi))
                .sum::<f64>()
                / n as f64;
            let s2 = m.sigma * m.sigma;
            assert!(mean_sq <= s2 * (1.0 + 3.0 / (n as f64).sqrt()), "{:?}: {mean_sq} vs {s2}", m.kind);
        }
    }

    #[test]
    fn unbiasedness_examples() {
        let p = make_welsch_sum(3).unwrap();
        let x = [1.0, -0.5, 2.0];
        let v = verify_unbiased(&p, &x, &NoiseModel::exact(), 0, &mut seeded(0)).unwrap();
        assert!(v.pass && v.mean.iter().all(|m| *m == 0.0));

        let v = verify_unbiased(&p, &x, &NoiseModel::bounded_sphere(1.0), 100_000, &mut seeded(1)).unwrap();
        assert!(v.pass, "max z {}", v.max_z);

        let biased = Biased(NoiseModel::bounded_sphere(1.0));
        let v = verify_unbiased(&p, &x, &biased, 100_000, &mut seeded(2)).unwrap();
        assert!(!v.pass);
        assert!((v.mean[0] - 0.1).abs() < 0.02);

        assert!(verify_unbiased(&p, &x, &NoiseModel::bounded_sphere(1.0), 100, &mut seeded(0)).is_err());
    }

    #[test]
    fn mgf_examples() {
        let sphere = verify_subgaussian_mgf(&NoiseModel::bounded_sphere(0.3), 5, 100_000, 0.1, &mut seeded(3)).unwrap();
        // ||ξ|| = σ on every draw; only summation rounding remains.
        assert!((sphere.estimate - std::f64::consts::E).abs() < 1e-9);

        let sub = verify_subgaussian_mgf(&NoiseModel::subgaussian_gaussian(1.0), 4, 100_000, 0.1, &mut seeded(4)).unwrap();
        assert!(sub.pass);
        assert!(sub.ci_low <= std::f64::consts::E && std::f64::consts::E <= sub.ci_high);

        // Untruncated Gaussian with per-coordinate variance σ² violates the MGF condition.
        let mut rng = seeded(5);
        let heavy = mgf_estimate(1.0, 100_000, 0.1, || {
            (0..4).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum()
        });
        assert!(!heavy.pass);

        let zero = verify_subgaussian_mgf(&NoiseModel::exact(), 4, 0, 0.1, &mut seeded(0)).unwrap();
        assert!(zero.pass);
    }
}
