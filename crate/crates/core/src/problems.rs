//! Smooth test objectives with known smoothness `L`, gradient bound `G`
//! and optimal value `f*`.
//!
//! All constants are declared upper bounds: the descent lemma
//! `|f(x) - f(y) - <∇f(y), x - y>| <= L/2 ||x - y||²` and `||∇f(x)|| <= G`
//! hold for every point, which the property suites check by sampling.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::Rng;

/// Bound on `||∇f||`, or `Unbounded` for problems that do not satisfy one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientBound {
    Finite(f64),
    Unbounded,
}

impl GradientBound {
    pub fn finite(self) -> Option<f64> {
        match self {
            GradientBound::Finite(g) => Some(g),
            GradientBound::Unbounded => None,
        }
    }
}

#[derive(Debug, Clone)]
enum Objective {
    Quadratic { eigenvalues: Vec<f64> },
    Welsch,
    CosineValley,
    SigmoidLeastSquares(FiniteSumProblem),
}

/// A differentiable objective on `R^d` together with its analytic constants.
#[derive(Debug, Clone)]
pub struct Problem {
    name: String,
    dim: usize,
    smoothness: f64,
    gradient_bound: GradientBound,
    f_star: Option<f64>,
    objective: Objective,
}

impl Problem {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Lipschitz constant of the gradient.
    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn gradient_bound(&self) -> GradientBound {
        self.gradient_bound
    }

    /// `min f`, when it is known analytically.
    pub fn f_star(&self) -> Option<f64> {
        self.f_star
    }

    pub fn finite_sum(&self) -> Option<&FiniteSumProblem> {
        match &self.objective {
            Objective::SigmoidLeastSquares(fs) => Some(fs),
            _ => None,
        }
    }

    /// Copy of this problem with the declared smoothness multiplied by
    /// `factor`. Used by negative controls that corrupt `L` on purpose.
    pub fn with_scaled_smoothness(&self, factor: f64) -> Problem {
        let mut p = self.clone();
        p.smoothness *= factor;
        p
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.objective {
            Objective::Quadratic { eigenvalues } => {
                0.5 * eigenvalues.iter().zip(x).map(|(l, xi)| l * xi * xi).sum::<f64>()
            }
            Objective::Welsch => x.iter().map(|xi| 1.0 - (-0.5 * xi * xi).exp()).sum(),
            Objective::CosineValley => x.iter().map(|xi| 1.0 - xi.cos()).sum(),
            Objective::SigmoidLeastSquares(fs) => fs.value(x),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.gradient_into(x, &mut out);
        out
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        match &self.objective {
            Objective::Quadratic { eigenvalues } => {
                for ((o, l), xi) in out.iter_mut().zip(eigenvalues).zip(x) {
                    *o = l * xi;
                }
            }
            Objective::Welsch => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = xi * (-0.5 * xi * xi).exp();
                }
            }
            Objective::CosineValley => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = xi.sin();
                }
            }
            Objective::SigmoidLeastSquares(fs) => fs.gradient_into(x, out),
        }
    }

    /// Default start point: `2·1` for Welsch and cosine valley, a standard
    /// normal draw otherwise.
    pub fn default_start(&self, rng: &mut Rng) -> Vec<f64> {
        match self.objective {
            Objective::Welsch | Objective::CosineValley => vec![2.0; self.dim],
            _ => (0..self.dim).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

/// `f(x) = ½ Σ λ_i x_i²`.
pub fn make_quadratic(d: usize, eigenvalues: &[f64]) -> Result<Problem> {
    if d == 0 {
        return Err(Error::invalid("quadratic: dimension must be positive"));
    }
    if eigenvalues.len() != d {
        return Err(Error::invalid(format!(
            "quadratic: expected {d} eigenvalues, got {}",
            eigenvalues.len()
        )));
    }
    if let Some(bad) = eigenvalues.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::invalid(format!("quadratic: eigenvalue {bad} is not positive")));
    }
    let l = eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    Ok(Problem {
        name: "quadratic".into(),
        dim: d,
        smoothness: l,
        gradient_bound: GradientBound::Unbounded,
        f_star: Some(0.0),
        objective: Objective::Quadratic {
            eigenvalues: eigenvalues.to_vec(),
        },
    })
}

/// `f(x) = Σ (1 - exp(-x_i²/2))`: bounded, nonconvex, minimised at the origin.
///
/// The 1-D second derivative is `e^{-x²/2}(1 - x²)`, bounded by 1 in absolute
/// value; `|x e^{-x²/2}|` peaks at `|x| = 1`, so `G = √d e^{-1/2}`.
pub fn make_welsch_sum(d: usize) -> Result<Problem> {
    if d == 0 {
        return Err(Error::invalid("welsch: dimension must be positive"));
    }
    Ok(Problem {
        name: "welsch".into(),
        dim: d,
        smoothness: 1.0,
        gradient_bound: GradientBound::Finite((d as f64).sqrt() * (-0.5f64).exp()),
        f_star: Some(0.0),
        objective: Objective::Welsch,
    })
}

/// `f(x) = Σ (1 - cos x_i)`, with `L = 1`, `G = √d` and `f* = 0`.
pub fn make_cosine_valley(d: usize) -> Result<Problem> {
    if d == 0 {
        return Err(Error::invalid("cosine valley: dimension must be positive"));
    }
    Ok(Problem {
        name: "cosine".into(),
        dim: d,
        smoothness: 1.0,
        gradient_bound: GradientBound::Finite((d as f64).sqrt()),
        f_star: Some(0.0),
        objective: Objective::CosineValley,
    })
}

/// `f(x) = (1/n) Σ (s(a_iᵀx) - y_i)²` with `s` the logistic sigmoid.
///
/// `G` and `L` come from a grid search over the scalar link and are cached;
/// `f*` is unknown.
pub fn make_sigmoid_least_squares(features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Problem> {
    let fs = FiniteSumProblem::new(features, labels)?;
    let (g, l) = (fs.gradient_bound, fs.smoothness);
    Ok(Problem {
        name: "sigmoid".into(),
        dim: fs.dim,
        smoothness: l,
        gradient_bound: GradientBound::Finite(g),
        f_star: None,
        objective: Objective::SigmoidLeastSquares(fs),
    })
}

/// Synthetic sigmoid regression data: Gaussian rows rescaled to unit norm,
/// Bernoulli labels drawn from a planted logistic model.
pub fn synthetic_sigmoid_data(n: usize, d: usize, rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let planted: Vec<f64> = (0..d).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = linalg::norm(&row);
        if norm > 1.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let p = sigmoid(linalg::dot(&row, &planted));
        labels.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        features.push(row);
    }
    (features, labels)
}

/// Sigmoid least squares over an explicit data set.
#[derive(Debug, Clone)]
pub struct FiniteSumProblem {
    dim: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<f64>,
    gradient_bound: f64,
    smoothness: f64,
}

impl FiniteSumProblem {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::invalid("sigmoid least squares: empty data"));
        }
        if features.len() != labels.len() {
            return Err(Error::invalid(format!(
                "sigmoid least squares: {} rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(Error::invalid("sigmoid least squares: rows have no features"));
        }
        for (i, row) in features.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::invalid(format!("row {i} has {} features, expected {dim}", row.len())));
            }
            if !linalg::all_finite(row) {
                return Err(Error::invalid(format!("row {i} has a non-finite feature")));
            }
        }
        if let Some(y) = labels.iter().find(|y| !(0.0..=1.0).contains(*y)) {
            return Err(Error::invalid(format!("label {y} outside [0, 1]")));
        }
        let max_row = features.iter().map(|r| linalg::norm(r)).fold(0.0, f64::max);
        let (c_grad, c_curv) = link_constants();
        Ok(FiniteSumProblem {
            dim,
            features,
            labels,
            gradient_bound: c_grad * max_row,
            smoothness: c_curv * max_row * max_row,
        })
    }

    /// Load from CSV: one row per sample, `d` feature columns then the label.
    /// A non-numeric first row is treated as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| parse_err(e.to_string()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| parse_err(e.to_string()))?;
            let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(mut values) => {
                    if values.len() < 2 {
                        return Err(parse_err(format!("line {}: need at least one feature and a label", line + 1)));
                    }
                    let y = values.pop().expect("non-empty");
                    labels.push(y);
                    features.push(values);
                }
                Err(_) if line == 0 => continue,
                Err(e) => return Err(parse_err(format!("line {}: {e}", line + 1))),
            }
        }
        Self::new(features, labels).map_err(|e| parse_err(e.to_string()))
    }

    pub fn n_components(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn component_value(&self, i: usize, x: &[f64]) -> f64 {
        let r = sigmoid(linalg::dot(&self.features[i], x)) - self.labels[i];
        r * r
    }

    /// `∇f_i(x) = 2 (s(u) - y_i) s'(u) a_i` with `u = a_iᵀx`, accumulated into `out`.
    pub fn add_component_gradient(&self, i: usize, x: &[f64], scale: f64, out: &mut [f64]) {
        let a = &self.features[i];
        let s = sigmoid(linalg::dot(a, x));
        let coef = 2.0 * (s - self.labels[i]) * s * (1.0 - s);
        linalg::axpy(scale * coef, a, out);
    }

    pub fn component_gradient(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.add_component_gradient(i, x, 1.0, &mut out);
        out
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let n = self.n_components();
        (0..n).map(|i| self.component_value(i, x)).sum::<f64>() / n as f64
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let scale = 1.0 / self.n_components() as f64;
        for i in 0..self.n_components() {
            self.add_component_gradient(i, x, scale, out);
        }
    }
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Relative margin added on top of grid maxima to cover discretisation.
const GRID_MARGIN: f64 = 1e-3;

/// Grid suprema over `(u, y) ∈ [-50, 50] × [0, 1]` of the scalar link
/// `φ(u) = (s(u) - y)²`: returns `(sup |φ'|, sup |φ''|)`.
fn link_constants() -> (f64, f64) {
    const U_POINTS: usize = 20_001;
    const Y_POINTS: usize = 21;
    let mut c_grad: f64 = 0.0;
    let mut c_curv: f64 = 0.0;
    for i in 0..U_POINTS {
        let u = -50.0 + 100.0 * i as f64 / (U_POINTS - 1) as f64;
        let s = sigmoid(u);
        let ds = s * (1.0 - s);
        let dds = ds * (1.0 - 2.0 * s);
        for j in 0..Y_POINTS {
            let y = j as f64 / (Y_POINTS - 1) as f64;
            c_grad = c_grad.max((2.0 * (s - y) * ds).abs());
            c_curv = c_curv.max((2.0 * (ds * ds + (s - y) * dds)).abs());
        }
    }
    (c_grad * (1.0 + GRID_MARGIN), c_curv * (1.0 + GRID_MARGIN))
}
