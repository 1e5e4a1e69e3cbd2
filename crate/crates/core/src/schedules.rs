//! Step sizes and averaging weights for the AGD template.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Running AdaGrad-Norm accumulator `G₀² + Σ_{k≤t} ||g_k||²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accumulator {
    pub g0_sq: f64,
    pub sum_sq: f64,
    pub t: usize,
}

impl Accumulator {
    pub fn new(g0: f64) -> Self {
        Accumulator {
            g0_sq: g0 * g0,
            sum_sq: 0.0,
            t: 0,
        }
    }

    /// Add `||g_t||²` and advance the counter.
    pub fn push(&mut self, grad_norm_sq: f64) {
        self.sum_sq += grad_norm_sq;
        self.t += 1;
    }

    pub fn value(&self) -> f64 {
        self.g0_sq + self.sum_sq
    }
}

/// `η̃_t = (G₀² + Σ_{k≤t} ||g_k||²)^{-1/2}`.
pub fn eta_tilde(acc: &Accumulator) -> Result<f64> {
    let v = acc.value();
    if v > 0.0 {
        Ok(1.0 / v.sqrt())
    } else {
        Err(Error::ZeroAccumulator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// `α_t = 2/(t+1)`
    Weighted,
    /// `α_t = 1/t`
    Uniform,
    /// `α_t = 1`
    None,
}

impl Averaging {
    pub fn as_str(self) -> &'static str {
        match self {
            Averaging::Weighted => "weighted",
            Averaging::Uniform => "uniform",
            Averaging::None => "none",
        }
    }
}

pub fn alpha(averaging: Averaging, t: usize) -> Result<f64> {
    if t < 1 {
        return Err(Error::invalid("alpha: iteration must be >= 1"));
    }
    Ok(match averaging {
        Averaging::Weighted => 2.0 / (t as f64 + 1.0),
        Averaging::Uniform => 1.0 / t as f64,
        Averaging::None => 1.0,
    })
}

/// `Γ_1 .. Γ_T` with `Γ_1 = 1` and `Γ_t = (1 - α_t) Γ_{t-1}`. Index 0 holds `Γ_1`.
pub fn gamma_seq(averaging: Averaging, horizon: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(horizon);
    let mut g = 1.0;
    for t in 1..=horizon {
        if t > 1 {
            g *= 1.0 - alpha(averaging, t).expect("t >= 1");
        }
        out.push(g);
    }
    out
}

/// `[Σ_{k=t}^{T} (1 - α_k) Γ_k] · α_t / Γ_t` evaluated by direct summation.
pub fn term_star(averaging: Averaging, t: usize, horizon: usize) -> Result<f64> {
    if t < 1 || t > horizon {
        return Err(Error::invalid(format!("term_star: need 1 <= t <= T, got t={t}, T={horizon}")));
    }
    let gammas = gamma_seq(averaging, horizon);
    Ok(term_star_from(&gammas, averaging, t))
}

/// `term_star` for every `t ∈ [1, T]` from one `Γ` table, via suffix sums.
pub fn term_star_all(averaging: Averaging, horizon: usize) -> Vec<f64> {
    let gammas = gamma_seq(averaging, horizon);
    let mut suffix = vec![0.0; horizon + 1];
    for k in (1..=horizon).rev() {
        let a = alpha(averaging, k).expect("k >= 1");
        suffix[k - 1] = suffix[k] + (1.0 - a) * gammas[k - 1];
    }
    (1..=horizon)
        .map(|t| suffix[t - 1] * alpha(averaging, t).expect("t >= 1") / gammas[t - 1])
        .collect()
}

fn term_star_from(gammas: &[f64], averaging: Averaging, t: usize) -> f64 {
    let tail: f64 = (t..=gammas.len())
        .map(|k| (1.0 - alpha(averaging, k).expect("k >= 1")) * gammas[k - 1])
        .sum();
    tail * alpha(averaging, t).expect("t >= 1") / gammas[t - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    Adagrad,
    AdagradAveraging,
    Rsag,
    /// `c/√t` baseline, not an adaptive method.
    SgdFixed,
}

impl PresetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PresetKind::Adagrad => "adagrad",
            PresetKind::AdagradAveraging => "adagrad_averaging",
            PresetKind::Rsag => "rsag",
            PresetKind::SgdFixed => "sgd_fixed",
        }
    }

    /// Members of the adaptive family covered by the template analysis.
    pub fn is_adaptive(self) -> bool {
        !matches!(self, PresetKind::SgdFixed)
    }
}

/// A row of the method table: which `(η_t, γ_t)` and which `α_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub kind: PresetKind,
    pub averaging: Averaging,
    pub g0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_step: Option<f64>,
}

impl Preset {
    pub fn adagrad(g0: f64) -> Self {
        Preset {
            kind: PresetKind::Adagrad,
            averaging: Averaging::None,
            g0,
            fixed_step: None,
        }
    }

    pub fn adagrad_averaging(g0: f64, averaging: Averaging) -> Self {
        Preset {
            kind: PresetKind::AdagradAveraging,
            averaging,
            g0,
            fixed_step: None,
        }
    }

    pub fn rsag(g0: f64, averaging: Averaging) -> Self {
        Preset {
            kind: PresetKind::Rsag,
            averaging,
            g0,
            fixed_step: None,
        }
    }

    pub fn sgd_fixed(c: f64) -> Self {
        Preset {
            kind: PresetKind::SgdFixed,
            averaging: Averaging::None,
            g0: 0.0,
            fixed_step: Some(c),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g0.is_finite() && self.g0 >= 0.0) {
            return Err(Error::config(format!("G0 must be non-negative, got {}", self.g0)));
        }
        match self.kind {
            PresetKind::Adagrad | PresetKind::SgdFixed if self.averaging != Averaging::None => Err(Error::config(
                format!("{} does not average; averaging must be none", self.kind.as_str()),
            )),
            PresetKind::AdagradAveraging | PresetKind::Rsag if self.averaging == Averaging::None => Err(
                Error::config(format!("{} requires weighted or uniform averaging", self.kind.as_str())),
            ),
            PresetKind::SgdFixed => match self.fixed_step {
                Some(c) if c > 0.0 && c.is_finite() => Ok(()),
                _ => Err(Error::config("sgd_fixed requires a positive fixed step c")),
            },
            _ => Ok(()),
        }
    }
}

/// `(η_t, γ_t)` for iteration `t`. The accumulator must already include `||g_t||²`.
pub fn step_pair(preset: &Preset, t: usize, acc: &Accumulator) -> Result<(f64, f64)> {
    match preset.kind {
        PresetKind::Adagrad => {
            let e = eta_tilde(acc)?;
            Ok((e, e))
        }
        PresetKind::AdagradAveraging => {
            let e = eta_tilde(acc)?;
            Ok((alpha(preset.averaging, t)? * e, 0.0))
        }
        PresetKind::Rsag => {
            let e = eta_tilde(acc)?;
            Ok((e, (1.0 + alpha(preset.averaging, t)?) * e))
        }
        PresetKind::SgdFixed => {
            if t < 1 {
                return Err(Error::invalid("step_pair: iteration must be >= 1"));
            }
            let c = preset.fixed_step.ok_or_else(|| Error::config("sgd_fixed requires c"))?;
            let s = c / (t as f64).sqrt();
            Ok((s, s))
        }
    }
}
