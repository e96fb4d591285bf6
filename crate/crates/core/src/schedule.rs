//! Precomputed per-step diffusion constants.

use crate::error::{Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

/// Shape of the noise-variance ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step sampling standard deviation choice. The reverse-step variance is
/// not pinned by the transition kernel; both common options are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t  (posterior variance)
    PosteriorVariance,
    /// sigma_t^2 = beta_t
    Beta,
}

/// Precomputed diffusion constants: beta_t, alpha_t, abar_t, sigma_t.
///
/// Steps are 0-indexed: index `t` is the noise level reached after `t + 1`
/// applications of the single-step forward transition. `abar_prev(0)` is
/// defined as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    kind: ScheduleKind,
    sigma_kind: SigmaKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl Schedule {
    /// Build a schedule with `steps` levels.
    ///
    /// For the linear kind, beta ramps from `beta_start` to `beta_end`
    /// inclusive. The cosine kind derives beta from the squared-cosine
    /// cumulative-product curve and ignores the endpoints.
    pub fn new(
        steps: usize,
        kind: ScheduleKind,
        beta_start: f64,
        beta_end: f64,
        sigma_kind: SigmaKind,
    ) -> Result<Self> {
        if steps < 1 {
            return Err(Error::param("steps", "must be >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::param(
                "beta_start/beta_end",
                format!("require 0 < start <= end < 1, got ({beta_start}, {beta_end})"),
            ));
        }
        let beta = match kind {
            ScheduleKind::Linear => linspace(beta_start, beta_end, steps),
            ScheduleKind::Cosine => cosine_betas(steps),
        };
        Self::from_betas(beta, kind, sigma_kind)
    }

    /// Default linear schedule (beta 1e-4 .. 2e-2, posterior-variance sigma).
    pub fn default_linear(steps: usize) -> Result<Self> {
        Self::new(
            steps,
            ScheduleKind::Linear,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            SigmaKind::PosteriorVariance,
        )
    }

    /// Build from an explicit beta array, validating all invariants.
    pub fn from_betas(beta: Vec<f64>, kind: ScheduleKind, sigma_kind: SigmaKind) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::param("beta", "must be non-empty"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0) || !b.is_finite()) {
            return Err(Error::param("beta", "all values must lie in (0, 1)"));
        }
        let steps = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma: Vec<f64> = (0..steps)
            .map(|t| {
                let var = match sigma_kind {
                    SigmaKind::PosteriorVariance => {
                        let abar_prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
                        (1.0 - abar_prev) / (1.0 - alpha_bar[t]) * beta[t]
                    }
                    SigmaKind::Beta => beta[t],
                };
                var.sqrt()
            })
            .collect();
        let sched = Self { steps, kind, sigma_kind, beta, alpha, alpha_bar, sigma };
        sched.check_invariants()?;
        Ok(sched)
    }

    fn check_invariants(&self) -> Result<()> {
        for t in 1..self.steps {
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(Error::param("beta", "alpha_bar must be strictly decreasing"));
            }
        }
        if !(self.alpha_bar[self.steps - 1] > 0.0 && self.alpha_bar[0] < 1.0) {
            return Err(Error::param("beta", "alpha_bar must stay within (0, 1)"));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::param("sigma", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn sigma_kind(&self) -> SigmaKind {
        self.sigma_kind
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// abar at level t-1, with the t = 0 case defined as 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps {
            return Err(Error::param("t", format!("step {t} out of range [0, {})", self.steps)));
        }
        Ok(())
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Squared-cosine cumulative-product schedule with the usual 0.008 offset,
/// betas clipped to 0.999.
fn cosine_betas(steps: usize) -> Vec<f64> {
    let s = 0.008;
    let f = |u: f64| ((u / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    (0..steps)
        .map(|t| {
            let abar_t = f((t + 1) as f64) / f0;
            let abar_prev = f(t as f64) / f0;
            (1.0 - abar_t / abar_prev).clamp(1e-8, 0.999)
        })
        .collect()
}
