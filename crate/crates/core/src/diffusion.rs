//! Forward diffusion, posterior, and reverse refinement steps.
//!
//! Pure functions on value-semantic arrays; all randomness is passed in
//! explicitly, so every operation is deterministic given its inputs.

use ndarray::{ArrayD, Zip};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Sign convention of the data-consistency term in the guided step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum GuidanceSign {
    /// Subtract (sigma_t^2 / sigma_d^2)(x_noisy - x_t), reproducing the
    /// published refinement step literally.
    Paper,
    /// Add the term, following the gradient of the measurement
    /// log-likelihood. Default.
    #[default]
    Gradient,
}


/// A latent sample x_t together with its noise level.
#[derive(Debug, Clone)]
pub struct LatentState<F: Float> {
    pub x: ArrayD<F>,
    pub t: usize,
}

impl<F: Float> LatentState<F> {
    pub fn new(x: ArrayD<F>, t: usize, sched: &Schedule) -> Result<Self> {
        if t > sched.steps() {
            return Err(Error::param("t", format!("level {t} outside [0, {}]", sched.steps())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { context: "latent state".into(), step: t });
        }
        Ok(Self { x, t })
    }
}

fn fc<F: Float>(x: f64) -> F {
    F::from(x).unwrap()
}

fn check_same_shape<F: Float>(a: &ArrayD<F>, b: &ArrayD<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Sample x_t directly from x_0: x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps.
pub fn forward_sample<F: Float>(
    x0: &ArrayD<F>,
    t: usize,
    eps: &ArrayD<F>,
    sched: &Schedule,
) -> Result<ArrayD<F>> {
    sched.check_step(t)?;
    check_same_shape(x0, eps)?;
    let a = fc::<F>(sched.alpha_bar(t).sqrt());
    let b = fc::<F>((1.0 - sched.alpha_bar(t)).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// Mean and variance of the Gaussian posterior q(x_{t-1} | x_t, x_0).
///
/// Requires t >= 1; the t = 0 case is handled by callers with
/// abar_prev(0) = 1, where the posterior collapses onto x_0.
pub fn posterior_params<F: Float>(
    x0: &ArrayD<F>,
    xt: &ArrayD<F>,
    t: usize,
    sched: &Schedule,
) -> Result<(ArrayD<F>, f64)> {
    sched.check_step(t)?;
    if t < 1 {
        return Err(Error::param("t", "posterior uses abar_{t-1}; require t >= 1"));
    }
    check_same_shape(x0, xt)?;
    let abar = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar_prev(t);
    let beta = sched.beta(t);
    let c0 = fc::<F>(abar_prev.sqrt() * beta / (1.0 - abar));
    let ct = fc::<F>(sched.alpha(t).sqrt() * (1.0 - abar_prev) / (1.0 - abar));
    let mu = Zip::from(x0).and(xt).map_collect(|&x, &y| c0 * x + ct * y);
    let var = (1.0 - abar_prev) / (1.0 - abar) * beta;
    Ok((mu, var))
}

/// Invert the forward sample at a fixed eps: x_0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
pub fn predict_x0_from_eps<F: Float>(
    xt: &ArrayD<F>,
    eps: &ArrayD<F>,
    t: usize,
    sched: &Schedule,
) -> Result<ArrayD<F>> {
    sched.check_step(t)?;
    check_same_shape(xt, eps)?;
    let inv_a = fc::<F>(1.0 / sched.alpha_bar(t).sqrt());
    let b = fc::<F>((1.0 - sched.alpha_bar(t)).sqrt());
    Ok(Zip::from(xt).and(eps).map_collect(|&y, &e| (y - b * e) * inv_a))
}

/// One reverse refinement step:
/// x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t z.
///
/// Callers pass z = 0 at t = 0.
pub fn ancestral_step<F: Float>(
    xt: &ArrayD<F>,
    eps_hat: &ArrayD<F>,
    t: usize,
    z: &ArrayD<F>,
    sched: &Schedule,
) -> Result<ArrayD<F>> {
    sched.check_step(t)?;
    check_same_shape(xt, eps_hat)?;
    check_same_shape(xt, z)?;
    let inv_sqrt_alpha = fc::<F>(1.0 / sched.alpha(t).sqrt());
    let coef = fc::<F>(sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt());
    let sigma = fc::<F>(sched.sigma(t));
    Ok(Zip::from(xt)
        .and(eps_hat)
        .and(z)
        .map_collect(|&y, &e, &n| (y - coef * e) * inv_sqrt_alpha + sigma * n))
}

/// Reverse refinement step with the measurement-consistency term
/// (sigma_t^2 / sigma_d^2)(x_noisy - x_t) applied per `sign`.
#[allow(clippy::too_many_arguments)]
pub fn guided_step<F: Float>(
    xt: &ArrayD<F>,
    eps_hat: &ArrayD<F>,
    t: usize,
    z: &ArrayD<F>,
    x_noisy: &ArrayD<F>,
    sigma_d: f64,
    sign: GuidanceSign,
    sched: &Schedule,
) -> Result<ArrayD<F>> {
    if !sigma_d.is_finite() || sigma_d <= 0.0 {
        return Err(Error::param("sigma_d", "must be finite and > 0"));
    }
    check_same_shape(xt, x_noisy)?;
    let base = ancestral_step(xt, eps_hat, t, z, sched)?;
    let weight = sched.sigma(t).powi(2) / (sigma_d * sigma_d);
    let w = match sign {
        GuidanceSign::Gradient => fc::<F>(weight),
        GuidanceSign::Paper => fc::<F>(-weight),
    };
    Ok(Zip::from(&base)
        .and(x_noisy)
        .and(xt)
        .map_collect(|&b, &n, &y| b + w * (n - y)))
}

/// Exact conditional-expectation eps-predictor when x_0 ~ Normal(mu0, var0 I):
/// eps(x_t) = sqrt(1 - abar_t) (x_t - sqrt(abar_t) mu0) / (abar_t var0 + 1 - abar_t).
///
/// Test oracle: driving the reverse chain with this predictor must reproduce
/// the Normal(mu0, var0) data distribution.
pub fn analytic_eps_gaussian<F: Float>(
    xt: &ArrayD<F>,
    t: usize,
    mu0: f64,
    var0: f64,
    sched: &Schedule,
) -> Result<ArrayD<F>> {
    sched.check_step(t)?;
    if var0 < 0.0 {
        return Err(Error::param("var0", "must be >= 0"));
    }
    let abar = sched.alpha_bar(t);
    let scale = fc::<F>((1.0 - abar).sqrt() / (abar * var0 + 1.0 - abar));
    let center = fc::<F>(abar.sqrt() * mu0);
    Ok(xt.mapv(|y| scale * (y - center)))
}
