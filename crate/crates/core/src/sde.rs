//! Variance-preserving forward SDE, closed-form marginals, the reverse-time
//! Euler–Maruyama integrator, and posterior-mean denoising.
//!
//! Forward process: `dx = -1/2 beta(t) x dt + sqrt(beta(t)) dw` with the
//! linear schedule `beta(t) = beta_min + t (beta_max - beta_min)`, giving
//! Gaussian transition kernels `x_t = alpha(t) x_0 + sigma(t) eps` with
//! `alpha = exp(-1/2 int_0^t beta)` and `alpha^2 + sigma^2 = 1`.

use crate::error::{Error, Result};
use lacuna_nn::tape::randn_like;
use lacuna_nn::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// VP-SDE parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Minimum time for numerical stability.
    pub tau: f64,
    /// Number of uniform reverse steps from t=1 down to t=tau.
    pub num_steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, tau: 1e-3, num_steps: 1000 }
    }
}

/// Mean coefficient and standard deviation of the forward marginal at a time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginalCoeffs {
    pub alpha: f64,
    pub sigma: f64,
}

impl DiffusionSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max) {
            return Err(Error::Checkpoint(format!(
                "invalid schedule: beta_min {} beta_max {}",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::TimeOutOfRange { t: self.tau, lo: 0.0, hi: 1.0 });
        }
        Ok(())
    }

    fn check_time(&self, t: f64, lo: f64) -> Result<()> {
        if !(lo..=1.0).contains(&t) || t.is_nan() {
            return Err(Error::TimeOutOfRange { t, lo, hi: 1.0 });
        }
        Ok(())
    }

    /// `beta(t) = beta_min + t (beta_max - beta_min)`. The pure schedule is
    /// defined on all of [0,1]; the tau floor only matters where sigma > 0 is
    /// required.
    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t, 0.0)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min))
    }

    /// `int_0^t beta = beta_min t + 1/2 t^2 (beta_max - beta_min)`.
    pub fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)
    }

    pub fn marginal_coeffs(&self, t: f64) -> Result<MarginalCoeffs> {
        self.check_time(t, 0.0)?;
        let alpha = (-0.5 * self.beta_integral(t)).exp();
        let sigma = (1.0 - alpha * alpha).max(0.0).sqrt();
        Ok(MarginalCoeffs { alpha, sigma })
    }

    /// Uniform reverse-time grid: `t_k = 1 - k dt`, `dt = (1 - tau)/num_steps`.
    /// The final step lands exactly on `tau`.
    pub fn time_grid(&self) -> (Vec<f64>, f64) {
        let dt = (1.0 - self.tau) / self.num_steps as f64;
        let ts = (0..self.num_steps).map(|k| 1.0 - k as f64 * dt).collect();
        (ts, dt)
    }
}

/// `x_t = alpha(t) x_0 + sigma(t) eps`.
pub fn forward_sample<F: Scalar>(
    x0: &Tensor<F>,
    t: f64,
    eps: &Tensor<F>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<F>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            expected: x0.shape().to_vec(),
            found: eps.shape().to_vec(),
            context: "forward_sample eps".into(),
        });
    }
    let mc = schedule.marginal_coeffs(t)?;
    Ok(x0 * F::c(mc.alpha) + eps * F::c(mc.sigma))
}

/// Conditional score of the transition kernel:
/// `grad log p_0t(x_t | x_0) = -(x_t - alpha x_0) / sigma^2`.
pub fn score_target<F: Scalar>(
    xt: &Tensor<F>,
    x0: &Tensor<F>,
    t: f64,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<F>> {
    if xt.shape() != x0.shape() {
        return Err(Error::ShapeMismatch {
            expected: xt.shape().to_vec(),
            found: x0.shape().to_vec(),
            context: "score_target".into(),
        });
    }
    if t < schedule.tau {
        return Err(Error::TimeOutOfRange { t, lo: schedule.tau, hi: 1.0 });
    }
    let mc = schedule.marginal_coeffs(t)?;
    let inv_var = F::c(1.0 / (mc.sigma * mc.sigma));
    Ok((x0 * F::c(mc.alpha) - xt) * inv_var)
}

/// One Euler–Maruyama step of the reverse SDE, integrating backward in time
/// by a step of magnitude `dt > 0`:
///
/// `x' = x - [-1/2 beta(t) x - beta(t) score] dt + sqrt(beta(t) dt) noise`
pub fn reverse_step<F: Scalar>(
    x: &Tensor<F>,
    t: f64,
    dt: f64,
    score_val: &Tensor<F>,
    noise: &Tensor<F>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<F>> {
    if x.shape() != score_val.shape() || x.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            found: score_val.shape().to_vec(),
            context: "reverse_step".into(),
        });
    }
    if dt < 0.0 {
        return Err(Error::TimeOutOfRange { t: dt, lo: 0.0, hi: 1.0 });
    }
    let beta = schedule.beta(t)?;
    let drift = x * F::c(0.5 * beta * dt) + score_val * F::c(beta * dt);
    Ok(x + &drift + noise * F::c((beta * dt).sqrt()))
}

/// Tweedie posterior mean: `x0_hat = (x_t + sigma^2 score) / alpha`.
pub fn tweedie_mean<F: Scalar>(
    xt: &Tensor<F>,
    t: f64,
    score_val: &Tensor<F>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<F>> {
    if xt.shape() != score_val.shape() {
        return Err(Error::ShapeMismatch {
            expected: xt.shape().to_vec(),
            found: score_val.shape().to_vec(),
            context: "tweedie_mean".into(),
        });
    }
    if t < schedule.tau {
        return Err(Error::TimeOutOfRange { t, lo: schedule.tau, hi: 1.0 });
    }
    let mc = schedule.marginal_coeffs(t)?;
    Ok((xt + &(score_val * F::c(mc.sigma * mc.sigma))) * F::c(1.0 / mc.alpha))
}

/// A time-dependent score field.
pub trait ScoreFn<F: Scalar> {
    fn score(&self, x: &Tensor<F>, t: f64) -> Tensor<F>;
}

impl<F: Scalar, T: Fn(&Tensor<F>, f64) -> Tensor<F>> ScoreFn<F> for T {
    fn score(&self, x: &Tensor<F>, t: f64) -> Tensor<F> {
        self(x, t)
    }
}

/// Draw from the model by integrating the reverse SDE from `t = 1` down to
/// `t = tau` on the uniform grid, starting at `x_T ~ N(0, I)`. Deterministic
/// given the seed.
pub fn sample_unconditional<F: Scalar>(
    score_fn: &dyn ScoreFn<F>,
    shape: &[usize],
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Tensor<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Tensor<F> = randn_like(shape, &mut rng);
    let (ts, dt) = schedule.time_grid();
    for &t in &ts {
        let s = score_fn.score(&x, t);
        let noise: Tensor<F> = randn_like(shape, &mut rng);
        x = reverse_step(&x, t, dt, &s, &noise, schedule)?;
    }
    Ok(x)
}

/// Like [`sample_unconditional`], but replaces the final noisy state at `tau`
/// with its Tweedie posterior mean (removes the residual sigma(tau) noise).
pub fn sample_denoised<F: Scalar>(
    score_fn: &dyn ScoreFn<F>,
    shape: &[usize],
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Tensor<F>> {
    let x = sample_unconditional(score_fn, shape, schedule, seed)?;
    let s = score_fn.score(&x, schedule.tau);
    tweedie_mean(&x, schedule.tau, &s, schedule)
}
