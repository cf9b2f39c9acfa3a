use rand::Rng;

use super::{LatentTensor, NoiseSchedule};
use crate::error::{Error, Result};

/// Closed-form draw from `q(x_t | x_0)`:
/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_sample(
    x0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Runs the Markov chain `q(x_s | x_{s-1})` one step at a time for
/// `s = 1..=t`. This is the slow reference for [`forward_sample`].
pub fn chain_forward<R: Rng + ?Sized>(
    x0: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentTensor> {
    sched.check_timestep(t)?;
    let mut x = x0.clone();
    for s in 1..=t {
        let noise = LatentTensor::randn(x.shape(), rng);
        let beta = sched.beta(s);
        x = x.lincomb((1.0 - beta).sqrt(), &noise, beta.sqrt())?;
    }
    Ok(x)
}

/// Mean of the reverse step under the epsilon parameterization:
/// `(x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)`.
pub fn posterior_mean(
    x_t: &LatentTensor,
    t: usize,
    eps_pred: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    sched.check_timestep(t)?;
    let alpha = sched.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    x_t.lincomb(inv, eps_pred, -coef * inv)
}

/// Ancestral DDPM step `t -> t-1` with fixed variance `sigma_t^2 = beta_t`.
/// The final step (`t == 1`) draws no noise.
pub fn ddpm_step<R: Rng + ?Sized>(
    x_t: &LatentTensor,
    t: usize,
    eps_pred: &LatentTensor,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentTensor> {
    let mean = posterior_mean(x_t, t, eps_pred, sched)?;
    let sigma = sched.sigma(t);
    if sigma == 0.0 {
        return Ok(mean);
    }
    let noise = LatentTensor::randn(mean.shape(), rng);
    mean.lincomb(1.0, &noise, sigma)
}

/// DDIM update from `t` to `t_prev` (`t_prev == 0` lands on the predicted
/// clean sample). `eta = 0` is deterministic and never touches `rng`.
pub fn ddim_step<R: Rng + ?Sized>(
    x_t: &LatentTensor,
    t: usize,
    t_prev: usize,
    eps_pred: &LatentTensor,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<LatentTensor> {
    sched.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::InvalidStepOrder { t, t_prev });
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidRange(format!("eta {eta} outside [0, 1]")));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let x0_hat = x_t.lincomb(1.0 / ab_t.sqrt(), eps_pred, -(1.0 - ab_t).sqrt() / ab_t.sqrt())?;
    if t_prev == 0 {
        return Ok(x0_hat);
    }
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let out = x0_hat.lincomb(ab_prev.sqrt(), eps_pred, dir)?;
    if sigma == 0.0 {
        return Ok(out);
    }
    let noise = LatentTensor::randn(out.shape(), rng);
    out.lincomb(1.0, &noise, sigma)
}
