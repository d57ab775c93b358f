//! Forward-noising and single-step reverse kernels.
//!
//! Every function here is pure: noise is passed in explicitly so callers own
//! the random stream and tests can pin it to zero.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::schedule::NoiseSchedule;

fn zip2(a: &ImageGrid, b: &ImageGrid, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<ImageGrid> {
    a.ensure_same_shape(b, what)?;
    let (h, w, c) = a.shape();
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    ImageGrid::new(h, w, c, data).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{what}: {m}")),
        other => other,
    })
}

/// Standard-normal draw with the same shape as `like`.
pub fn gaussian_like<R: Rng + ?Sized>(like: &ImageGrid, rng: &mut R) -> ImageGrid {
    let (h, w, c) = like.shape();
    gaussian(h, w, c, rng)
}

pub fn gaussian<R: Rng + ?Sized>(height: usize, width: usize, channels: usize, rng: &mut R) -> ImageGrid {
    let data = (0..height * width * channels).map(|_| rng.sample(StandardNormal)).collect();
    ImageGrid::new(height, width, channels, data).expect("gaussian draws are finite")
}

/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(x0: &ImageGrid, t: usize, eps: &ImageGrid, sched: &NoiseSchedule) -> Result<ImageGrid> {
    sched.check_timestep(t, "forward_diffuse")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip2(x0, eps, "forward_diffuse", |x, e| a * x + b * e)
}

/// One Markov step `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn one_step_forward(x_prev: &ImageGrid, t: usize, eps: &ImageGrid, sched: &NoiseSchedule) -> Result<ImageGrid> {
    sched.check_positive_timestep(t, "one_step_forward")?;
    let beta = sched.beta(t);
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    zip2(x_prev, eps, "one_step_forward", |x, e| a * x + b * e)
}

/// Inverts [`forward_diffuse`] given a noise estimate.
pub fn estimate_x0(x_t: &ImageGrid, eps_hat: &ImageGrid, t: usize, sched: &NoiseSchedule) -> Result<ImageGrid> {
    sched.check_timestep(t, "estimate_x0")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip2(x_t, eps_hat, "estimate_x0", |x, e| (x - b * e) / a)
}

/// Ancestral step from `t` to `t - 1` with posterior variance; the noise term
/// vanishes at `t = 1`.
pub fn ddpm_reverse_step(
    x_t: &ImageGrid,
    eps_hat: &ImageGrid,
    t: usize,
    z: &ImageGrid,
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    sched.check_positive_timestep(t, "ddpm_reverse_step")?;
    x_t.ensure_same_shape(eps_hat, "ddpm_reverse_step eps")?;
    x_t.ensure_same_shape(z, "ddpm_reverse_step z")?;
    let beta = sched.beta(t);
    let eps_coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_alpha = 1.0 / (1.0 - beta).sqrt();
    let sigma = if t == 1 { 0.0 } else { sched.posterior_variance(t).sqrt() };
    let (h, w, c) = x_t.shape();
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &n)| (x - eps_coef * e) * inv_alpha + sigma * n)
        .collect();
    ImageGrid::new(h, w, c, data).map_err(|_| Error::NonFinite(format!("ddpm_reverse_step at t = {t}")))
}

/// Deterministic (eta = 0) implicit step from `t_cur` to `t_next`.
///
/// `x0_override` replaces the clean-image estimate in the update; this is how
/// the inpainting drivers feed back their mixed estimate.
pub fn ddim_reverse_step(
    x_cur: &ImageGrid,
    eps_hat: &ImageGrid,
    t_cur: usize,
    t_next: usize,
    sched: &NoiseSchedule,
    x0_override: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    if t_next >= t_cur {
        return Err(Error::Domain(format!("ddim_reverse_step: t_next {t_next} must precede t_cur {t_cur}")));
    }
    sched.check_timestep(t_cur, "ddim_reverse_step")?;
    let x0 = match x0_override {
        Some(x0) => {
            x0.ensure_same_shape(x_cur, "ddim_reverse_step override")?;
            x0.clone()
        }
        None => estimate_x0(x_cur, eps_hat, t_cur, sched)?,
    };
    if t_next == 0 {
        return Ok(x0);
    }
    let ab = sched.alpha_bar(t_next);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip2(&x0, eps_hat, "ddim_reverse_step", |x, e| a * x + b * e)
}
