//! Mask-guided inpainting: repaint mixing, the ancestral and implicit repaint
//! drivers, the refinement pass, and lesion fill/synthesis on file-space images.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    ddim_reverse_step, ddpm_reverse_step, estimate_x0, forward_diffuse, gaussian_like, one_step_forward,
};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, Mask};
use crate::model::NoisePredictor;
use crate::schedule::{NoiseSchedule, StepSubsequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerMode::Ddpm),
            "ddim" => Ok(SamplerMode::Ddim),
            other => Err(Error::Config(format!("unknown sampler mode {other:?} (expected ddpm or ddim)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub stride: usize,
    /// Reverse passes per timestep; 1 disables resampling.
    pub repaint_reps: usize,
    /// Start of the refinement pass; must be a member of the strided subsequence.
    pub refine_timestep: Option<usize>,
    pub rng_seed: u64,
    /// Dilation radius turning a lesion mask into the repaint mask (filling only).
    pub mask_dilation: usize,
    /// Clip clean-image estimates to `[-1, 1]` and re-derive the noise estimate
    /// from the clipped value before each reverse step.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Ddim,
            stride: 10,
            repaint_reps: 2,
            refine_timestep: Some(100),
            rng_seed: 0,
            mask_dilation: 1,
            clip_x0: true,
        }
    }
}

impl SamplerConfig {
    pub fn subsequence(&self, sched: &NoiseSchedule) -> Result<StepSubsequence> {
        StepSubsequence::strided(sched.steps(), self.stride)
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.repaint_reps == 0 {
            return Err(Error::Config("repaint_reps must be at least 1".into()));
        }
        let sub = self.subsequence(sched)?;
        if let Some(t) = self.refine_timestep {
            if sub.position(t).is_none() {
                return Err(Error::Config(format!(
                    "refine timestep {t} is not in the stride-{} subsequence",
                    self.stride
                )));
            }
        }
        Ok(())
    }
}

/// Known image, the pixels allowed to change, and the conditioning mask, all
/// in model space.
#[derive(Debug, Clone)]
pub struct InpaintRequest {
    pub x0: ImageGrid,
    pub m_repaint: Mask,
    pub m_target: Mask,
    pub config: SamplerConfig,
}

impl InpaintRequest {
    fn validate(&self, model: &(impl NoisePredictor + ?Sized), sched: &NoiseSchedule) -> Result<()> {
        self.x0.ensure_mask_fits(&self.m_repaint, "repaint mask")?;
        self.x0.ensure_mask_fits(&self.m_target, "target mask")?;
        self.x0.ensure_finite("known image")?;
        self.config.validate(sched)?;
        check_schedule(model, sched)
    }
}

fn check_schedule(model: &(impl NoisePredictor + ?Sized), sched: &NoiseSchedule) -> Result<()> {
    if model.schedule().alpha_bars() != sched.alpha_bars() {
        return Err(Error::Config("model was built with a different noise schedule".into()));
    }
    Ok(())
}

/// `x_hat` where `m` is set, `x_known` elsewhere; values are copied, not blended.
pub fn repaint_mix(x_hat: &ImageGrid, x_known: &ImageGrid, m: &Mask) -> Result<ImageGrid> {
    x_hat.ensure_same_shape(x_known, "repaint_mix")?;
    x_hat.ensure_mask_fits(m, "repaint_mix mask")?;
    let c = x_hat.channels();
    let mut out = x_known.clone();
    for p in m.indices() {
        out.data_mut()[p * c..(p + 1) * c].copy_from_slice(x_hat.pixel(p));
    }
    Ok(out)
}

/// Wraps a predictor and counts calls.
#[derive(Debug)]
pub struct CallCounter<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P> CallCounter<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<P: NoisePredictor> NoisePredictor for CallCounter<P> {
    fn predict_noise(&self, x_t: &ImageGrid, m_target: &Mask, t: usize) -> Result<ImageGrid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_noise(x_t, m_target, t)
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }
}

/// Noise estimate and clean-image estimate at `t`, with optional clipping.
fn predict(
    model: &(impl NoisePredictor + ?Sized),
    x: &ImageGrid,
    m_target: &Mask,
    t: usize,
    sched: &NoiseSchedule,
    clip: bool,
) -> Result<(ImageGrid, ImageGrid)> {
    let eps = model.predict_noise(x, m_target, t)?;
    x.ensure_same_shape(&eps, "predicted noise")?;
    eps.ensure_finite(&format!("predicted noise at t = {t}"))?;
    let x0 = estimate_x0(x, &eps, t, sched)?;
    if !clip {
        return Ok((eps, x0));
    }
    let x0 = x0.map(|v| v.clamp(-1.0, 1.0));
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (h, w, c) = x.shape();
    let eps = x.data().iter().zip(x0.data()).map(|(&xt, &x0)| (xt - a * x0) / b).collect();
    Ok((ImageGrid::new(h, w, c, eps)?, x0))
}

fn ddpm_loop(
    req: &InpaintRequest,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<ImageGrid> {
    let cfg = &req.config;
    let mut x = gaussian_like(&req.x0, rng);
    for t in (1..=sched.steps()).rev() {
        for u in 1..=cfg.repaint_reps {
            let (eps, _) = predict(model, &x, &req.m_target, t, sched, cfg.clip_x0)?;
            let z = gaussian_like(&x, rng);
            let x_hat = ddpm_reverse_step(&x, &eps, t, &z, sched)?;
            let known = forward_diffuse(&req.x0, t - 1, &gaussian_like(&x, rng), sched)?;
            let mixed = repaint_mix(&x_hat, &known, &req.m_repaint)?;
            x = if u < cfg.repaint_reps { one_step_forward(&mixed, t, &gaussian_like(&x, rng), sched)? } else { mixed };
        }
    }
    repaint_mix(&x, &req.x0, &req.m_repaint)
}

fn ddim_loop(
    req: &InpaintRequest,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<ImageGrid> {
    let cfg = &req.config;
    let sub = cfg.subsequence(sched)?;
    let mut x = gaussian_like(&req.x0, rng);
    for i in (1..=sub.len()).rev() {
        let (t, t_prev) = (sub.taus()[i - 1], sub.previous(i));
        for u in 1..=cfg.repaint_reps {
            let (eps, x0_hat) = predict(model, &x, &req.m_target, t, sched, cfg.clip_x0)?;
            let x0_mixed = repaint_mix(&x0_hat, &req.x0, &req.m_repaint)?;
            x = if u < cfg.repaint_reps {
                forward_diffuse(&x0_mixed, t, &gaussian_like(&x, rng), sched)?
            } else {
                ddim_reverse_step(&x, &eps, t, t_prev, sched, Some(&x0_mixed))?
            };
        }
    }
    repaint_mix(&x, &req.x0, &req.m_repaint)
}

#[allow(clippy::too_many_arguments)]
fn refine_with(
    x0_hat: &ImageGrid,
    x0_known: &ImageGrid,
    m_repaint: &Mask,
    m_target: &Mask,
    tau: usize,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<ImageGrid> {
    let sub = cfg.subsequence(sched)?;
    let k = sub.position(tau).ok_or_else(|| {
        Error::Config(format!("refine timestep {tau} is not in the stride-{} subsequence", cfg.stride))
    })?;
    let mut x = forward_diffuse(x0_hat, tau, &gaussian_like(x0_hat, rng), sched)?;
    for i in (1..=k).rev() {
        let (t, t_prev) = (sub.taus()[i - 1], sub.previous(i));
        let (eps, est) = predict(model, &x, m_target, t, sched, cfg.clip_x0)?;
        let mixed = repaint_mix(&est, x0_known, m_repaint)?;
        x = ddim_reverse_step(&x, &eps, t, t_prev, sched, Some(&mixed))?;
    }
    repaint_mix(&x, x0_known, m_repaint)
}

/// Ancestral repaint over every timestep, with `repaint_reps` passes per step.
pub fn ddpm_inpaint(
    req: &InpaintRequest,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    req.validate(model, sched)?;
    if req.m_repaint.is_empty() {
        return Ok(req.x0.clone());
    }
    ddpm_loop(req, model, sched, &mut ChaCha8Rng::seed_from_u64(req.config.rng_seed))
}

/// Implicit repaint over the strided subsequence, mixing in clean-image space.
pub fn ddim_inpaint(
    req: &InpaintRequest,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    req.validate(model, sched)?;
    if req.m_repaint.is_empty() {
        return Ok(req.x0.clone());
    }
    ddim_loop(req, model, sched, &mut ChaCha8Rng::seed_from_u64(req.config.rng_seed))
}

/// Re-noises `x0_hat` to `tau` and runs the implicit sampler back down the
/// subsequence, mixing against `x0_known` at every step. Costs one call per
/// subsequence element up to and including `tau`.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    x0_hat: &ImageGrid,
    x0_known: &ImageGrid,
    m_repaint: &Mask,
    m_target: &Mask,
    tau: usize,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<ImageGrid> {
    x0_hat.ensure_same_shape(x0_known, "refine")?;
    x0_hat.ensure_mask_fits(m_repaint, "refine repaint mask")?;
    x0_hat.ensure_mask_fits(m_target, "refine target mask")?;
    check_schedule(model, sched)?;
    if m_repaint.is_empty() {
        return Ok(x0_known.clone());
    }
    refine_with(x0_hat, x0_known, m_repaint, m_target, tau, model, sched, cfg, rng)
}

/// The configured driver followed by refinement when enabled; one random
/// stream seeded from the request drives everything.
pub fn inpaint(
    req: &InpaintRequest,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    req.validate(model, sched)?;
    if req.m_repaint.is_empty() {
        return Ok(req.x0.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.config.rng_seed);
    let x = match req.config.mode {
        SamplerMode::Ddpm => ddpm_loop(req, model, sched, &mut rng)?,
        SamplerMode::Ddim => ddim_loop(req, model, sched, &mut rng)?,
    };
    match req.config.refine_timestep {
        Some(tau) => refine_with(&x, &req.x0, &req.m_repaint, &req.m_target, tau, model, sched, &req.config, &mut rng),
        None => Ok(x),
    }
}

/// Denoiser calls [`inpaint`] makes for a nonempty repaint mask.
pub fn expected_calls(cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<usize> {
    let sub = cfg.subsequence(sched)?;
    let main = match cfg.mode {
        SamplerMode::Ddpm => cfg.repaint_reps * sched.steps(),
        SamplerMode::Ddim => cfg.repaint_reps * sub.len(),
    };
    let extra = match cfg.refine_timestep {
        Some(t) => sub.position(t).ok_or_else(|| Error::Config(format!("refine timestep {t} not in subsequence")))?,
        None => 0,
    };
    Ok(main + extra)
}

/// Inpaints a file-space image inside `m_repaint` and returns a file-space
/// image. Regenerated pixels are clipped to `[0, 1]`; all other pixels are
/// copied from `image` unchanged.
fn inpaint_file_space(
    image: &ImageGrid,
    m_repaint: Mask,
    m_target: Mask,
    config: &SamplerConfig,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    image.ensure_mask_fits(&m_repaint, "inpaint mask")?;
    let req = InpaintRequest { x0: image.to_model_space(), m_repaint, m_target, config: config.clone() };
    let out = inpaint(&req, model, sched)?;
    let out = out.to_file_space().map(|v| v.clamp(0.0, 1.0));
    repaint_mix(&out, image, &req.m_repaint)
}

/// Replaces lesion pixels (and a `mask_dilation` rim) with tissue generated
/// under an all-zero conditioning mask.
pub fn fill_lesions(
    image: &ImageGrid,
    lesion_mask: &Mask,
    config: &SamplerConfig,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    image.ensure_mask_fits(lesion_mask, "lesion mask")?;
    let m_repaint = lesion_mask.dilate(config.mask_dilation);
    let m_target = Mask::zeros(lesion_mask.height(), lesion_mask.width());
    inpaint_file_space(image, m_repaint, m_target, config, model, sched)
}

/// Generates lesions inside `target_mask`, conditioning on the same mask.
pub fn synthesize_lesions(
    image: &ImageGrid,
    target_mask: &Mask,
    config: &SamplerConfig,
    model: &(impl NoisePredictor + ?Sized),
    sched: &NoiseSchedule,
) -> Result<ImageGrid> {
    image.ensure_mask_fits(target_mask, "target mask")?;
    inpaint_file_space(image, target_mask.clone(), target_mask.clone(), config, model, sched)
}
