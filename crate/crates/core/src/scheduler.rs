//! Noise schedules and the deterministic reverse sampler.
//!
//! Holds the per-step alpha tables, forward noising, the clean-latent
//! estimate, the deterministic reverse step, the entry-step arithmetic for
//! the diffuse-then-denoise strategy, and the step-size schedule used by the
//! global structure guidance.

use crate::error::{Error, Result};
use crate::types::Latent;

/// Per-step noise schedule: alphas and their cumulative products.
///
/// `alpha_bars` has `total_steps + 1` entries with `alpha_bars[0] = 1`, so
/// timestep 0 denotes the clean latent.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    total_steps: usize,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product at `t`, valid for `t` in `[0, total_steps]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.total_steps {
            return Err(Error::Argument(format!(
                "timestep {t} exceeds schedule length {}",
                self.total_steps
            )));
        }
        Ok(())
    }
}

/// Builds a schedule with betas linearly spaced in the square-root domain
/// (the scaled-linear convention used by the reference latent diffusion
/// checkpoints). Defaults elsewhere are (0.00085, 0.012) over 1000 steps.
pub fn build_schedule(total_steps: usize, beta_range: (f64, f64)) -> Result<NoiseSchedule> {
    let (beta_min, beta_max) = beta_range;
    if total_steps < 1 {
        return Err(Error::Config("total_steps must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "beta range ({beta_min}, {beta_max}) must satisfy 0 < min <= max < 1"
        )));
    }
    let (s_min, s_max) = (beta_min.sqrt(), beta_max.sqrt());
    let mut alphas = Vec::with_capacity(total_steps);
    let mut alpha_bars = Vec::with_capacity(total_steps + 1);
    alpha_bars.push(1.0);
    for t in 0..total_steps {
        let frac = if total_steps == 1 {
            0.0
        } else {
            t as f64 / (total_steps - 1) as f64
        };
        let beta = (s_min + frac * (s_max - s_min)).powi(2);
        let alpha = 1.0 - beta;
        alphas.push(alpha);
        alpha_bars.push(alpha_bars[t] * alpha);
    }
    Ok(NoiseSchedule {
        total_steps,
        alphas,
        alpha_bars,
    })
}

/// Forward noising: `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn add_noise(z0: &Latent, t: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    sched.check_t(t)?;
    if !z0.same_shape(eps) {
        return Err(Error::Shape(format!(
            "add_noise: z0 is {:?}, eps is {:?}",
            z0.shape_of(),
            eps.shape_of()
        )));
    }
    let abar = sched.alpha_bar(t);
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut out = z0.clone();
    for (o, e) in out.data.iter_mut().zip(eps.data.iter()) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// Clean-latent estimate from a noisy latent and a noise prediction:
/// `(z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)`.
pub fn predict_z0(
    z_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    sched.check_t(t)?;
    if t == 0 {
        return Err(Error::Argument("predict_z0 is undefined at t = 0".into()));
    }
    if !z_t.same_shape(eps_hat) {
        return Err(Error::Shape(format!(
            "predict_z0: z_t is {:?}, eps_hat is {:?}",
            z_t.shape_of(),
            eps_hat.shape_of()
        )));
    }
    let abar = sched.alpha_bar(t);
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut out = z_t.clone();
    for (o, e) in out.data.iter_mut().zip(eps_hat.data.iter()) {
        *o = (*o - b * e) / a;
    }
    Ok(out)
}

/// Deterministic reverse step: reconstruct the clean estimate and re-noise it
/// to `t_prev` using the same predicted noise (the eta = 0 sampler).
pub fn ddim_step(
    z_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Argument(format!(
            "ddim_step requires t_prev < t, got t_prev={t_prev}, t={t}"
        )));
    }
    let z0 = predict_z0(z_t, eps_hat, t, sched)?;
    let abar_prev = sched.alpha_bar(t_prev);
    let (a, b) = (abar_prev.sqrt(), (1.0 - abar_prev).sqrt());
    let mut out = z0;
    for (o, e) in out.data.iter_mut().zip(eps_hat.data.iter()) {
        *o = a * *o + b * e;
    }
    Ok(out)
}

/// Number of active inference steps for a partial-noise entry:
/// `floor(fraction * default_steps)`, at least 1.
pub fn entry_step(default_steps: usize, fraction: f64) -> Result<usize> {
    if default_steps < 1 {
        return Err(Error::Argument("default_steps must be at least 1".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "noise fraction {fraction} must lie in (0, 1]"
        )));
    }
    Ok(((fraction * default_steps as f64).floor() as usize).max(1))
}

/// The active inference timesteps, largest first: the base model's uniform
/// spacing of `default_steps` over the training range, truncated to the
/// `entry_step` lowest-noise steps.
pub fn inference_timesteps(
    sched: &NoiseSchedule,
    default_steps: usize,
    fraction: f64,
) -> Result<Vec<usize>> {
    let active = entry_step(default_steps, fraction)?;
    let stride = sched.total_steps() as f64 / default_steps as f64;
    let mut ts: Vec<usize> = (1..=active)
        .rev()
        .map(|k| ((stride * k as f64).round() as usize).clamp(1, sched.total_steps()))
        .collect();
    ts.dedup();
    Ok(ts)
}

/// Step-size schedule kinds for the global structure guidance. The timestep
/// flows from `T` down to 0 during denoising, so `Cosine` and
/// `LinearDecreasing` diminish the guidance as denoising proceeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GspScheduleKind {
    Cosine,
    LinearDecreasing,
    LinearIncreasing,
    Constant,
}

impl GspScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(GspScheduleKind::Cosine),
            "linear_decreasing" => Ok(GspScheduleKind::LinearDecreasing),
            "linear_increasing" => Ok(GspScheduleKind::LinearIncreasing),
            "constant" => Ok(GspScheduleKind::Constant),
            other => Err(Error::Config(format!(
                "unknown gsp schedule kind '{other}' \
                 (expected cosine, linear_decreasing, linear_increasing, or constant)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GspScheduleKind::Cosine => "cosine",
            GspScheduleKind::LinearDecreasing => "linear_decreasing",
            GspScheduleKind::LinearIncreasing => "linear_increasing",
            GspScheduleKind::Constant => "constant",
        }
    }
}

/// Step-size schedule for the global structure guidance update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GspSchedule {
    pub step_size: f64,
    pub kind: GspScheduleKind,
}

impl Default for GspSchedule {
    fn default() -> Self {
        GspSchedule {
            step_size: 0.2,
            kind: GspScheduleKind::Cosine,
        }
    }
}

/// Guidance step size at timestep `t` of a `total` step schedule.
///
/// Cosine: `s * (1 + cos((1 - t/T) * pi)) / 2`, so the weight is `s` at the
/// start of denoising (t = T) and 0 at the end (t = 0).
pub fn gsp_delta(t: usize, total: usize, gsp: &GspSchedule) -> f64 {
    let s = gsp.step_size;
    let frac = t as f64 / total as f64;
    match gsp.kind {
        GspScheduleKind::Cosine => s * (1.0 + ((1.0 - frac) * std::f64::consts::PI).cos()) / 2.0,
        GspScheduleKind::LinearDecreasing => s * frac,
        GspScheduleKind::LinearIncreasing => s * (1.0 - frac),
        GspScheduleKind::Constant => s,
    }
}
