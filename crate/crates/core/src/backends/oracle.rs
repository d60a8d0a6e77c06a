//! The oracle denoiser: predicts exactly the noise for which the clean
//! estimate equals a known target latent. Rollouts against it converge to
//! the target, which makes sampler and pipeline behavior checkable without
//! a neural network.

use crate::backends::{DenoiseContext, Denoiser, TextCondition};
use crate::error::{Error, Result};
use crate::scheduler::NoiseSchedule;
use crate::tiling::crop;
use crate::types::Latent;

/// Denoiser whose prediction reconstructs `target`:
/// `eps = (z_t - sqrt(abar_t) * target) / sqrt(1 - abar_t)`.
///
/// With `damping < 1` the prediction is scaled, so the clean estimate
/// becomes `damping * target + (1 - damping) * z_t / sqrt(abar_t)`: the
/// estimate keeps a dependence on the current latent, like an imperfect
/// model, while still being pulled toward the target each step.
pub struct OracleDenoiser {
    target: Latent,
    damping: f64,
    sched: NoiseSchedule,
    native_region_size: usize,
}

impl OracleDenoiser {
    pub fn new(target: Latent) -> Result<Self> {
        let sched = crate::scheduler::build_schedule(1000, (0.00085, 0.012))?;
        let native = target.height.min(target.width);
        Ok(OracleDenoiser {
            target,
            damping: 1.0,
            sched,
            native_region_size: native,
        })
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn with_native_region_size(mut self, size: usize) -> Self {
        self.native_region_size = size;
        self
    }

    pub fn target(&self) -> &Latent {
        &self.target
    }

    fn target_window(&self, z: &Latent, ctx: &DenoiseContext) -> Result<Latent> {
        match ctx.region {
            Some(spec) => {
                let cropped = crop(&self.target, &spec).map_err(|e| {
                    Error::Denoiser(format!("oracle target has no region {}: {e}", spec.index))
                })?;
                if !cropped.same_shape(z) {
                    return Err(Error::Denoiser(format!(
                        "oracle region {:?} does not match input {:?}",
                        cropped.shape_of(),
                        z.shape_of()
                    )));
                }
                Ok(cropped)
            }
            None => {
                if !self.target.same_shape(z) {
                    return Err(Error::Denoiser(format!(
                        "oracle target {:?} does not match input {:?}",
                        self.target.shape_of(),
                        z.shape_of()
                    )));
                }
                Ok(self.target.clone())
            }
        }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict_noise(
        &self,
        z: &Latent,
        t: usize,
        _cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<Latent> {
        if t == 0 {
            return Err(Error::Argument(
                "oracle prediction undefined at t = 0".into(),
            ));
        }
        if t > self.sched.total_steps() {
            return Err(Error::Argument(format!(
                "timestep {t} exceeds schedule length {}",
                self.sched.total_steps()
            )));
        }
        let target = self.target_window(z, ctx)?;
        let abar = self.sched.alpha_bar(t);
        let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
        let mut eps = z.clone();
        for (e, tv) in eps.data.iter_mut().zip(target.data.iter()) {
            *e = self.damping * (*e - a * tv) / b;
        }
        Ok(eps)
    }

    fn native_region_size(&self) -> usize {
        self.native_region_size
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(self.sched.clone())
    }
}
