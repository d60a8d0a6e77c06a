//! Pluggable interfaces isolating every neural component (denoiser, latent
//! codec, text conditioner, captioner), plus deterministic mock
//! implementations and the oracle denoiser that make the full pipeline
//! testable at desk scale.

pub mod mock;
pub mod oracle;
pub mod service;

use std::collections::HashMap;

use crate::attention::{compose_attention, AttentionMap, AttentionPriorSet};
use crate::error::Result;
use crate::scheduler::{build_schedule, NoiseSchedule};
use crate::tiling::RegionSpec;
use crate::types::{Image, Latent, Mat};

/// One cross-attention site of a denoiser, as reported by its registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSite {
    pub site_id: String,
    pub downsample_factor: usize,
    pub head_count: usize,
}

/// A text encoding, carrying both the raw text (for remote backends that
/// re-encode server-side) and token embeddings (for in-process backends).
#[derive(Debug, Clone)]
pub struct TextCondition {
    pub text: String,
    pub tokens: Mat,
}

/// The composer callback: `(q_region, k_semantic, v_semantic, prior scores,
/// v_global) -> attended features`.
pub type ComposeFn = fn(&Mat, &Mat, &Mat, &AttentionMap, &Mat) -> Result<Mat>;

/// Per-region attention override: captured prior scores per site plus the
/// global text condition whose value projection feeds the prior path. Sites
/// without an entry run their regular attention.
pub struct AttentionOverride<'a> {
    pub priors: &'a HashMap<String, AttentionMap>,
    pub global_condition: &'a TextCondition,
    pub compose: ComposeFn,
}

impl<'a> AttentionOverride<'a> {
    pub fn new(
        priors: &'a HashMap<String, AttentionMap>,
        global_condition: &'a TextCondition,
    ) -> Self {
        AttentionOverride {
            priors,
            global_condition,
            compose: compose_attention,
        }
    }
}

/// Call-site context for a denoiser invocation.
#[derive(Default)]
pub struct DenoiseContext<'a> {
    /// Placement of the given latent within the full canvas, when known.
    pub region: Option<RegionSpec>,
    pub attention_override: Option<&'a AttentionOverride<'a>>,
}

impl<'a> DenoiseContext<'a> {
    pub fn plain() -> Self {
        DenoiseContext::default()
    }

    pub fn for_region(spec: RegionSpec) -> Self {
        DenoiseContext {
            region: Some(spec),
            attention_override: None,
        }
    }
}

/// Noise-prediction backend. Implementations must be deterministic: two
/// calls with identical inputs return identical outputs.
pub trait Denoiser: Send + Sync {
    fn predict_noise(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<Latent>;

    /// Like [`Denoiser::predict_noise`] but also returns the cross-attention
    /// scores observed at every registered site.
    fn predict_noise_with_capture(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<(Latent, AttentionPriorSet)> {
        Ok((
            self.predict_noise(z, t, cond, ctx)?,
            AttentionPriorSet::empty(t),
        ))
    }

    fn site_registry(&self) -> Vec<AttentionSite> {
        Vec::new()
    }

    /// The model's native region size, in latent units.
    fn native_region_size(&self) -> usize;

    /// The model's default number of inference steps over the full schedule.
    fn default_steps(&self) -> usize {
        50
    }

    /// The training noise schedule. Adapters override this with the served
    /// model's table.
    fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(1000, (0.00085, 0.012))
    }

    /// Whether calls must be serialized. The pipeline fans regions out
    /// concurrently unless this returns true.
    fn exclusive(&self) -> bool {
        false
    }
}

/// Image-to-latent codec (4 channels at 1/8 pixel resolution).
pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &Image) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<Image>;
}

/// Deterministic text encoder with a fixed token budget.
pub trait TextConditioner: Send + Sync {
    fn encode(&self, text: &str) -> Result<TextCondition>;
    fn max_tokens(&self) -> usize;
}

/// Multimodal captioner: produces a description of an image under an
/// instruction. Failures are degradable at the call site.
pub trait Captioner: Send + Sync {
    fn describe(&self, image: &Image, instruction: &str) -> Result<String>;
    fn model_id(&self) -> &str;
}

/// The full backend set a pipeline run needs. The prompt cache rides along
/// with the captioner; when absent, captions are deduplicated only within
/// the run.
pub struct BackendSet<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn LatentCodec,
    pub conditioner: &'a dyn TextConditioner,
    pub captioner: Option<&'a dyn Captioner>,
    pub prompt_cache: Option<&'a crate::prompts::PromptCache>,
}
