//! Classifier-free guidance wrapper and the HTTP adapter that bridges the
//! pipeline to an out-of-process diffusion model service.
//!
//! Guidance lives here, not in the pipeline: the pipeline sees a single
//! noise prediction. The attention override applies to the text-conditional
//! branch only; the unconditional branch runs unmodified.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, AttentionPriorSet};
use crate::backends::{AttentionSite, DenoiseContext, Denoiser, TextCondition};
use crate::error::{Error, Result};
use crate::scheduler::{build_schedule, NoiseSchedule};
use crate::types::{Latent, Mat};

/// Applies classifier-free guidance around an inner denoiser:
/// `uncond + scale * (cond - uncond)`. A scale of 0 disables guidance and
/// returns the raw conditional prediction (one inner call).
pub struct CfgDenoiser<D> {
    inner: D,
    guidance_scale: f64,
    uncond: TextCondition,
}

impl<D: Denoiser> CfgDenoiser<D> {
    pub fn new(inner: D, guidance_scale: f64, uncond: TextCondition) -> Self {
        CfgDenoiser {
            inner,
            guidance_scale,
            uncond,
        }
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for CfgDenoiser<D> {
    fn predict_noise(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<Latent> {
        let conditional = self.inner.predict_noise(z, t, cond, ctx)?;
        if self.guidance_scale == 0.0 {
            return Ok(conditional);
        }
        let plain = DenoiseContext {
            region: ctx.region,
            attention_override: None,
        };
        let unconditional = self.inner.predict_noise(z, t, &self.uncond, &plain)?;
        let mut out = unconditional;
        for (u, c) in out.data.iter_mut().zip(conditional.data.iter()) {
            *u += self.guidance_scale * (c - *u);
        }
        Ok(out)
    }

    fn predict_noise_with_capture(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<(Latent, AttentionPriorSet)> {
        // Capture reads the conditional branch; guidance applies on top.
        let (conditional, set) = self.inner.predict_noise_with_capture(z, t, cond, ctx)?;
        if self.guidance_scale == 0.0 {
            return Ok((conditional, set));
        }
        let plain = DenoiseContext {
            region: ctx.region,
            attention_override: None,
        };
        let unconditional = self.inner.predict_noise(z, t, &self.uncond, &plain)?;
        let mut out = unconditional;
        for (u, c) in out.data.iter_mut().zip(conditional.data.iter()) {
            *u += self.guidance_scale * (c - *u);
        }
        Ok((out, set))
    }

    fn site_registry(&self) -> Vec<AttentionSite> {
        self.inner.site_registry()
    }

    fn native_region_size(&self) -> usize {
        self.inner.native_region_size()
    }

    fn default_steps(&self) -> usize {
        self.inner.default_steps()
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        self.inner.schedule()
    }

    fn exclusive(&self) -> bool {
        self.inner.exclusive()
    }
}

/// Connection settings for the diffusion model service.
#[derive(Debug, Clone)]
pub struct DiffusionServiceConfig {
    /// Base URL, e.g. `http://127.0.0.1:9041`.
    pub endpoint: String,
    /// Checkpoint path for the service to load, when it manages several.
    pub model_path: Option<String>,
    /// Device selection hint, e.g. `cuda:0`.
    pub device: Option<String>,
    pub timeout: Duration,
    pub guidance_scale: f64,
}

impl DiffusionServiceConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        DiffusionServiceConfig {
            endpoint: endpoint.into(),
            model_path: None,
            device: None,
            timeout: Duration::from_secs(120),
            guidance_scale: 7.5,
        }
    }
}

// Wire format. Tensor payloads travel as base64 little-endian f64.

#[derive(Debug, Serialize, Deserialize)]
pub struct ConnectRequest {
    pub model_path: Option<String>,
    pub device: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteWire {
    pub site_id: String,
    pub downsample_factor: usize,
    pub head_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceMetadata {
    pub native_region_size: usize,
    pub default_steps: usize,
    pub training_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sites: Vec<SiteWire>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LatentWire {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PriorWire {
    pub site_id: String,
    pub spatial_height: usize,
    pub spatial_width: usize,
    pub token_count: usize,
    pub downsample_factor: usize,
    pub scores_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    pub latent: LatentWire,
    pub timestep: usize,
    pub text: String,
    /// Global prompt backing the prior path; present when priors are sent.
    pub global_text: Option<String>,
    pub priors: Option<Vec<PriorWire>>,
    pub capture: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub latent: LatentWire,
    pub maps: Option<Vec<PriorWire>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EncodeRequest {
    /// Base64 PNG bytes.
    pub image_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub latent: LatentWire,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub latent: LatentWire,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecodeResponse {
    /// Base64 PNG bytes.
    pub image_b64: String,
}

fn b64(data: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn unb64(s: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Denoiser(format!("invalid tensor payload: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::Denoiser(format!(
            "tensor payload has {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl LatentWire {
    pub fn from_latent(z: &Latent) -> Self {
        LatentWire {
            channels: z.channels,
            height: z.height,
            width: z.width,
            data_b64: b64(&z.data),
        }
    }

    pub fn to_latent(&self) -> Result<Latent> {
        let data = unb64(&self.data_b64, self.channels * self.height * self.width)?;
        Ok(Latent {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }
}

impl PriorWire {
    pub fn from_map(map: &AttentionMap) -> Self {
        PriorWire {
            site_id: map.site_id.clone(),
            spatial_height: map.spatial_height,
            spatial_width: map.spatial_width,
            token_count: map.token_count,
            downsample_factor: map.downsample_factor,
            scores_b64: b64(&map.scores.data),
        }
    }

    pub fn to_map(&self) -> Result<AttentionMap> {
        let rows = self.spatial_height * self.spatial_width;
        let data = unb64(&self.scores_b64, rows * self.token_count)?;
        AttentionMap::new(
            self.spatial_height,
            self.spatial_width,
            Mat {
                rows,
                cols: self.token_count,
                data,
            },
            self.site_id.clone(),
            self.downsample_factor,
        )
    }
}

/// HTTP client for a remote denoiser implementing the wire protocol above:
/// `POST /v1/connect` returning [`ServiceMetadata`], then
/// `POST /v1/predict_noise` per call. Guidance is applied client side, so
/// each guided prediction issues a conditional request (with priors) and an
/// unconditional one (empty text, no priors).
pub struct DiffusionServiceAdapter {
    agent: ureq::Agent,
    base: String,
    meta: ServiceMetadata,
    guidance_scale: f64,
}

impl DiffusionServiceAdapter {
    /// Connects and fetches metadata. Unreachable or incompatible services
    /// fail here with a diagnostic, not at first use.
    pub fn connect(config: &DiffusionServiceConfig) -> Result<Self> {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build();
        let agent = ureq::Agent::new_with_config(agent_config);
        let url = format!("{}/v1/connect", config.endpoint.trim_end_matches('/'));
        let body = ConnectRequest {
            model_path: config.model_path.clone(),
            device: config.device.clone(),
        };
        let mut response = agent.post(&url).send_json(&body).map_err(|e| {
            Error::Denoiser(format!("cannot reach diffusion service at {url}: {e}"))
        })?;
        let meta: ServiceMetadata = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Denoiser(format!("malformed service metadata: {e}")))?;
        if meta.native_region_size == 0 || meta.training_steps == 0 || meta.default_steps == 0 {
            return Err(Error::Denoiser(format!(
                "incompatible service metadata: {meta:?}"
            )));
        }
        Ok(DiffusionServiceAdapter {
            agent,
            base: config.endpoint.trim_end_matches('/').to_string(),
            meta,
            guidance_scale: config.guidance_scale,
        })
    }

    pub fn metadata(&self) -> &ServiceMetadata {
        &self.meta
    }

    fn request(&self, req: &PredictRequest) -> Result<PredictResponse> {
        let url = format!("{}/v1/predict_noise", self.base);
        let mut response = self
            .agent
            .post(&url)
            .send_json(req)
            .map_err(|e| Error::Denoiser(format!("predict_noise request failed: {e}")))?;
        response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Denoiser(format!("malformed predict_noise response: {e}")))
    }

    fn predict_one(
        &self,
        z: &Latent,
        t: usize,
        text: &str,
        ctx: &DenoiseContext,
        capture: bool,
    ) -> Result<PredictResponse> {
        let (priors, global_text) = match ctx.attention_override {
            Some(ov) => {
                let mut wires: Vec<PriorWire> =
                    ov.priors.values().map(PriorWire::from_map).collect();
                wires.sort_by(|a, b| a.site_id.cmp(&b.site_id));
                (Some(wires), Some(ov.global_condition.text.clone()))
            }
            None => (None, None),
        };
        self.request(&PredictRequest {
            latent: LatentWire::from_latent(z),
            timestep: t,
            text: text.to_string(),
            global_text,
            priors,
            capture,
        })
    }
}

impl Denoiser for DiffusionServiceAdapter {
    fn predict_noise(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<Latent> {
        let conditional = self
            .predict_one(z, t, &cond.text, ctx, false)?
            .latent
            .to_latent()?;
        if self.guidance_scale == 0.0 {
            return Ok(conditional);
        }
        let plain = DenoiseContext {
            region: ctx.region,
            attention_override: None,
        };
        let unconditional = self
            .predict_one(z, t, "", &plain, false)?
            .latent
            .to_latent()?;
        let mut out = unconditional;
        for (u, c) in out.data.iter_mut().zip(conditional.data.iter()) {
            *u += self.guidance_scale * (c - *u);
        }
        Ok(out)
    }

    fn predict_noise_with_capture(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<(Latent, AttentionPriorSet)> {
        let response = self.predict_one(z, t, &cond.text, ctx, true)?;
        let conditional = response.latent.to_latent()?;
        let maps = response
            .maps
            .unwrap_or_default()
            .iter()
            .map(PriorWire::to_map)
            .collect::<Result<Vec<_>>>()?;
        let set = AttentionPriorSet { maps, timestep: t };
        if self.guidance_scale == 0.0 {
            return Ok((conditional, set));
        }
        let plain = DenoiseContext {
            region: ctx.region,
            attention_override: None,
        };
        let unconditional = self
            .predict_one(z, t, "", &plain, false)?
            .latent
            .to_latent()?;
        let mut out = unconditional;
        for (u, c) in out.data.iter_mut().zip(conditional.data.iter()) {
            *u += self.guidance_scale * (c - *u);
        }
        Ok((out, set))
    }

    fn site_registry(&self) -> Vec<AttentionSite> {
        self.meta
            .sites
            .iter()
            .map(|s| AttentionSite {
                site_id: s.site_id.clone(),
                downsample_factor: s.downsample_factor,
                head_count: s.head_count,
            })
            .collect()
    }

    fn native_region_size(&self) -> usize {
        self.meta.native_region_size
    }

    fn default_steps(&self) -> usize {
        self.meta.default_steps
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(
            self.meta.training_steps,
            (self.meta.beta_min, self.meta.beta_max),
        )
    }

    fn exclusive(&self) -> bool {
        // One remote model process; keep calls serialized.
        true
    }
}

/// HTTP client for the codec half of the service: `POST /v1/encode` and
/// `POST /v1/decode` with base64 PNG payloads.
pub struct RemoteCodec {
    agent: ureq::Agent,
    base: String,
}

impl RemoteCodec {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        RemoteCodec {
            agent: ureq::Agent::new_with_config(config),
            base: endpoint.into().trim_end_matches('/').to_string(),
        }
    }
}

impl crate::backends::LatentCodec for RemoteCodec {
    fn encode(&self, image: &crate::types::Image) -> Result<Latent> {
        let png = crate::imageio::encode_png_bytes(image)?;
        let body = EncodeRequest {
            image_b64: base64::engine::general_purpose::STANDARD.encode(png),
        };
        let url = format!("{}/v1/encode", self.base);
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| Error::Codec(format!("encode request failed: {e}")))?;
        let parsed: EncodeResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Codec(format!("malformed encode response: {e}")))?;
        parsed.latent.to_latent()
    }

    fn decode(&self, latent: &Latent) -> Result<crate::types::Image> {
        let body = DecodeRequest {
            latent: LatentWire::from_latent(latent),
        };
        let url = format!("{}/v1/decode", self.base);
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| Error::Codec(format!("decode request failed: {e}")))?;
        let parsed: DecodeResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Codec(format!("malformed decode response: {e}")))?;
        let png = base64::engine::general_purpose::STANDARD
            .decode(&parsed.image_b64)
            .map_err(|e| Error::Codec(format!("invalid image payload: {e}")))?;
        crate::imageio::decode_png(&png)
    }
}
