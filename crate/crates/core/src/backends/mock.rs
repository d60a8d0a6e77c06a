//! Deterministic mock backends: a miniature cross-attention denoiser, an
//! average-pooling latent codec, a word-hash text conditioner, and captioner
//! stand-ins (echoing, counting, flaky) for tests and desk-scale runs.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::attention::{attention_scores, AttentionMap, AttentionPriorSet};
use crate::backends::{
    AttentionSite, Captioner, DenoiseContext, Denoiser, LatentCodec, TextCondition, TextConditioner,
};
use crate::error::{Error, Result};
use crate::types::{Image, Latent, Mat, LATENT_CHANNELS};

/// SplitMix64, used to derive fixed mock parameters from string seeds.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform value in [-1, 1) from a SplitMix64 stream.
fn unit(state: &mut u64) -> f64 {
    (splitmix64(state) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn seeded_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut state = seed;
    Mat::from_fn(rows, cols, |_, _| unit(&mut state))
}

fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

const MOCK_DIM: usize = 4;

/// Whitespace-tokenizing conditioner: each word hashes to a fixed embedding.
/// A leading start token keeps empty text encodable.
#[derive(Debug, Clone)]
pub struct MockTextConditioner {
    max_tokens: usize,
}

impl MockTextConditioner {
    pub fn new() -> Self {
        MockTextConditioner { max_tokens: 77 }
    }
}

impl Default for MockTextConditioner {
    fn default() -> Self {
        Self::new()
    }
}

impl TextConditioner for MockTextConditioner {
    fn encode(&self, text: &str) -> Result<TextCondition> {
        let mut embeddings: Vec<Vec<f64>> = Vec::new();
        let mut bos = 0x5eed;
        embeddings.push((0..MOCK_DIM).map(|_| unit(&mut bos)).collect());
        for word in text.split_whitespace().take(self.max_tokens - 1) {
            let mut state = fnv1a(word.as_bytes());
            embeddings.push((0..MOCK_DIM).map(|_| unit(&mut state)).collect());
        }
        Ok(TextCondition {
            text: text.to_string(),
            tokens: Mat::from_rows(embeddings)?,
        })
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }
}

struct SiteParams {
    info: AttentionSite,
    w_q: Mat,
    w_k: Mat,
    w_v: Mat,
}

/// A tiny deterministic "network" with real cross-attention sites, so the
/// attention capture, override, and composer plumbing is exercised end to
/// end. Pure function of (latent, timestep, condition, override).
pub struct MockDenoiser {
    sites: Vec<SiteParams>,
    native_region_size: usize,
}

impl MockDenoiser {
    pub fn new() -> Self {
        let mk = |site_id: &str, factor: usize, seed: u64| SiteParams {
            info: AttentionSite {
                site_id: site_id.to_string(),
                downsample_factor: factor,
                head_count: 1,
            },
            w_q: seeded_mat(MOCK_DIM, MOCK_DIM, seed),
            w_k: seeded_mat(MOCK_DIM, MOCK_DIM, seed ^ 0x4b65),
            w_v: seeded_mat(MOCK_DIM, MOCK_DIM, seed ^ 0x5641),
        };
        MockDenoiser {
            sites: vec![mk("down.0.h0", 1, 101), mk("mid.0.h0", 2, 202)],
            native_region_size: 16,
        }
    }

    fn queries(&self, z: &Latent, site: &SiteParams) -> Result<Mat> {
        let f = site.info.downsample_factor;
        if !z.height.is_multiple_of(f) || !z.width.is_multiple_of(f) {
            return Err(Error::Denoiser(format!(
                "latent {}x{} is not divisible by site factor {f}",
                z.height, z.width
            )));
        }
        let (gh, gw) = (z.height / f, z.width / f);
        let pooled = Mat::from_fn(gh * gw, MOCK_DIM, |cell, c| {
            let (gy, gx) = (cell / gw, cell % gw);
            let mut sum = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    sum += z.get(c, gy * f + dy, gx * f + dx);
                }
            }
            sum / (f * f) as f64
        });
        pooled.matmul(&site.w_q)
    }

    fn forward(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
        capture: bool,
    ) -> Result<(Latent, Vec<AttentionMap>)> {
        if z.channels != LATENT_CHANNELS {
            return Err(Error::Denoiser(format!(
                "mock denoiser expects {LATENT_CHANNELS} channels, got {}",
                z.channels
            )));
        }
        let mut maps = Vec::new();
        let mut mixed = Latent::zeros(z.channels, z.height, z.width);
        for site in &self.sites {
            let f = site.info.downsample_factor;
            let (gh, gw) = (z.height / f, z.width / f);
            let q = self.queries(z, site)?;
            let k = cond.tokens.matmul(&site.w_k)?;
            let v = cond.tokens.matmul(&site.w_v)?;
            if capture {
                let scores = attention_scores(&q, &k)?;
                maps.push(AttentionMap::new(
                    gh,
                    gw,
                    scores,
                    site.info.site_id.clone(),
                    f,
                )?);
            }
            let attended = match ctx
                .attention_override
                .and_then(|ov| ov.priors.get(&site.info.site_id).map(|p| (ov, p)))
            {
                Some((ov, prior)) => {
                    let v_global = ov.global_condition.tokens.matmul(&site.w_v)?;
                    (ov.compose)(&q, &k, &v, prior, &v_global)?
                }
                None => attention_scores(&q, &k)?.matmul(&v)?,
            };
            // Nearest-neighbor upsample of the attended features back to the
            // latent resolution; feature channels map onto latent channels.
            for c in 0..z.channels {
                for y in 0..z.height {
                    for x in 0..z.width {
                        let cell = (y / f) * gw + (x / f);
                        let v0 = mixed.get(c, y, x) + attended.get(cell, c);
                        mixed.set(c, y, x, v0);
                    }
                }
            }
        }
        let nsites = self.sites.len() as f64;
        let tphase = (0.003 * t as f64).sin();
        let eps = Latent::from_fn(z.channels, z.height, z.width, |c, y, x| {
            (0.5 * z.get(c, y, x) + 0.4 * mixed.get(c, y, x) / nsites + 0.1 * tphase).tanh()
        });
        Ok((eps, maps))
    }
}

impl Default for MockDenoiser {
    fn default() -> Self {
        Self::new()
    }
}

impl Denoiser for MockDenoiser {
    fn predict_noise(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<Latent> {
        Ok(self.forward(z, t, cond, ctx, false)?.0)
    }

    fn predict_noise_with_capture(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<(Latent, AttentionPriorSet)> {
        let (eps, maps) = self.forward(z, t, cond, ctx, true)?;
        Ok((eps, AttentionPriorSet { maps, timestep: t }))
    }

    fn site_registry(&self) -> Vec<AttentionSite> {
        self.sites.iter().map(|s| s.info.clone()).collect()
    }

    fn native_region_size(&self) -> usize {
        self.native_region_size
    }
}

/// Lossy test codec: encode is 8x8 average pooling of the channel mean,
/// replicated to 4 latent channels; decode is a nearest-neighbor 8x upsample
/// of channel 0. Exact round-trip on 8x8-block-constant images.
pub struct MockCodec;

pub const CODEC_FACTOR: usize = 8;

impl LatentCodec for MockCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        if !image.height.is_multiple_of(CODEC_FACTOR) || !image.width.is_multiple_of(CODEC_FACTOR) {
            return Err(Error::Codec(format!(
                "image {}x{} is not divisible by {CODEC_FACTOR}",
                image.height, image.width
            )));
        }
        let (lh, lw) = (image.height / CODEC_FACTOR, image.width / CODEC_FACTOR);
        let mut latent = Latent::zeros(LATENT_CHANNELS, lh, lw);
        let mut block = [0.0; CODEC_FACTOR * CODEC_FACTOR];
        for y in 0..lh {
            for x in 0..lw {
                for dy in 0..CODEC_FACTOR {
                    for dx in 0..CODEC_FACTOR {
                        block[dy * CODEC_FACTOR + dx] =
                            image.luma(y * CODEC_FACTOR + dy, x * CODEC_FACTOR + dx);
                    }
                }
                // Pairwise sum over the 64-cell block: exact for constant
                // blocks, so block-constant images round-trip bit for bit.
                let v = pairwise_sum(&block) / (CODEC_FACTOR * CODEC_FACTOR) as f64;
                for c in 0..LATENT_CHANNELS {
                    latent.set(c, y, x, v);
                }
            }
        }
        Ok(latent)
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let mut image = Image::zeros(latent.height * CODEC_FACTOR, latent.width * CODEC_FACTOR, 1);
        for y in 0..image.height {
            for x in 0..image.width {
                image.set(y, x, 0, latent.get(0, y / CODEC_FACTOR, x / CODEC_FACTOR));
            }
        }
        Ok(image)
    }
}

/// Deterministic captioner: hashes the region pixels and instruction into a
/// stable pseudo-description.
pub struct MockCaptioner;

impl Captioner for MockCaptioner {
    fn describe(&self, image: &Image, instruction: &str) -> Result<String> {
        let mut bytes = image.to_u8();
        bytes.extend_from_slice(instruction.as_bytes());
        Ok(format!(
            "a finely textured regional view {:016x} at {}x{}",
            fnv1a(&bytes),
            image.width,
            image.height
        ))
    }

    fn model_id(&self) -> &str {
        "mock-captioner-v1"
    }
}

/// Wraps a denoiser and counts predict/capture calls.
pub struct CountingDenoiser<D> {
    inner: D,
    predicts: AtomicUsize,
    captures: AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        CountingDenoiser {
            inner,
            predicts: AtomicUsize::new(0),
            captures: AtomicUsize::new(0),
        }
    }

    pub fn predict_calls(&self) -> usize {
        self.predicts.load(Ordering::SeqCst)
    }

    pub fn capture_calls(&self) -> usize {
        self.captures.load(Ordering::SeqCst)
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn predict_noise(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<Latent> {
        self.predicts.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise(z, t, cond, ctx)
    }

    fn predict_noise_with_capture(
        &self,
        z: &Latent,
        t: usize,
        cond: &TextCondition,
        ctx: &DenoiseContext,
    ) -> Result<(Latent, AttentionPriorSet)> {
        self.captures.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise_with_capture(z, t, cond, ctx)
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

    fn schedule(&self) -> Result<crate::scheduler::NoiseSchedule> {
        self.inner.schedule()
    }

    fn exclusive(&self) -> bool {
        self.inner.exclusive()
    }
}

/// Wraps a captioner and counts describe calls.
pub struct CountingCaptioner<C> {
    inner: C,
    calls: AtomicUsize,
}

impl<C: Captioner> CountingCaptioner<C> {
    pub fn new(inner: C) -> Self {
        CountingCaptioner {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<C: Captioner> Captioner for CountingCaptioner<C> {
    fn describe(&self, image: &Image, instruction: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.describe(image, instruction)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

/// Fails the first `failures` describe calls, then succeeds. Fault-injection
/// harness for the retry and fallback paths.
pub struct FlakyCaptioner {
    failures: usize,
    calls: AtomicUsize,
}

impl FlakyCaptioner {
    pub fn new(failures: usize) -> Self {
        FlakyCaptioner {
            failures,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Captioner for FlakyCaptioner {
    fn describe(&self, _image: &Image, _instruction: &str) -> Result<String> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            Err(Error::Captioner(format!("injected failure {}", n + 1)))
        } else {
            Ok("recovered description".to_string())
        }
    }

    fn model_id(&self) -> &str {
        "flaky-captioner"
    }
}
