//! End-to-end orchestration: encode, caption, noise, per-step attention
//! capture and regional denoising through the composer, merge, structure
//! guidance, decode.
//!
//! Per step, the captured low-resolution attention is interpolated to the
//! high-resolution site grids and cropped per region; each region is
//! denoised under its regional prompt with the composed attention; the
//! stepped latents and clean estimates are merged with uniform-mean fusion;
//! the structure-guidance update is applied to the merged stepped latent.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{crop_attention, interpolate_attention, AttentionMap};
use crate::backends::{AttentionOverride, BackendSet, DenoiseContext, Denoiser, TextCondition};
use crate::error::{Error, Result};
use crate::prompts::{caption_all, PromptCache, PromptSource, RegionalPrompt, RetryPolicy};
use crate::scheduler::{
    add_noise, ddim_step, gsp_delta, inference_timesteps, predict_z0, GspSchedule, NoiseSchedule,
};
use crate::tiling::{crop, merge, partition, scale_spec, Partition, RegionSpec};
use crate::types::{Image, Latent};
use crate::wavelet;

/// Pixel-to-latent scale of the codecs.
pub const LATENT_FACTOR: usize = 8;

/// Bounded fan-out for per-region denoising within a sweep.
const DENOISE_WORKERS: usize = 4;

/// Full configuration of an upscale run.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Output size in pixels.
    pub target_height: usize,
    pub target_width: usize,
    /// Fraction of the default step count to actually run (noise strength).
    pub noise_fraction: f64,
    pub gsp: GspSchedule,
    pub wavelet_levels: usize,
    /// Region size in latent units; `None` uses the backend's native size.
    pub region_size: Option<usize>,
    /// Overlap in latent units; `None` uses half the region size.
    pub overlap: Option<usize>,
    /// Classifier-free guidance scale; consumed by denoiser adapters, not
    /// by the step loop.
    pub guidance_scale: f64,
    pub seed: u64,
    pub enable_gsp: bool,
    pub enable_rap: bool,
    pub enable_rsp: bool,
    /// Base inference step count; `None` uses the backend default.
    pub default_steps: Option<usize>,
    /// When set, every post-update merged latent is dumped here along with a
    /// line-delimited JSON manifest.
    pub dump_dir: Option<PathBuf>,
    pub caption_max_in_flight: usize,
    pub caption_retry: RetryPolicy,
}

impl PipelineConfig {
    pub fn new(target_height: usize, target_width: usize) -> Self {
        PipelineConfig {
            target_height,
            target_width,
            noise_fraction: 0.45,
            gsp: GspSchedule::default(),
            wavelet_levels: 1,
            region_size: None,
            overlap: None,
            guidance_scale: 7.5,
            seed: 0,
            enable_gsp: true,
            enable_rap: true,
            enable_rsp: true,
            default_steps: None,
            dump_dir: None,
            caption_max_in_flight: 4,
            caption_retry: RetryPolicy::default(),
        }
    }

    fn validate(&self, low: &Image) -> Result<()> {
        if !(self.noise_fraction > 0.0 && self.noise_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "noise_fraction {} must lie in (0, 1]",
                self.noise_fraction
            )));
        }
        if !(1..=3).contains(&self.wavelet_levels) {
            return Err(Error::Config(format!(
                "wavelet_levels {} must be 1, 2, or 3",
                self.wavelet_levels
            )));
        }
        let divisor = LATENT_FACTOR << self.wavelet_levels;
        if !self.target_height.is_multiple_of(divisor) || !self.target_width.is_multiple_of(divisor)
        {
            return Err(Error::Config(format!(
                "target {}x{} must be divisible by {divisor} \
                 (latent factor {LATENT_FACTOR} times 2^wavelet_levels)",
                self.target_height, self.target_width
            )));
        }
        if low.height > self.target_height || low.width > self.target_width {
            return Err(Error::Config(format!(
                "input {}x{} exceeds target {}x{}",
                low.height, low.width, self.target_height, self.target_width
            )));
        }
        if !low.height.is_multiple_of(LATENT_FACTOR) || !low.width.is_multiple_of(LATENT_FACTOR) {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by {LATENT_FACTOR}",
                low.height, low.width
            )));
        }
        Ok(())
    }
}

/// Wall-clock breakdown of an upscale run.
#[derive(Debug, Clone, Default)]
pub struct PhaseTimings {
    pub denoise: Duration,
    pub caption: Duration,
    pub guidance: Duration,
    pub total: Duration,
}

/// Everything an upscale run produces besides its side effects.
#[derive(Debug)]
pub struct RunArtifacts {
    pub image: Image,
    /// Structure-alignment loss per step, before that step's update.
    pub gsp_loss_trace: Vec<f64>,
    pub prompts: Vec<RegionalPrompt>,
    pub timings: PhaseTimings,
    pub region_count: usize,
    pub steps: usize,
    pub entry_timestep: usize,
}

/// The two independent seeded noise streams: one for the high-resolution
/// entry noise, one for the per-step re-noising of the low-resolution latent
/// used by attention capture.
pub fn noise_rngs(seed: u64) -> (ChaCha12Rng, ChaCha12Rng) {
    let mut high = ChaCha12Rng::seed_from_u64(seed);
    high.set_stream(0);
    let mut low = ChaCha12Rng::seed_from_u64(seed);
    low.set_stream(1);
    (high, low)
}

/// One structure-guidance update on the merged stepped latent:
/// `z - delta_t * grad`, where the gradient compares the merged clean
/// estimate's low-frequency component against the precomputed target.
pub fn gsp_apply(
    z_merged: &Latent,
    z0_hat_merged: &Latent,
    ll_target: &Latent,
    t: usize,
    gsp: &GspSchedule,
    wavelet_levels: usize,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    let delta = gsp_delta(t, sched.total_steps(), gsp);
    if delta == 0.0 {
        return Ok(z_merged.clone());
    }
    let lf_hat = wavelet::low_frequency_latent(z0_hat_merged, wavelet_levels)?;
    let grad = wavelet::gsp_gradient_from_lf(
        &lf_hat,
        ll_target,
        t,
        sched,
        wavelet_levels,
        z0_hat_merged.shape_of(),
    )?;
    let mut out = z_merged.clone();
    out.add_scaled(&grad, -delta)?;
    Ok(out)
}

/// Plain diffuse-then-denoise over the whole canvas: noise the base latent
/// to the entry step and roll the deterministic sampler down. With all
/// priors disabled and a single full-canvas region, the pipeline reduces to
/// exactly this.
pub fn diffuse_then_denoise(
    z_base: &Latent,
    cond: &TextCondition,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    default_steps: usize,
    noise_fraction: f64,
    seed: u64,
) -> Result<Latent> {
    let ts = inference_timesteps(sched, default_steps, noise_fraction)?;
    let (mut rng_h, _) = noise_rngs(seed);
    let eps = Latent::gaussian(z_base.channels, z_base.height, z_base.width, &mut rng_h);
    let mut z = add_noise(z_base, ts[0], &eps, sched)?;
    let full = RegionSpec {
        index: 0,
        top: 0,
        left: 0,
        height: z_base.height,
        width: z_base.width,
    };
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps_hat = denoiser.predict_noise(&z, t, cond, &DenoiseContext::for_region(full))?;
        z = ddim_step(&z, &eps_hat, t, t_prev, sched)?;
    }
    Ok(z)
}

/// One line of the intermediate-dump manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpRecord {
    pub step_index: usize,
    pub timestep: usize,
    pub file: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub gsp_loss: f64,
}

struct DumpWriter {
    dir: PathBuf,
    manifest: BufWriter<File>,
}

impl DumpWriter {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let manifest = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
        Ok(DumpWriter {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn write_step(
        &mut self,
        step_index: usize,
        timestep: usize,
        z: &Latent,
        loss: f64,
    ) -> Result<()> {
        let file = format!("step_{step_index:04}.bin");
        let mut out = BufWriter::new(File::create(self.dir.join(&file))?);
        for v in &z.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        let record = DumpRecord {
            step_index,
            timestep,
            file,
            channels: z.channels,
            height: z.height,
            width: z.width,
            dtype: "f64le".to_string(),
            gsp_loss: loss,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?;
        writeln!(self.manifest, "{line}")?;
        self.manifest.flush()?;
        Ok(())
    }
}

/// Reads a dump directory back: manifest records with their latents, in
/// manifest order.
pub fn read_dump(dir: &Path) -> Result<Vec<(DumpRecord, Latent)>> {
    let manifest = File::open(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for line in BufReader::new(manifest).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DumpRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Internal(format!("malformed manifest line: {e}")))?;
        if record.dtype != "f64le" {
            return Err(Error::Internal(format!(
                "unsupported dump dtype {}",
                record.dtype
            )));
        }
        let mut bytes = Vec::new();
        File::open(dir.join(&record.file))?.read_to_end(&mut bytes)?;
        let expected = record.channels * record.height * record.width * 8;
        if bytes.len() != expected {
            return Err(Error::Internal(format!(
                "dump file {} has {} bytes, expected {expected}",
                record.file,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let latent = Latent {
            channels: record.channels,
            height: record.height,
            width: record.width,
            data,
        };
        out.push((record, latent));
    }
    Ok(out)
}

fn regional_prompts(
    low_resized: &Image,
    part: &Partition,
    global_prompt: &str,
    config: &PipelineConfig,
    backends: &BackendSet,
) -> Result<Vec<RegionalPrompt>> {
    if !config.enable_rsp {
        return Ok(part
            .regions
            .iter()
            .map(|r| RegionalPrompt {
                region_index: r.index,
                text: global_prompt.to_string(),
                source: PromptSource::Fallback,
            })
            .collect());
    }
    let captioner = backends.captioner.ok_or_else(|| {
        Error::Config("regional semantic prior enabled but no captioner configured".into())
    })?;
    let local_cache;
    let cache: &PromptCache = match backends.prompt_cache {
        Some(c) => c,
        None => {
            local_cache = PromptCache::in_memory();
            &local_cache
        }
    };
    caption_all(
        captioner,
        low_resized,
        &part.scale_up(LATENT_FACTOR),
        global_prompt,
        cache,
        &config.caption_retry,
        backends.conditioner.max_tokens(),
        config.caption_max_in_flight,
    )
}

/// A region's stepped latent and its clean estimate.
type RegionOutputs = (Latent, Latent);

/// Per-sweep regional denoising: crop, condition, denoise with the composed
/// attention, step, and estimate the clean latent. Returns `(stepped, z0)`
/// per region in region order.
#[allow(clippy::too_many_arguments)]
fn denoise_regions(
    z_t: &Latent,
    part: &Partition,
    conds: &[TextCondition],
    global_cond: &TextCondition,
    prior_maps: Option<&[AttentionMap]>,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    t: usize,
    t_prev: usize,
) -> Result<Vec<RegionOutputs>> {
    let run_one = |spec: &RegionSpec| -> Result<RegionOutputs> {
        let z_n = crop(z_t, spec)?;
        let mut cropped: HashMap<String, AttentionMap> = HashMap::new();
        if let Some(maps) = prior_maps {
            for map in maps {
                let site_spec = scale_spec(spec, map.downsample_factor);
                cropped.insert(map.site_id.clone(), crop_attention(map, &site_spec)?);
            }
        }
        let override_value =
            (!cropped.is_empty()).then(|| AttentionOverride::new(&cropped, global_cond));
        let ctx = DenoiseContext {
            region: Some(*spec),
            attention_override: override_value.as_ref(),
        };
        let eps_hat = denoiser.predict_noise(&z_n, t, &conds[spec.index], &ctx)?;
        let stepped = ddim_step(&z_n, &eps_hat, t, t_prev, sched)?;
        let z0 = predict_z0(&z_n, &eps_hat, t, sched)?;
        Ok((stepped, z0))
    };

    let n = part.len();
    if denoiser.exclusive() || n == 1 {
        return part.regions.iter().map(run_one).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RegionOutputs>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..DENOISE_WORKERS.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let outcome = run_one(&part.regions[i]);
                results.lock().expect("region results")[i] = Some(outcome);
            });
        }
    });
    let collected = results.into_inner().expect("region results");
    collected
        .into_iter()
        .enumerate()
        .map(|(i, slot)| {
            slot.unwrap_or_else(|| Err(Error::Internal(format!("region {i} never denoised"))))
        })
        .collect()
}

/// Runs the full upscaling procedure.
pub fn upscale(
    low_image: &Image,
    global_prompt: &str,
    config: &PipelineConfig,
    backends: &BackendSet,
) -> Result<RunArtifacts> {
    let started = Instant::now();
    config.validate(low_image)?;
    if global_prompt.is_empty() && config.enable_rsp {
        return Err(Error::Config(
            "global prompt must not be empty when the regional semantic prior is enabled".into(),
        ));
    }

    // Encode both the resized input (high-resolution initialization) and the
    // original input (structure target and attention-capture substrate).
    let resized = low_image.resize_bilinear(config.target_height, config.target_width);
    let z_base = backends.codec.encode(&resized)?;
    let z0_low = backends.codec.encode(low_image)?;
    let (canvas_h, canvas_w) = (z_base.height, z_base.width);
    if canvas_h * LATENT_FACTOR != config.target_height
        || canvas_w * LATENT_FACTOR != config.target_width
    {
        return Err(Error::Codec(format!(
            "codec produced a {canvas_h}x{canvas_w} latent for a {}x{} image",
            config.target_height, config.target_width
        )));
    }

    let region_size = config
        .region_size
        .unwrap_or_else(|| backends.denoiser.native_region_size());
    let overlap = config.overlap.unwrap_or(region_size / 2);
    let part = partition(canvas_h, canvas_w, region_size, overlap)?;

    let caption_started = Instant::now();
    let prompts = regional_prompts(&resized, &part, global_prompt, config, backends)?;
    let caption_time = caption_started.elapsed();

    let global_cond = backends.conditioner.encode(global_prompt)?;
    let conds: Vec<TextCondition> = prompts
        .iter()
        .map(|p| backends.conditioner.encode(&p.text))
        .collect::<Result<Vec<_>>>()?;

    let sched = backends.denoiser.schedule()?;
    let default_steps = config
        .default_steps
        .unwrap_or_else(|| backends.denoiser.default_steps());
    let ts = inference_timesteps(&sched, default_steps, config.noise_fraction)?;
    let entry_timestep = ts[0];

    let (mut rng_high, mut rng_low) = noise_rngs(config.seed);
    let entry_noise = Latent::gaussian(z_base.channels, canvas_h, canvas_w, &mut rng_high);
    let mut z = add_noise(&z_base, entry_timestep, &entry_noise, &sched)?;

    // Structure target: low-frequency component of the resized low latent.
    let z_low_resized = wavelet::resize(&z0_low, canvas_h, canvas_w)?;
    let ll_target = wavelet::low_frequency_latent(&z_low_resized, config.wavelet_levels)?;

    let full_low_spec = RegionSpec {
        index: 0,
        top: 0,
        left: 0,
        height: z0_low.height,
        width: z0_low.width,
    };

    let mut dump = match &config.dump_dir {
        Some(dir) => Some(DumpWriter::create(dir)?),
        None => None,
    };

    let mut trace = Vec::with_capacity(ts.len());
    let mut denoise_time = Duration::ZERO;
    let mut guidance_time = Duration::ZERO;

    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);

        let sweep_started = Instant::now();
        // Regional attention prior: capture on a freshly noised low latent.
        let prior_maps: Option<Vec<AttentionMap>> = if config.enable_rap {
            let eps_low =
                Latent::gaussian(z0_low.channels, z0_low.height, z0_low.width, &mut rng_low);
            let z_t_low = add_noise(&z0_low, t, &eps_low, &sched)?;
            let (_eps, set) = backends.denoiser.predict_noise_with_capture(
                &z_t_low,
                t,
                &global_cond,
                &DenoiseContext::for_region(full_low_spec),
            )?;
            let mut maps = Vec::with_capacity(set.maps.len());
            for map in set.maps {
                let f = map.downsample_factor.max(1);
                if canvas_h % f != 0 || canvas_w % f != 0 {
                    return Err(Error::Denoiser(format!(
                        "canvas {canvas_h}x{canvas_w} is not divisible by site factor {f}"
                    )));
                }
                maps.push(interpolate_attention(&map, canvas_h / f, canvas_w / f)?);
            }
            Some(maps)
        } else {
            None
        };

        let pairs = denoise_regions(
            &z,
            &part,
            &conds,
            &global_cond,
            prior_maps.as_deref(),
            backends.denoiser,
            &sched,
            t,
            t_prev,
        )?;
        let (stepped, z0s): (Vec<Latent>, Vec<Latent>) = pairs.into_iter().unzip();
        let mut z_next = merge(&stepped, &part.regions, canvas_h, canvas_w)?;
        let z0_merged = merge(&z0s, &part.regions, canvas_h, canvas_w)?;
        denoise_time += sweep_started.elapsed();

        let lf_hat = wavelet::low_frequency_latent(&z0_merged, config.wavelet_levels)?;
        let loss = wavelet::sum_squared_diff(&lf_hat, &ll_target)?;
        trace.push(loss);

        if config.enable_gsp {
            let guidance_started = Instant::now();
            z_next = gsp_apply(
                &z_next,
                &z0_merged,
                &ll_target,
                t,
                &config.gsp,
                config.wavelet_levels,
                &sched,
            )?;
            guidance_time += guidance_started.elapsed();
        }

        if let Some(writer) = dump.as_mut() {
            writer.write_step(i, t, &z_next, loss)?;
        }
        z = z_next;
    }

    let image = backends.codec.decode(&z)?;
    Ok(RunArtifacts {
        image,
        gsp_loss_trace: trace,
        prompts,
        timings: PhaseTimings {
            denoise: denoise_time,
            caption: caption_time,
            guidance: guidance_time,
            total: started.elapsed(),
        },
        region_count: part.len(),
        steps: ts.len(),
        entry_timestep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockCaptioner, MockCodec, MockTextConditioner};
    use crate::backends::oracle::OracleDenoiser;
    use crate::scheduler::build_schedule;
    use rand::SeedableRng;

    fn block_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |y, x, _| {
            (((y / 8) * 31 + (x / 8) * 17) % 100) as f64 / 100.0
        })
    }

    #[test]
    fn gsp_apply_identity_at_zero_delta() {
        let sched = build_schedule(1000, (0.00085, 0.012)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let z = Latent::gaussian(4, 8, 8, &mut rng);
        let z0 = Latent::gaussian(4, 8, 8, &mut rng);
        let ll = wavelet::low_frequency_latent(&Latent::gaussian(4, 8, 8, &mut rng), 1).unwrap();
        let out = gsp_apply(&z, &z0, &ll, 0, &GspSchedule::default(), 1, &sched).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn gsp_apply_identity_when_components_match() {
        let sched = build_schedule(1000, (0.00085, 0.012)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let z = Latent::gaussian(4, 8, 8, &mut rng);
        let z0 = Latent::gaussian(4, 8, 8, &mut rng);
        let ll = wavelet::low_frequency_latent(&z0, 1).unwrap();
        let out = gsp_apply(&z, &z0, &ll, 500, &GspSchedule::default(), 1, &sched).unwrap();
        assert!(out.linf_distance(&z) < 1e-12);
    }

    #[test]
    fn gsp_apply_reduces_loss_on_mismatch() {
        let sched = build_schedule(1000, (0.00085, 0.012)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z0_hat = Latent::gaussian(4, 8, 8, &mut rng);
        let target_latent = Latent::gaussian(4, 8, 8, &mut rng);
        let ll = wavelet::low_frequency_latent(&target_latent, 1).unwrap();

        let t = 800;
        let small = GspSchedule {
            step_size: 1e-3,
            ..GspSchedule::default()
        };
        // Treat z0_hat as both the stepped latent and the estimate; one
        // update must strictly reduce the loss for a small step size.
        let before =
            wavelet::sum_squared_diff(&wavelet::low_frequency_latent(&z0_hat, 1).unwrap(), &ll)
                .unwrap();
        let updated = gsp_apply(&z0_hat, &z0_hat, &ll, t, &small, 1, &sched).unwrap();
        // The update targets the noisy latent; apply the same chain factor
        // when interpreting the result as a clean estimate.
        let after =
            wavelet::sum_squared_diff(&wavelet::low_frequency_latent(&updated, 1).unwrap(), &ll)
                .unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn single_step_oracle_run_reproduces_resized_input() {
        // Minimal noise fraction: one step, oracle pointing at the resized
        // encoding. Output must match the resized input's decode closely.
        let low = block_image(64, 64);
        let resized = low.resize_bilinear(128, 128);
        let codec = MockCodec;
        let target = crate::backends::LatentCodec::encode(&codec, &resized).unwrap();
        let oracle = OracleDenoiser::new(target.clone()).unwrap();

        let mut config = PipelineConfig::new(128, 128);
        config.noise_fraction = 0.02; // entry_step(50, 0.02) == 1
        config.region_size = Some(16);
        config.enable_gsp = false;
        config.enable_rap = false;
        config.enable_rsp = false;
        let conditioner = MockTextConditioner::new();
        let backends = BackendSet {
            denoiser: &oracle,
            codec: &codec,
            conditioner: &conditioner,
            captioner: Some(&MockCaptioner),
            prompt_cache: None,
        };
        let run = upscale(&low, "a block pattern", &config, &backends).unwrap();
        assert_eq!(run.steps, 1);
        assert_eq!(run.image.height, 128);
        let decoded_target = crate::backends::LatentCodec::decode(&codec, &target).unwrap();
        let diff: f64 = run
            .image
            .data
            .iter()
            .zip(decoded_target.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "max pixel diff {diff}");
    }

    #[test]
    fn trace_length_equals_steps_and_regions_counted() {
        let low = block_image(64, 64);
        let resized = low.resize_bilinear(256, 256);
        let codec = MockCodec;
        let target = crate::backends::LatentCodec::encode(&codec, &resized).unwrap();
        let oracle = OracleDenoiser::new(target).unwrap();
        let mut config = PipelineConfig::new(256, 256);
        config.region_size = Some(16);
        config.overlap = Some(8);
        config.enable_rsp = false;
        config.enable_rap = false;
        let conditioner = MockTextConditioner::new();
        let backends = BackendSet {
            denoiser: &oracle,
            codec: &codec,
            conditioner: &conditioner,
            captioner: None,
            prompt_cache: None,
        };
        let run = upscale(&low, "pattern", &config, &backends).unwrap();
        assert_eq!(run.steps, 22);
        assert_eq!(run.gsp_loss_trace.len(), 22);
        assert_eq!(run.region_count, 9);
        assert_eq!(run.entry_timestep, 440);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let low = block_image(64, 64);
        let codec = MockCodec;
        let target =
            crate::backends::LatentCodec::encode(&codec, &low.resize_bilinear(128, 128)).unwrap();
        let oracle = OracleDenoiser::new(target).unwrap();
        let mut config = PipelineConfig::new(128, 128);
        config.noise_fraction = 0.06; // 3 steps
        config.region_size = Some(16);
        config.enable_rsp = false;
        config.enable_rap = false;
        config.dump_dir = Some(dir.path().join("run"));
        let conditioner = MockTextConditioner::new();
        let backends = BackendSet {
            denoiser: &oracle,
            codec: &codec,
            conditioner: &conditioner,
            captioner: None,
            prompt_cache: None,
        };
        let run = upscale(&low, "pattern", &config, &backends).unwrap();
        let dumped = read_dump(&dir.path().join("run")).unwrap();
        assert_eq!(dumped.len(), run.steps);
        for (i, (record, latent)) in dumped.iter().enumerate() {
            assert_eq!(record.step_index, i);
            assert_eq!(latent.shape_of(), (4, 16, 16));
            assert_eq!(record.gsp_loss, run.gsp_loss_trace[i]);
        }
    }
}
