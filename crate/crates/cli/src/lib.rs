//! Command-line front end: layered settings resolution (defaults, config
//! file, environment, flags), backend selection, run orchestration, and
//! exit discipline.
//!
//! Exit codes: 0 success, 1 configuration error, 2 backend failure.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;

use upscale_core::backends::mock::{MockCaptioner, MockCodec, MockDenoiser, MockTextConditioner};
use upscale_core::backends::service::{
    CfgDenoiser, DiffusionServiceAdapter, DiffusionServiceConfig, RemoteCodec,
};
use upscale_core::backends::{BackendSet, Captioner, Denoiser, LatentCodec, TextConditioner};
use upscale_core::pipeline::{upscale, PipelineConfig, RunArtifacts};
use upscale_core::prompts::{HttpCaptioner, PromptCache};
use upscale_core::scheduler::{GspSchedule, GspScheduleKind};
use upscale_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;

/// Environment variable prefix for every settings key.
pub const ENV_PREFIX: &str = "UPSCALE_";

/// Raw command-line arguments. Every value is optional here; required
/// settings are enforced after the config file and environment are layered
/// in underneath.
#[derive(Debug, Parser)]
#[command(
    name = "upscale",
    about = "Upscale an image with overlapped regional denoising and global-regional priors"
)]
pub struct RawArgs {
    /// Input PNG path.
    #[arg(long, short = 'i')]
    pub input: Option<PathBuf>,

    /// Output PNG path.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,

    /// Global text prompt describing the full image.
    #[arg(long, short = 'p')]
    pub prompt: Option<String>,

    /// Upscaling factor (2, 3, 4, or 8). Mutually exclusive with
    /// --width/--height.
    #[arg(long)]
    pub scale: Option<u32>,

    /// Explicit output width in pixels (requires --height).
    #[arg(long)]
    pub width: Option<usize>,

    /// Explicit output height in pixels (requires --width).
    #[arg(long)]
    pub height: Option<usize>,

    /// Backend: "mock" or "diffusion-service".
    #[arg(long)]
    pub backend: Option<String>,

    /// Flat key = value settings file; flags and environment override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Fraction of the base step count to run (noise strength).
    #[arg(long)]
    pub noise_fraction: Option<f64>,

    /// Structure-guidance step size.
    #[arg(long)]
    pub gsp_step_size: Option<f64>,

    /// Structure-guidance schedule: cosine, linear_decreasing,
    /// linear_increasing, or constant.
    #[arg(long)]
    pub gsp_kind: Option<String>,

    /// Wavelet decomposition depth (1-3).
    #[arg(long)]
    pub wavelet_levels: Option<usize>,

    /// Region size in latent units (defaults to the backend's native size).
    #[arg(long)]
    pub region_size: Option<usize>,

    /// Region overlap in latent units (defaults to half the region size).
    #[arg(long)]
    pub overlap: Option<usize>,

    /// Classifier-free guidance scale.
    #[arg(long)]
    pub guidance_scale: Option<f64>,

    /// Noise seed; identical seeds reproduce identical outputs.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Base inference step count (defaults to the backend's).
    #[arg(long)]
    pub default_steps: Option<usize>,

    /// Enable/disable the global structure prior.
    #[arg(long)]
    pub enable_gsp: Option<bool>,

    /// Enable/disable the regional attention prior.
    #[arg(long)]
    pub enable_rap: Option<bool>,

    /// Enable/disable the regional semantic prior (captioning).
    #[arg(long)]
    pub enable_rsp: Option<bool>,

    /// Regional prompt cache file (line-delimited JSON).
    #[arg(long)]
    pub cache_path: Option<PathBuf>,

    /// Directory for per-step latent dumps plus a manifest.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,

    /// Captioner service base URL.
    #[arg(long)]
    pub captioner_endpoint: Option<String>,

    /// Diffusion service base URL.
    #[arg(long)]
    pub denoiser_endpoint: Option<String>,

    #[arg(long)]
    pub captioner_timeout_ms: Option<u64>,

    #[arg(long)]
    pub denoiser_timeout_ms: Option<u64>,

    /// Checkpoint path hint for the diffusion service.
    #[arg(long)]
    pub model_path: Option<String>,

    /// Device hint for the diffusion service, e.g. cuda:0.
    #[arg(long)]
    pub device: Option<String>,

    /// Increase verbosity (-v: per-step losses, -vv: everything).
    #[arg(short = 'v', action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Mock,
    DiffusionService,
}

impl BackendKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(BackendKind::Mock),
            "diffusion-service" => Ok(BackendKind::DiffusionService),
            other => Err(Error::Config(format!(
                "unknown backend '{other}' (expected mock or diffusion-service)"
            ))),
        }
    }
}

/// Output sizing: exactly one of the two forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeSpec {
    Scale(u32),
    Explicit { width: usize, height: usize },
}

/// A fully resolved invocation; a pure function of (argv, config text,
/// environment map).
#[derive(Debug, Clone, PartialEq)]
pub struct CliInvocation {
    pub input: PathBuf,
    pub output: PathBuf,
    pub prompt: String,
    pub size: SizeSpec,
    pub backend: BackendKind,
    pub noise_fraction: f64,
    pub gsp_step_size: f64,
    pub gsp_kind: GspScheduleKind,
    pub wavelet_levels: usize,
    pub region_size: Option<usize>,
    pub overlap: Option<usize>,
    pub guidance_scale: f64,
    pub seed: u64,
    pub enable_gsp: bool,
    pub enable_rap: bool,
    pub enable_rsp: bool,
    pub default_steps: Option<usize>,
    pub cache_path: Option<PathBuf>,
    pub dump_dir: Option<PathBuf>,
    pub captioner_endpoint: Option<String>,
    pub denoiser_endpoint: Option<String>,
    pub captioner_timeout_ms: u64,
    pub denoiser_timeout_ms: u64,
    pub model_path: Option<String>,
    pub device: Option<String>,
    pub verbosity: u8,
}

/// Parses a flat `key = value` settings file. `#` starts a comment; blank
/// lines are skipped.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "config line {} is not `key = value`: {raw:?}",
                lineno + 1
            )));
        };
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        map.insert(key.trim().to_string(), value.to_string());
    }
    Ok(map)
}

/// One string-typed setting looked up by increasing precedence: config
/// file, then environment, then flag.
struct Layers<'a> {
    config: &'a BTreeMap<String, String>,
    env: &'a BTreeMap<String, String>,
}

impl<'a> Layers<'a> {
    fn lookup(&self, key: &str) -> Option<&'a str> {
        let env_key = format!("{ENV_PREFIX}{}", key.to_uppercase());
        self.env
            .get(&env_key)
            .or_else(|| self.config.get(key))
            .map(|s| s.as_str())
    }

    fn string(&self, flag: Option<String>, key: &str) -> Option<String> {
        flag.or_else(|| self.lookup(key).map(|s| s.to_string()))
    }

    fn parse<T: std::str::FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.lookup(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("setting {key} has unparseable value {raw:?}"))),
            None => Ok(None),
        }
    }
}

/// Resolves raw flags against the config file and environment into a
/// validated invocation. Precedence, lowest to highest: built-in defaults,
/// config file, environment, flags.
pub fn resolve_invocation(
    args: RawArgs,
    config_text: Option<&str>,
    env: &BTreeMap<String, String>,
) -> Result<CliInvocation> {
    let config = match config_text {
        Some(text) => parse_config_text(text)?,
        None => BTreeMap::new(),
    };
    let layers = Layers {
        config: &config,
        env,
    };

    let input = layers
        .string(args.input.map(|p| p.display().to_string()), "input")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("missing --input".into()))?;
    let output = layers
        .string(args.output.map(|p| p.display().to_string()), "output")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config("missing --output".into()))?;
    let prompt = layers
        .string(args.prompt, "prompt")
        .ok_or_else(|| Error::Config("missing --prompt".into()))?;
    if prompt.trim().is_empty() {
        return Err(Error::Config("--prompt must not be empty".into()));
    }

    let scale = layers.parse(args.scale, "scale")?;
    let width = layers.parse(args.width, "width")?;
    let height = layers.parse(args.height, "height")?;
    let size = match (scale, width, height) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(Error::Config(
                "--scale conflicts with --width/--height; give exactly one sizing form".into(),
            ))
        }
        (Some(s), None, None) => {
            if ![2, 3, 4, 8].contains(&s) {
                return Err(Error::Config(format!(
                    "--scale must be one of 2, 3, 4, 8; got {s}"
                )));
            }
            SizeSpec::Scale(s)
        }
        (None, Some(w), Some(h)) => SizeSpec::Explicit {
            width: w,
            height: h,
        },
        (None, Some(_), None) | (None, None, Some(_)) => {
            return Err(Error::Config(
                "--width and --height must be given together".into(),
            ))
        }
        (None, None, None) => {
            return Err(Error::Config(
                "missing sizing: give --scale or --width with --height".into(),
            ))
        }
    };

    let backend = match layers.string(args.backend, "backend") {
        Some(name) => BackendKind::parse(&name)?,
        None => BackendKind::Mock,
    };
    let gsp_kind = match layers.string(args.gsp_kind, "gsp_kind") {
        Some(name) => GspScheduleKind::parse(&name)?,
        None => GspScheduleKind::Cosine,
    };

    Ok(CliInvocation {
        input,
        output,
        prompt,
        size,
        backend,
        noise_fraction: layers
            .parse(args.noise_fraction, "noise_fraction")?
            .unwrap_or(0.45),
        gsp_step_size: layers
            .parse(args.gsp_step_size, "gsp_step_size")?
            .unwrap_or(0.2),
        gsp_kind,
        wavelet_levels: layers
            .parse(args.wavelet_levels, "wavelet_levels")?
            .unwrap_or(1),
        region_size: layers.parse(args.region_size, "region_size")?,
        overlap: layers.parse(args.overlap, "overlap")?,
        guidance_scale: layers
            .parse(args.guidance_scale, "guidance_scale")?
            .unwrap_or(7.5),
        seed: layers.parse(args.seed, "seed")?.unwrap_or(0),
        enable_gsp: layers.parse(args.enable_gsp, "enable_gsp")?.unwrap_or(true),
        enable_rap: layers.parse(args.enable_rap, "enable_rap")?.unwrap_or(true),
        enable_rsp: layers.parse(args.enable_rsp, "enable_rsp")?.unwrap_or(true),
        default_steps: layers.parse(args.default_steps, "default_steps")?,
        cache_path: layers
            .string(
                args.cache_path.map(|p| p.display().to_string()),
                "cache_path",
            )
            .map(PathBuf::from),
        dump_dir: layers
            .string(args.dump_dir.map(|p| p.display().to_string()), "dump_dir")
            .map(PathBuf::from),
        captioner_endpoint: layers.string(args.captioner_endpoint, "captioner_endpoint"),
        denoiser_endpoint: layers.string(args.denoiser_endpoint, "denoiser_endpoint"),
        captioner_timeout_ms: layers
            .parse(args.captioner_timeout_ms, "captioner_timeout_ms")?
            .unwrap_or(60_000),
        denoiser_timeout_ms: layers
            .parse(args.denoiser_timeout_ms, "denoiser_timeout_ms")?
            .unwrap_or(120_000),
        model_path: layers.string(args.model_path, "model_path"),
        device: layers.string(args.device, "device"),
        verbosity: if args.verbose > 0 {
            args.verbose
        } else {
            layers.parse(None::<u8>, "verbosity")?.unwrap_or(0)
        },
    })
}

/// Full parse: argv plus the config file named by `--config` plus the
/// process environment.
pub fn parse_invocation(
    argv: &[String],
    read_config: impl Fn(&PathBuf) -> Result<String>,
    env: &BTreeMap<String, String>,
) -> Result<CliInvocation> {
    let args =
        RawArgs::try_parse_from(argv).map_err(|e| Error::Config(format!("argument error: {e}")))?;
    let config_text = match &args.config {
        Some(path) => Some(read_config(path)?),
        None => None,
    };
    resolve_invocation(args, config_text.as_deref(), env)
}

fn pipeline_config(invocation: &CliInvocation, target: (usize, usize)) -> PipelineConfig {
    let mut config = PipelineConfig::new(target.0, target.1);
    config.noise_fraction = invocation.noise_fraction;
    config.gsp = GspSchedule {
        step_size: invocation.gsp_step_size,
        kind: invocation.gsp_kind,
    };
    config.wavelet_levels = invocation.wavelet_levels;
    config.region_size = invocation.region_size;
    config.overlap = invocation.overlap;
    config.guidance_scale = invocation.guidance_scale;
    config.seed = invocation.seed;
    config.enable_gsp = invocation.enable_gsp;
    config.enable_rap = invocation.enable_rap;
    config.enable_rsp = invocation.enable_rsp;
    config.default_steps = invocation.default_steps;
    config.dump_dir = invocation.dump_dir.clone();
    config
}

fn exit_code_for(err: &Error) -> i32 {
    if err.is_backend() {
        EXIT_BACKEND
    } else {
        EXIT_CONFIG
    }
}

fn log_summary(invocation: &CliInvocation, run: &RunArtifacts) {
    eprintln!(
        "regions: {} | steps: {} (entry t={}) | denoise {:.2}s, caption {:.2}s, guidance {:.2}s, total {:.2}s",
        run.region_count,
        run.steps,
        run.entry_timestep,
        run.timings.denoise.as_secs_f64(),
        run.timings.caption.as_secs_f64(),
        run.timings.guidance.as_secs_f64(),
        run.timings.total.as_secs_f64(),
    );
    if invocation.verbosity > 0 {
        for (i, loss) in run.gsp_loss_trace.iter().enumerate() {
            eprintln!("step {:>3}/{}: gsp_loss = {loss:.6e}", i + 1, run.steps);
        }
        let fallbacks = run
            .prompts
            .iter()
            .filter(|p| p.source == upscale_core::prompts::PromptSource::Fallback)
            .count();
        if fallbacks > 0 {
            eprintln!("warning: {fallbacks} region prompts fell back to the global prompt");
        }
    }
    if invocation.verbosity > 1 {
        for p in &run.prompts {
            eprintln!("region {:>3} [{:?}]: {}", p.region_index, p.source, p.text);
        }
    }
}

fn execute(invocation: &CliInvocation) -> Result<RunArtifacts> {
    let low = upscale_core::imageio::read_png(&invocation.input)?;
    let target = match invocation.size {
        SizeSpec::Scale(s) => (low.height * s as usize, low.width * s as usize),
        SizeSpec::Explicit { width, height } => (height, width),
    };
    let config = pipeline_config(invocation, target);

    let cache = match &invocation.cache_path {
        Some(path) => Some(PromptCache::open(path)?),
        None => None,
    };

    let conditioner = MockTextConditioner::new();
    let uncond = conditioner.encode("")?;

    let http_captioner;
    let mock_captioner;
    let captioner: Option<&dyn Captioner> = match &invocation.captioner_endpoint {
        Some(endpoint) => {
            http_captioner = HttpCaptioner::new(
                endpoint.clone(),
                "llava-1.6",
                Duration::from_millis(invocation.captioner_timeout_ms),
            );
            Some(&http_captioner)
        }
        None if invocation.backend == BackendKind::Mock => {
            mock_captioner = MockCaptioner;
            Some(&mock_captioner)
        }
        None => None,
    };

    let run = match invocation.backend {
        BackendKind::Mock => {
            let denoiser = CfgDenoiser::new(MockDenoiser::new(), invocation.guidance_scale, uncond);
            let codec = MockCodec;
            let backends = BackendSet {
                denoiser: &denoiser as &dyn Denoiser,
                codec: &codec as &dyn LatentCodec,
                conditioner: &conditioner,
                captioner,
                prompt_cache: cache.as_ref(),
            };
            upscale(&low, &invocation.prompt, &config, &backends)?
        }
        BackendKind::DiffusionService => {
            let endpoint = invocation.denoiser_endpoint.as_ref().ok_or_else(|| {
                Error::Config(
                    "diffusion-service backend needs --denoiser-endpoint \
                     (or UPSCALE_DENOISER_ENDPOINT)"
                        .into(),
                )
            })?;
            let mut service = DiffusionServiceConfig::new(endpoint.clone());
            service.model_path = invocation.model_path.clone();
            service.device = invocation.device.clone();
            service.timeout = Duration::from_millis(invocation.denoiser_timeout_ms);
            service.guidance_scale = invocation.guidance_scale;
            let denoiser = DiffusionServiceAdapter::connect(&service)?;
            let codec = RemoteCodec::new(endpoint.clone(), service.timeout);
            let backends = BackendSet {
                denoiser: &denoiser as &dyn Denoiser,
                codec: &codec as &dyn LatentCodec,
                conditioner: &conditioner,
                captioner,
                prompt_cache: cache.as_ref(),
            };
            upscale(&low, &invocation.prompt, &config, &backends)?
        }
    };

    upscale_core::imageio::write_png_atomic(&run.image, &invocation.output)?;
    Ok(run)
}

/// Runs an invocation and maps the outcome to an exit code.
pub fn run(invocation: &CliInvocation) -> i32 {
    match execute(invocation) {
        Ok(artifacts) => {
            log_summary(invocation, &artifacts);
            eprintln!("wrote {}", invocation.output.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

/// Collects the process environment entries carrying the settings prefix.
pub fn env_snapshot() -> BTreeMap<String, String> {
    std::env::vars()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(parts: &[&str]) -> Vec<String> {
        std::iter::once("upscale")
            .chain(parts.iter().copied())
            .map(|s| s.to_string())
            .collect()
    }

    fn no_config(_: &PathBuf) -> Result<String> {
        Err(Error::Config("no config in this test".into()))
    }

    #[test]
    fn basic_flags_parse_with_reference_defaults() {
        let inv = parse_invocation(
            &argv(&[
                "--input",
                "a.png",
                "--prompt",
                "a cat",
                "--scale",
                "4",
                "--backend",
                "mock",
                "--output",
                "b.png",
            ]),
            no_config,
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(inv.size, SizeSpec::Scale(4));
        assert_eq!(inv.noise_fraction, 0.45);
        assert_eq!(inv.gsp_step_size, 0.2);
        assert_eq!(inv.guidance_scale, 7.5);
        assert_eq!(inv.gsp_kind, GspScheduleKind::Cosine);
        assert!(inv.enable_gsp && inv.enable_rap && inv.enable_rsp);
    }

    #[test]
    fn scale_and_width_conflict_names_both() {
        let err = parse_invocation(
            &argv(&[
                "--input", "a.png", "--prompt", "p", "--output", "b.png", "--scale", "4",
                "--width", "2048",
            ]),
            no_config,
            &BTreeMap::new(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("--scale") && msg.contains("--width"), "{msg}");
    }

    #[test]
    fn config_file_form_equals_flag_form() {
        let flag_form = parse_invocation(
            &argv(&[
                "--input",
                "a.png",
                "--prompt",
                "a cat",
                "--scale",
                "4",
                "--backend",
                "mock",
                "--output",
                "b.png",
                "--seed",
                "9",
                "--noise-fraction",
                "0.3",
            ]),
            no_config,
            &BTreeMap::new(),
        )
        .unwrap();

        let config_text = "\
# reproduction recipe
input = a.png
output = b.png
prompt = \"a cat\"
scale = 4
backend = mock
seed = 9
noise_fraction = 0.3
";
        let args = RawArgs::try_parse_from(argv(&[])).unwrap();
        let config_form = resolve_invocation(args, Some(config_text), &BTreeMap::new()).unwrap();
        assert_eq!(flag_form, config_form);
    }

    #[test]
    fn env_overrides_config_and_flags_override_env() {
        let config_text = "seed = 1\nnoise_fraction = 0.2\n";
        let mut env = BTreeMap::new();
        env.insert("UPSCALE_SEED".to_string(), "2".to_string());

        let args = RawArgs::try_parse_from(argv(&[
            "--input", "a.png", "--prompt", "p", "--output", "b.png", "--scale", "2",
        ]))
        .unwrap();
        let inv = resolve_invocation(args, Some(config_text), &env).unwrap();
        assert_eq!(inv.seed, 2, "env beats config");
        assert_eq!(inv.noise_fraction, 0.2, "config used when no env/flag");

        let args = RawArgs::try_parse_from(argv(&[
            "--input", "a.png", "--prompt", "p", "--output", "b.png", "--scale", "2", "--seed", "3",
        ]))
        .unwrap();
        let inv = resolve_invocation(args, Some(config_text), &env).unwrap();
        assert_eq!(inv.seed, 3, "flag beats env");
    }

    #[test]
    fn invalid_scale_rejected() {
        let err = parse_invocation(
            &argv(&[
                "--input", "a.png", "--prompt", "p", "--output", "b.png", "--scale", "5",
            ]),
            no_config,
            &BTreeMap::new(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("--scale"), "{err}");
    }

    #[test]
    fn unknown_backend_rejected() {
        let err = parse_invocation(
            &argv(&[
                "--input",
                "a.png",
                "--prompt",
                "p",
                "--output",
                "b.png",
                "--scale",
                "2",
                "--backend",
                "quantum",
            ]),
            no_config,
            &BTreeMap::new(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("quantum"), "{err}");
    }

    #[test]
    fn missing_input_is_a_config_error() {
        let err = parse_invocation(
            &argv(&["--prompt", "p", "--output", "b.png", "--scale", "2"]),
            no_config,
            &BTreeMap::new(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bad_config_line_reports_line_number() {
        let err = parse_config_text("noise_fraction 0.3\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
