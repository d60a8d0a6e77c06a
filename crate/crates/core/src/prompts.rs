//! Regional prompt generation through a multimodal captioner, with the
//! instruction template, retry-with-fallback handling, bounded concurrent
//! fan-out, and a persistent content-addressed cache.
//!
//! Captioning dominates wall clock on real backends, so every caption is
//! cached by a hash of (region pixels, global prompt, captioner model id)
//! and written through to a line-delimited JSON file.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::Captioner;
use crate::error::{Error, Result};
use crate::tiling::Partition;
use crate::types::Image;

/// Marker the instruction template uses for the image slot; captioner
/// clients substitute their own convention when needed.
pub const IMAGE_SLOT: &str = "<regional image>";

/// Where a regional prompt came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Mllm,
    Cache,
    Fallback,
}

/// A description bound to one region of the partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionalPrompt {
    pub region_index: usize,
    pub text: String,
    pub source: PromptSource,
}

/// Captioner retry policy: `max_attempts` tries with exponential backoff.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Zero-delay policy for tests.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
            backoff_factor: 1.0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        if self.base_delay.is_zero() {
            return Duration::ZERO;
        }
        self.base_delay
            .mul_f64(self.backoff_factor.powi(attempt as i32))
    }
}

/// The captioning instruction, with the global prompt substituted into the
/// fixed template.
pub fn build_instruction(global_prompt: &str) -> Result<String> {
    if global_prompt.is_empty() {
        return Err(Error::Argument("global prompt must not be empty".into()));
    }
    Ok(format!(
        "Given the description of a full image {global_prompt}, \
         describe the following image {IMAGE_SLOT}, which is part of the full image."
    ))
}

/// Content hash of (region pixels, global prompt, captioner model id).
pub fn cache_key(region_pixels: &Image, global_prompt: &str, model_id: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update((region_pixels.height as u64).to_le_bytes());
    hasher.update((region_pixels.width as u64).to_le_bytes());
    hasher.update((region_pixels.channels as u64).to_le_bytes());
    for v in &region_pixels.data {
        hasher.update(v.to_le_bytes());
    }
    hasher.update([0u8]);
    hasher.update(global_prompt.as_bytes());
    hasher.update([0u8]);
    hasher.update(model_id.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One persisted cache record, one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptCacheEntry {
    pub key: String,
    pub model: String,
    pub region_index: usize,
    pub text: String,
    pub created_at: u64,
}

/// Concurrent prompt cache with write-through persistence to a
/// line-delimited JSON file.
pub struct PromptCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, PromptCacheEntry>>,
}

impl PromptCache {
    pub fn in_memory() -> Self {
        PromptCache {
            path: None,
            entries: Mutex::new(HashMap::new()),
        }
    }

    /// Opens (or creates) a persistent cache file. Malformed lines are
    /// skipped rather than failing the load.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = std::fs::File::open(&path)?;
            for line in BufReader::new(file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                if let Ok(entry) = serde_json::from_str::<PromptCacheEntry>(&line) {
                    entries.insert(entry.key.clone(), entry);
                }
            }
        }
        Ok(PromptCache {
            path: Some(path),
            entries: Mutex::new(entries),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<PromptCacheEntry> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    /// Inserts and appends to the backing file while holding the lock, so
    /// concurrent writers interleave whole lines.
    pub fn insert(&self, entry: PromptCacheEntry) -> Result<()> {
        let mut entries = self.entries.lock().expect("cache lock");
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&entry)
                .map_err(|e| Error::Internal(format!("cache serialization: {e}")))?;
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(file, "{line}")?;
        }
        entries.insert(entry.key.clone(), entry);
        Ok(())
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Trims a caption to `budget` whitespace tokens, preferring to cut at the
/// last sentence boundary that fits.
pub fn truncate_to_budget(text: &str, budget: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= budget {
        return text.trim().to_string();
    }
    let kept = &words[..budget.max(1)];
    // Prefer the last sentence boundary within the budget.
    let mut cut = kept.len();
    for (i, w) in kept.iter().enumerate().rev() {
        if w.ends_with(['.', '!', '?']) {
            cut = i + 1;
            break;
        }
    }
    if cut == kept.len() || cut == 0 {
        kept.join(" ")
    } else {
        kept[..cut].join(" ")
    }
}

/// Captions one region, consulting the cache first, retrying on captioner
/// failure, and falling back to the global prompt once the retry budget is
/// exhausted. Only precondition violations and cache I/O failures are hard
/// errors.
pub fn caption_region(
    captioner: &dyn Captioner,
    cache: &PromptCache,
    region_image: &Image,
    global_prompt: &str,
    region_index: usize,
    policy: &RetryPolicy,
    token_budget: usize,
) -> Result<RegionalPrompt> {
    if region_image.height < 8 || region_image.width < 8 {
        return Err(Error::Argument(format!(
            "region image {}x{} is degenerate (needs at least 8x8 pixels)",
            region_image.height, region_image.width
        )));
    }
    let instruction = build_instruction(global_prompt)?;
    let key = cache_key(region_image, global_prompt, captioner.model_id());
    if let Some(entry) = cache.get(&key) {
        return Ok(RegionalPrompt {
            region_index,
            text: entry.text,
            source: PromptSource::Cache,
        });
    }
    let mut last_err = None;
    for attempt in 0..policy.max_attempts {
        match captioner.describe(region_image, &instruction) {
            Ok(text) if !text.trim().is_empty() => {
                let text = truncate_to_budget(&text, token_budget);
                cache.insert(PromptCacheEntry {
                    key,
                    model: captioner.model_id().to_string(),
                    region_index,
                    text: text.clone(),
                    created_at: now_secs(),
                })?;
                return Ok(RegionalPrompt {
                    region_index,
                    text,
                    source: PromptSource::Mllm,
                });
            }
            Ok(_) => last_err = Some(Error::Captioner("empty caption".into())),
            Err(e) => last_err = Some(e),
        }
        if attempt + 1 < policy.max_attempts {
            let d = policy.delay(attempt);
            if !d.is_zero() {
                std::thread::sleep(d);
            }
        }
    }
    let _ = last_err;
    // Degraded mode: condition the region on the global prompt.
    Ok(RegionalPrompt {
        region_index,
        text: truncate_to_budget(global_prompt, token_budget),
        source: PromptSource::Fallback,
    })
}

/// Captions every region of a pixel-unit partition of `low_image`, fanning
/// requests out over at most `max_in_flight` worker threads. Results are
/// ordered by region index and written through the cache.
#[allow(clippy::too_many_arguments)]
pub fn caption_all(
    captioner: &dyn Captioner,
    low_image: &Image,
    partition: &Partition,
    global_prompt: &str,
    cache: &PromptCache,
    policy: &RetryPolicy,
    token_budget: usize,
    max_in_flight: usize,
) -> Result<Vec<RegionalPrompt>> {
    if partition.canvas_height != low_image.height || partition.canvas_width != low_image.width {
        return Err(Error::Argument(format!(
            "partition canvas {}x{} does not match image {}x{} (expected pixel units)",
            partition.canvas_height, partition.canvas_width, low_image.height, low_image.width
        )));
    }
    let n = partition.len();
    let workers = max_in_flight.max(1).min(n);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RegionalPrompt>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let spec = &partition.regions[i];
                let outcome = low_image
                    .crop(spec.top, spec.left, spec.height, spec.width)
                    .and_then(|region| {
                        caption_region(
                            captioner,
                            cache,
                            &region,
                            global_prompt,
                            spec.index,
                            policy,
                            token_budget,
                        )
                    });
                results.lock().expect("results lock")[i] = Some(outcome);
            });
        }
    });
    let collected = results.into_inner().expect("results lock");
    let mut prompts = Vec::with_capacity(n);
    for (i, slot) in collected.into_iter().enumerate() {
        match slot {
            Some(Ok(p)) => prompts.push(p),
            Some(Err(e)) => return Err(e),
            None => {
                return Err(Error::Internal(format!(
                    "caption worker never produced region {i}"
                )))
            }
        }
    }
    Ok(prompts)
}

/// HTTP captioner client. Requests carry the base64-encoded PNG of the
/// region, the instruction text, and the model id; the response carries the
/// generated text.
pub struct HttpCaptioner {
    agent: ureq::Agent,
    endpoint: String,
    model_id: String,
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    model: &'a str,
    instruction: &'a str,
    image_b64: String,
    image_format: &'a str,
}

#[derive(Deserialize)]
struct CaptionResponse {
    text: String,
}

impl HttpCaptioner {
    pub fn new(
        endpoint: impl Into<String>,
        model_id: impl Into<String>,
        timeout: Duration,
    ) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build();
        HttpCaptioner {
            agent: ureq::Agent::new_with_config(config),
            endpoint: endpoint.into(),
            model_id: model_id.into(),
        }
    }
}

impl Captioner for HttpCaptioner {
    fn describe(&self, image: &Image, instruction: &str) -> Result<String> {
        use base64::Engine;
        let png = crate::imageio::encode_png_bytes(image)?;
        let body = CaptionRequest {
            model: &self.model_id,
            instruction,
            image_b64: base64::engine::general_purpose::STANDARD.encode(png),
            image_format: "png",
        };
        let url = format!("{}/v1/caption", self.endpoint.trim_end_matches('/'));
        let mut response = self
            .agent
            .post(&url)
            .send_json(&body)
            .map_err(|e| Error::Captioner(format!("caption request failed: {e}")))?;
        let parsed: CaptionResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Captioner(format!("malformed caption response: {e}")))?;
        if parsed.text.trim().is_empty() {
            return Err(Error::Captioner("captioner returned empty text".into()));
        }
        Ok(parsed.text)
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}
