//! Generator clients: traits, retry wrapper, deterministic mocks, the live
//! HTTP clients, and the content-addressed media store.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::SynthError;

pub trait ChatClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, SynthError>;
}

pub trait MediaClient: Send + Sync {
    fn synthesize(&self, description: &str) -> Result<Vec<u8>, SynthError>;
}

impl<F> ChatClient for F
where
    F: Fn(&str) -> Result<String, SynthError> + Send + Sync,
{
    fn complete(&self, prompt: &str) -> Result<String, SynthError> {
        self(prompt)
    }
}

/// 64-bit FNV-1a; a stable content hash for seeding mocks.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: usize,
    /// First backoff; doubles per retry. Only live clients sleep.
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, backoff: Duration::from_secs(1) }
    }
}

fn run_with_retries<T>(
    policy: &RetryPolicy,
    sleep: bool,
    mut f: impl FnMut() -> Result<T, SynthError>,
) -> Result<T, SynthError> {
    let mut backoff = policy.backoff;
    let mut last = String::new();
    for attempt in 0..policy.attempts.max(1) {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) => {
                last = e.to_string();
                if sleep && attempt + 1 < policy.attempts {
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
    Err(SynthError::ClientFailure { attempts: policy.attempts.max(1), message: last })
}

/// Retry wrapper for any media client.
pub struct Retrying<C> {
    pub inner: C,
    pub policy: RetryPolicy,
    pub sleep: bool,
}

impl<C: MediaClient> MediaClient for Retrying<C> {
    fn synthesize(&self, description: &str) -> Result<Vec<u8>, SynthError> {
        run_with_retries(&self.policy, self.sleep, || self.inner.synthesize(description))
    }
}

impl<C: ChatClient> ChatClient for Retrying<C> {
    fn complete(&self, prompt: &str) -> Result<String, SynthError> {
        run_with_retries(&self.policy, self.sleep, || self.inner.complete(prompt))
    }
}

/// Deterministic chat mock. Responses depend only on the seed, the prompt
/// content, and how many times that exact prompt has been sent (standing in
/// for "continue" turns of a real chat).
pub struct MockChatClient {
    seed: u64,
    continuations: Mutex<HashMap<u64, u64>>,
}

impl MockChatClient {
    pub fn new(seed: u64) -> Self {
        MockChatClient { seed, continuations: Mutex::new(HashMap::new()) }
    }

    fn rng_for(&self, prompt: &str) -> ChaCha8Rng {
        let key = fnv1a(prompt.as_bytes());
        let round = {
            let mut map = self.continuations.lock().unwrap();
            let c = map.entry(key).or_insert(0);
            let r = *c;
            *c += 1;
            r
        };
        ChaCha8Rng::seed_from_u64(self.seed ^ key ^ (round.wrapping_mul(0x9e3779b97f4a7c15)))
    }
}

const WORDS: &[&str] = &[
    "sunny", "quiet", "vivid", "cozy", "brisk", "mellow", "rustic", "modern", "playful", "calm",
    "garden", "kitchen", "harbor", "meadow", "studio", "market", "trail", "rooftop", "library",
    "cafe",
];

fn mock_phrase(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

impl ChatClient for MockChatClient {
    fn complete(&self, prompt: &str) -> Result<String, SynthError> {
        let mut rng = self.rng_for(prompt);
        if prompt.starts_with("Please list me 50") {
            let lines: Vec<String> = (1..=50)
                .map(|i| format!("{i}. {} {} ideas {:x}", mock_phrase(&mut rng, 2), i, rng.gen::<u32>()))
                .collect();
            return Ok(lines.join("\n"));
        }
        if prompt.contains("brainstorm some chatting scenarios") {
            let topics = extract_topic_block(prompt);
            let lines: Vec<String> = topics
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    format!(
                        "{}. the user chats about {t} and asks the bot to {} a {} piece",
                        i + 1,
                        if rng.gen::<bool>() { "show" } else { "compose" },
                        mock_phrase(&mut rng, 1)
                    )
                })
                .collect();
            return Ok(lines.join("\n"));
        }
        if prompt.contains("a user talking to a chatbot named AnyGPT") {
            return Ok(mock_transcript(&mut rng));
        }
        Ok(format!("1. {}", mock_phrase(&mut rng, 3)))
    }
}

fn extract_topic_block(prompt: &str) -> Vec<String> {
    let marker = "Here's the topics for you to try:";
    let Some(pos) = prompt.find(marker) else { return Vec::new() };
    let mut topics = Vec::new();
    for line in prompt[pos + marker.len()..].lines() {
        let line = line.trim();
        if line.is_empty() {
            if topics.is_empty() {
                continue;
            }
            break;
        }
        if let Some(rest) = line.split_once('.').map(|(_, r)| r.trim()) {
            if !rest.is_empty() {
                topics.push(rest.to_string());
            }
        }
    }
    topics
}

fn mock_transcript(rng: &mut ChaCha8Rng) -> String {
    // Mostly conforming dialogs; roughly one in eight violates a filter rule
    // so the rejection path sees traffic.
    let violate = rng.gen_range(0..8u32) == 0;
    let rounds = if violate && rng.gen::<bool>() { 4 } else { 2 + rng.gen_range(0..2u32) as usize };
    let music_count = if violate && rounds < 4 { 2 } else { 1 };
    let mut music_used = 0usize;
    let mut lines = Vec::new();
    for r in 0..rounds {
        let ask_music = music_used < music_count && (r == rounds - 1 || rng.gen::<bool>());
        if ask_music {
            lines.push(format!("User: Could you play some {} music for me?", mock_phrase(rng, 1)));
            lines.push(format!(
                "AnyGPT: Of course, here it is. [music: {} {} with light percussion]",
                mock_phrase(rng, 1),
                mock_phrase(rng, 1)
            ));
            music_used += 1;
        } else {
            lines.push(format!(
                "User: Please show me a picture of a {} {}.",
                mock_phrase(rng, 1),
                mock_phrase(rng, 1)
            ));
            lines.push(format!(
                "AnyGPT: Sure, take a look. [image: a {} {} in soft light]",
                mock_phrase(rng, 1),
                mock_phrase(rng, 1)
            ));
        }
    }
    lines.join("\n")
}

/// Deterministic media mock: emits a small JSON payload holding a synthetic
/// frame sequence derived from the description. No audio or pixels involved.
pub struct MockMediaClient {
    pub kind: &'static str,
    pub seed: u64,
}

impl MediaClient for MockMediaClient {
    fn synthesize(&self, description: &str) -> Result<Vec<u8>, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(description.as_bytes()));
        let frames: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let payload = serde_json::json!({
            "kind": self.kind,
            "description": description,
            "frames": frames,
        });
        Ok(serde_json::to_vec(&payload).expect("json encodes"))
    }
}

/// Content-addressed payload store: files are named by their SHA-256 and
/// written via a temp file and rename, so concurrent puts are safe.
pub struct MediaStore {
    dir: PathBuf,
}

impl MediaStore {
    pub fn new(dir: impl AsRef<Path>) -> Result<Self, SynthError> {
        std::fs::create_dir_all(dir.as_ref())?;
        Ok(MediaStore { dir: dir.as_ref().to_path_buf() })
    }

    pub fn put(&self, bytes: &[u8]) -> Result<String, SynthError> {
        use std::sync::atomic::{AtomicU64, Ordering};
        static PUT_SEQ: AtomicU64 = AtomicU64::new(0);

        let hash = hex(&Sha256::digest(bytes));
        let path = self.path(&hash);
        if !path.exists() {
            // Unique temp name per call: concurrent puts of identical
            // payloads must not share a temp file.
            let seq = PUT_SEQ.fetch_add(1, Ordering::Relaxed);
            let tmp = self.dir.join(format!(".tmp-{hash}-{}-{seq}", std::process::id()));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(hash)
    }

    pub fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(hash)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// HTTP chat client: POSTs `{"prompt": ...}` and expects `{"text": ...}`.
/// Best effort; retried with exponential backoff.
pub struct LiveChatClient {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub policy: RetryPolicy,
}

impl ChatClient for LiveChatClient {
    fn complete(&self, prompt: &str) -> Result<String, SynthError> {
        run_with_retries(&self.policy, true, || {
            let client = reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .map_err(|e| SynthError::ClientFailure { attempts: 1, message: e.to_string() })?;
            let mut req = client.post(&self.endpoint).json(&serde_json::json!({ "prompt": prompt }));
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .and_then(|r| r.error_for_status())
                .map_err(|e| SynthError::ClientFailure { attempts: 1, message: e.to_string() })?;
            let value: serde_json::Value = resp
                .json()
                .map_err(|e| SynthError::ClientFailure { attempts: 1, message: e.to_string() })?;
            value["text"]
                .as_str()
                .map(String::from)
                .ok_or_else(|| SynthError::UnparseableResponse("missing \"text\" field".into()))
        })
    }
}

/// HTTP media client: POSTs `{"description": ...}` and stores the raw
/// response body.
pub struct LiveMediaClient {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub policy: RetryPolicy,
}

impl MediaClient for LiveMediaClient {
    fn synthesize(&self, description: &str) -> Result<Vec<u8>, SynthError> {
        run_with_retries(&self.policy, true, || {
            let client = reqwest::blocking::Client::builder()
                .timeout(self.timeout)
                .build()
                .map_err(|e| SynthError::ClientFailure { attempts: 1, message: e.to_string() })?;
            let mut req = client
                .post(&self.endpoint)
                .json(&serde_json::json!({ "description": description }));
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .and_then(|r| r.error_for_status())
                .map_err(|e| SynthError::ClientFailure { attempts: 1, message: e.to_string() })?;
            resp.bytes()
                .map(|b| b.to_vec())
                .map_err(|e| SynthError::ClientFailure { attempts: 1, message: e.to_string() })
        })
    }
}
