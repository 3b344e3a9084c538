//! Two-stage instruction-dialogue synthesis.
//!
//! Stage one produces text-only dialogues through three chat-model steps:
//! meta-topics expand into topics, topics into scenarios, scenarios into
//! multi-turn transcripts whose media appear as `[image: ...]` and
//! `[music: ...]` placeholders. Stage two resolves every placeholder through
//! a media client and synthesizes speech for each text utterance, persisting
//! payloads content-addressed. Filtering enforces the per-dialog rules and
//! reports machine-readable rejection reasons.
//!
//! Clients are pluggable: deterministic seeded mocks for offline runs, and
//! best-effort HTTP clients for live endpoints.

mod clients;
mod pipeline;
mod placeholder;
pub mod pools;
pub mod prompts;

pub use clients::{
    fnv1a, ChatClient, LiveChatClient, LiveMediaClient, MediaClient, MediaStore, MockChatClient,
    MockMediaClient, RetryPolicy, Retrying,
};
pub use pipeline::{
    convert_to_multimodal, expand_topics, filter_dialogs, gen_dialogs, gen_scenarios,
    run_pipeline, sample_requirement, Clients, PipelineOutput, Scenario, SynthConfig, SynthStats,
    TopicExpansion,
};
pub use placeholder::{parse_placeholders, render_parts};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("client failed after {attempts} attempt(s): {message}")]
    ClientFailure { attempts: usize, message: String },
    #[error("unparseable response: {0}")]
    UnparseableResponse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Image,
    Music,
}

impl MediaKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MediaKind::Image => "image",
            MediaKind::Music => "music",
        }
    }
}

/// One piece of an utterance: plain text or a media placeholder. `raw` keeps
/// the placeholder's inner text verbatim so rendering is lossless; use
/// [`Part::description`] for the trimmed form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Placeholder { kind: MediaKind, raw: String, media: Option<String> },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text { text: s.into() }
    }

    pub fn description(&self) -> Option<&str> {
        match self {
            Part::Placeholder { raw, .. } => Some(raw.trim()),
            Part::Text { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub parts: Vec<Part>,
    /// Content hash of the synthesized speech for this turn's text, if any.
    pub speech: Option<String>,
}

impl Turn {
    /// The turn's plain text with placeholders elided.
    pub fn text_content(&self) -> String {
        let mut out = String::new();
        for p in &self.parts {
            if let Part::Text { text } = p {
                out.push_str(text);
            }
        }
        out.trim().to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub requirement: Option<String>,
    pub demo_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub topic: String,
    pub scenario: String,
    pub turns: Vec<Turn>,
    /// Soft heuristic violations; recorded, never fatal.
    pub flags: Vec<String>,
    pub provenance: Provenance,
}

impl Dialogue {
    /// Number of user turns.
    pub fn rounds(&self) -> usize {
        self.turns.iter().filter(|t| t.speaker == Speaker::User).count()
    }

    pub fn placeholder_count(&self, kind: MediaKind) -> usize {
        self.turns
            .iter()
            .flat_map(|t| &t.parts)
            .filter(|p| matches!(p, Part::Placeholder { kind: k, .. } if *k == kind))
            .count()
    }
}

/// Filtering thresholds. Word-count bounds are soft (flagged, not fatal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRules {
    pub max_music_per_dialog: usize,
    pub max_images_per_dialog: usize,
    pub max_rounds: usize,
    pub min_words_per_utterance: usize,
    pub max_words_per_utterance: usize,
    pub banned_patterns: Vec<String>,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            max_music_per_dialog: 1,
            max_images_per_dialog: 2,
            max_rounds: 3,
            min_words_per_utterance: 5,
            max_words_per_utterance: 15,
            banned_patterns: Vec::new(),
        }
    }
}
