//! Training-sequence assembly: code flattening, sample templates, packing,
//! and dataset mixture sampling.
//!
//! Pair samples follow the two fixed templates (rendered here with specials
//! in brackets and `I`/`S`/`T` for instruction, media tokens, and text):
//!
//! ```text
//! x-to-text:  [Human]: I.<soX>S<eoX><eoh>. [AnyGPT]: T<eos>
//! text-to-x:  [Human]: I. This is input:T<eoh>. [AnyGPT]: <soX>S<eoX><eos>
//! ```
//!
//! The exact byte rendering is frozen by golden tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rvq::CodeMatrix;
use crate::vocab::{TokenClass, UnifiedVocab, VocabError};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("sequence length {len} not divisible by {q} layers")]
    LengthNotDivisible { len: usize, q: usize },
    #[error("id {id} at position {pos} outside layer {layer}'s range")]
    LayerRangeViolation { pos: usize, id: u32, layer: usize },
    #[error("sample of length {len} exceeds max_len {max_len}")]
    SampleTooLong { len: usize, max_len: usize },
    #[error("mixture weights are all zero")]
    AllZeroWeights,
    #[error("negative mixture weight {0}")]
    NegativeWeight(f64),
    #[error("{0}")]
    InvalidArg(String),
}

/// What a span of a token sequence contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SegmentKind {
    Text,
    Special,
    Modality(String),
}

impl From<SegmentKind> for String {
    fn from(k: SegmentKind) -> String {
        match k {
            SegmentKind::Text => "text".into(),
            SegmentKind::Special => "special".into(),
            SegmentKind::Modality(name) => name,
        }
    }
}

impl TryFrom<String> for SegmentKind {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        Ok(match s.as_str() {
            "text" => SegmentKind::Text,
            "special" => SegmentKind::Special,
            "" => return Err("empty segment kind".into()),
            _ => SegmentKind::Modality(s),
        })
    }
}

/// Half-open span `[start, end)` into a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

/// A global-token sequence with per-position loss mask and span annotations.
/// Media spans cover their brackets; contiguous text forms one span; each
/// special outside a media span is its own singleton span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub segments: Vec<SegmentSpan>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// How a multi-layer code matrix maps onto local ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeLayout {
    /// Layer `l` occupies local ids `[l*K, (l+1)*K)`; layers are
    /// distinguishable in the flat stream. Local vocabulary is `Q*K`.
    PerLayer,
    /// All layers share the ids `[0, K)`. Local vocabulary is `K`.
    Shared,
}

/// Serialize a code matrix frame-major: frame 0 layers `1..Q`, then frame 1,
/// and so on. Output length is `T*Q`.
pub fn flatten_codes(codes: &CodeMatrix, k: usize, layout: CodeLayout) -> Vec<u32> {
    let q = codes.layers();
    let mut out = Vec::with_capacity(codes.rows() * q);
    for t in 0..codes.rows() {
        for (layer, &c) in codes.row(t).iter().enumerate() {
            out.push(match layout {
                CodeLayout::PerLayer => c + (layer * k) as u32,
                CodeLayout::Shared => c,
            });
        }
    }
    out
}

/// Exact inverse of [`flatten_codes`].
pub fn unflatten_codes(
    seq: &[u32],
    q: usize,
    k: usize,
    layout: CodeLayout,
) -> Result<CodeMatrix, BuildError> {
    if q == 0 {
        return Err(BuildError::InvalidArg("q must be >= 1".into()));
    }
    if seq.len() % q != 0 {
        return Err(BuildError::LengthNotDivisible { len: seq.len(), q });
    }
    let mut codes = Vec::with_capacity(seq.len());
    for (pos, &id) in seq.iter().enumerate() {
        let layer = pos % q;
        let code = match layout {
            CodeLayout::PerLayer => {
                let lo = (layer * k) as u32;
                let hi = ((layer + 1) * k) as u32;
                if id < lo || id >= hi {
                    return Err(BuildError::LayerRangeViolation { pos, id, layer });
                }
                id - lo
            }
            CodeLayout::Shared => {
                if id >= k as u32 {
                    return Err(BuildError::LayerRangeViolation { pos, id, layer });
                }
                id
            }
        };
        codes.push(code);
    }
    Ok(CodeMatrix::new(seq.len() / q, q, codes).expect("shape checked above"))
}

/// Generation direction of a pair sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    XToText,
    TextToX,
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Mask the loss on everything before the response content (instruction
    /// tuning); default trains on every position.
    pub mask_human_turn: bool,
}

struct SeqBuilder<'v> {
    vocab: &'v UnifiedVocab,
    tokens: Vec<u32>,
    loss_mask: Vec<bool>,
    segments: Vec<SegmentSpan>,
    mask_on: bool,
}

impl<'v> SeqBuilder<'v> {
    fn new(vocab: &'v UnifiedVocab, mask_on: bool) -> Self {
        SeqBuilder { vocab, tokens: Vec::new(), loss_mask: Vec::new(), segments: Vec::new(), mask_on }
    }

    fn push(&mut self, token: u32) {
        self.tokens.push(token);
        self.loss_mask.push(self.mask_on);
    }

    fn text(&mut self, s: &str) -> Result<(), BuildError> {
        if s.is_empty() {
            return Ok(());
        }
        let start = self.tokens.len();
        for id in self.vocab.encode_text(s)? {
            self.push(id);
        }
        match self.segments.last_mut() {
            Some(seg) if seg.kind == SegmentKind::Text && seg.end == start => {
                seg.end = self.tokens.len();
            }
            _ => self.segments.push(SegmentSpan {
                kind: SegmentKind::Text,
                start,
                end: self.tokens.len(),
            }),
        }
        Ok(())
    }

    fn special(&mut self, id: u32) {
        let start = self.tokens.len();
        self.push(id);
        self.segments.push(SegmentSpan { kind: SegmentKind::Special, start, end: start + 1 });
    }

    fn media(&mut self, modality: &str, local_ids: &[u32]) -> Result<(), BuildError> {
        let entry = self.vocab.modality(modality)?.clone();
        let start = self.tokens.len();
        self.push(entry.begin);
        for &local in local_ids {
            self.push(self.vocab.to_global(modality, local)?);
        }
        self.push(entry.end);
        self.segments.push(SegmentSpan {
            kind: SegmentKind::Modality(modality.to_string()),
            start,
            end: self.tokens.len(),
        });
        Ok(())
    }

    fn finish(self) -> TokenSequence {
        TokenSequence { tokens: self.tokens, loss_mask: self.loss_mask, segments: self.segments }
    }
}

/// Build one `(instruction, media, text)` pair sample in the given direction.
pub fn build_pair_sample(
    vocab: &UnifiedVocab,
    instruction: &str,
    media: (&str, &[u32]),
    text: &str,
    direction: Direction,
    opts: &BuildOptions,
) -> Result<TokenSequence, BuildError> {
    if instruction.is_empty() {
        return Err(BuildError::EmptyInstruction);
    }
    let (modality, local_ids) = media;
    vocab.modality(modality)?;
    let mut b = SeqBuilder::new(vocab, !opts.mask_human_turn);
    b.special(vocab.human());
    b.text(": ")?;
    b.text(instruction)?;
    match direction {
        Direction::XToText => {
            b.text(".")?;
            b.media(modality, local_ids)?;
            b.special(vocab.eoh());
            b.text(". ")?;
            b.special(vocab.agent());
            b.text(": ")?;
            b.mask_on = true;
            b.text(text)?;
        }
        Direction::TextToX => {
            b.text(". This is input:")?;
            b.text(text)?;
            b.special(vocab.eoh());
            b.text(". ")?;
            b.special(vocab.agent());
            b.text(": ")?;
            b.mask_on = true;
            b.media(modality, local_ids)?;
        }
    }
    b.special(vocab.eos());
    Ok(b.finish())
}

/// The pair template up to and including the agent header (`[AnyGPT]: `),
/// i.e. the generation prompt for the chosen direction. For `XToText` the
/// media span is part of the prompt; for `TextToX` the input text is.
pub fn build_pair_prefix(
    vocab: &UnifiedVocab,
    instruction: &str,
    media: (&str, &[u32]),
    text: &str,
    direction: Direction,
) -> Result<Vec<u32>, BuildError> {
    if instruction.is_empty() {
        return Err(BuildError::EmptyInstruction);
    }
    let (modality, local_ids) = media;
    vocab.modality(modality)?;
    let mut b = SeqBuilder::new(vocab, true);
    b.special(vocab.human());
    b.text(": ")?;
    b.text(instruction)?;
    match direction {
        Direction::XToText => {
            b.text(".")?;
            b.media(modality, local_ids)?;
        }
        Direction::TextToX => {
            b.text(". This is input:")?;
            b.text(text)?;
        }
    }
    b.special(vocab.eoh());
    b.text(". ")?;
    b.special(vocab.agent());
    b.text(": ")?;
    Ok(b.finish().tokens)
}

/// One chunk of an interleaved document.
#[derive(Debug, Clone, PartialEq)]
pub enum Chunk {
    Text(String),
    Media { modality: String, local_ids: Vec<u32> },
}

/// Concatenate text and bracketed media spans in document order, with a
/// trailing `<eos>`.
pub fn build_interleaved_sample(
    vocab: &UnifiedVocab,
    document: &[Chunk],
) -> Result<TokenSequence, BuildError> {
    let mut b = SeqBuilder::new(vocab, true);
    for chunk in document {
        match chunk {
            Chunk::Text(s) => b.text(s)?,
            Chunk::Media { modality, local_ids } => b.media(modality, local_ids)?,
        }
    }
    b.special(vocab.eos());
    Ok(b.finish())
}

/// Greedy first-fit packing: each sample goes, whole, into the first bin
/// with room, else a new bin. Bins are padded to `max_len` with `pad_id`
/// (loss mask false on pad positions); content keeps its original masks.
pub fn pack(
    samples: &[TokenSequence],
    max_len: usize,
    pad_id: u32,
) -> Result<Vec<TokenSequence>, BuildError> {
    if max_len == 0 {
        return Err(BuildError::InvalidArg("max_len must be >= 1".into()));
    }
    let mut bins: Vec<TokenSequence> = Vec::new();
    for sample in samples {
        if sample.len() > max_len {
            return Err(BuildError::SampleTooLong { len: sample.len(), max_len });
        }
        let slot = bins.iter().position(|b| b.len() + sample.len() <= max_len);
        let bin = match slot {
            Some(i) => &mut bins[i],
            None => {
                bins.push(TokenSequence {
                    tokens: Vec::new(),
                    loss_mask: Vec::new(),
                    segments: Vec::new(),
                });
                bins.last_mut().unwrap()
            }
        };
        let base = bin.len();
        bin.tokens.extend_from_slice(&sample.tokens);
        bin.loss_mask.extend_from_slice(&sample.loss_mask);
        bin.segments.extend(sample.segments.iter().map(|s| SegmentSpan {
            kind: s.kind.clone(),
            start: s.start + base,
            end: s.end + base,
        }));
    }
    for bin in &mut bins {
        while bin.len() < max_len {
            bin.tokens.push(pad_id);
            bin.loss_mask.push(false);
        }
    }
    Ok(bins)
}

/// Relative sampling weights over named datasets; weights need not sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub items: Vec<(String, f64)>,
}

impl MixtureSpec {
    pub fn new(items: Vec<(String, f64)>) -> Self {
        MixtureSpec { items }
    }
}

/// Draw `n` dataset names i.i.d. proportional to the normalized weights.
pub fn sample_mixture(spec: &MixtureSpec, seed: u64, n: usize) -> Result<Vec<String>, BuildError> {
    let mut total = 0.0f64;
    for &(_, w) in &spec.items {
        if w < 0.0 || !w.is_finite() {
            return Err(BuildError::NegativeWeight(w));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(BuildError::AllZeroWeights);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0f64;
        let mut pick = spec.items.len() - 1;
        for (i, &(_, w)) in spec.items.iter().enumerate() {
            acc += w;
            if u < acc && w > 0.0 {
                pick = i;
                break;
            }
        }
        out.push(spec.items[pick].0.clone());
    }
    Ok(out)
}

/// Render a token sequence for golden files and logs: text tokens as bytes,
/// specials by name, modality tokens as `<name:local>`.
pub fn render_tokens(vocab: &UnifiedVocab, tokens: &[u32]) -> Result<String, BuildError> {
    let mut out = String::new();
    for &t in tokens {
        match vocab.to_local(t)? {
            TokenClass::Text(b) => {
                let byte = b as u8;
                if byte.is_ascii() && !byte.is_ascii_control() {
                    out.push(byte as char);
                } else {
                    out.push_str(&format!("\\x{byte:02x}"));
                }
            }
            TokenClass::Special(name) => out.push_str(name),
            TokenClass::Local { modality, local } => {
                out.push_str(&format!("<{modality}:{local}>"));
            }
        }
    }
    Ok(out)
}

/// A small built-in pool of bidirectional instructions; `{X}` is replaced by
/// the modality name. Callers may supply their own pools instead.
pub mod instructions {
    use super::Direction;

    pub const X_TO_TEXT: &[&str] = &[
        "Describe the following {X} in words",
        "What does this {X} convey",
        "Give a caption for the {X}",
        "Summarize the content of the {X}",
        "Write text that matches the {X}",
        "Transcribe the {X}",
    ];

    pub const TEXT_TO_X: &[&str] = &[
        "Please generate {X} based on the provided text",
        "Create {X} that matches the description",
        "Produce {X} for the following caption",
        "Turn this description into {X}",
        "Synthesize {X} from the text",
        "Render the text as {X}",
    ];

    pub fn pick(modality: &str, direction: Direction, index: usize) -> String {
        let pool = match direction {
            Direction::XToText => X_TO_TEXT,
            Direction::TextToX => TEXT_TO_X,
        };
        pool[index % pool.len()].replace("{X}", modality)
    }
}
