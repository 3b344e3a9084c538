//! Validation and segmentation of generated token streams, and routing of
//! modality segments back to frame space.
//!
//! [`validate`] reports structural violations as data; [`parse_segments`]
//! requires a clean stream (strict mode) while [`parse_segments_salvage`]
//! repairs what it can: open spans are closed at stream end and orphan or
//! misplaced tokens are dropped. Nested modality spans are never allowed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refiner::{refine, Predictor, RefineSchedule, RefinerError};
use crate::rvq::{decode, decode_partial, CodeMatrix, CodebookSet, Frames, RvqError};
use crate::sequence::{unflatten_codes, BuildError, CodeLayout, SegmentKind};
use crate::vocab::{TokenClass, UnifiedVocab};

#[derive(Debug, Error)]
pub enum ParserError {
    #[error("malformed stream: {} violation(s), first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    MalformedStream(Vec<Violation>),
    #[error("segment kind {0:?} is not a modality")]
    NotModality(String),
    #[error("no codebooks registered for modality {0:?}")]
    MissingCodebooks(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Rvq(#[from] RvqError),
    #[error(transparent)]
    Refiner(#[from] RefinerError),
}

/// A structural defect in a token stream. Violations are data, not failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// A begin bracket with no matching end by stream end.
    UnmatchedBegin { pos: usize, modality: String },
    /// An end bracket with no open span, or closing the wrong modality.
    UnmatchedEnd { pos: usize, modality: String },
    /// A begin bracket inside an already open span.
    NestedSpan { pos: usize, modality: String },
    /// A modality-local token outside any span.
    OrphanModalityToken { pos: usize, modality: String },
    /// A token inside a span that does not belong to the open modality.
    WrongTokenInSpan { pos: usize, open: String },
    /// An id outside the vocabulary range.
    OutOfRange { pos: usize, id: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnmatchedBegin { pos, modality } => {
                write!(f, "unmatched <so{}...> at {pos}", &modality)
            }
            Violation::UnmatchedEnd { pos, modality } => {
                write!(f, "unmatched end bracket for {modality} at {pos}")
            }
            Violation::NestedSpan { pos, modality } => {
                write!(f, "nested {modality} span opened at {pos}")
            }
            Violation::OrphanModalityToken { pos, modality } => {
                write!(f, "{modality} token outside any span at {pos}")
            }
            Violation::WrongTokenInSpan { pos, open } => {
                write!(f, "token at {pos} does not belong to open {open} span")
            }
            Violation::OutOfRange { pos, id } => write!(f, "id {id} at {pos} out of range"),
        }
    }
}

/// One parsed span. Media spans cover their brackets; `payload` holds the
/// modality-local ids of the interior (empty for text and special spans).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
    pub payload: Vec<u32>,
}

enum Bracket<'a> {
    Begin(&'a str),
    End(&'a str),
    Other,
}

fn classify_bracket<'a>(vocab: &'a UnifiedVocab, id: u32) -> Bracket<'a> {
    for e in vocab.modalities() {
        if id == e.begin {
            return Bracket::Begin(&e.name);
        }
        if id == e.end {
            return Bracket::End(&e.name);
        }
    }
    Bracket::Other
}

/// Report every structural violation in the stream. An empty result means
/// the stream is well-formed.
pub fn validate(vocab: &UnifiedVocab, tokens: &[u32]) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (pos, &id) in tokens.iter().enumerate() {
        let class = match vocab.to_local(id) {
            Ok(c) => c,
            Err(_) => {
                violations.push(Violation::OutOfRange { pos, id });
                continue;
            }
        };
        match class {
            TokenClass::Special(_) => match classify_bracket(vocab, id) {
                Bracket::Begin(name) => {
                    if let Some((open_name, _)) = &open {
                        violations.push(Violation::NestedSpan { pos, modality: name.to_string() });
                        let _ = open_name;
                    } else {
                        open = Some((name.to_string(), pos));
                    }
                }
                Bracket::End(name) => match &open {
                    Some((open_name, _)) if open_name == name => open = None,
                    _ => violations.push(Violation::UnmatchedEnd { pos, modality: name.to_string() }),
                },
                Bracket::Other => {
                    if let Some((open_name, _)) = &open {
                        violations.push(Violation::WrongTokenInSpan { pos, open: open_name.clone() });
                    }
                }
            },
            TokenClass::Local { modality, .. } => match &open {
                Some((open_name, _)) if open_name == modality => {}
                Some((open_name, _)) => {
                    violations.push(Violation::WrongTokenInSpan { pos, open: open_name.clone() })
                }
                None => violations
                    .push(Violation::OrphanModalityToken { pos, modality: modality.to_string() }),
            },
            TokenClass::Text(_) => {
                if let Some((open_name, _)) = &open {
                    violations.push(Violation::WrongTokenInSpan { pos, open: open_name.clone() });
                }
            }
        }
    }
    if let Some((modality, pos)) = open {
        violations.push(Violation::UnmatchedBegin { pos, modality });
    }
    violations
}

/// Strict segmentation: fails on any violation. On success the segments are
/// total and ordered; concatenating their ranges reproduces the input.
pub fn parse_segments(vocab: &UnifiedVocab, tokens: &[u32]) -> Result<Vec<Segment>, ParserError> {
    let violations = validate(vocab, tokens);
    if !violations.is_empty() {
        return Err(ParserError::MalformedStream(violations));
    }
    let mut segments = Vec::new();
    let mut pos = 0usize;
    while pos < tokens.len() {
        let class = vocab.to_local(tokens[pos]).expect("validated");
        match class {
            TokenClass::Text(_) => {
                let start = pos;
                while pos < tokens.len()
                    && matches!(vocab.to_local(tokens[pos]), Ok(TokenClass::Text(_)))
                {
                    pos += 1;
                }
                segments.push(Segment {
                    kind: SegmentKind::Text,
                    start,
                    end: pos,
                    payload: Vec::new(),
                });
            }
            TokenClass::Special(_) => match classify_bracket(vocab, tokens[pos]) {
                Bracket::Begin(name) => {
                    let name = name.to_string();
                    let entry = vocab.modality(&name).expect("validated");
                    let (offset, end_id) = (entry.offset, entry.end);
                    let start = pos;
                    pos += 1;
                    let mut payload = Vec::new();
                    while tokens[pos] != end_id {
                        payload.push(tokens[pos] - offset);
                        pos += 1;
                    }
                    pos += 1; // the end bracket
                    segments.push(Segment {
                        kind: SegmentKind::Modality(name),
                        start,
                        end: pos,
                        payload,
                    });
                }
                _ => {
                    segments.push(Segment {
                        kind: SegmentKind::Special,
                        start: pos,
                        end: pos + 1,
                        payload: Vec::new(),
                    });
                    pos += 1;
                }
            },
            TokenClass::Local { .. } => unreachable!("validated stream has no orphan locals"),
        }
    }
    Ok(segments)
}

/// Lossy segmentation for model output: never fails. Open spans are closed
/// at stream end; orphan modality tokens, stray brackets, and wrong-modality
/// tokens inside spans are dropped from payloads.
pub fn parse_segments_salvage(vocab: &UnifiedVocab, tokens: &[u32]) -> Vec<Segment> {
    let mut segments: Vec<Segment> = Vec::new();
    let mut open: Option<(String, usize, Vec<u32>)> = None;
    let mut text_start: Option<usize> = None;

    let flush_text = |segments: &mut Vec<Segment>, text_start: &mut Option<usize>, end: usize| {
        if let Some(start) = text_start.take() {
            segments.push(Segment { kind: SegmentKind::Text, start, end, payload: Vec::new() });
        }
    };

    for (pos, &id) in tokens.iter().enumerate() {
        let class = match vocab.to_local(id) {
            Ok(c) => c,
            Err(_) => continue,
        };
        match class {
            TokenClass::Text(_) => {
                if open.is_some() {
                    continue;
                }
                if text_start.is_none() {
                    text_start = Some(pos);
                }
            }
            TokenClass::Local { modality, local } => {
                if let Some((open_name, _, payload)) = &mut open {
                    if open_name == modality {
                        payload.push(local);
                    }
                }
                // Orphans and wrong-modality tokens are dropped.
            }
            TokenClass::Special(_) => match classify_bracket(vocab, id) {
                Bracket::Begin(name) => {
                    if open.is_none() {
                        flush_text(&mut segments, &mut text_start, pos);
                        open = Some((name.to_string(), pos, Vec::new()));
                    }
                }
                Bracket::End(name) => {
                    if let Some((open_name, start, payload)) = &open {
                        if open_name == name {
                            segments.push(Segment {
                                kind: SegmentKind::Modality(open_name.clone()),
                                start: *start,
                                end: pos + 1,
                                payload: payload.clone(),
                            });
                            open = None;
                        }
                    }
                }
                Bracket::Other => {
                    if open.is_none() {
                        flush_text(&mut segments, &mut text_start, pos);
                        segments.push(Segment {
                            kind: SegmentKind::Special,
                            start: pos,
                            end: pos + 1,
                            payload: Vec::new(),
                        });
                    }
                }
            },
        }
    }
    flush_text(&mut segments, &mut text_start, tokens.len());
    if let Some((name, start, payload)) = open {
        segments.push(Segment {
            kind: SegmentKind::Modality(name),
            start,
            end: tokens.len(),
            payload,
        });
    }
    segments
}

/// How a modality's local ids map onto its code matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum TokenScheme {
    /// The stream carries the full `T*Q` flattening.
    FullFlatten { layout: CodeLayout },
    /// The stream carries only the semantic (layer-1) column; remaining
    /// layers come from a refiner or are skipped.
    SemanticOnly,
}

/// Codebooks plus the token scheme for one modality.
pub struct ModalityCodec {
    pub books: CodebookSet,
    pub scheme: TokenScheme,
}

/// A refiner for semantic-only payloads: predictor plus unmasking schedule.
pub struct SpeechRefiner<'a> {
    pub predictor: &'a dyn Predictor,
    pub schedule: RefineSchedule,
}

/// Convert one modality segment back to frames.
///
/// Full-flatten payloads are unflattened and decoded. Semantic-only payloads
/// decode layer 1 alone, unless a refiner is supplied to complete layers
/// `2..Q` first.
pub fn detokenize_segment(
    segment: &Segment,
    codec: &ModalityCodec,
    refiner: Option<&SpeechRefiner<'_>>,
) -> Result<Frames, ParserError> {
    let SegmentKind::Modality(_) = &segment.kind else {
        return Err(ParserError::NotModality(String::from(segment.kind.clone())));
    };
    let books = &codec.books;
    match &codec.scheme {
        TokenScheme::FullFlatten { layout } => {
            let matrix = unflatten_codes(
                &segment.payload,
                books.num_layers(),
                books.codebook_size(),
                *layout,
            )?;
            Ok(decode(&matrix, books)?)
        }
        TokenScheme::SemanticOnly => match refiner {
            Some(r) => {
                let full = refine(
                    &segment.payload,
                    r.predictor,
                    &r.schedule,
                    books.num_layers(),
                    books.codebook_size(),
                )?;
                Ok(decode(&full, books)?)
            }
            None => {
                let t = segment.payload.len();
                let semantic = CodeMatrix::new(t, 1, segment.payload.clone())
                    .map_err(ParserError::Rvq)?;
                Ok(decode_partial(&semantic, books, 1)?)
            }
        },
    }
}

/// Registry of per-modality codecs for routing parsed segments.
#[derive(Default)]
pub struct Detokenizer {
    codecs: BTreeMap<String, ModalityCodec>,
}

impl Detokenizer {
    pub fn new() -> Self {
        Detokenizer::default()
    }

    pub fn insert(&mut self, modality: &str, codec: ModalityCodec) {
        self.codecs.insert(modality.to_string(), codec);
    }

    pub fn codec(&self, modality: &str) -> Option<&ModalityCodec> {
        self.codecs.get(modality)
    }

    pub fn detokenize(
        &self,
        segment: &Segment,
        refiner: Option<&SpeechRefiner<'_>>,
    ) -> Result<Frames, ParserError> {
        let SegmentKind::Modality(name) = &segment.kind else {
            return Err(ParserError::NotModality(String::from(segment.kind.clone())));
        };
        let codec = self
            .codecs
            .get(name)
            .ok_or_else(|| ParserError::MissingCodebooks(name.clone()))?;
        detokenize_segment(segment, codec, refiner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refiner::make_oracle_predictor;
    use crate::rvq::{encode, Rate, RvqConfig};
    use crate::sequence::{build_interleaved_sample, flatten_codes, Chunk};
    use crate::vocab::standard_vocab;

    fn vocab() -> UnifiedVocab {
        standard_vocab(16, 16, 64).unwrap()
    }

    fn g(v: &UnifiedVocab, m: &str, local: u32) -> u32 {
        v.to_global(m, local).unwrap()
    }

    #[test]
    fn clean_span_validates() {
        let v = vocab();
        let im = v.modality("image").unwrap().clone();
        let tokens = vec![im.begin, g(&v, "image", 1), g(&v, "image", 2), im.end];
        assert!(validate(&v, &tokens).is_empty());
    }

    #[test]
    fn wrong_end_bracket_yields_two_violations() {
        let v = vocab();
        let im = v.modality("image").unwrap().clone();
        let sp = v.modality("speech").unwrap().clone();
        let tokens = vec![im.begin, g(&v, "image", 1), sp.end];
        let violations = validate(&v, &tokens);
        assert_eq!(violations.len(), 2);
        assert!(matches!(violations[0], Violation::UnmatchedEnd { pos: 2, .. }));
        assert!(matches!(violations[1], Violation::UnmatchedBegin { pos: 0, .. }));
    }

    #[test]
    fn orphan_modality_token_reported() {
        let v = vocab();
        let tokens = vec![g(&v, "music", 5)];
        let violations = validate(&v, &tokens);
        assert_eq!(violations.len(), 1);
        assert!(matches!(
            &violations[0],
            Violation::OrphanModalityToken { pos: 0, modality } if modality == "music"
        ));
    }

    #[test]
    fn nesting_and_out_of_range_reported() {
        let v = vocab();
        let im = v.modality("image").unwrap().clone();
        let mu = v.modality("music").unwrap().clone();
        let violations = validate(&v, &[im.begin, mu.begin, im.end, v.total_size() + 5]);
        assert!(violations.iter().any(|x| matches!(x, Violation::NestedSpan { pos: 1, .. })));
        assert!(violations.iter().any(|x| matches!(x, Violation::OutOfRange { pos: 3, .. })));
    }

    #[test]
    fn wrong_modality_token_inside_span() {
        let v = vocab();
        let im = v.modality("image").unwrap().clone();
        let violations = validate(&v, &[im.begin, g(&v, "music", 0), im.end]);
        assert_eq!(violations.len(), 1);
        assert!(matches!(&violations[0], Violation::WrongTokenInSpan { pos: 1, open } if open == "image"));
    }

    #[test]
    fn parse_matches_builder_structure() {
        let v = vocab();
        let seq = build_interleaved_sample(
            &v,
            &[
                Chunk::Text("ab".into()),
                Chunk::Media { modality: "image".into(), local_ids: vec![7] },
                Chunk::Text("c".into()),
            ],
        )
        .unwrap();
        let segments = parse_segments(&v, &seq.tokens).unwrap();
        let kinds: Vec<_> = segments.iter().map(|s| s.kind.clone()).collect();
        assert_eq!(
            kinds,
            vec![
                SegmentKind::Text,
                SegmentKind::Modality("image".into()),
                SegmentKind::Text,
                SegmentKind::Special,
            ]
        );
        assert_eq!(segments[1].payload, vec![7]);
        // Structure agrees with the builder's own annotations.
        let parsed: Vec<_> = segments.iter().map(|s| (s.kind.clone(), s.start, s.end)).collect();
        let built: Vec<_> = seq.segments.iter().map(|s| (s.kind.clone(), s.start, s.end)).collect();
        assert_eq!(parsed, built);
        // Segments tile the stream exactly.
        let mut cursor = 0;
        for s in &segments {
            assert_eq!(s.start, cursor);
            cursor = s.end;
        }
        assert_eq!(cursor, seq.tokens.len());
    }

    #[test]
    fn all_text_stream_single_segment() {
        let v = vocab();
        let seq = build_interleaved_sample(&v, &[Chunk::Text("hello".into())]).unwrap();
        let segments = parse_segments(&v, &seq.tokens).unwrap();
        assert_eq!(segments.len(), 2);
        assert_eq!(segments[0].kind, SegmentKind::Text);
        assert_eq!(segments[1].kind, SegmentKind::Special);
    }

    #[test]
    fn adjacent_spans_have_correct_payloads() {
        let v = vocab();
        let seq = build_interleaved_sample(
            &v,
            &[
                Chunk::Media { modality: "image".into(), local_ids: vec![1, 2] },
                Chunk::Media { modality: "music".into(), local_ids: vec![3] },
            ],
        )
        .unwrap();
        let segments = parse_segments(&v, &seq.tokens).unwrap();
        assert_eq!(segments[0].payload, vec![1, 2]);
        assert_eq!(segments[0].kind, SegmentKind::Modality("image".into()));
        assert_eq!(segments[1].payload, vec![3]);
        assert_eq!(segments[1].kind, SegmentKind::Modality("music".into()));
    }

    #[test]
    fn strict_mode_rejects_malformed() {
        let v = vocab();
        let im = v.modality("image").unwrap().clone();
        match parse_segments(&v, &[im.begin]) {
            Err(ParserError::MalformedStream(violations)) => assert_eq!(violations.len(), 1),
            other => panic!("expected MalformedStream, got {other:?}"),
        }
    }

    #[test]
    fn salvage_closes_open_spans_and_drops_orphans() {
        let v = vocab();
        let im = v.modality("image").unwrap().clone();
        // Orphan music token, then an unterminated image span.
        let tokens = vec![g(&v, "music", 1), v.text_token(b'a').unwrap(), im.begin, g(&v, "image", 4)];
        let segments = parse_segments_salvage(&v, &tokens);
        assert_eq!(segments.len(), 2);
        assert_eq!(segments[0].kind, SegmentKind::Text);
        assert_eq!(segments[1].kind, SegmentKind::Modality("image".into()));
        assert_eq!(segments[1].payload, vec![4]);
        assert_eq!(segments[1].end, tokens.len());
    }

    #[test]
    fn salvage_equals_strict_on_clean_streams() {
        let v = vocab();
        let seq = build_interleaved_sample(
            &v,
            &[
                Chunk::Text("hi".into()),
                Chunk::Media { modality: "speech".into(), local_ids: vec![0, 1] },
            ],
        )
        .unwrap();
        let strict = parse_segments(&v, &seq.tokens).unwrap();
        let salvage = parse_segments_salvage(&v, &seq.tokens);
        assert_eq!(strict, salvage);
    }

    fn small_books(q: usize, k: usize, seed: u64) -> CodebookSet {
        CodebookSet::seeded_random(RvqConfig {
            frame_dim: 4,
            num_layers: q,
            codebook_size: k,
            frame_rate: Rate::per_second(50),
            seed,
        })
        .unwrap()
    }

    #[test]
    fn detokenize_image_single_code() {
        let books = small_books(1, 16, 3);
        let seg = Segment {
            kind: SegmentKind::Modality("image".into()),
            start: 0,
            end: 3,
            payload: vec![3],
        };
        let codec = ModalityCodec {
            books: books.clone(),
            scheme: TokenScheme::FullFlatten { layout: CodeLayout::PerLayer },
        };
        let frames = detokenize_segment(&seg, &codec, None).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames.frame(0), books.centroid(0, 3));
    }

    #[test]
    fn detokenize_music_full_flatten() {
        let books = small_books(4, 16, 4);
        let signal = Frames::gaussian(250, 4, 9);
        let codes = encode(&signal, &books).unwrap();
        let payload = flatten_codes(&codes, 16, CodeLayout::PerLayer);
        assert_eq!(payload.len(), 1000);
        let seg = Segment {
            kind: SegmentKind::Modality("music".into()),
            start: 0,
            end: payload.len() + 2,
            payload,
        };
        let codec = ModalityCodec {
            books: books.clone(),
            scheme: TokenScheme::FullFlatten { layout: CodeLayout::PerLayer },
        };
        let frames = detokenize_segment(&seg, &codec, None).unwrap();
        assert_eq!(frames.len(), 250);
        assert_eq!(frames, decode(&codes, &books).unwrap());
    }

    #[test]
    fn detokenize_speech_with_oracle_refiner_matches_full_decode() {
        let books = small_books(8, 16, 5);
        let signal = Frames::gaussian(50, 4, 11);
        let full = encode(&signal, &books).unwrap();
        let seg = Segment {
            kind: SegmentKind::Modality("speech".into()),
            start: 0,
            end: 52,
            payload: full.column(0),
        };
        let codec = ModalityCodec { books: books.clone(), scheme: TokenScheme::SemanticOnly };
        let oracle = make_oracle_predictor(&full, 16);
        let refiner = SpeechRefiner { predictor: &oracle, schedule: RefineSchedule::default() };
        let frames = detokenize_segment(&seg, &codec, Some(&refiner)).unwrap();
        assert_eq!(frames, decode(&full, &books).unwrap());

        // Without a refiner, layer 1 alone.
        let layer1 = detokenize_segment(&seg, &codec, None).unwrap();
        let semantic = CodeMatrix::new(50, 1, full.column(0)).unwrap();
        assert_eq!(layer1, decode_partial(&semantic, &books, 1).unwrap());
    }

    #[test]
    fn detokenizer_registry_reports_missing() {
        let det = Detokenizer::new();
        let seg = Segment {
            kind: SegmentKind::Modality("music".into()),
            start: 0,
            end: 2,
            payload: vec![],
        };
        assert!(matches!(
            det.detokenize(&seg, None),
            Err(ParserError::MissingCodebooks(m)) if m == "music"
        ));
    }

    #[test]
    fn bracket_corruption_always_detected() {
        let v = vocab();
        let seq = build_interleaved_sample(
            &v,
            &[
                Chunk::Text("xy".into()),
                Chunk::Media { modality: "music".into(), local_ids: vec![0, 1, 2] },
            ],
        )
        .unwrap();
        let im = v.modality("image").unwrap().clone();
        for pos in 0..seq.tokens.len() {
            let is_bracket = {
                matches!(classify_bracket(&v, seq.tokens[pos]), Bracket::Begin(_) | Bracket::End(_))
            };
            if !is_bracket {
                continue;
            }
            // Replace a bracket with an unrelated begin bracket.
            let mut corrupted = seq.tokens.clone();
            corrupted[pos] = if corrupted[pos] == im.begin { im.end } else { im.begin };
            assert!(!validate(&v, &corrupted).is_empty(), "corruption at {pos} undetected");
        }
    }
}
