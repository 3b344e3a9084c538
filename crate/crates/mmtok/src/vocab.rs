//! Unified vocabulary: one global id space covering a toy byte-level text
//! block, per-modality token blocks, and special tokens.
//!
//! Layout is deterministic: text ids come first, then each registered
//! modality's block immediately followed by its two bracket specials, and
//! finally the base specials (`pad`, `<eos>`, `<eoh>`, `[Human]`,
//! `[AnyGPT]`) which are allocated when the vocabulary is frozen. Freezing
//! fixes the mapping; every mutating call afterwards fails.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("vocabulary is frozen")]
    AlreadyFrozen,
    #[error("vocabulary is not frozen yet")]
    NotFrozen,
    #[error("modality {0:?} already registered")]
    DuplicateModality(String),
    #[error("modality size must be >= 1")]
    ZeroSize,
    #[error("cannot freeze a vocabulary with no modalities")]
    EmptyVocab,
    #[error("invalid modality name {0:?}")]
    InvalidName(String),
    #[error("unknown modality {0:?}")]
    UnknownModality(String),
    #[error("id {0} out of range")]
    OutOfRange(u64),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

pub const PAD: &str = "pad";
pub const EOS: &str = "<eos>";
pub const EOH: &str = "<eoh>";
pub const HUMAN: &str = "[Human]";
pub const AGENT: &str = "[AnyGPT]";

/// One modality's slice of the global id space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub name: String,
    pub offset: u32,
    pub size: u32,
    /// Global id of the `<soX>` bracket special.
    pub begin: u32,
    /// Global id of the `<eoX>` bracket special.
    pub end: u32,
}

/// Classification of a global id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass<'a> {
    /// A text token; payload is the byte value.
    Text(u32),
    /// A modality-local token.
    Local { modality: &'a str, local: u32 },
    Special(&'a str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedVocab {
    text_base: u32,
    entries: Vec<ModalityEntry>,
    specials: BTreeMap<String, u32>,
    special_names: BTreeMap<u32, String>,
    total: u32,
    frozen: bool,
}

impl UnifiedVocab {
    /// Start building a vocabulary over a byte-level text block of the given
    /// size (256 covers all bytes).
    pub fn new(text_base: u32) -> Self {
        UnifiedVocab {
            text_base,
            entries: Vec::new(),
            specials: BTreeMap::new(),
            special_names: BTreeMap::new(),
            total: text_base,
            frozen: false,
        }
    }

    /// Append a modality block of `size` local ids plus its two brackets.
    pub fn register_modality(&mut self, name: &str, size: u32) -> Result<(), VocabError> {
        if self.frozen {
            return Err(VocabError::AlreadyFrozen);
        }
        if size == 0 {
            return Err(VocabError::ZeroSize);
        }
        if name.is_empty()
            || name == "text"
            || name == "special"
            || !name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        {
            return Err(VocabError::InvalidName(name.to_string()));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(VocabError::DuplicateModality(name.to_string()));
        }
        let offset = self.total;
        let (so, eo) = self.bracket_names(name);
        let begin = offset + size;
        let end = begin + 1;
        self.insert_special(so, begin);
        self.insert_special(eo, end);
        self.entries.push(ModalityEntry { name: name.to_string(), offset, size, begin, end });
        self.total = end + 1;
        Ok(())
    }

    /// Bracket specials use the first two characters of the modality name
    /// (`<soim>`/`<eoim>` for `image`); the full name on collision.
    fn bracket_names(&self, name: &str) -> (String, String) {
        let prefix: String = name.chars().take(2).collect();
        let so = format!("<so{prefix}>");
        if self.specials.contains_key(&so) {
            (format!("<so{name}>"), format!("<eo{name}>"))
        } else {
            (so, format!("<eo{prefix}>"))
        }
    }

    fn insert_special(&mut self, name: String, id: u32) {
        self.special_names.insert(id, name.clone());
        self.specials.insert(name, id);
    }

    /// Fix the mapping. Allocates the base specials and forbids further
    /// registration. Idempotent.
    pub fn freeze(&mut self) -> Result<(), VocabError> {
        if self.frozen {
            return Ok(());
        }
        if self.entries.is_empty() {
            return Err(VocabError::EmptyVocab);
        }
        for name in [PAD, EOS, EOH, HUMAN, AGENT] {
            let id = self.total;
            self.insert_special(name.to_string(), id);
            self.total += 1;
        }
        self.frozen = true;
        Ok(())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn total_size(&self) -> u32 {
        self.total
    }

    pub fn text_base(&self) -> u32 {
        self.text_base
    }

    pub fn num_specials(&self) -> usize {
        self.specials.len()
    }

    pub fn modalities(&self) -> &[ModalityEntry] {
        &self.entries
    }

    pub fn modality(&self, name: &str) -> Result<&ModalityEntry, VocabError> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| VocabError::UnknownModality(name.to_string()))
    }

    pub fn special(&self, name: &str) -> Option<u32> {
        self.specials.get(name).copied()
    }

    pub fn specials(&self) -> &BTreeMap<String, u32> {
        &self.specials
    }

    pub fn pad(&self) -> u32 {
        self.specials[PAD]
    }

    pub fn eos(&self) -> u32 {
        self.specials[EOS]
    }

    pub fn eoh(&self) -> u32 {
        self.specials[EOH]
    }

    pub fn human(&self) -> u32 {
        self.specials[HUMAN]
    }

    pub fn agent(&self) -> u32 {
        self.specials[AGENT]
    }

    /// Map a modality-local id to its global id.
    pub fn to_global(&self, modality: &str, local: u32) -> Result<u32, VocabError> {
        if !self.frozen {
            return Err(VocabError::NotFrozen);
        }
        let entry = self.modality(modality)?;
        if local >= entry.size {
            return Err(VocabError::OutOfRange(local as u64));
        }
        Ok(entry.offset + local)
    }

    /// Classify a global id as text, modality-local, or special.
    pub fn to_local(&self, global: u32) -> Result<TokenClass<'_>, VocabError> {
        if !self.frozen {
            return Err(VocabError::NotFrozen);
        }
        if global >= self.total {
            return Err(VocabError::OutOfRange(global as u64));
        }
        if global < self.text_base {
            return Ok(TokenClass::Text(global));
        }
        for entry in &self.entries {
            if global >= entry.offset && global < entry.offset + entry.size {
                return Ok(TokenClass::Local { modality: &entry.name, local: global - entry.offset });
            }
        }
        match self.special_names.get(&global) {
            Some(name) => Ok(TokenClass::Special(name)),
            // Unreachable when internal invariants hold; classification is total.
            None => Err(VocabError::OutOfRange(global as u64)),
        }
    }

    /// Byte-level text token.
    pub fn text_token(&self, byte: u8) -> Result<u32, VocabError> {
        if (byte as u32) < self.text_base {
            Ok(byte as u32)
        } else {
            Err(VocabError::OutOfRange(byte as u64))
        }
    }

    pub fn encode_text(&self, s: &str) -> Result<Vec<u32>, VocabError> {
        s.bytes().map(|b| self.text_token(b)).collect()
    }

    pub fn manifest(&self) -> Result<Manifest, VocabError> {
        if !self.frozen {
            return Err(VocabError::NotFrozen);
        }
        Ok(Manifest {
            text_base: self.text_base,
            specials: self.specials.clone(),
            modalities: self.entries.clone(),
            total: self.total,
        })
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self, VocabError> {
        let mut expected = m.text_base as u64;
        for e in &m.modalities {
            if e.offset as u64 != expected || e.begin as u64 != expected + e.size as u64 || e.end != e.begin + 1 {
                return Err(VocabError::InvalidManifest(format!("modality {:?} misplaced", e.name)));
            }
            expected += e.size as u64 + 2;
        }
        let sum = m.text_base as u64
            + m.modalities.iter().map(|e| e.size as u64).sum::<u64>()
            + m.specials.len() as u64;
        if sum != m.total as u64 {
            return Err(VocabError::InvalidManifest(format!(
                "total {} does not match components {}",
                m.total, sum
            )));
        }
        let mut special_names = BTreeMap::new();
        for (name, &id) in &m.specials {
            if special_names.insert(id, name.clone()).is_some() {
                return Err(VocabError::InvalidManifest(format!("special id {id} reused")));
            }
        }
        for name in [PAD, EOS, EOH, HUMAN, AGENT] {
            if !m.specials.contains_key(name) {
                return Err(VocabError::InvalidManifest(format!("missing special {name:?}")));
            }
        }
        Ok(UnifiedVocab {
            text_base: m.text_base,
            entries: m.modalities.clone(),
            specials: m.specials.clone(),
            special_names,
            total: m.total,
            frozen: true,
        })
    }
}

/// The JSON contract shared by the tokenizer, LM, and parser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub text_base: u32,
    pub specials: BTreeMap<String, u32>,
    pub modalities: Vec<ModalityEntry>,
    pub total: u32,
}

/// The default three-modality vocabulary used throughout: byte-level text
/// plus image/speech/music blocks. Speech contributes only its semantic
/// (layer-1) codebook.
pub fn standard_vocab(
    image_size: u32,
    speech_semantic_size: u32,
    music_size: u32,
) -> Result<UnifiedVocab, VocabError> {
    let mut v = UnifiedVocab::new(256);
    v.register_modality("image", image_size)?;
    v.register_modality("speech", speech_semantic_size)?;
    v.register_modality("music", music_size)?;
    v.freeze()?;
    Ok(v)
}
