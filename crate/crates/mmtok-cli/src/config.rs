//! Pipeline configuration: one JSON file, secrets via environment
//! variables named in the config. Relative paths resolve against the config
//! file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mmtok::lm::{DecodeStrategy, ModelConfig, TrainConfig};
use mmtok::parser::TokenScheme;
use mmtok::rvq::{Rate, RvqConfig};
use mmtok::sequence::{CodeLayout, MixtureSpec};
use mmtok::synth::FilterRules;
use mmtok::vocab::{UnifiedVocab, VocabError};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_text_base")]
    pub text_base: u32,
    pub modalities: Vec<ModalityConfig>,
    pub paths: Paths,
    #[serde(default)]
    pub build: BuildSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Decoding strategy per generation target ("text" plus each modality).
    #[serde(default = "default_decode")]
    pub decode: BTreeMap<String, DecodeStrategy>,
    /// Dataset mixture weights; empty means uniform over `build.datasets`.
    #[serde(default)]
    pub mixture: Vec<(String, f64)>,
    #[serde(default)]
    pub synth: SynthSection,
}

fn default_text_base() -> u32 {
    256
}

fn default_decode() -> BTreeMap<String, DecodeStrategy> {
    BTreeMap::from([
        ("text".to_string(), DecodeStrategy::text()),
        ("image".to_string(), DecodeStrategy::image()),
        ("speech".to_string(), DecodeStrategy::speech()),
        ("music".to_string(), DecodeStrategy::music()),
    ])
}

/// The dataset mixture from the pre-training data table: interleaved 0.05,
/// image-text 0.3, mls 0.13, other speech 0.27, music 0.25.
pub fn default_pretrain_mixture() -> Vec<(String, f64)> {
    vec![
        ("interleaved-image-text".to_string(), 0.05),
        ("image-text".to_string(), 0.30),
        ("mls".to_string(), 0.13),
        ("speech-text".to_string(), 0.27),
        ("music-text".to_string(), 0.25),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub frame_dim: usize,
    pub num_layers: usize,
    pub codebook_size: usize,
    #[serde(default = "default_rate")]
    pub frame_rate: [u32; 2],
    /// The LM carries only the layer-1 column of this modality's codes.
    #[serde(default)]
    pub semantic_only: bool,
    #[serde(default = "default_layout")]
    pub layout: CodeLayout,
    /// Tokenizer training frames (JSON).
    pub frames: PathBuf,
    /// Codebook file, written by train-tokenizer and read elsewhere.
    pub codebook: PathBuf,
}

fn default_rate() -> [u32; 2] {
    [50, 1]
}

fn default_layout() -> CodeLayout {
    CodeLayout::PerLayer
}

impl ModalityConfig {
    pub fn rvq_config(&self, seed: u64) -> RvqConfig {
        RvqConfig {
            frame_dim: self.frame_dim,
            num_layers: self.num_layers,
            codebook_size: self.codebook_size,
            frame_rate: Rate { num: self.frame_rate[0], den: self.frame_rate[1] },
            seed,
        }
    }

    /// Size of this modality's block in the unified vocabulary.
    pub fn local_vocab_size(&self) -> u32 {
        if self.semantic_only {
            self.codebook_size as u32
        } else {
            match self.layout {
                CodeLayout::PerLayer => (self.num_layers * self.codebook_size) as u32,
                CodeLayout::Shared => self.codebook_size as u32,
            }
        }
    }

    pub fn scheme(&self) -> TokenScheme {
        if self.semantic_only {
            TokenScheme::SemanticOnly
        } else {
            TokenScheme::FullFlatten { layout: self.layout }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub vocab_manifest: PathBuf,
    pub packed: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub generate_out: PathBuf,
    pub decode_trace: PathBuf,
    pub media_dir: PathBuf,
    pub dialogs: PathBuf,
    pub rejected_dialogs: PathBuf,
    pub synth_stats: PathBuf,
    pub eval_report: PathBuf,
    /// Prompt records for `eval` (and the default for `generate`).
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    /// Held-out packed data for perplexity; falls back to `packed`.
    #[serde(default)]
    pub eval_packed: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildSection {
    /// Dataset name to records JSONL.
    pub datasets: BTreeMap<String, PathBuf>,
    pub num_samples: usize,
    pub max_len: usize,
    #[serde(default)]
    pub mask_human_turn: bool,
}

impl Default for BuildSection {
    fn default() -> Self {
        BuildSection { datasets: BTreeMap::new(), num_samples: 64, max_len: 256, mask_human_turn: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip: f64,
    /// Stop early once the step loss drops below this.
    #[serde(default)]
    pub target_loss: Option<f64>,
    /// Continue from this checkpoint, expanding its vocabulary to the
    /// manifest total (new rows seeded random).
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    1
}

impl Default for TrainSection {
    fn default() -> Self {
        // Desk-scale defaults; the learning-rate family follows the scaled
        // training recipe (peak 6e-5, warmup 0.03, cosine, clip 1.0).
        TrainSection {
            dim: 128,
            num_layers: 4,
            num_heads: 4,
            max_seq_len: 256,
            peak_lr: 6e-5,
            warmup_ratio: 0.03,
            steps: 2000,
            batch_size: 16,
            clip: 1.0,
            target_loss: None,
            init_checkpoint: None,
            log_every: 1,
        }
    }
}

impl TrainSection {
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dim: self.dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr,
            warmup_ratio: self.warmup_ratio,
            steps: self.steps,
            batch_size: self.batch_size,
            clip: self.clip,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSection {
    /// Pool files (one entry per line); built-in pools when absent.
    #[serde(default)]
    pub metatopics: Option<PathBuf>,
    #[serde(default)]
    pub scenario_demos: Option<PathBuf>,
    #[serde(default)]
    pub dialog_demos: Option<PathBuf>,
    pub rounds_per_metatopic: usize,
    pub max_topics: Option<usize>,
    pub max_dialogs: Option<usize>,
    pub in_flight_cap: usize,
    #[serde(default)]
    pub rules: FilterRules,
    #[serde(default)]
    pub clients: ClientSection,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            metatopics: None,
            scenario_demos: None,
            dialog_demos: None,
            rounds_per_metatopic: 4,
            max_topics: Some(40),
            max_dialogs: Some(40),
            in_flight_cap: 8,
            rules: FilterRules::default(),
            clients: ClientSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientSection {
    /// "mock" (default) or "live".
    pub mode: String,
    #[serde(default)]
    pub chat_endpoint: Option<String>,
    #[serde(default)]
    pub image_endpoint: Option<String>,
    #[serde(default)]
    pub music_endpoint: Option<String>,
    #[serde(default)]
    pub tts_endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for ClientSection {
    fn default() -> Self {
        ClientSection {
            mode: "mock".to_string(),
            chat_endpoint: None,
            image_endpoint: None,
            music_endpoint: None,
            tts_endpoint: None,
            api_key_env: None,
            timeout_secs: 30,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: PipelineConfig = serde_json::from_str(&raw)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        for m in &mut self.modalities {
            fix(&mut m.frames);
            fix(&mut m.codebook);
        }
        let p = &mut self.paths;
        fix(&mut p.vocab_manifest);
        fix(&mut p.packed);
        fix(&mut p.checkpoint);
        fix(&mut p.train_log);
        fix(&mut p.generate_out);
        fix(&mut p.decode_trace);
        fix(&mut p.media_dir);
        fix(&mut p.dialogs);
        fix(&mut p.rejected_dialogs);
        fix(&mut p.synth_stats);
        fix(&mut p.eval_report);
        if let Some(q) = &mut p.prompts {
            fix(q);
        }
        if let Some(q) = &mut p.eval_packed {
            fix(q);
        }
        for path in self.build.datasets.values_mut() {
            fix(path);
        }
        if let Some(q) = &mut self.train.init_checkpoint {
            fix(q);
        }
        for q in [
            &mut self.synth.metatopics,
            &mut self.synth.scenario_demos,
            &mut self.synth.dialog_demos,
        ]
        .into_iter()
        .flatten()
        {
            fix(q);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.modalities.is_empty() {
            return Err(CliError::Usage("config needs at least one modality".into()));
        }
        if !self.decode.contains_key("text") {
            return Err(CliError::Usage("decode strategies must cover \"text\"".into()));
        }
        for m in &self.modalities {
            if !self.decode.contains_key(&m.name) {
                return Err(CliError::Usage(format!(
                    "decode strategies must cover modality {:?}",
                    m.name
                )));
            }
        }
        for (name, strategy) in &self.decode {
            strategy
                .validate()
                .map_err(|e| CliError::Usage(format!("decode strategy {name:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn modality(&self, name: &str) -> Result<&ModalityConfig, CliError> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| CliError::Usage(format!("unknown modality {name:?}")))
    }

    /// Construct the unified vocabulary this config describes.
    pub fn build_vocab(&self) -> Result<UnifiedVocab, VocabError> {
        let mut vocab = UnifiedVocab::new(self.text_base);
        for m in &self.modalities {
            vocab.register_modality(&m.name, m.local_vocab_size())?;
        }
        vocab.freeze()?;
        Ok(vocab)
    }

    pub fn mixture_spec(&self) -> MixtureSpec {
        if self.mixture.is_empty() {
            MixtureSpec::new(self.build.datasets.keys().map(|k| (k.clone(), 1.0)).collect())
        } else {
            MixtureSpec::new(self.mixture.clone())
        }
    }
}

/// Tokenizer training data: `{"dim": D, "frames": [[f32; D], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FramesFile {
    pub dim: usize,
    pub frames: Vec<Vec<f32>>,
}

/// One raw dataset record. `direction` is optional; absent means a seeded
/// random pick at build time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub kind: String,
    #[serde(default)]
    pub modality: Option<String>,
    #[serde(default)]
    pub instruction: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub codes: Option<mmtok::rvq::CodeMatrix>,
    #[serde(default)]
    pub direction: Option<mmtok::sequence::Direction>,
    #[serde(default)]
    pub chunks: Option<Vec<RawChunk>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawChunk {
    Text { text: String },
    Media { modality: String, codes: mmtok::rvq::CodeMatrix },
}

/// One generation request: build the pair-template prompt for `target` and
/// decode with that target's strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRecord {
    pub target: String,
    pub instruction: String,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub media: Option<PromptMedia>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptMedia {
    pub modality: String,
    pub codes: mmtok::rvq::CodeMatrix,
}
