//! The six pipeline commands. Each is a plain function over the loaded
//! config so tests can drive them without spawning the binary; `main`
//! dispatches to these. Commands never mutate their input files and are
//! deterministic given the config seeds.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mmtok::lm::{
    self, batch_loss_and_grads, expand_vocab, forward, generate, init_model, nll_loss,
    DecodeMode, ModelParams, TrainSeq, Trainer,
};
use mmtok::parser::{
    parse_segments_salvage, validate, Detokenizer, ModalityCodec, Segment, SpeechRefiner,
    TokenScheme,
};
use mmtok::refiner::{make_oracle_predictor, refine, RefineSchedule, TablePredictor};
use mmtok::rvq::{
    layer_error_curve, read_codebooks, train_codebooks, write_codebooks, CodeMatrix, Frames,
};
use mmtok::sequence::{
    build_interleaved_sample, build_pair_prefix, build_pair_sample, flatten_codes, instructions,
    pack, render_tokens, sample_mixture, BuildOptions, Chunk, Direction, SegmentKind,
    TokenSequence,
};
use mmtok::synth::{
    self, fnv1a, Clients, LiveChatClient, LiveMediaClient, MediaStore,
    MockChatClient, MockMediaClient, RetryPolicy, SynthConfig, SynthStats,
};
use mmtok::vocab::{Manifest, UnifiedVocab};

use crate::config::{
    FramesFile, ModalityConfig, PipelineConfig, PromptRecord, RawChunk, RawRecord,
};
use crate::CliError;

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn open_input(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn create_output(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_frames(path: &Path) -> Result<Frames, CliError> {
    let file: FramesFile = serde_json::from_str(&read_input(path)?)
        .map_err(|e| CliError::Usage(format!("bad frames file {}: {e}", path.display())))?;
    Ok(Frames::from_rows(&file.frames, file.dim)?)
}

fn load_vocab(config: &PipelineConfig) -> Result<UnifiedVocab, CliError> {
    let manifest: Manifest = serde_json::from_str(&read_input(&config.paths.vocab_manifest)?)
        .map_err(|e| CliError::Usage(format!("bad vocab manifest: {e}")))?;
    Ok(UnifiedVocab::from_manifest(&manifest)?)
}

fn load_checkpoint(path: &Path) -> Result<ModelParams, CliError> {
    Ok(lm::checkpoint::load(BufReader::new(open_input(path)?))?)
}

// ---------------------------------------------------------------------------
// train-tokenizer

#[derive(Debug, Serialize)]
pub struct TrainTokenizerReport {
    pub modality: String,
    pub codebook_path: PathBuf,
    pub num_layers: usize,
    pub codebook_size: usize,
    pub training_frames: usize,
    pub layer_error_curve: Vec<f64>,
}

pub fn cmd_train_tokenizer(
    config: &PipelineConfig,
    modality: &str,
) -> Result<TrainTokenizerReport, CliError> {
    let mc = config.modality(modality)?;
    let frames = load_frames(&mc.frames)?;
    let rvq_config = mc.rvq_config(config.seed ^ fnv1a(modality.as_bytes()));
    let books = train_codebooks(&frames, &rvq_config)?;
    let curve = layer_error_curve(&frames, &books)?;
    if let Some(parent) = mc.codebook.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(&mc.codebook)?);
    write_codebooks(&mut w, &books)?;
    w.flush()?;
    log::info!(
        "trained {modality} tokenizer: Q={} K={} on {} frames",
        books.num_layers(),
        books.codebook_size(),
        frames.len()
    );
    Ok(TrainTokenizerReport {
        modality: modality.to_string(),
        codebook_path: mc.codebook.clone(),
        num_layers: books.num_layers(),
        codebook_size: books.codebook_size(),
        training_frames: frames.len(),
        layer_error_curve: curve,
    })
}

// ---------------------------------------------------------------------------
// build-dataset

#[derive(Debug, Serialize)]
pub struct BuildReport {
    pub packed_path: PathBuf,
    pub manifest_path: PathBuf,
    pub samples_built: usize,
    pub samples_skipped: usize,
    pub bins: usize,
    pub content_tokens: usize,
    /// Token counts per kind ("text", "special", modality names).
    pub histogram: BTreeMap<String, usize>,
}

fn record_local_ids(mc: &ModalityConfig, codes: &CodeMatrix) -> Result<Vec<u32>, String> {
    if codes.layers() != mc.num_layers {
        return Err(format!("codes have {} layers, modality has {}", codes.layers(), mc.num_layers));
    }
    if codes.codes().iter().any(|&c| c >= mc.codebook_size as u32) {
        return Err("code index outside the codebook".to_string());
    }
    match mc.scheme() {
        TokenScheme::SemanticOnly => Ok(codes.column(0)),
        TokenScheme::FullFlatten { layout } => Ok(flatten_codes(codes, mc.codebook_size, layout)),
    }
}

fn build_record(
    config: &PipelineConfig,
    vocab: &UnifiedVocab,
    record: &RawRecord,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence, String> {
    let opts = BuildOptions { mask_human_turn: config.build.mask_human_turn };
    match record.kind.as_str() {
        "pair" => {
            let modality = record.modality.as_deref().ok_or("pair record missing modality")?;
            let mc = config.modality(modality).map_err(|e| e.to_string())?;
            let codes = record.codes.as_ref().ok_or("pair record missing codes")?;
            let local_ids = record_local_ids(mc, codes)?;
            let text = record.text.as_deref().ok_or("pair record missing text")?;
            let direction = record.direction.unwrap_or_else(|| {
                if rng.gen::<bool>() {
                    Direction::XToText
                } else {
                    Direction::TextToX
                }
            });
            let instruction = match &record.instruction {
                Some(i) => i.clone(),
                None => instructions::pick(modality, direction, rng.gen::<u32>() as usize),
            };
            build_pair_sample(vocab, &instruction, (modality, &local_ids), text, direction, &opts)
                .map_err(|e| e.to_string())
        }
        "interleaved" => {
            let chunks = record.chunks.as_ref().ok_or("interleaved record missing chunks")?;
            let mut doc = Vec::with_capacity(chunks.len());
            for chunk in chunks {
                match chunk {
                    RawChunk::Text { text } => doc.push(Chunk::Text(text.clone())),
                    RawChunk::Media { modality, codes } => {
                        let mc = config.modality(modality).map_err(|e| e.to_string())?;
                        doc.push(Chunk::Media {
                            modality: modality.clone(),
                            local_ids: record_local_ids(mc, codes)?,
                        });
                    }
                }
            }
            build_interleaved_sample(vocab, &doc).map_err(|e| e.to_string())
        }
        other => Err(format!("unknown record kind {other:?}")),
    }
}

pub fn cmd_build_dataset(config: &PipelineConfig) -> Result<BuildReport, CliError> {
    if config.build.datasets.is_empty() {
        return Err(CliError::Usage("build.datasets is empty".into()));
    }
    let vocab = config.build_vocab()?;
    let mut w = create_output(&config.paths.vocab_manifest)?;
    serde_json::to_writer_pretty(&mut w, &vocab.manifest()?)?;
    w.flush()?;

    // Load every dataset up front; records are consumed cyclically per draw.
    let mut datasets: BTreeMap<String, Vec<RawRecord>> = BTreeMap::new();
    for (name, path) in &config.build.datasets {
        let reader = BufReader::new(open_input(path)?);
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<RawRecord>(&line) {
                Ok(r) => records.push(r),
                Err(e) => log::warn!("{name}:{}: unparseable record skipped: {e}", lineno + 1),
            }
        }
        if records.is_empty() {
            return Err(CliError::Usage(format!("dataset {name:?} has no usable records")));
        }
        datasets.insert(name.clone(), records);
    }

    let spec = config.mixture_spec();
    let draws = sample_mixture(&spec, config.seed.wrapping_add(1), config.build.num_samples)?;
    let mut cursors: BTreeMap<String, usize> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for name in &draws {
        let Some(records) = datasets.get(name) else {
            return Err(CliError::Usage(format!("mixture names unknown dataset {name:?}")));
        };
        let cursor = cursors.entry(name.clone()).or_insert(0);
        let record = &records[*cursor % records.len()];
        *cursor += 1;
        match build_record(config, &vocab, record, &mut rng) {
            Ok(seq) if seq.len() <= config.build.max_len => samples.push(seq),
            Ok(seq) => {
                log::warn!("sample of {} tokens exceeds max_len {}; skipped", seq.len(), config.build.max_len);
                skipped += 1;
            }
            Err(reason) => {
                log::warn!("record from {name:?} skipped: {reason}");
                skipped += 1;
            }
        }
    }

    // Histogram by token kind, echoing the token-count quantification.
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for sample in &samples {
        debug_assert!(validate(&vocab, &sample.tokens).is_empty());
        for &t in &sample.tokens {
            let kind = match vocab.to_local(t)? {
                mmtok::vocab::TokenClass::Text(_) => "text".to_string(),
                mmtok::vocab::TokenClass::Special(_) => "special".to_string(),
                mmtok::vocab::TokenClass::Local { modality, .. } => modality.to_string(),
            };
            *histogram.entry(kind).or_insert(0) += 1;
        }
    }

    let content_tokens: usize = samples.iter().map(|s| s.len()).sum();
    let bins = pack(&samples, config.build.max_len, vocab.pad())?;
    let mut w = create_output(&config.paths.packed)?;
    for bin in &bins {
        serde_json::to_writer(&mut w, bin)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    println!("token-count histogram per modality:");
    for (kind, count) in &histogram {
        println!("  {kind:>12}: {count}");
    }

    Ok(BuildReport {
        packed_path: config.paths.packed.clone(),
        manifest_path: config.paths.vocab_manifest.clone(),
        samples_built: samples.len(),
        samples_skipped: skipped,
        bins: bins.len(),
        content_tokens,
        histogram,
    })
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub checkpoint_path: PathBuf,
    pub steps_run: usize,
    pub final_step_loss: f64,
    /// Mean masked NLL over the full training set after the run.
    pub corpus_loss: f64,
}

fn read_packed(path: &Path) -> Result<Vec<TokenSequence>, CliError> {
    let reader = BufReader::new(open_input(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str::<TokenSequence>(&line)?);
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{} holds no sequences", path.display())));
    }
    Ok(out)
}

/// Mean masked NLL over sequences (forward only).
fn corpus_loss(params: &ModelParams, seqs: &[TokenSequence]) -> Result<f64, CliError> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for seq in seqs {
        if seq.len() < 2 {
            continue;
        }
        let inputs = &seq.tokens[..seq.len() - 1];
        let targets = &seq.tokens[1..];
        let mask = &seq.loss_mask[1..];
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        let logits = forward(params, inputs)?;
        sum += nll_loss(&logits, targets, mask)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(CliError::Runtime("no masked positions in corpus".into()));
    }
    Ok(sum / count as f64)
}

pub fn cmd_train(config: &PipelineConfig) -> Result<TrainReport, CliError> {
    let vocab = load_vocab(config)?;
    let seqs = read_packed(&config.paths.packed)?;
    let model_config =
        config.train.model_config(vocab.total_size() as usize, config.seed.wrapping_add(3));

    let params = match &config.train.init_checkpoint {
        Some(path) => {
            let base = load_checkpoint(path)?;
            if base.config().dim != model_config.dim
                || base.config().num_layers != model_config.num_layers
                || base.config().num_heads != model_config.num_heads
            {
                return Err(CliError::Usage(
                    "init checkpoint architecture does not match the train section".into(),
                ));
            }
            expand_vocab(&base, model_config.vocab_size, config.seed.wrapping_add(4))?
        }
        None => init_model(&model_config)?,
    };

    let batches: Vec<TrainSeq> = seqs
        .iter()
        .map(|s| TrainSeq { tokens: s.tokens.clone(), loss_mask: s.loss_mask.clone() })
        .collect();
    let batch_size = config.train.batch_size.max(1);

    let mut trainer = Trainer::new(params, config.train.train_config(config.seed))?;
    let mut log_w = create_output(&config.paths.train_log)?;
    let mut last_loss = f64::INFINITY;
    let mut steps_run = 0usize;
    for step in 0..config.train.steps {
        let mut batch = Vec::with_capacity(batch_size);
        for j in 0..batch_size {
            batch.push(batches[(step * batch_size + j) % batches.len()].clone());
        }
        let stats = trainer.train_step(&batch)?;
        last_loss = stats.loss;
        steps_run = step + 1;
        if step % config.train.log_every == 0 || step + 1 == config.train.steps {
            serde_json::to_writer(&mut log_w, &stats)?;
            log_w.write_all(b"\n")?;
        }
        if let Some(target) = config.train.target_loss {
            if stats.loss < target {
                log::info!("target loss {target} reached at step {step}");
                break;
            }
        }
    }
    log_w.flush()?;

    let params = trainer.into_params();
    let mut w = create_output(&config.paths.checkpoint)?;
    lm::checkpoint::save(&mut w, &params)?;
    w.flush()?;

    let corpus = corpus_loss(&params, &seqs)?;
    log::info!("trained {steps_run} steps; final step loss {last_loss:.4}, corpus loss {corpus:.4}");
    Ok(TrainReport {
        checkpoint_path: config.paths.checkpoint.clone(),
        steps_run,
        final_step_loss: last_loss,
        corpus_loss: corpus,
    })
}

// ---------------------------------------------------------------------------
// generate

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub index: usize,
    pub target: String,
    pub prompt_len: usize,
    pub generated: Vec<u32>,
    pub rendered: String,
    /// Violations in prompt + continuation (0 means well-formed).
    pub violations: usize,
    pub segments: Vec<Segment>,
    pub media: Vec<MediaOutput>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MediaOutput {
    pub modality: String,
    pub frames: Frames,
}

#[derive(Debug, Serialize)]
pub struct DecodeTrace {
    pub index: usize,
    pub target: String,
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct GenerateReport {
    pub outputs_path: PathBuf,
    pub trace_path: PathBuf,
    pub generations: usize,
    pub valid_fraction: f64,
}

struct GenerationStack {
    vocab: UnifiedVocab,
    params: ModelParams,
    detok: Detokenizer,
    refiner_tables: BTreeMap<String, TablePredictor>,
}

impl GenerationStack {
    fn load(config: &PipelineConfig) -> Result<Self, CliError> {
        let vocab = load_vocab(config)?;
        let params = load_checkpoint(&config.paths.checkpoint)?;
        let mut detok = Detokenizer::new();
        for mc in &config.modalities {
            if mc.codebook.exists() {
                let books = read_codebooks(BufReader::new(open_input(&mc.codebook)?))?;
                detok.insert(&mc.name, ModalityCodec { books, scheme: mc.scheme() });
            } else {
                log::warn!("no codebook for {:?}; its segments will not be detokenized", mc.name);
            }
        }
        // Train chain predictors for semantic-only modalities from the full
        // code matrices in the raw datasets, when available.
        let mut refiner_tables = BTreeMap::new();
        for mc in &config.modalities {
            if !mc.semantic_only || mc.num_layers < 2 {
                continue;
            }
            let mut examples = Vec::new();
            for path in config.build.datasets.values() {
                let Ok(file) = File::open(path) else { continue };
                for line in BufReader::new(file).lines() {
                    let Ok(line) = line else { continue };
                    let Ok(record) = serde_json::from_str::<RawRecord>(&line) else { continue };
                    if record.modality.as_deref() == Some(mc.name.as_str()) {
                        if let Some(codes) = record.codes {
                            if codes.layers() == mc.num_layers {
                                examples.push(codes);
                            }
                        }
                    }
                }
            }
            if !examples.is_empty() {
                refiner_tables.insert(
                    mc.name.clone(),
                    TablePredictor::train(&examples, mc.num_layers, mc.codebook_size),
                );
            }
        }
        Ok(GenerationStack { vocab, params, detok, refiner_tables })
    }

    fn prompt_tokens(
        &self,
        config: &PipelineConfig,
        record: &PromptRecord,
    ) -> Result<Vec<u32>, CliError> {
        if record.target == "text" {
            let media = record
                .media
                .as_ref()
                .ok_or_else(|| CliError::Usage("text-target prompt needs media".into()))?;
            let mc = config.modality(&media.modality)?;
            let local_ids = record_local_ids(mc, &media.codes).map_err(CliError::Runtime)?;
            Ok(build_pair_prefix(
                &self.vocab,
                &record.instruction,
                (&media.modality, &local_ids),
                "",
                Direction::XToText,
            )?)
        } else {
            config.modality(&record.target)?;
            let text = record
                .text
                .as_deref()
                .ok_or_else(|| CliError::Usage("media-target prompt needs text".into()))?;
            Ok(build_pair_prefix(
                &self.vocab,
                &record.instruction,
                (&record.target, &[]),
                text,
                Direction::TextToX,
            )?)
        }
    }

    fn run_one(
        &self,
        config: &PipelineConfig,
        index: usize,
        record: &PromptRecord,
        seed: u64,
    ) -> Result<(GenerationOutput, DecodeTrace), CliError> {
        let mut strategy = config
            .decode
            .get(&record.target)
            .ok_or_else(|| CliError::Usage(format!("no decode strategy for {:?}", record.target)))?
            .clone();
        strategy.seed = seed;
        let prompt = self.prompt_tokens(config, record)?;
        let generated = generate(&self.params, &prompt, Some(self.vocab.eos()), &strategy)?;

        let mut full = prompt.clone();
        full.extend_from_slice(&generated);
        let violations = validate(&self.vocab, &full).len();
        let segments = parse_segments_salvage(&self.vocab, &generated);

        let mut media = Vec::new();
        for segment in &segments {
            let SegmentKind::Modality(name) = &segment.kind else { continue };
            let refiner = self.refiner_tables.get(name).map(|predictor| SpeechRefiner {
                predictor,
                schedule: RefineSchedule::default(),
            });
            match self.detok.detokenize(segment, refiner.as_ref()) {
                Ok(frames) => media.push(MediaOutput { modality: name.clone(), frames }),
                Err(e) => log::warn!("detokenize {name:?} segment failed: {e}"),
            }
        }

        let output = GenerationOutput {
            index,
            target: record.target.clone(),
            prompt_len: prompt.len(),
            generated: generated.clone(),
            rendered: render_tokens(&self.vocab, &generated)?,
            violations,
            segments,
            media,
        };
        let trace = DecodeTrace {
            index,
            target: record.target.clone(),
            mode: strategy.mode,
            beam_size: strategy.beam_size,
            top_p: strategy.top_p,
            repetition_penalty: strategy.repetition_penalty,
            temperature: strategy.temperature,
            seed,
        };
        Ok((output, trace))
    }
}

fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>, CliError> {
    let reader = BufReader::new(open_input(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str::<PromptRecord>(&line)
                .map_err(|e| CliError::Usage(format!("bad prompt record: {e}")))?,
        );
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{} holds no prompts", path.display())));
    }
    Ok(out)
}

pub fn cmd_generate(config: &PipelineConfig, prompts: &Path) -> Result<GenerateReport, CliError> {
    let stack = GenerationStack::load(config)?;
    let records = read_prompts(prompts)?;
    let mut out_w = create_output(&config.paths.generate_out)?;
    let mut trace_w = create_output(&config.paths.decode_trace)?;
    let mut valid = 0usize;
    for (index, record) in records.iter().enumerate() {
        let seed = record.seed.unwrap_or(config.seed.wrapping_add(index as u64));
        let (output, trace) = stack.run_one(config, index, record, seed)?;
        if output.violations == 0 {
            valid += 1;
        }
        serde_json::to_writer(&mut out_w, &output)?;
        out_w.write_all(b"\n")?;
        serde_json::to_writer(&mut trace_w, &trace)?;
        trace_w.write_all(b"\n")?;
    }
    out_w.flush()?;
    trace_w.flush()?;
    Ok(GenerateReport {
        outputs_path: config.paths.generate_out.clone(),
        trace_path: config.paths.decode_trace.clone(),
        generations: records.len(),
        valid_fraction: valid as f64 / records.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rvq_layer_curves: BTreeMap<String, Vec<f64>>,
    pub lm_perplexity: f64,
    pub validity_rate: f64,
    pub validity_generations: usize,
    pub refiner_oracle_exact: bool,
}

pub fn cmd_eval(config: &PipelineConfig) -> Result<EvalReport, CliError> {
    // Per-modality reconstruction curves on held-out seeded signals.
    let mut curves = BTreeMap::new();
    for mc in &config.modalities {
        let books = read_codebooks(BufReader::new(open_input(&mc.codebook)?))?;
        let signal =
            Frames::gaussian(256, mc.frame_dim, config.seed.wrapping_add(10) ^ fnv1a(mc.name.as_bytes()));
        curves.insert(mc.name.clone(), layer_error_curve(&signal, &books)?);
    }

    // Perplexity on the held-out packed set (falls back to the train set).
    let stack = GenerationStack::load(config)?;
    let eval_path = config.paths.eval_packed.as_ref().unwrap_or(&config.paths.packed);
    let seqs = read_packed(eval_path)?;
    let loss = corpus_loss(&stack.params, &seqs)?;
    let perplexity = loss.exp();

    // Validity of 100 seeded generations over the prompt pool.
    let prompts_path = config
        .paths
        .prompts
        .as_ref()
        .ok_or_else(|| CliError::Usage("paths.prompts is required for eval".into()))?;
    let records = read_prompts(prompts_path)?;
    let n = 100usize;
    let mut valid = 0usize;
    for i in 0..n {
        let record = &records[i % records.len()];
        let seed = config.seed.wrapping_add(100 + i as u64);
        let (output, _) = stack.run_one(config, i, record, seed)?;
        if output.violations == 0 {
            valid += 1;
        }
    }
    let validity_rate = valid as f64 / n as f64;

    // Oracle-exactness of the masked refiner on an 8-layer fixture.
    let refiner_oracle_exact = {
        let k = 16usize;
        let q = 8usize;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(11));
        let rows: Vec<Vec<u32>> =
            (0..32).map(|_| (0..q).map(|_| rng.gen_range(0..k as u32)).collect()).collect();
        let target = CodeMatrix::from_rows(&rows, q).expect("fixture shape");
        let oracle = make_oracle_predictor(&target, k);
        match refine(&target.column(0), &oracle, &RefineSchedule::default(), q, k) {
            Ok(out) => out == target,
            Err(_) => false,
        }
    };

    let report = EvalReport {
        rvq_layer_curves: curves,
        lm_perplexity: perplexity,
        validity_rate,
        validity_generations: n,
        refiner_oracle_exact,
    };
    let mut w = create_output(&config.paths.eval_report)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.flush()?;
    println!("perplexity {perplexity:.3}, validity {validity_rate:.2}, refiner exact: {refiner_oracle_exact}");
    Ok(report)
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Serialize)]
pub struct SynthReport {
    pub dialogs_path: PathBuf,
    pub rejected_path: PathBuf,
    pub stats_path: PathBuf,
    pub stats: SynthStats,
}

fn load_pool(path: &Option<PathBuf>, default: Vec<String>) -> Result<Vec<String>, CliError> {
    match path {
        Some(p) => {
            let lines: Vec<String> = read_input(p)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if lines.is_empty() {
                return Err(CliError::Usage(format!("pool {} is empty", p.display())));
            }
            Ok(lines)
        }
        None => Ok(default),
    }
}

fn api_key(config: &PipelineConfig) -> Option<String> {
    config.synth.clients.api_key_env.as_ref().and_then(|name| std::env::var(name).ok())
}

fn live_media(
    endpoint: &Option<String>,
    which: &str,
    config: &PipelineConfig,
) -> Result<LiveMediaClient, CliError> {
    let endpoint = endpoint
        .clone()
        .ok_or_else(|| CliError::Usage(format!("live mode needs {which}_endpoint")))?;
    Ok(LiveMediaClient {
        endpoint,
        api_key: api_key(config),
        timeout: Duration::from_secs(config.synth.clients.timeout_secs),
        policy: RetryPolicy::default(),
    })
}

pub fn cmd_synth(config: &PipelineConfig) -> Result<SynthReport, CliError> {
    let metatopics =
        load_pool(&config.synth.metatopics, synth::pools::default_metatopics())?;
    let scenario_demos =
        load_pool(&config.synth.scenario_demos, synth::pools::default_scenario_demos())?;
    let dialog_demos =
        load_pool(&config.synth.dialog_demos, synth::pools::default_dialog_demos())?;

    let store = MediaStore::new(&config.paths.media_dir)?;
    let synth_config = SynthConfig {
        seed: config.seed,
        rounds_per_metatopic: config.synth.rounds_per_metatopic,
        max_topics: config.synth.max_topics,
        max_dialogs: config.synth.max_dialogs,
        rules: config.synth.rules.clone(),
        in_flight_cap: config.synth.in_flight_cap,
    };

    let output = match config.synth.clients.mode.as_str() {
        "mock" => {
            let chat = MockChatClient::new(config.seed.wrapping_add(20));
            let image = MockMediaClient { kind: "image", seed: config.seed.wrapping_add(21) };
            let music = MockMediaClient { kind: "music", seed: config.seed.wrapping_add(22) };
            let tts = MockMediaClient { kind: "speech", seed: config.seed.wrapping_add(23) };
            let clients = Clients { image: &image, music: &music, tts: &tts };
            synth::run_pipeline(
                &metatopics,
                &scenario_demos,
                &dialog_demos,
                &chat,
                &clients,
                &store,
                &synth_config,
            )?
        }
        "live" => {
            let chat_endpoint = config
                .synth
                .clients
                .chat_endpoint
                .clone()
                .ok_or_else(|| CliError::Usage("live mode needs chat_endpoint".into()))?;
            let chat = LiveChatClient {
                endpoint: chat_endpoint,
                api_key: api_key(config),
                timeout: Duration::from_secs(config.synth.clients.timeout_secs),
                policy: RetryPolicy::default(),
            };
            let image = live_media(&config.synth.clients.image_endpoint, "image", config)?;
            let music = live_media(&config.synth.clients.music_endpoint, "music", config)?;
            let tts = live_media(&config.synth.clients.tts_endpoint, "tts", config)?;
            let clients = Clients { image: &image, music: &music, tts: &tts };
            synth::run_pipeline(
                &metatopics,
                &scenario_demos,
                &dialog_demos,
                &chat,
                &clients,
                &store,
                &synth_config,
            )?
        }
        other => return Err(CliError::Usage(format!("unknown client mode {other:?}"))),
    };

    let mut w = create_output(&config.paths.dialogs)?;
    for dialog in &output.accepted {
        serde_json::to_writer(&mut w, dialog)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let mut w = create_output(&config.paths.rejected_dialogs)?;
    for (dialog, reason) in &output.rejected {
        serde_json::to_writer(&mut w, &serde_json::json!({"reason": reason, "dialog": dialog}))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let mut w = create_output(&config.paths.synth_stats)?;
    serde_json::to_writer_pretty(&mut w, &output.stats)?;
    w.flush()?;

    log::info!(
        "synth: {} accepted, {} rejected, {} images, {} music, {} speech",
        output.stats.accepted,
        output.stats.rejected,
        output.stats.images,
        output.stats.music,
        output.stats.speech
    );
    Ok(SynthReport {
        dialogs_path: config.paths.dialogs.clone(),
        rejected_path: config.paths.rejected_dialogs.clone(),
        stats_path: config.paths.synth_stats.clone(),
        stats: output.stats,
    })
}

// ---------------------------------------------------------------------------

/// Forward-only sanity check used by tests: loss and gradient agreement
/// between the parallel and sequential batch paths.
pub fn grads_parallel_matches_seq(
    params: &ModelParams,
    batch: &[(Vec<u32>, Vec<bool>)],
) -> Result<bool, CliError> {
    let (l1, g1) = batch_loss_and_grads(params, batch)?;
    let (l2, g2) = lm::batch_loss_and_grads_seq(params, batch)?;
    Ok(l1 == l2 && g1 == g2)
}
