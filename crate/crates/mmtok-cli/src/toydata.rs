//! Writes a self-contained toy workspace: tokenizer training frames, raw
//! dataset records, generation prompts, synthesis pools, and a config wired
//! to desk-scale sizes. Record texts carry unique leading ids and sample
//! lengths land in (max_len/2, max_len], so packing puts one sample per bin
//! and generation prompts replay memorized prefixes from position zero.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub struct ToyWorkspace {
    pub root: PathBuf,
    pub config_path: PathBuf,
}

const ADJECTIVES: &[&str] = &["quiet", "bright", "mellow", "dusty", "brisk", "warm", "pale", "deep"];
const NOUNS: &[&str] = &["harbor", "garden", "valley", "market", "rooftop", "meadow", "canal", "forest"];

fn id_char(i: usize) -> char {
    if i < 26 {
        (b'a' + i as u8) as char
    } else {
        (b'A' + (i - 26) as u8) as char
    }
}

/// Pad or cut to exactly `n` bytes (all strings here are ASCII) so sample
/// lengths are predictable and every packed bin holds one sample.
fn fit_to(mut s: String, n: usize) -> String {
    while s.len() < n {
        s.push_str(" indeed");
    }
    s.truncate(n);
    s
}

fn phrase(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {} near the {}",
        ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())],
        NOUNS[rng.gen_range(0..NOUNS.len())],
        NOUNS[rng.gen_range(0..NOUNS.len())]
    )
}

fn random_codes(rng: &mut ChaCha8Rng, t: usize, q: usize, k: u32) -> serde_json::Value {
    let codes: Vec<u32> = (0..t * q).map(|_| rng.gen_range(0..k)).collect();
    json!({"t": t, "q": q, "codes": codes})
}

struct PairSpec {
    dataset: &'static str,
    modality: &'static str,
    t: usize,
    q: usize,
    k: u32,
}

pub fn write_toy_workspace(root: &Path) -> std::io::Result<ToyWorkspace> {
    std::fs::create_dir_all(root)?;
    for sub in ["frames", "records", "pools", "out"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0D0);

    // Tokenizer training frames: 256 gaussian rows per modality, dim 6.
    for (name, seed) in [("image", 1u64), ("speech", 2), ("music", 3)] {
        let mut frame_rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<f32>> = (0..256)
            .map(|_| (0..6).map(|_| frame_rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let file = json!({"dim": 6, "frames": frames});
        std::fs::write(root.join(format!("frames/{name}.json")), serde_json::to_vec(&file)?)?;
    }

    let pair_specs = [
        PairSpec { dataset: "captions", modality: "image", t: 4, q: 1, k: 32 },
        PairSpec { dataset: "asr", modality: "speech", t: 10, q: 4, k: 32 },
        PairSpec { dataset: "tunes", modality: "music", t: 8, q: 2, k: 24 },
    ];
    let counts = [12usize, 12, 8];

    let mut record_index = 0usize;
    let mut prompt_lines: Vec<String> = Vec::new();
    for (spec, &count) in pair_specs.iter().zip(&counts) {
        let mut w = std::fs::File::create(root.join(format!("records/{}.jsonl", spec.dataset)))?;
        for i in 0..count {
            let c = id_char(record_index);
            record_index += 1;
            let instruction = fit_to(
                format!("{c}{i:02} describe the {} {}", spec.modality, phrase(&mut rng)),
                34,
            );
            let text = fit_to(format!("{c} {}", phrase(&mut rng)), 28);
            let direction = if i % 2 == 0 { "x_to_text" } else { "text_to_x" };
            let codes = random_codes(&mut rng, spec.t, spec.q, spec.k);
            let record = json!({
                "kind": "pair",
                "modality": spec.modality,
                "instruction": instruction,
                "text": text,
                "direction": direction,
                "codes": codes,
            });
            writeln!(w, "{record}")?;

            // The first records of each dataset double as generation
            // prompts, replaying the exact training prefix.
            if i < 2 {
                let prompt = if direction == "x_to_text" {
                    json!({
                        "target": "text",
                        "instruction": instruction,
                        "media": {"modality": spec.modality, "codes": codes},
                    })
                } else {
                    json!({
                        "target": spec.modality,
                        "instruction": instruction,
                        "text": text,
                    })
                };
                prompt_lines.push(prompt.to_string());
            }
        }
    }

    // Interleaved documents over image and music chunks.
    {
        let mut w = std::fs::File::create(root.join("records/docs.jsonl"))?;
        for i in 0..8usize {
            let c = id_char(record_index);
            record_index += 1;
            let lead = fit_to(format!("{c}{i:02} notes on a {}", phrase(&mut rng)), 28);
            let tail = fit_to(format!("and later a {}", phrase(&mut rng)), 28);
            let media = if i % 2 == 0 {
                json!({"modality": "image", "codes": random_codes(&mut rng, 4, 1, 32)})
            } else {
                json!({"modality": "music", "codes": random_codes(&mut rng, 8, 2, 24)})
            };
            let record = json!({
                "kind": "interleaved",
                "chunks": [{"text": lead}, media, {"text": tail}],
            });
            writeln!(w, "{record}")?;
        }
    }

    std::fs::write(root.join("prompts.jsonl"), prompt_lines.join("\n") + "\n")?;

    std::fs::write(
        root.join("pools/metatopics.txt"),
        "home decoration\npet care\nstreet food\nweekend markets\n",
    )?;

    let config = json!({
        "seed": 7,
        "text_base": 256,
        "modalities": [
            {
                "name": "image",
                "frame_dim": 6, "num_layers": 1, "codebook_size": 32,
                "frame_rate": [4, 1],
                "layout": "per_layer",
                "frames": "frames/image.json",
                "codebook": "out/image.mmtk"
            },
            {
                "name": "speech",
                "frame_dim": 6, "num_layers": 4, "codebook_size": 32,
                "frame_rate": [50, 1],
                "semantic_only": true,
                "frames": "frames/speech.json",
                "codebook": "out/speech.mmtk"
            },
            {
                "name": "music",
                "frame_dim": 6, "num_layers": 2, "codebook_size": 24,
                "frame_rate": [50, 1],
                "layout": "per_layer",
                "frames": "frames/music.json",
                "codebook": "out/music.mmtk"
            }
        ],
        "paths": {
            "vocab_manifest": "out/vocab.json",
            "packed": "out/packed.jsonl",
            "checkpoint": "out/model.mmlm",
            "train_log": "out/train_log.jsonl",
            "generate_out": "out/generations.jsonl",
            "decode_trace": "out/decode_trace.jsonl",
            "media_dir": "out/media",
            "dialogs": "out/dialogs.jsonl",
            "rejected_dialogs": "out/dialogs.rejected.jsonl",
            "synth_stats": "out/synth_stats.json",
            "eval_report": "out/eval.json",
            "prompts": "prompts.jsonl"
        },
        "build": {
            "datasets": {
                "captions": "records/captions.jsonl",
                "asr": "records/asr.jsonl",
                "tunes": "records/tunes.jsonl",
                "docs": "records/docs.jsonl"
            },
            "num_samples": 80,
            "max_len": 120
        },
        "train": {
            "dim": 48, "num_layers": 2, "num_heads": 2, "max_seq_len": 132,
            "peak_lr": 3e-3, "warmup_ratio": 0.03, "steps": 900, "batch_size": 8,
            "clip": 1.0, "target_loss": 0.04, "log_every": 10
        },
        "decode": {
            "text":   {"mode": "beam",   "beam_size": 5, "top_p": 1.0, "repetition_penalty": 1.0,  "temperature": 1.0, "max_new_tokens": 48, "seed": 0},
            "image":  {"mode": "sample", "beam_size": 1, "top_p": 0.7, "repetition_penalty": 1.0,  "temperature": 1.0, "max_new_tokens": 12, "seed": 0},
            "speech": {"mode": "sample", "beam_size": 1, "top_p": 0.7, "repetition_penalty": 1.0,  "temperature": 1.0, "max_new_tokens": 20, "seed": 0},
            "music":  {"mode": "sample", "beam_size": 1, "top_p": 1.0, "repetition_penalty": 1.15, "temperature": 1.0, "max_new_tokens": 24, "seed": 0}
        },
        "mixture": [["captions", 12.0], ["asr", 12.0], ["tunes", 8.0], ["docs", 8.0]],
        "synth": {
            "metatopics": "pools/metatopics.txt",
            "rounds_per_metatopic": 2,
            "max_topics": 12,
            "max_dialogs": 12,
            "in_flight_cap": 4,
            "clients": {"mode": "mock", "timeout_secs": 30}
        }
    });
    let config_path = root.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config)?)?;

    Ok(ToyWorkspace { root: root.to_path_buf(), config_path })
}
