//! Decoding: length-normalized beam search and nucleus (top-p) sampling
//! with repetition penalty. Per-modality defaults: text decodes with beam
//! size 5, image and speech sample at top-p 0.7, music samples at top-p 1.0
//! with repetition penalty 1.15.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward, ModelParams};
use super::LmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Beam,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeStrategy {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl DecodeStrategy {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.beam_size == 0 {
            return Err(LmError::InvalidConfig("beam_size must be >= 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LmError::InvalidConfig("top_p must be in (0, 1]".into()));
        }
        if self.repetition_penalty < 1.0 {
            return Err(LmError::InvalidConfig("repetition_penalty must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(LmError::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }

    pub fn text() -> Self {
        DecodeStrategy {
            mode: DecodeMode::Beam,
            beam_size: 5,
            top_p: 1.0,
            repetition_penalty: 1.0,
            temperature: 1.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }

    pub fn image() -> Self {
        DecodeStrategy { mode: DecodeMode::Sample, beam_size: 1, top_p: 0.7, ..Self::text() }
    }

    pub fn speech() -> Self {
        Self::image()
    }

    pub fn music() -> Self {
        DecodeStrategy {
            mode: DecodeMode::Sample,
            beam_size: 1,
            top_p: 1.0,
            repetition_penalty: 1.15,
            ..Self::text()
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// For every distinct token in `history`: positive logits are divided by the
/// penalty, negative ones multiplied. A penalty of 1.0 is the identity.
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[u32], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in history {
        let idx = t as usize;
        if idx < logits.len() && !seen[idx] {
            seen[idx] = true;
            if logits[idx] > 0.0 {
                logits[idx] /= penalty;
            } else {
                logits[idx] *= penalty;
            }
        }
    }
}

/// Nucleus filter: keep the smallest probability-sorted prefix whose
/// cumulative mass reaches `top_p`, renormalized. Ties sort by token id.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut cum = 0.0f64;
    for i in order {
        kept.push((i, probs[i]));
        cum += probs[i];
        if cum >= top_p {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|&(_, p)| p).sum();
    for (_, p) in kept.iter_mut() {
        *p /= mass;
    }
    kept
}

/// Draw a token from a renormalized support.
pub fn sample_from(support: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0f64;
    for &(token, p) in support {
        cum += p;
        if u < cum {
            return token;
        }
    }
    support.last().expect("support is non-empty").0
}

/// Generate a continuation of `prompt`. Returns the new tokens only; stops
/// at `eos` (when given) or after `max_new_tokens`. Deterministic given the
/// strategy seed.
pub fn generate(
    params: &ModelParams,
    prompt: &[u32],
    eos: Option<u32>,
    strategy: &DecodeStrategy,
) -> Result<Vec<u32>, LmError> {
    strategy.validate()?;
    if prompt.is_empty() {
        return Err(LmError::EmptyPrompt);
    }
    let max_seq = params.config().max_seq_len;
    if prompt.len() > max_seq {
        return Err(LmError::PromptTooLong { len: prompt.len(), max: max_seq });
    }
    match strategy.mode {
        DecodeMode::Sample => generate_sampled(params, prompt, eos, strategy),
        DecodeMode::Beam => generate_beam(params, prompt, eos, strategy),
    }
}

fn next_logits(
    params: &ModelParams,
    context: &[u32],
    strategy: &DecodeStrategy,
) -> Result<Vec<f64>, LmError> {
    let max_seq = params.config().max_seq_len;
    let window = &context[context.len().saturating_sub(max_seq)..];
    let logits = forward(params, window)?;
    let mut row = logits.row(logits.rows - 1).to_vec();
    if strategy.temperature != 1.0 {
        for v in row.iter_mut() {
            *v /= strategy.temperature;
        }
    }
    apply_repetition_penalty(&mut row, context, strategy.repetition_penalty);
    Ok(row)
}

fn generate_sampled(
    params: &ModelParams,
    prompt: &[u32],
    eos: Option<u32>,
    strategy: &DecodeStrategy,
) -> Result<Vec<u32>, LmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed);
    let mut context = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..strategy.max_new_tokens {
        let row = next_logits(params, &context, strategy)?;
        let probs = softmax(&row);
        let support = nucleus_filter(&probs, strategy.top_p);
        let token = sample_from(&support, &mut rng) as u32;
        context.push(token);
        out.push(token);
        if Some(token) == eos {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<u32>,
    sum_logp: f64,
    finished: bool,
}

impl Beam {
    fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.sum_logp / self.tokens.len() as f64
        }
    }
}

fn generate_beam(
    params: &ModelParams,
    prompt: &[u32],
    eos: Option<u32>,
    strategy: &DecodeStrategy,
) -> Result<Vec<u32>, LmError> {
    let mut beams = vec![Beam { tokens: Vec::new(), sum_logp: 0.0, finished: false }];
    for _ in 0..strategy.max_new_tokens {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            let mut context = prompt.to_vec();
            context.extend_from_slice(&beam.tokens);
            let row = next_logits(params, &context, strategy)?;
            let lp = log_softmax(&row);
            for (token, &logp) in lp.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(token as u32);
                candidates.push(Beam {
                    tokens,
                    sum_logp: beam.sum_logp + logp,
                    finished: Some(token as u32) == eos,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score().partial_cmp(&a.score()).unwrap().then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(strategy.beam_size);
        beams = candidates;
    }
    Ok(beams.into_iter().next().map(|b| b.tokens).unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_model, ModelConfig};

    #[test]
    fn repetition_penalty_arithmetic() {
        let mut logits = vec![2.0, 1.0];
        apply_repetition_penalty(&mut logits, &[0], 1.15);
        assert!((logits[0] - 2.0 / 1.15).abs() < 1e-12);
        assert_eq!(logits[1], 1.0);

        let mut neg = vec![-1.0, 0.5];
        apply_repetition_penalty(&mut neg, &[0], 1.15);
        assert!((neg[0] - (-1.15)).abs() < 1e-12);

        let mut id = vec![3.0, -2.0];
        apply_repetition_penalty(&mut id, &[0, 1], 1.0);
        assert_eq!(id, vec![3.0, -2.0]);
    }

    #[test]
    fn nucleus_support_and_renormalization() {
        let support = nucleus_filter(&[0.5, 0.3, 0.2], 0.7);
        let tokens: Vec<usize> = support.iter().map(|&(t, _)| t).collect();
        assert_eq!(tokens, vec![0, 1]);
        assert!((support[0].1 - 0.625).abs() < 1e-12);
        assert!((support[1].1 - 0.375).abs() < 1e-12);

        let all = nucleus_filter(&[0.5, 0.3, 0.2], 1.0);
        assert_eq!(all.len(), 3);
        let mass: f64 = all.iter().map(|&(_, p)| p).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }

    fn toy_params(vocab: usize, seed: u64) -> crate::lm::ModelParams {
        init_model(&ModelConfig {
            vocab_size: vocab,
            dim: 8,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 16,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        let params = toy_params(6, 21);
        let strategy = DecodeStrategy {
            beam_size: 1,
            max_new_tokens: 5,
            ..DecodeStrategy::text()
        };
        let beam = generate(&params, &[1, 2], None, &strategy).unwrap();

        let mut context = vec![1u32, 2];
        let mut greedy = Vec::new();
        for _ in 0..5 {
            let row = next_logits(&params, &context, &strategy).unwrap();
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            context.push(best as u32);
            greedy.push(best as u32);
        }
        assert_eq!(beam, greedy);
    }

    #[test]
    fn beam_matches_exhaustive_argmax() {
        // 3-token vocab, 3 steps: 27 candidate sequences.
        let params = toy_params(3, 4);
        let strategy = DecodeStrategy { beam_size: 5, max_new_tokens: 3, ..DecodeStrategy::text() };
        let beam = generate(&params, &[0], None, &strategy).unwrap();

        let mut best: (f64, Vec<u32>) = (f64::NEG_INFINITY, Vec::new());
        for a in 0..3u32 {
            for b in 0..3u32 {
                for c in 0..3u32 {
                    let seq = vec![a, b, c];
                    let mut context = vec![0u32];
                    let mut sum = 0.0;
                    for &tok in &seq {
                        let row = next_logits(&params, &context, &strategy).unwrap();
                        let lp = log_softmax(&row);
                        sum += lp[tok as usize];
                        context.push(tok);
                    }
                    if sum > best.0 {
                        best = (sum, seq);
                    }
                }
            }
        }
        assert_eq!(beam, best.1, "beam missed the exhaustive argmax");
    }

    #[test]
    fn sampling_full_distribution_statistics() {
        let params = toy_params(8, 33);
        let logits = forward(&params, &[3]).unwrap();
        let probs = softmax(logits.row(0));
        let support = nucleus_filter(&probs, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000usize;
        let mut counts = vec![0usize; 8];
        for _ in 0..n {
            counts[sample_from(&support, &mut rng)] += 1;
        }
        for (j, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!((freq - probs[j]).abs() < 0.02, "token {j}: freq {freq} vs p {}", probs[j]);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_respects_eos() {
        let params = toy_params(8, 2);
        let strategy =
            DecodeStrategy { mode: DecodeMode::Sample, max_new_tokens: 10, seed: 5, ..DecodeStrategy::image() };
        let a = generate(&params, &[1, 2, 3], None, &strategy).unwrap();
        let b = generate(&params, &[1, 2, 3], None, &strategy).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);

        // Declaring the first sampled token as eos stops generation at once.
        let c = generate(&params, &[1, 2, 3], Some(a[0]), &strategy).unwrap();
        assert_eq!(c, vec![a[0]]);
    }

    #[test]
    fn generate_rejects_bad_prompts() {
        let params = toy_params(8, 2);
        let strategy = DecodeStrategy::text();
        assert!(matches!(generate(&params, &[], None, &strategy), Err(LmError::EmptyPrompt)));
        let long = vec![0u32; 17];
        assert!(matches!(
            generate(&params, &long, None, &strategy),
            Err(LmError::PromptTooLong { len: 17, max: 16 })
        ));
    }
}
