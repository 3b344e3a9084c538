//! Adam training with linear warmup into a cosine schedule and global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use super::model::{batch_loss_and_grads, ModelParams};
use super::tensor::Tensor;
use super::LmError;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Global-norm clip threshold.
    pub clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(LmError::InvalidConfig("warmup_ratio must be in [0, 1]".into()));
        }
        if self.clip <= 0.0 {
            return Err(LmError::InvalidConfig("clip must be > 0".into()));
        }
        if self.steps == 0 || self.peak_lr <= 0.0 {
            return Err(LmError::InvalidConfig("steps and peak_lr must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 6e-5,
            warmup_ratio: 0.03,
            steps: 2000,
            batch_size: 16,
            clip: 1.0,
            seed: 0,
        }
    }
}

/// Learning rate at `step` (0-based): linear ramp to the peak over the
/// warmup, then cosine decay to zero at `steps`.
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    let warmup = (config.warmup_ratio * config.steps as f64).ceil() as usize;
    if step < warmup {
        return config.peak_lr * (step + 1) as f64 / warmup as f64;
    }
    if config.steps <= warmup {
        return config.peak_lr;
    }
    let progress = (step - warmup) as f64 / (config.steps - warmup) as f64;
    let progress = progress.min(1.0);
    config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns
/// the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in &g.data {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One training sequence: tokens plus a same-length loss mask. Position `t`
/// contributes loss when `loss_mask[t + 1]` is true (next-token targets).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSeq {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    params: ModelParams,
    config: TrainConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self, LmError> {
        config.validate()?;
        let m = params.zero_grads();
        let v = params.zero_grads();
        Ok(Trainer { params, config, m, v, step: 0 })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One optimizer update on a batch of sequences.
    pub fn train_step(&mut self, batch: &[TrainSeq]) -> Result<StepStats, LmError> {
        let max = self.params.config().max_seq_len;
        for seq in batch {
            if seq.tokens.len() > max {
                return Err(LmError::SequenceTooLong { len: seq.tokens.len(), max });
            }
            if seq.tokens.len() != seq.loss_mask.len() {
                return Err(LmError::InvalidConfig("mask length mismatch".into()));
            }
        }
        let pairs: Vec<(Vec<u32>, Vec<bool>)> =
            batch.iter().map(|s| (s.tokens.clone(), s.loss_mask.clone())).collect();
        let (loss, mut grads) = batch_loss_and_grads(&self.params, &pairs)?;
        let grad_norm = clip_gradients(&mut grads, self.config.clip);
        let lr = lr_at(&self.config, self.step);

        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for ((p, g), (m, v)) in self
            .params
            .tensors_mut()
            .iter_mut()
            .zip(&grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        for p in self.params.tensors() {
            if !p.is_finite() {
                return Err(LmError::NonFiniteLoss);
            }
        }
        let stats = StepStats { step: self.step, lr, loss, grad_norm };
        self.step += 1;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{forward, init_model, nll_loss, ModelConfig};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { steps: 100, warmup_ratio: 0.1, peak_lr: 1.0, ..Default::default() };
        let warmup = 10;
        assert!(lr_at(&cfg, 0) < lr_at(&cfg, warmup - 1));
        assert!((lr_at(&cfg, warmup - 1) - 1.0).abs() < 1e-12, "end of warmup is the peak");
        // Cosine decay afterwards.
        assert!(lr_at(&cfg, 50) < 1.0);
        assert!(lr_at(&cfg, 99) < lr_at(&cfg, 50));
        assert!(lr_at(&cfg, 100) < 1e-12);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        // A single gradient vector of norm 10.
        let mut grads = vec![Tensor { rows: 1, cols: 4, data: vec![6.0, 8.0, 0.0, 0.0] }];
        let norm = clip_gradients(&mut grads, 1.0);
        assert!((norm - 10.0).abs() < 1e-12);
        let clipped: f64 = grads[0].data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);

        // Under the threshold: untouched.
        let mut small = vec![Tensor { rows: 1, cols: 2, data: vec![0.3, 0.4] }];
        let norm = clip_gradients(&mut small, 1.0);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(small[0].data, vec![0.3, 0.4]);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ModelConfig { vocab_size: 12, dim: 8, num_layers: 1, num_heads: 2, max_seq_len: 16, seed: 3 };
        let tcfg = TrainConfig { peak_lr: 1e-3, steps: 10, ..Default::default() };
        let batch: Vec<TrainSeq> = (0..4)
            .map(|i| TrainSeq {
                tokens: (0..10).map(|t| ((t * 3 + i) % 12) as u32).collect(),
                loss_mask: vec![true; 10],
            })
            .collect();
        let run = || {
            let mut tr = Trainer::new(init_model(&cfg).unwrap(), tcfg.clone()).unwrap();
            let mut losses = Vec::new();
            for _ in 0..10 {
                losses.push(tr.train_step(&batch).unwrap().loss);
            }
            (losses, tr.into_params())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn memorizes_a_tiny_corpus() {
        let cfg = ModelConfig { vocab_size: 16, dim: 32, num_layers: 2, num_heads: 2, max_seq_len: 24, seed: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // 8 sequences with distinct first tokens: fully memorizable.
        let corpus: Vec<TrainSeq> = (0..8)
            .map(|i| {
                let mut tokens = vec![i as u32 + 8];
                for _ in 0..15 {
                    tokens.push(rng.gen_range(0..8));
                }
                TrainSeq { tokens, loss_mask: vec![true; 16] }
            })
            .collect();
        let tcfg = TrainConfig { peak_lr: 3e-3, warmup_ratio: 0.03, steps: 200, batch_size: 8, clip: 1.0, seed: 0 };
        let mut trainer = Trainer::new(init_model(&cfg).unwrap(), tcfg).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = trainer.train_step(&corpus).unwrap().loss;
            if last < 0.05 {
                break;
            }
        }
        assert!(last < 0.1, "failed to memorize, loss {last}");

        // The trained model assigns its corpus near-deterministic continuations.
        let params = trainer.params();
        let seq = &corpus[0];
        let logits = forward(params, &seq.tokens[..seq.tokens.len() - 1]).unwrap();
        let loss = nll_loss(&logits, &seq.tokens[1..], &seq.loss_mask[1..]).unwrap();
        assert!(loss < 0.2);
    }
}
