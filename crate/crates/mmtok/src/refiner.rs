//! Non-autoregressive completion of residual code layers.
//!
//! Given the semantic (layer-1) column of a code matrix, [`refine`] fills in
//! layers `2..Q` one layer at a time by iterative masked decoding: every
//! position starts masked, and each iteration commits the highest-confidence
//! predictions until the schedule's cumulative coverage is met. Committed
//! positions never change. The predictor is pluggable; [`OraclePredictor`]
//! reproduces a known target and [`TablePredictor`] is a small trainable
//! conditional model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rvq::CodeMatrix;

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error("bad schedule: {0}")]
    BadSchedule(String),
    #[error("predictor distribution invalid at position {pos}: {reason}")]
    PredictorDistributionInvalid { pos: usize, reason: String },
    #[error("semantic code {code} at position {pos} out of range")]
    SemanticOutOfRange { pos: usize, code: u32 },
    #[error("refinement needs at least 2 layers, got {0}")]
    TooFewLayers(usize),
}

/// Cumulative unmask fractions, one per iteration; non-decreasing, in
/// `(0, 1]`, ending at exactly 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSchedule {
    fractions: Vec<f64>,
}

impl RefineSchedule {
    pub fn new(fractions: Vec<f64>) -> Result<Self, RefinerError> {
        if fractions.is_empty() {
            return Err(RefinerError::BadSchedule("no iterations".into()));
        }
        let mut prev = 0.0f64;
        for &f in &fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(RefinerError::BadSchedule(format!("fraction {f} outside (0, 1]")));
            }
            if f < prev {
                return Err(RefinerError::BadSchedule("fractions must be non-decreasing".into()));
            }
            prev = f;
        }
        if *fractions.last().unwrap() != 1.0 {
            return Err(RefinerError::BadSchedule("final cumulative coverage must be 1.0".into()));
        }
        Ok(RefineSchedule { fractions })
    }

    /// Cosine-spaced coverage over `iterations` steps (the default is 4):
    /// slow start, full coverage at the end.
    pub fn cosine(iterations: usize) -> Self {
        let n = iterations.max(1);
        let fractions = (1..=n)
            .map(|i| {
                if i == n {
                    1.0
                } else {
                    1.0 - (std::f64::consts::FRAC_PI_2 * i as f64 / n as f64).cos()
                }
            })
            .collect();
        RefineSchedule { fractions }
    }

    pub fn iterations_per_layer(&self) -> usize {
        self.fractions.len()
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }
}

impl Default for RefineSchedule {
    fn default() -> Self {
        RefineSchedule::cosine(4)
    }
}

/// Per-position distributions over the codebook for one layer.
///
/// `mask[t]` is true while position `t` is uncommitted; implementations may
/// condition on the partially filled matrix (committed entries only; masked
/// entries of the current layer hold zeros).
pub trait Predictor {
    fn predict(
        &self,
        semantic: &[u32],
        partial: &CodeMatrix,
        layer: usize,
        mask: &[bool],
    ) -> Vec<Vec<f64>>;
}

/// Fill layers `2..=q` from the semantic column. Output column 1 equals the
/// input codes exactly.
pub fn refine(
    semantic: &[u32],
    predictor: &dyn Predictor,
    schedule: &RefineSchedule,
    q: usize,
    k: usize,
) -> Result<CodeMatrix, RefinerError> {
    if q < 2 {
        return Err(RefinerError::TooFewLayers(q));
    }
    for (pos, &code) in semantic.iter().enumerate() {
        if code >= k as u32 {
            return Err(RefinerError::SemanticOutOfRange { pos, code });
        }
    }
    let t_len = semantic.len();
    let mut codes = vec![0u32; t_len * q];
    for (t, &c) in semantic.iter().enumerate() {
        codes[t * q] = c;
    }
    let mut partial = CodeMatrix::new(t_len, q, codes).expect("shape by construction");

    for layer in 1..q {
        let mut mask = vec![true; t_len];
        let mut committed = 0usize;
        for &fraction in schedule.fractions() {
            let target = ((fraction * t_len as f64).ceil() as usize).min(t_len);
            if target <= committed {
                continue;
            }
            let dists = predictor.predict(semantic, &partial, layer, &mask);
            validate_distributions(&dists, t_len, k)?;

            // (confidence, position, token) over still-masked positions;
            // highest confidence first, ties to the lowest position.
            let mut ranked: Vec<(f64, usize, u32)> = mask
                .iter()
                .enumerate()
                .filter(|&(_, &m)| m)
                .map(|(t, _)| {
                    let (token, conf) = argmax(&dists[t]);
                    (conf, t, token as u32)
                })
                .collect();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

            for &(_, t, token) in ranked.iter().take(target - committed) {
                partial.set(t, layer, token);
                mask[t] = false;
                committed += 1;
            }
        }
        debug_assert_eq!(committed, t_len);
    }
    Ok(partial)
}

fn argmax(dist: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_p = f64::NEG_INFINITY;
    for (i, &p) in dist.iter().enumerate() {
        if p > best_p {
            best_p = p;
            best = i;
        }
    }
    (best, best_p)
}

fn validate_distributions(dists: &[Vec<f64>], t_len: usize, k: usize) -> Result<(), RefinerError> {
    if dists.len() != t_len {
        return Err(RefinerError::PredictorDistributionInvalid {
            pos: dists.len(),
            reason: format!("expected {t_len} rows"),
        });
    }
    for (pos, d) in dists.iter().enumerate() {
        if d.len() != k {
            return Err(RefinerError::PredictorDistributionInvalid {
                pos,
                reason: format!("expected {k} entries, got {}", d.len()),
            });
        }
        let mut sum = 0.0f64;
        for &p in d {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(RefinerError::PredictorDistributionInvalid {
                    pos,
                    reason: format!("negative or non-finite probability {p}"),
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(RefinerError::PredictorDistributionInvalid {
                pos,
                reason: format!("probabilities sum to {sum}"),
            });
        }
    }
    Ok(())
}

/// One-hot distributions reproducing a known target matrix with confidence 1.
/// A pure function of position; ignores the mask and partial state.
pub struct OraclePredictor {
    target: CodeMatrix,
    k: usize,
}

pub fn make_oracle_predictor(target: &CodeMatrix, k: usize) -> OraclePredictor {
    OraclePredictor { target: target.clone(), k }
}

impl Predictor for OraclePredictor {
    fn predict(
        &self,
        _semantic: &[u32],
        _partial: &CodeMatrix,
        layer: usize,
        _mask: &[bool],
    ) -> Vec<Vec<f64>> {
        (0..self.target.rows())
            .map(|t| {
                let mut d = vec![0.0f64; self.k];
                d[self.target.get(t, layer) as usize] = 1.0;
                d
            })
            .collect()
    }
}

/// Uniform distributions; useful as a chance baseline.
pub struct UniformPredictor {
    pub k: usize,
}

impl Predictor for UniformPredictor {
    fn predict(
        &self,
        semantic: &[u32],
        _partial: &CodeMatrix,
        _layer: usize,
        _mask: &[bool],
    ) -> Vec<Vec<f64>> {
        vec![vec![1.0 / self.k as f64; self.k]; semantic.len()]
    }
}

/// A small trainable predictor: add-one-smoothed conditional counts of each
/// layer's code given the committed code of the previous layer at the same
/// position (the semantic code for layer 2).
pub struct TablePredictor {
    k: usize,
    q: usize,
    /// `(q-1) * k * k` counts indexed by (layer-1, previous code, code).
    counts: Vec<f64>,
}

impl TablePredictor {
    pub fn train(examples: &[CodeMatrix], q: usize, k: usize) -> Self {
        let mut counts = vec![0.0f64; (q - 1) * k * k];
        for m in examples {
            for t in 0..m.rows() {
                for layer in 1..q {
                    let prev = m.get(t, layer - 1) as usize;
                    let code = m.get(t, layer) as usize;
                    counts[((layer - 1) * k + prev) * k + code] += 1.0;
                }
            }
        }
        TablePredictor { k, q, counts }
    }

    fn distribution(&self, layer: usize, prev: usize) -> Vec<f64> {
        let base = ((layer - 1) * self.k + prev) * self.k;
        let row = &self.counts[base..base + self.k];
        let total: f64 = row.iter().sum::<f64>() + self.k as f64;
        row.iter().map(|&c| (c + 1.0) / total).collect()
    }
}

impl Predictor for TablePredictor {
    fn predict(
        &self,
        semantic: &[u32],
        partial: &CodeMatrix,
        layer: usize,
        _mask: &[bool],
    ) -> Vec<Vec<f64>> {
        debug_assert!(layer >= 1 && layer < self.q);
        (0..semantic.len())
            .map(|t| self.distribution(layer, partial.get(t, layer - 1) as usize))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn target_matrix(t: usize, q: usize, k: u32, seed: u64) -> CodeMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<u32>> = (0..t).map(|_| (0..q).map(|_| rng.gen_range(0..k)).collect()).collect();
        CodeMatrix::from_rows(&rows, q).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(RefineSchedule::new(vec![]).is_err());
        assert!(RefineSchedule::new(vec![0.5]).is_err());
        assert!(RefineSchedule::new(vec![0.8, 0.4, 1.0]).is_err());
        assert!(RefineSchedule::new(vec![0.0, 1.0]).is_err());
        assert!(RefineSchedule::new(vec![0.3, 0.7, 1.0]).is_ok());
        let cos = RefineSchedule::cosine(4);
        assert_eq!(cos.iterations_per_layer(), 4);
        assert_eq!(*cos.fractions().last().unwrap(), 1.0);
        for w in cos.fractions().windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn oracle_reconstructs_exactly() {
        for seed in 0..5u64 {
            let target = target_matrix(40, 8, 16, seed);
            let semantic = target.column(0);
            let oracle = make_oracle_predictor(&target, 16);
            for schedule in [RefineSchedule::cosine(4), RefineSchedule::new(vec![1.0]).unwrap()] {
                let out = refine(&semantic, &oracle, &schedule, 8, 16).unwrap();
                assert_eq!(out, target);
                assert_eq!(out.column(0), semantic);
            }
        }
    }

    #[test]
    fn uniform_single_iteration_commits_everything() {
        let semantic: Vec<u32> = (0..10).map(|t| t % 4).collect();
        let schedule = RefineSchedule::new(vec![1.0]).unwrap();
        let out = refine(&semantic, &UniformPredictor { k: 4 }, &schedule, 3, 4).unwrap();
        assert_eq!(out.rows(), 10);
        assert_eq!(out.layers(), 3);
        assert_eq!(out.column(0), semantic);
        assert!(out.codes().iter().all(|&c| c < 4));
    }

    #[test]
    fn committed_positions_never_change() {
        // First call puts all mass on token 1, later calls on token 2, with
        // confidence rising in position. With coverage [0.5, 1.0] the upper
        // half commits token 1 in iteration one and must keep it.
        use std::cell::Cell;
        struct Shifting {
            calls: Cell<usize>,
        }
        impl Predictor for Shifting {
            fn predict(
                &self,
                semantic: &[u32],
                _partial: &CodeMatrix,
                _layer: usize,
                _mask: &[bool],
            ) -> Vec<Vec<f64>> {
                let call = self.calls.get();
                self.calls.set(call + 1);
                let token = if call == 0 { 1 } else { 2 };
                let n = semantic.len();
                (0..n)
                    .map(|t| {
                        let conf = 0.5 + 0.5 * (t as f64 + 1.0) / (n as f64 + 1.0);
                        let mut d = vec![0.0f64; 4];
                        d[token] = conf;
                        d[0] = 1.0 - conf;
                        d
                    })
                    .collect()
            }
        }
        let semantic = vec![0u32; 8];
        let schedule = RefineSchedule::new(vec![0.5, 1.0]).unwrap();
        let out = refine(&semantic, &Shifting { calls: Cell::new(0) }, &schedule, 2, 4).unwrap();
        // Positions 4..8 (highest confidence) committed first with token 1.
        for t in 4..8 {
            assert_eq!(out.get(t, 1), 1);
        }
        for t in 0..4 {
            assert_eq!(out.get(t, 1), 2);
        }
    }

    #[test]
    fn invalid_distribution_rejected() {
        struct Bad;
        impl Predictor for Bad {
            fn predict(&self, s: &[u32], _p: &CodeMatrix, _l: usize, _m: &[bool]) -> Vec<Vec<f64>> {
                vec![vec![0.9, 0.3]; s.len()]
            }
        }
        let err = refine(&[0, 1], &Bad, &RefineSchedule::default(), 2, 2).unwrap_err();
        assert!(matches!(err, RefinerError::PredictorDistributionInvalid { .. }));
    }

    #[test]
    fn too_few_layers_rejected() {
        let target = target_matrix(4, 2, 4, 0);
        let oracle = make_oracle_predictor(&target, 4);
        assert!(matches!(
            refine(&[0], &oracle, &RefineSchedule::default(), 1, 4),
            Err(RefinerError::TooFewLayers(1))
        ));
    }

    #[test]
    fn semantic_out_of_range_rejected() {
        let target = target_matrix(4, 2, 4, 0);
        let oracle = make_oracle_predictor(&target, 4);
        assert!(matches!(
            refine(&[9], &oracle, &RefineSchedule::default(), 2, 4),
            Err(RefinerError::SemanticOutOfRange { pos: 0, code: 9 })
        ));
    }

    #[test]
    fn table_predictor_learns_chain() {
        // Layer l is a deterministic function of layer l-1 plus 20% noise.
        let k = 8u32;
        let q = 3usize;
        let gen = |n: usize, seed: u64| -> Vec<CodeMatrix> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    let rows: Vec<Vec<u32>> = (0..20)
                        .map(|_| {
                            let mut row = vec![rng.gen_range(0..k)];
                            for l in 1..q {
                                let clean = (row[l - 1] * 3 + 1) % k;
                                let code = if rng.gen::<f64>() < 0.8 { clean } else { rng.gen_range(0..k) };
                                row.push(code);
                            }
                            row
                        })
                        .collect();
                    CodeMatrix::from_rows(&rows, q).unwrap()
                })
                .collect()
        };
        let train = gen(64, 1);
        let held_out = gen(16, 2);
        let predictor = TablePredictor::train(&train, q, k as usize);

        let mut hits = 0usize;
        let mut total = 0usize;
        for m in &held_out {
            let out = refine(&m.column(0), &predictor, &RefineSchedule::default(), q, k as usize).unwrap();
            for t in 0..m.rows() {
                if out.get(t, 1) == m.get(t, 1) {
                    hits += 1;
                }
                total += 1;
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc > 1.0 / k as f64 + 0.2, "layer-2 accuracy {acc} not above chance");
    }
}
