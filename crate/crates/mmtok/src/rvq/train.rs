//! Layerwise k-means codebook training.
//!
//! Layer `q` is fit on the residuals left after quantizing with layers
//! `1..q-1`. Everything is deterministic given the config seed: k-means++
//! initialization draws from a seeded ChaCha stream, Lloyd iterations are
//! capped at 50, convergence is a max centroid shift below 1e-9, and all
//! nearest-centroid ties go to the lowest index. Empty clusters are re-seeded
//! to the point farthest from its assigned centroid.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{nearest_centroid, CodebookSet, Frames, RvqConfig, RvqError};
use crate::exec;

const MAX_ITERS: usize = 50;
const SHIFT_TOL: f32 = 1e-9;

/// Train a [`CodebookSet`] by layerwise k-means on residuals.
pub fn train_codebooks(data: &Frames, config: &RvqConfig) -> Result<CodebookSet, RvqError> {
    train_impl(data, config, true)
}

/// Sequential [`train_codebooks`]; same output bit for bit.
pub fn train_codebooks_seq(data: &Frames, config: &RvqConfig) -> Result<CodebookSet, RvqError> {
    train_impl(data, config, false)
}

fn train_impl(data: &Frames, config: &RvqConfig, par: bool) -> Result<CodebookSet, RvqError> {
    config.validate()?;
    if data.dim() != config.frame_dim {
        return Err(RvqError::DimensionMismatch { expected: config.frame_dim, got: data.dim() });
    }
    if data.len() < config.codebook_size {
        return Err(RvqError::InsufficientData {
            frames: data.len(),
            needed: config.codebook_size,
        });
    }

    let dim = config.frame_dim;
    let k = config.codebook_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut residuals = data.data().to_vec();
    let mut layers = Vec::with_capacity(config.num_layers);

    for _ in 0..config.num_layers {
        let centroids = kmeans(&residuals, data.len(), dim, k, &mut rng, par);
        // Subtract each point's nearest centroid to form the next layer's input.
        let assign = assignments(&residuals, data.len(), dim, &centroids, k, par);
        for (t, &(c, _)) in assign.iter().enumerate() {
            let cent = &centroids[c * dim..(c + 1) * dim];
            for (r, v) in residuals[t * dim..(t + 1) * dim].iter_mut().zip(cent) {
                *r -= v;
            }
        }
        layers.push(centroids);
    }
    CodebookSet::new(config.clone(), layers)
}

fn assignments(
    points: &[f32],
    n: usize,
    dim: usize,
    centroids: &[f32],
    k: usize,
    par: bool,
) -> Vec<(usize, f32)> {
    let assign_one = |t: usize| nearest_centroid(&points[t * dim..(t + 1) * dim], centroids, k, dim);
    if par {
        exec::map_range(n, assign_one)
    } else {
        exec::map_range_seq(n, assign_one)
    }
}

fn kmeans(points: &[f32], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng, par: bool) -> Vec<f32> {
    let mut centroids = plusplus_init(points, n, dim, k, rng);
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];

    for _ in 0..MAX_ITERS {
        let assign = assignments(points, n, dim, &centroids, k, par);

        sums.fill(0.0);
        counts.fill(0);
        for (t, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&points[t * dim..(t + 1) * dim]) {
                *s += *v as f64;
            }
        }

        let mut max_shift = 0.0f32;
        let mut reseed_used: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                let mut shift = 0.0f32;
                for j in 0..dim {
                    let new = (sums[c * dim + j] / counts[c] as f64) as f32;
                    let d = new - centroids[c * dim + j];
                    shift += d * d;
                    centroids[c * dim + j] = new;
                }
                max_shift = max_shift.max(shift.sqrt());
            } else {
                // Re-seed to the farthest point not already used this round.
                let far = farthest_point(&assign, &reseed_used);
                reseed_used.push(far);
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
                max_shift = f32::INFINITY;
            }
        }
        if max_shift < SHIFT_TOL {
            break;
        }
    }
    centroids
}

fn farthest_point(assign: &[(usize, f32)], used: &[usize]) -> usize {
    let mut best = 0usize;
    let mut best_dist = f32::NEG_INFINITY;
    for (t, &(_, d)) in assign.iter().enumerate() {
        if d > best_dist && !used.contains(&t) {
            best_dist = d;
            best = t;
        }
    }
    best
}

/// k-means++ seeding: first centroid uniform, subsequent centroids drawn with
/// probability proportional to the squared distance to the nearest chosen one.
fn plusplus_init(points: &[f32], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);

    // Squared distance from each point to its nearest chosen centroid,
    // updated incrementally as centroids are added.
    let mut min_dist = vec![f32::INFINITY; n];
    for c in 1..k {
        let latest = &centroids[(c - 1) * dim..c * dim];
        let mut total = 0.0f64;
        for t in 0..n {
            let p = &points[t * dim..(t + 1) * dim];
            let mut d = 0.0f32;
            for (a, b) in p.iter().zip(latest) {
                let x = a - b;
                d += x * x;
            }
            if d < min_dist[t] {
                min_dist[t] = d;
            }
            total += min_dist[t] as f64;
        }
        let selected = if total > 0.0 {
            let threshold = rng.gen::<f64>() * total;
            weighted_pick(&min_dist, threshold)
        } else {
            // All points coincide with chosen centroids; fall back to a
            // deterministic rotation.
            c % n
        };
        centroids.extend_from_slice(&points[selected * dim..(selected + 1) * dim]);
    }
    centroids
}

fn weighted_pick(weights: &[f32], threshold: f64) -> usize {
    let mut acc = 0.0f64;
    let mut last_positive = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w as f64;
        if acc > threshold && w > 0.0 {
            return i;
        }
    }
    last_positive
}
