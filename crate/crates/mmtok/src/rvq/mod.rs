//! Residual vector quantization over abstract frame vectors.
//!
//! A [`CodebookSet`] holds `Q` codebooks of `K` centroids each. Encoding
//! quantizes every frame layer by layer: pick the nearest centroid, subtract
//! it, and pass the residual to the next layer. Decoding sums one centroid
//! per layer. Codebooks are trained with layerwise k-means (see
//! [`train_codebooks`]); no neural encoders or decoders are involved.

mod io;
mod train;

pub use io::{read_codebooks, write_codebooks};
pub use train::{train_codebooks, train_codebooks_seq};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

#[derive(Debug, Error)]
pub enum RvqError {
    #[error("insufficient data: {frames} frames, need at least {needed}")]
    InsufficientData { frames: usize, needed: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("code {code} out of range in layer {layer} (codebook size {size})")]
    IndexOutOfRange { layer: usize, code: u32, size: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad codebook file: {0}")]
    Format(String),
}

/// Frame rate of the source signal, frames per second, kept as a rational so
/// the codebook file roundtrips exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub num: u32,
    pub den: u32,
}

impl Rate {
    pub const fn per_second(num: u32) -> Self {
        Rate { num, den: 1 }
    }
}

/// Geometry of one residual quantizer stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RvqConfig {
    /// Vector dimension per frame (`D`).
    pub frame_dim: usize,
    /// Number of residual layers (`Q`).
    pub num_layers: usize,
    /// Entries per codebook (`K`).
    pub codebook_size: usize,
    /// Informational: frames per second of the source signal.
    pub frame_rate: Rate,
    pub seed: u64,
}

/// Frames emitted per image by the image tokenizer geometry.
pub const IMAGE_FRAMES: usize = 32;

impl RvqConfig {
    pub fn validate(&self) -> Result<(), RvqError> {
        if self.frame_dim == 0 || self.num_layers == 0 || self.codebook_size == 0 {
            return Err(RvqError::InvalidConfig(
                "frame_dim, num_layers and codebook_size must be >= 1".into(),
            ));
        }
        if self.frame_rate.den == 0 {
            return Err(RvqError::InvalidConfig("frame rate denominator is zero".into()));
        }
        Ok(())
    }

    /// Image preset: a single 8192-entry codebook, 32 frames per image.
    pub fn image(frame_dim: usize, seed: u64) -> Self {
        RvqConfig {
            frame_dim,
            num_layers: 1,
            codebook_size: 8192,
            frame_rate: Rate { num: IMAGE_FRAMES as u32, den: 1 },
            seed,
        }
    }

    /// Speech preset: eight hierarchical 1024-entry codebooks at 50 Hz.
    pub fn speech(frame_dim: usize, seed: u64) -> Self {
        RvqConfig {
            frame_dim,
            num_layers: 8,
            codebook_size: 1024,
            frame_rate: Rate::per_second(50),
            seed,
        }
    }

    /// Music preset: four layers at 50 Hz over 5 s units. Defaults to
    /// 1024-entry codebooks (combined local vocabulary 4096); see
    /// [`RvqConfig::music_large`] for the 2048-entry variant.
    pub fn music(frame_dim: usize, seed: u64) -> Self {
        RvqConfig {
            frame_dim,
            num_layers: 4,
            codebook_size: 1024,
            frame_rate: Rate::per_second(50),
            seed,
        }
    }

    /// Music variant with 2048-entry codebooks (combined vocabulary 8192).
    pub fn music_large(frame_dim: usize, seed: u64) -> Self {
        RvqConfig { codebook_size: 2048, ..Self::music(frame_dim, seed) }
    }
}

/// A `T x D` sequence of real-valued frames, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frames {
    dim: usize,
    data: Vec<f32>,
}

impl Frames {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self, RvqError> {
        if dim == 0 {
            return Err(RvqError::InvalidConfig("frame dim must be >= 1".into()));
        }
        if data.len() % dim != 0 {
            return Err(RvqError::DimensionMismatch { expected: dim, got: data.len() % dim });
        }
        Ok(Frames { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Frames { dim, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f32>], dim: usize) -> Result<Self, RvqError> {
        let mut out = Frames::empty(dim);
        for row in rows {
            out.push(row)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, frame: &[f32]) -> Result<(), RvqError> {
        if frame.len() != self.dim {
            return Err(RvqError::DimensionMismatch { expected: self.dim, got: frame.len() });
        }
        self.data.extend_from_slice(frame);
        Ok(())
    }

    /// Number of frames (`T`).
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Seeded standard-normal frames, handy for fixtures and demos.
    pub fn gaussian(t: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * dim).map(|_| normal_sample(&mut rng)).collect();
        Frames { dim, data }
    }
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller on two uniforms in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// `Q` codebooks of `K` centroids each; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    config: RvqConfig,
    /// One flat `K x D` buffer per layer.
    layers: Vec<Vec<f32>>,
}

impl CodebookSet {
    pub fn new(config: RvqConfig, layers: Vec<Vec<f32>>) -> Result<Self, RvqError> {
        config.validate()?;
        if layers.len() != config.num_layers {
            return Err(RvqError::InvalidConfig(format!(
                "expected {} layers, got {}",
                config.num_layers,
                layers.len()
            )));
        }
        for layer in &layers {
            if layer.len() != config.codebook_size * config.frame_dim {
                return Err(RvqError::InvalidConfig("codebook layer has wrong shape".into()));
            }
            if layer.iter().any(|v| !v.is_finite()) {
                return Err(RvqError::InvalidConfig("codebook entry is not finite".into()));
            }
        }
        Ok(CodebookSet { config, layers })
    }

    /// Untrained codebooks with seeded Gaussian centroids. Useful where only
    /// the token geometry matters, not reconstruction quality.
    pub fn seeded_random(config: RvqConfig) -> Result<Self, RvqError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = (0..config.num_layers)
            .map(|_| {
                (0..config.codebook_size * config.frame_dim)
                    .map(|_| normal_sample(&mut rng))
                    .collect()
            })
            .collect();
        Ok(CodebookSet { config, layers })
    }

    pub fn config(&self) -> &RvqConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn frame_dim(&self) -> usize {
        self.config.frame_dim
    }

    pub fn layer(&self, q: usize) -> &[f32] {
        &self.layers[q]
    }

    pub fn centroid(&self, q: usize, k: usize) -> &[f32] {
        let d = self.config.frame_dim;
        &self.layers[q][k * d..(k + 1) * d]
    }
}

/// A `T x Q` grid of quantizer indices for one media unit.
///
/// Serializes as `{"t": T, "q": Q, "codes": [row-major flat]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CodeMatrixWire", into = "CodeMatrixWire")]
pub struct CodeMatrix {
    t: usize,
    q: usize,
    codes: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct CodeMatrixWire {
    t: usize,
    q: usize,
    codes: Vec<u32>,
}

impl TryFrom<CodeMatrixWire> for CodeMatrix {
    type Error = String;

    fn try_from(w: CodeMatrixWire) -> Result<Self, String> {
        CodeMatrix::new(w.t, w.q, w.codes).map_err(|e| e.to_string())
    }
}

impl From<CodeMatrix> for CodeMatrixWire {
    fn from(m: CodeMatrix) -> Self {
        CodeMatrixWire { t: m.t, q: m.q, codes: m.codes }
    }
}

impl CodeMatrix {
    pub fn new(t: usize, q: usize, codes: Vec<u32>) -> Result<Self, RvqError> {
        if q == 0 {
            return Err(RvqError::InvalidConfig("code matrix needs at least one layer".into()));
        }
        if codes.len() != t * q {
            return Err(RvqError::InvalidConfig(format!(
                "code matrix shape {}x{} does not match {} codes",
                t,
                q,
                codes.len()
            )));
        }
        Ok(CodeMatrix { t, q, codes })
    }

    pub fn empty(q: usize) -> Self {
        CodeMatrix { t: 0, q, codes: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<u32>], q: usize) -> Result<Self, RvqError> {
        let mut codes = Vec::with_capacity(rows.len() * q);
        for row in rows {
            if row.len() != q {
                return Err(RvqError::DimensionMismatch { expected: q, got: row.len() });
            }
            codes.extend_from_slice(row);
        }
        CodeMatrix::new(rows.len(), q, codes)
    }

    /// Number of frames (`T`).
    pub fn rows(&self) -> usize {
        self.t
    }

    /// Number of residual layers (`Q`).
    pub fn layers(&self) -> usize {
        self.q
    }

    pub fn get(&self, t: usize, layer: usize) -> u32 {
        self.codes[t * self.q + layer]
    }

    pub fn row(&self, t: usize) -> &[u32] {
        &self.codes[t * self.q..(t + 1) * self.q]
    }

    pub fn column(&self, layer: usize) -> Vec<u32> {
        (0..self.t).map(|t| self.get(t, layer)).collect()
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub(crate) fn set(&mut self, t: usize, layer: usize, code: u32) {
        self.codes[t * self.q + layer] = code;
    }
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest
/// index (strict `<` while scanning ascending indices).
fn nearest_centroid(frame: &[f32], layer: &[f32], k: usize, dim: usize) -> (usize, f32) {
    let mut best = 0usize;
    let mut best_dist = f32::INFINITY;
    for c in 0..k {
        let cent = &layer[c * dim..(c + 1) * dim];
        let mut dist = 0.0f32;
        for (a, b) in frame.iter().zip(cent) {
            let d = a - b;
            dist += d * d;
        }
        if dist < best_dist {
            best_dist = dist;
            best = c;
        }
    }
    (best, best_dist)
}

fn encode_frame(frame: &[f32], books: &CodebookSet) -> Vec<u32> {
    let dim = books.frame_dim();
    let k = books.codebook_size();
    let mut residual = frame.to_vec();
    let mut codes = Vec::with_capacity(books.num_layers());
    for q in 0..books.num_layers() {
        let (c, _) = nearest_centroid(&residual, books.layer(q), k, dim);
        let cent = books.centroid(q, c);
        for (r, v) in residual.iter_mut().zip(cent) {
            *r -= v;
        }
        codes.push(c as u32);
    }
    codes
}

/// Quantize a frame sequence into a `T x Q` code matrix.
pub fn encode(signal: &Frames, books: &CodebookSet) -> Result<CodeMatrix, RvqError> {
    check_signal(signal, books)?;
    let rows = exec::map_range(signal.len(), |t| encode_frame(signal.frame(t), books));
    CodeMatrix::from_rows(&rows, books.num_layers())
}

/// Sequential [`encode`]; same output bit for bit.
pub fn encode_seq(signal: &Frames, books: &CodebookSet) -> Result<CodeMatrix, RvqError> {
    check_signal(signal, books)?;
    let rows = exec::map_range_seq(signal.len(), |t| encode_frame(signal.frame(t), books));
    CodeMatrix::from_rows(&rows, books.num_layers())
}

fn check_signal(signal: &Frames, books: &CodebookSet) -> Result<(), RvqError> {
    if signal.dim() != books.frame_dim() {
        return Err(RvqError::DimensionMismatch {
            expected: books.frame_dim(),
            got: signal.dim(),
        });
    }
    Ok(())
}

/// Reconstruct frames as the sum of one centroid per layer.
pub fn decode(codes: &CodeMatrix, books: &CodebookSet) -> Result<Frames, RvqError> {
    decode_partial(codes, books, books.num_layers())
}

/// Reconstruct using only the first `layers` layers of the matrix.
pub fn decode_partial(
    codes: &CodeMatrix,
    books: &CodebookSet,
    layers: usize,
) -> Result<Frames, RvqError> {
    if codes.layers() > books.num_layers() || layers > codes.layers() {
        return Err(RvqError::DimensionMismatch {
            expected: books.num_layers(),
            got: codes.layers(),
        });
    }
    let k = books.codebook_size() as u32;
    for q in 0..codes.layers() {
        for t in 0..codes.rows() {
            let code = codes.get(t, q);
            if code >= k {
                return Err(RvqError::IndexOutOfRange {
                    layer: q,
                    code,
                    size: books.codebook_size(),
                });
            }
        }
    }
    let dim = books.frame_dim();
    let mut out = Frames::empty(dim);
    let mut acc = vec![0.0f32; dim];
    for t in 0..codes.rows() {
        acc.fill(0.0);
        for q in 0..layers {
            let cent = books.centroid(q, codes.get(t, q) as usize);
            for (a, v) in acc.iter_mut().zip(cent) {
                *a += v;
            }
        }
        out.push(&acc)?;
    }
    Ok(out)
}

/// Mean squared reconstruction error after each layer prefix: entry `q` is
/// the MSE between the signal and its decode using layers `1..=q+1`. The
/// sequence is non-increasing.
pub fn layer_error_curve(signal: &Frames, books: &CodebookSet) -> Result<Vec<f64>, RvqError> {
    check_signal(signal, books)?;
    let q = books.num_layers();
    let dim = books.frame_dim();
    // Per-frame squared error after each layer prefix, summed in frame order.
    let per_frame: Vec<Vec<f64>> = exec::map_range(signal.len(), |t| {
        let frame = signal.frame(t);
        let codes = encode_frame(frame, books);
        let mut acc = vec![0.0f32; dim];
        let mut errs = Vec::with_capacity(q);
        for (layer, &code) in codes.iter().enumerate() {
            let cent = books.centroid(layer, code as usize);
            for (a, v) in acc.iter_mut().zip(cent) {
                *a += v;
            }
            let mut err = 0.0f64;
            for (a, x) in acc.iter().zip(frame) {
                let d = (*a - *x) as f64;
                err += d * d;
            }
            errs.push(err);
        }
        errs
    });
    let n = (signal.len() * dim) as f64;
    let mut curve = vec![0.0f64; q];
    for errs in &per_frame {
        for (c, e) in curve.iter_mut().zip(errs) {
            *c += e;
        }
    }
    if signal.len() > 0 {
        for c in curve.iter_mut() {
            *c /= n;
        }
    }
    Ok(curve)
}
