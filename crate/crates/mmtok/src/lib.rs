//! Discrete multimodal token pipeline.
//!
//! Everything here operates on token ids and abstract frame vectors; no
//! audio or image I/O is involved. The crate covers:
//!
//! - [`rvq`]: residual vector quantizers (k-means codebooks) turning frame
//!   sequences into `T x Q` code matrices and back.
//! - [`vocab`]: a unified id space over text, modality tokens, and specials.
//! - [`sequence`]: code flattening, training-sample templates, packing, and
//!   dataset mixture sampling.
//! - [`parser`]: validation and segmentation of generated token streams,
//!   plus de-tokenization back to frames.
//! - [`lm`]: a small decoder-only transformer with next-token training,
//!   vocabulary expansion, and beam/nucleus decoding.
//! - [`refiner`]: non-autoregressive confidence-based completion of residual
//!   code layers from semantic codes.
//! - [`synth`]: the two-stage instruction-dialogue synthesis pipeline with
//!   pluggable generator clients.
//!
//! With the default `parallel` feature the data-parallel inner loops run on
//! rayon; `*_seq` variants of the hot entry points are always available and
//! produce bit-identical results.

pub mod lm;
pub mod parser;
pub mod refiner;
pub mod rvq;
pub mod sequence;
pub mod synth;
pub mod vocab;

mod exec;
