//! Binary model checkpoints.
//!
//! Little-endian layout: magic `MMLM`, version `u32` (=1), the config as
//! `vocab:u32 dim:u32 layers:u32 heads:u32 max_seq_len:u32 seed:u64`, a
//! tensor count, then a manifest of `(name, rows, cols, byte offset)` per
//! tensor followed by the data section of 32-bit floats. Parameters are
//! stored as f32, so one save/load cycle rounds f64 training state.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::model::{init_model, ModelConfig, ModelParams};
use super::LmError;

const MAGIC: &[u8; 4] = b"MMLM";
const VERSION: u32 = 1;

pub fn save<W: Write>(mut w: W, params: &ModelParams) -> Result<(), LmError> {
    let cfg = params.config();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(cfg.vocab_size as u32)?;
    w.write_u32::<LittleEndian>(cfg.dim as u32)?;
    w.write_u32::<LittleEndian>(cfg.num_layers as u32)?;
    w.write_u32::<LittleEndian>(cfg.num_heads as u32)?;
    w.write_u32::<LittleEndian>(cfg.max_seq_len as u32)?;
    w.write_u64::<LittleEndian>(cfg.seed)?;

    let names = ModelParams::tensor_names(cfg);
    debug_assert_eq!(names.len(), params.tensors().len());
    w.write_u32::<LittleEndian>(names.len() as u32)?;
    let mut offset = 0u64;
    for (name, tensor) in names.iter().zip(params.tensors()) {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(tensor.rows as u32)?;
        w.write_u32::<LittleEndian>(tensor.cols as u32)?;
        w.write_u64::<LittleEndian>(offset)?;
        offset += (tensor.numel() * 4) as u64;
    }
    for tensor in params.tensors() {
        for &v in &tensor.data {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

pub fn load<R: Read>(mut r: R) -> Result<ModelParams, LmError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LmError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(LmError::Format(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        vocab_size: r.read_u32::<LittleEndian>()? as usize,
        dim: r.read_u32::<LittleEndian>()? as usize,
        num_layers: r.read_u32::<LittleEndian>()? as usize,
        num_heads: r.read_u32::<LittleEndian>()? as usize,
        max_seq_len: r.read_u32::<LittleEndian>()? as usize,
        seed: r.read_u64::<LittleEndian>()?,
    };
    config.validate().map_err(|e| LmError::Format(e.to_string()))?;

    let count = r.read_u32::<LittleEndian>()? as usize;
    let names = ModelParams::tensor_names(&config);
    if count != names.len() {
        return Err(LmError::Format(format!("expected {} tensors, found {count}", names.len())));
    }
    let mut manifest = Vec::with_capacity(count);
    let mut expected_offset = 0u64;
    for name in &names {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let found = String::from_utf8(buf).map_err(|_| LmError::Format("bad tensor name".into()))?;
        if &found != name {
            return Err(LmError::Format(format!("tensor {found:?} where {name:?} expected")));
        }
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let offset = r.read_u64::<LittleEndian>()?;
        if offset != expected_offset {
            return Err(LmError::Format(format!("tensor {found:?} at offset {offset}, expected {expected_offset}")));
        }
        expected_offset += (rows * cols * 4) as u64;
        manifest.push((rows, cols));
    }

    // Template gives the authoritative shapes for this config.
    let mut params = init_model(&config)?;
    for (tensor, &(rows, cols)) in params.tensors_mut().iter_mut().zip(&manifest) {
        if tensor.rows != rows || tensor.cols != cols {
            return Err(LmError::Format(format!(
                "tensor shape {rows}x{cols} does not match config ({}x{})",
                tensor.rows, tensor.cols
            )));
        }
        for v in tensor.data.iter_mut() {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::forward;

    #[test]
    fn roundtrip_and_stability() {
        let cfg = ModelConfig { vocab_size: 12, dim: 8, num_layers: 2, num_heads: 2, max_seq_len: 16, seed: 77 };
        let params = init_model(&cfg).unwrap();
        let mut buf = Vec::new();
        save(&mut buf, &params).unwrap();
        let loaded = load(buf.as_slice()).unwrap();
        assert_eq!(loaded.config(), params.config());

        // f32 round: close but not bit-equal in general.
        for (a, b) in params.tensors().iter().zip(loaded.tensors()) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= x.abs() * 1e-6 + 1e-9);
            }
        }

        // Saving the loaded params again is byte-identical.
        let mut buf2 = Vec::new();
        save(&mut buf2, &loaded).unwrap();
        assert_eq!(buf, buf2);

        let a = forward(&params, &[1, 2, 3]).unwrap();
        let b = forward(&loaded, &[1, 2, 3]).unwrap();
        for (&x, &y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(load(&b"NOPE"[..]), Err(LmError::Format(_)) | Err(LmError::Io(_))));
        let mut buf = Vec::new();
        let cfg = ModelConfig { vocab_size: 4, dim: 4, num_layers: 1, num_heads: 1, max_seq_len: 4, seed: 0 };
        save(&mut buf, &init_model(&cfg).unwrap()).unwrap();
        buf[4] = 9; // version
        assert!(matches!(load(buf.as_slice()), Err(LmError::Format(_))));
    }
}
