//! Binary codebook files.
//!
//! Little-endian layout: magic `MMTK`, format version `u32` (=1), then
//! `D:u32 Q:u32 K:u32`, frame-rate numerator and denominator as `u32`s, the
//! training seed as `u64`, followed by `Q*K*D` 32-bit floats in layer-major,
//! entry-major, dimension-minor order.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{CodebookSet, Rate, RvqConfig, RvqError};

const MAGIC: &[u8; 4] = b"MMTK";
const VERSION: u32 = 1;

pub fn write_codebooks<W: Write>(mut w: W, books: &CodebookSet) -> Result<(), RvqError> {
    let cfg = books.config();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(cfg.frame_dim as u32)?;
    w.write_u32::<LittleEndian>(cfg.num_layers as u32)?;
    w.write_u32::<LittleEndian>(cfg.codebook_size as u32)?;
    w.write_u32::<LittleEndian>(cfg.frame_rate.num)?;
    w.write_u32::<LittleEndian>(cfg.frame_rate.den)?;
    w.write_u64::<LittleEndian>(cfg.seed)?;
    for q in 0..cfg.num_layers {
        for &v in books.layer(q) {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_codebooks<R: Read>(mut r: R) -> Result<CodebookSet, RvqError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(RvqError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(RvqError::Format(format!("unsupported version {version}")));
    }
    let frame_dim = r.read_u32::<LittleEndian>()? as usize;
    let num_layers = r.read_u32::<LittleEndian>()? as usize;
    let codebook_size = r.read_u32::<LittleEndian>()? as usize;
    let rate_num = r.read_u32::<LittleEndian>()?;
    let rate_den = r.read_u32::<LittleEndian>()?;
    let seed = r.read_u64::<LittleEndian>()?;
    let config = RvqConfig {
        frame_dim,
        num_layers,
        codebook_size,
        frame_rate: Rate { num: rate_num, den: rate_den },
        seed,
    };
    config.validate().map_err(|e| RvqError::Format(e.to_string()))?;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let mut layer = vec![0.0f32; codebook_size * frame_dim];
        for v in layer.iter_mut() {
            *v = r.read_f32::<LittleEndian>()?;
        }
        layers.push(layer);
    }
    CodebookSet::new(config, layers).map_err(|e| RvqError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rvq::Frames;

    #[test]
    fn roundtrip_bit_exact() {
        let cfg = RvqConfig {
            frame_dim: 3,
            num_layers: 2,
            codebook_size: 5,
            frame_rate: Rate { num: 50, den: 1 },
            seed: 1234,
        };
        let data = Frames::gaussian(64, 3, 8);
        let books = super::super::train_codebooks(&data, &cfg).unwrap();
        let mut buf = Vec::new();
        write_codebooks(&mut buf, &books).unwrap();
        let back = read_codebooks(buf.as_slice()).unwrap();
        assert_eq!(back, books);

        // Re-serialize: identical bytes.
        let mut buf2 = Vec::new();
        write_codebooks(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn header_layout() {
        let cfg = RvqConfig {
            frame_dim: 2,
            num_layers: 1,
            codebook_size: 1,
            frame_rate: Rate { num: 50, den: 1 },
            seed: 7,
        };
        let books = CodebookSet::new(cfg, vec![vec![1.5, -2.0]]).unwrap();
        let mut buf = Vec::new();
        write_codebooks(&mut buf, &books).unwrap();
        assert_eq!(&buf[0..4], b"MMTK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(buf.len(), 4 + 4 * 6 + 8 + 2 * 4);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(matches!(read_codebooks(buf.as_slice()), Err(RvqError::Format(_))));
    }
}
