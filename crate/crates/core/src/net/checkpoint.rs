//! Binary checkpoint: header, shape table, then parameters as f64 LE.
//!
//! ```text
//! magic "SELD" | version u32 | scalar name (u32 len + utf8)
//! class count u32 | config json (u32 len + utf8)
//! tensor count u32 | per tensor: rank u32, dims u32 × rank
//! values f64 × Σ sizes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SELD";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes `params` into a writer.
pub fn write_checkpoint<S: Scalar, W: Write>(params: &ModelParams<S>, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + 8 * params.num_params());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    put_str(&mut buf, S::NAME);
    put_u32(&mut buf, params.class_count());
    put_str(&mut buf, &serde_json::to_string(&params.config)?);
    let shapes = params.shapes()?;
    put_u32(&mut buf, shapes.len());
    for s in &shapes {
        put_u32(&mut buf, s.len());
        for &d in s {
            put_u32(&mut buf, d);
        }
    }
    for t in params.tensors() {
        for v in t {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "header string is not utf-8".to_string())
    }
}

fn parse<S: Scalar>(bytes: &[u8]) -> std::result::Result<ModelParams<S>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err("not a checkpoint file".into());
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(format!("unsupported version {version}"));
    }
    let _scalar = c.string()?;
    let classes = c.u32()?;
    let config: ModelConfig = serde_json::from_str(&c.string()?).map_err(|e| format!("config: {e}"))?;
    let expected = config.tensor_shapes(classes).map_err(|e| e.to_string())?;
    let count = c.u32()?;
    if count != expected.len() {
        return Err(format!("{count} tensors, config implies {}", expected.len()));
    }
    for (i, want) in expected.iter().enumerate() {
        let rank = c.u32()?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()?);
        }
        if &dims != want {
            return Err(format!("tensor {i} has shape {dims:?}, config implies {want:?}"));
        }
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in &expected {
        let n: usize = shape.iter().product();
        let raw = c.take(8 * n)?;
        tensors.push(
            raw.chunks_exact(8)
                .map(|b| S::lit(f64::from_le_bytes(b.try_into().unwrap())))
                .collect(),
        );
    }
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.pos));
    }
    ModelParams::from_tensors(config, classes, tensors).map_err(|e| e.to_string())
}

/// Reads a checkpoint; `origin` names the source in error messages.
pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R, origin: &Path) -> Result<ModelParams<S>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes).map_err(|detail| Error::Checkpoint {
        path: origin.to_path_buf(),
        detail,
    })
}

pub fn save_checkpoint<S: Scalar>(params: &ModelParams<S>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(f))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelParams<S>> {
    read_checkpoint(std::fs::File::open(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_model;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = init_model::<f64>(&ModelConfig::default(), 8, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q: ModelParams<f64> = load_checkpoint(&path).unwrap();
        assert!(p.bit_eq(&q));
        assert_eq!(p.fingerprint(), q.fingerprint());
    }

    #[test]
    fn f32_round_trip() {
        let p = init_model::<f32>(&ModelConfig::default(), 4, 2).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let q: ModelParams<f32> = read_checkpoint(&buf[..], Path::new("mem")).unwrap();
        assert!(p.bit_eq(&q));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let p = init_model::<f64>(&ModelConfig::default(), 2, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        for cut in [4, 20, buf.len() - 1] {
            let r = read_checkpoint::<f64, _>(&buf[..cut], Path::new("x"));
            assert!(matches!(r, Err(Error::Checkpoint { .. })), "cut {cut}");
        }
        buf.push(0);
        assert!(read_checkpoint::<f64, _>(&buf[..], Path::new("x")).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = init_model::<f64>(&ModelConfig::default(), 2, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        // first dim of the first tensor sits right after the tensor count and rank
        let json_len = serde_json::to_string(&p.config).unwrap().len();
        let at = 8 + 4 + 4 + 3 + 4 + 4 + json_len + 4 + 4;
        buf[at] ^= 1;
        let err = read_checkpoint::<f64, _>(&buf[..], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
