//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SLOTCKPT"
//! endian     1 byte   'L'
//! version    u32      1
//! dtype      str      "f32" | "f64"
//! config     str      ModelConfig as JSON
//! n_tensors  u32
//! per tensor:
//!   name     str
//!   rank     u32
//!   dims     rank x u64
//!   data     prod(dims) little-endian floats of `dtype`, row-major
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes.

use std::path::Path;

use super::{ModelConfig, Params, Tensor, Transformer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SLOTCKPT";
const VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn to_bytes<F: Scalar>(model: &Transformer<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(b'L');
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, F::DTYPE);
    put_str(&mut out, &serde_json::to_string(&model.config)?);
    out.extend_from_slice(&(model.params.tensors.len() as u32).to_le_bytes());
    for t in &model.params.tensors {
        put_str(&mut out, &t.name);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn floats<G: Scalar, F: Scalar>(&mut self, n: usize) -> Result<Vec<F>> {
        let bytes = self.take(
            n.checked_mul(G::BYTES)
                .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(G::BYTES)
            .map(|c| F::of(G::read_le(c).to_f64().unwrap_or(f64::NAN)))
            .collect())
    }
}

pub fn from_bytes<F: Scalar>(bytes: &[u8]) -> Result<Transformer<F>> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    if r.take(1)? != b"L" {
        return Err(Error::Checkpoint("unsupported endianness tag".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dtype = r.string()?;
    let config: ModelConfig = serde_json::from_str(&r.string()?)?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().product();
        let data = match dtype.as_str() {
            "f32" => r.floats::<f32, F>(count)?,
            "f64" => r.floats::<f64, F>(count)?,
            other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
        };
        tensors.push(Tensor { name, shape, data });
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let params = Params::from_tensors(tensors, config.n_layers);
    Transformer::from_params(config, params)
}

pub fn save<F: Scalar>(model: &Transformer<F>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<F: Scalar>(path: impl AsRef<Path>) -> Result<Transformer<F>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 12,
            vocab_size: 10,
            seed: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = Transformer::<f32>::init(small()).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..8], b"SLOTCKPT");
        assert_eq!(bytes[8], b'L');
        let back: Transformer<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn dtype_converts_on_load() {
        let m = Transformer::<f32>::init(small()).unwrap();
        let wide: Transformer<f64> = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(wide.params.tensors[0].data[3], m.params.tensors[0].data[3] as f64);
    }

    #[test]
    fn corruption_is_detected() {
        let m = Transformer::<f64>::init(small()).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f64>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_bytes::<f64>(&long).is_err());
    }
}
