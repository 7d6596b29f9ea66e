//! Little-endian tensor archive shared by checkpoints and exported
//! benchmarks.
//!
//! ```text
//! "OVXD" | u32 version | u32 len, kind | u64 len, JSON meta | u32 count
//! count × ( u32 len, name | u8 trainable | u32 rank | rank × u64 dim | f64 data )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OVXD";
pub const VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    /// What the archive holds, e.g. `checkpoint` or `benchmark`.
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("archive has no tensor {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} archive, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str32(w, &self.kind)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str32(w, name)?;
            w.write_all(&[u8::from(t.trainable())])?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = read_str32(r)?;
        let meta_len = read_u64(r)?;
        let meta_bytes = read_vec(r, meta_len)?;
        let meta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Format(format!("meta: {e}")))?;
        let count = read_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = read_str32(r)?;
            let mut flag = [0u8; 1];
            read_exact(r, &mut flag)?;
            let rank = read_u32(r)?;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(read_u64(r)?).map_err(|_| Error::Format("dimension overflow".into()))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
                shape.push(d);
            }
            let bytes = read_vec(r, (n as u64).saturating_mul(8))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?
                .with_trainable(flag[0] != 0);
            tensors.push((name, t));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn write_str32<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Format("string too long".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated archive".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads `len` bytes without trusting `len` for the allocation size.
fn read_vec<R: Read>(r: &mut R, len: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let got = r.take(len).read_to_end(&mut out)?;
    if got as u64 != len {
        return Err(Error::Format("truncated archive".into()));
    }
    Ok(out)
}

fn read_str32<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)?;
    let bytes = read_vec(r, u64::from(len))?;
    String::from_utf8(bytes).map_err(|_| Error::Format("name is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("test", serde_json::json!({"k": 1, "s": "x"}));
        a.push("w", Tensor::new(&[2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 0.1]).unwrap().with_trainable(true));
        a.push("b", Tensor::scalar(f64::NAN));
        a
    }

    fn bytes(a: &Archive) -> Vec<u8> {
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = sample();
        let buf = bytes(&a);
        let b = Archive::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(b.kind, "test");
        assert_eq!(b.meta, a.meta);
        for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(na, nb);
            assert!(ta.bitwise_eq(tb));
            assert_eq!(ta.trainable(), tb.trainable());
        }
        assert_eq!(bytes(&b), buf);
    }

    #[test]
    fn header_layout() {
        let buf = bytes(&sample());
        assert_eq!(&buf[..4], b"OVXD");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
        assert_eq!(&buf[12..16], b"test");
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let buf = bytes(&sample());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        for cut in [3, 10, buf.len() - 1] {
            assert!(matches!(Archive::read_from(&mut &buf[..cut]), Err(Error::Format(_))));
        }
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(Archive::read_from(&mut long.as_slice()), Err(Error::Format(_))));
        let mut ver = buf;
        ver[4] = 9;
        assert!(matches!(Archive::read_from(&mut ver.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let a = sample();
        a.save(&p).unwrap();
        let b = Archive::load(&p).unwrap();
        assert!(b.get("w").unwrap().bitwise_eq(a.get("w").unwrap()));
        assert!(b.get("nope").is_err());
        assert!(b.expect_kind("checkpoint").is_err());
    }
}
