//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "DINJCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      4     metadata length L (u32)
//! 16      L     metadata, UTF-8 (the run configuration as TOML)
//! 16+L    4     tensor count N (u32)
//! then N tensor records:
//!         4     name length (u32)
//!         ..    name, UTF-8
//!         4     rank R (u32)
//!         8·R   dimensions (u64 each)
//!         8·P   values (f64), P = product of dimensions, row-major
//! ```
//!
//! Nothing may follow the last record.

use std::fs;
use std::path::Path;

use depth_inject_core::{ParamStore, Tensor};

use crate::error::{Error, Location, Result};

pub const MAGIC: &[u8; 8] = b"DINJCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(metadata: String, store: &ParamStore) -> Self {
        Self {
            metadata,
            tensors: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Copies every tensor into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id_of(name)
                .ok_or_else(|| Error::config(format!("checkpoint tensor `{name}` is not part of the model")))?;
            let slot = store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::config(format!(
                    "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { path, bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(r.err(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.err(8, format!("unsupported checkpoint version {version}")));
        }
        let at = r.pos;
        let meta = r.bytes("metadata")?;
        let metadata = String::from_utf8(meta.to_vec()).map_err(|_| r.err(at, "metadata is not UTF-8"))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let at = r.pos;
            let name = r.bytes("tensor name")?;
            let name = String::from_utf8(name.to_vec()).map_err(|_| r.err(at, format!("tensor {i} name is not UTF-8")))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            let mut len: usize = 1;
            for _ in 0..rank {
                let at = r.pos;
                let d = usize::try_from(r.u64("dimension")?).map_err(|_| r.err(at, "dimension too large"))?;
                len = len.checked_mul(d).ok_or_else(|| r.err(at, "tensor too large"))?;
                shape.push(d);
            }
            let at = r.pos;
            let nbytes = len.checked_mul(8).ok_or_else(|| r.err(at, "tensor too large"))?;
            let raw = r.take(nbytes, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "unexpected bytes after the last tensor"));
        }
        Ok(Self { metadata, tensors })
    }

    /// Writes to a temporary sibling and renames it into place, so an
    /// existing checkpoint is never left half-written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::parse(self.path, Location::Byte(at as u64), reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.bytes.len(), format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            metadata: "seed = 1\n".into(),
            tensors: vec![
                ("a".into(), Tensor::scalar(-0.0)),
                ("b".into(), Tensor::new(&[2, 1], vec![f64::MIN_POSITIVE, 1e300]).unwrap()),
            ],
        }
    }

    #[test]
    fn byte_layout() {
        let b = sample().encode();
        assert_eq!(&b[..8], b"DINJCKPT");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &9u32.to_le_bytes());
        assert_eq!(&b[16..25], b"seed = 1\n");
        assert_eq!(&b[25..29], &2u32.to_le_bytes());
        // "a": name len, name, rank 0, one value
        assert_eq!(&b[29..33], &1u32.to_le_bytes());
        assert_eq!(b[33], b'a');
        assert_eq!(&b[34..38], &0u32.to_le_bytes());
        assert_eq!(&b[38..46], &(-0.0f64).to_le_bytes());
        assert_eq!(b.len(), 46 + 4 + 1 + 4 + 16 + 16);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(Path::new("c"), &c.encode()).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&c.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn truncation_and_magic_errors() {
        let b = sample().encode();
        for cut in [0, 7, 20, b.len() - 1] {
            assert!(matches!(
                Checkpoint::decode(Path::new("c"), &b[..cut]),
                Err(Error::Parse { .. })
            ));
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(Path::new("c"), &bad),
            Err(Error::Parse { at: Location::Byte(0), .. })
        ));
    }
}
