//! Named-tensor container files used for checkpoints and embedding dumps.
//!
//! Layout (little-endian): `"GTTR"`, a 4-byte kind tag, u32 version, u64 header
//! length, UTF-8 `key=value` header lines, u64 entry count, then per entry a u32
//! name length, the UTF-8 name and the tensor in GTTR encoding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::ndtensor::{read_tensor, write_tensor, Tensor, TENSOR_MAGIC};
use crate::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: [u8; 4],
    pub header: BTreeMap<String, String>,
    pub entries: Vec<(String, Tensor)>,
}

fn read_bytes<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::io(format!("reading container {what}"), e))?;
    Ok(b)
}

fn read_string<R: Read>(r: &mut R, len: usize, what: &str) -> Result<String> {
    if len > 1 << 30 {
        return Err(Error::Format(format!("container {what} length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(format!("reading container {what}"), e))?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("container {what} is not UTF-8")))
}

impl Container {
    pub fn new(kind: [u8; 4]) -> Self {
        Self { kind, header: BTreeMap::new(), entries: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Header value parsed as `T`.
    pub fn header_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.header.get(key).ok_or_else(|| Error::Format(format!("container header lacks `{key}`")))?;
        raw.parse().map_err(|_| Error::Format(format!("container header `{key}={raw}` is malformed")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("header entry `{k}` cannot be encoded")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let io = |e| Error::io("writing container", e);
        w.write_all(TENSOR_MAGIC).map_err(io)?;
        w.write_all(&self.kind).map_err(io)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(header.as_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.entries {
            let len = u32::try_from(name.len()).map_err(|_| Error::Format(format!("entry name `{name}` too long")))?;
            w.write_all(&len.to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic: [u8; 4] = read_bytes(r, "magic")?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad container magic {magic:?}")));
        }
        let kind: [u8; 4] = read_bytes(r, "kind")?;
        let version = u32::from_le_bytes(read_bytes(r, "version")?);
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let header_len = u64::from_le_bytes(read_bytes(r, "header length")?) as usize;
        let text = read_string(r, header_len, "header")?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = u64::from_le_bytes(read_bytes(r, "entry count")?);
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(read_bytes(r, "name length")?) as usize;
            let name = read_string(r, len, "entry name")?;
            entries.push((name, read_tensor(r)?));
        }
        Ok(Self { kind, header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Reads a container and checks its kind tag.
    pub fn load(path: &Path, kind: [u8; 4]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let c = Self::read_from(&mut BufReader::new(file))?;
        if c.kind != kind {
            return Err(Error::Format(format!(
                "{}: expected a {} file, found {}",
                path.display(),
                String::from_utf8_lossy(&kind),
                String::from_utf8_lossy(&c.kind)
            )));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_kind_check() {
        let mut c = Container::new(*b"TEST");
        c.header.insert("iter".into(), "12".into());
        c.entries.push(("a/b".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5)));
        c.entries.push(("s".into(), Tensor::scalar(-1.25)));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"GTTRTEST");
        assert_eq!(Container::read_from(&mut buf.as_slice()).unwrap(), c);
        assert_eq!(c.header_value::<u64>("iter").unwrap(), 12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        c.save(&p).unwrap();
        assert!(Container::load(&p, *b"CKPT").is_err());
        assert_eq!(Container::load(&p, *b"TEST").unwrap(), c);
    }

    #[test]
    fn truncated_container_is_an_error() {
        let mut c = Container::new(*b"TEST");
        c.entries.push(("x".into(), Tensor::zeros(&[4])));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Container::read_from(&mut buf.as_slice()).is_err());
    }
}
