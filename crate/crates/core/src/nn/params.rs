//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "TNPF" | u32 version | u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 rank | u32 extents[rank] | f64 payload
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNPF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Running batch-norm statistics are stored but never optimised.
    pub trainable: bool,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    entries: Vec<ParamEntry>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decodes a checkpoint into `(name, tensor)` records.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
        if bytes.len() < 16 {
            return Err("file too short".into());
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err("CRC mismatch".into());
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "name is not UTF-8")?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
        }
        if r.pos != body.len() {
            return Err("trailing bytes after last tensor".into());
        }
        Ok(out)
    }

    /// Overwrites values by name; every stored tensor must be present with
    /// the same shape.
    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> std::result::Result<(), String> {
        if records.len() != self.entries.len() {
            return Err(format!(
                "checkpoint has {} tensors, model has {}",
                records.len(),
                self.entries.len()
            ));
        }
        for (name, tensor) in records {
            let idx = self.index_of(&name).ok_or_else(|| format!("unknown tensor {name}"))?;
            let e = &mut self.entries[idx];
            if e.tensor.shape() != tensor.shape() {
                return Err(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    tensor.shape(),
                    e.tensor.shape()
                ));
            }
            e.tensor = tensor;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_from(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |message| Error::CorruptFile {
            path: path.to_path_buf(),
            message,
        };
        let records = Self::decode(&bytes).map_err(corrupt)?;
        self.load_records(records).map_err(corrupt)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated checkpoint")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Parameters {
        let mut p = Parameters::new();
        p.push("w", Tensor::from_slice(&[2, 2], &[1.0, -2.0, 3.5, 0.25]).unwrap(), true);
        p.push("rv", Tensor::from_slice(&[2], &[1.0, 1.0]).unwrap(), false);
        p
    }

    #[test]
    fn byte_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[0..4], b"TNPF");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], b'w');
        assert_eq!(&b[17..21], &2u32.to_le_bytes());
        let crc = crc32fast::hash(&b[..b.len() - 4]);
        assert_eq!(&b[b.len() - 4..], &crc.to_le_bytes());
        assert_eq!(sample().trainable_count(), 4);
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let mut b = sample().to_bytes();
        b[30] ^= 0x40;
        assert!(Parameters::decode(&b).unwrap_err().contains("CRC"));
    }

    #[test]
    fn load_checks_names_and_shapes() {
        let src = sample();
        let mut dst = sample();
        dst.tensor_mut(0).data_mut().fill(0.0);
        dst.load_records(Parameters::decode(&src.to_bytes()).unwrap()).unwrap();
        assert_eq!(dst, src);

        let mut other = Parameters::new();
        other.push("w", Tensor::zeros(&[4]), true);
        other.push("rv", Tensor::zeros(&[2]), false);
        assert!(other.load_records(Parameters::decode(&src.to_bytes()).unwrap()).is_err());
    }
}
