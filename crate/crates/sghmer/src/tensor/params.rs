//! Named parameter collections and the checkpoint file format.
//!
//! Checkpoint layout: magic `SGHMER1\n`, a length-prefixed UTF-8 metadata
//! block (config text; empty for bare parameter sets), a record count, then
//! per-parameter records of name length, name bytes, rank, extents and
//! little-endian 32-bit values, closed by a CRC32 of everything after the
//! magic. Values are stored as `f32` regardless of the in-memory profile.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{r, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGHMER1\n";

/// Non-trainable entries are recognized by name: optimizer state and
/// batchnorm running statistics.
pub fn is_trainable_name(name: &str) -> bool {
    !(name.starts_with("opt.") || name.contains(".running_"))
}

/// Ordered name -> tensor map. Iteration follows insertion order, which
/// fixes both serialization layout and optimizer state alignment.
pub struct ParamSet<R: Real> {
    entries: Vec<(String, Tensor<R>)>,
    index: HashMap<String, usize>,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<R>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Tensors that take gradient updates, in insertion order.
    pub fn trainable(&self) -> Vec<(String, Tensor<R>)> {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let mut payload: Vec<u8> = Vec::new();
        payload.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        payload.extend_from_slice(meta.as_bytes());
        payload.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            let shape = tensor.shape();
            payload.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in &shape {
                payload.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in tensor.values().iter() {
                let f = v.to_f64().unwrap_or(f64::NAN) as f32;
                payload.extend_from_slice(&f.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&payload);
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&payload)?;
        w.write_all(&crc.to_le_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Reads a full parameter set plus metadata text. Entry order matches
    /// the file; requires-grad flags are assigned by naming convention.
    pub fn load(path: &Path) -> Result<(ParamSet<R>, String)> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic).map_err(|_| truncated(path))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic (not a checkpoint)",
                path.display()
            )));
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        if rest.len() < 4 {
            return Err(truncated(path));
        }
        let (payload, crc_bytes) = rest.split_at(rest.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(payload) != stored_crc {
            return Err(Error::Format(format!(
                "{}: CRC mismatch (corrupt or truncated)",
                path.display()
            )));
        }
        let mut cur = Cursor::new(payload, path);
        let meta_len = cur.u32()? as usize;
        let meta = String::from_utf8(cur.bytes(meta_len)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: metadata is not UTF-8", path.display())))?;
        let count = cur.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.bytes(name_len)?.to_vec())
                .map_err(|_| Error::Format(format!("{}: name is not UTF-8", path.display())))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                let b = cur.bytes(4)?;
                values.push(r::<R>(f32::from_le_bytes(b.try_into().unwrap()) as f64));
            }
            let mut tensor = Tensor::from_vec(&shape, values)?;
            if is_trainable_name(&name) {
                tensor = tensor.requiring_grad();
            }
            set.insert(&name, tensor);
        }
        if !cur.at_end() {
            return Err(Error::Format(format!(
                "{}: trailing bytes after records",
                path.display()
            )));
        }
        Ok((set, meta))
    }

    /// Copies values from a checkpoint into this set's existing tensors,
    /// matched by name. Every entry of `self` must be present in the file;
    /// extra file records (e.g. optimizer state at inference) are skipped.
    pub fn load_values_from(&self, path: &Path) -> Result<String> {
        let (loaded, meta) = ParamSet::<R>::load(path)?;
        for (name, tensor) in &self.entries {
            let src = loaded.get(name).ok_or_else(|| {
                Error::Format(format!("{}: missing parameter {name}", path.display()))
            })?;
            if src.shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint shape {:?} vs model shape {:?}",
                    src.shape(),
                    tensor.shape()
                )));
            }
            tensor.set_values(&src.values())?;
        }
        Ok(meta)
    }
}

fn truncated(path: &Path) -> Error {
    Error::Format(format!("{}: truncated file", path.display()))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8], path: &'a Path) -> Self {
        Cursor { data, pos: 0, path }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(truncated(self.path));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.data.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_set() -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert(
            "decoder.gru1.w_z",
            Tensor::from_vec(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 2.5, -0.125])
                .unwrap()
                .requiring_grad(),
        );
        ps.insert(
            "encoder.bn.running_mean",
            Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap(),
        );
        ps
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ps = sample_set();
        ps.save(&p1, "profile = test\n").unwrap();
        let (loaded, meta) = ParamSet::<f64>::load(&p1).unwrap();
        assert_eq!(meta, "profile = test\n");
        loaded.save(&p2, &meta).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_assigns_trainable_flags_by_name() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample_set().save(&p, "").unwrap();
        let (loaded, _) = ParamSet::<f32>::load(&p).unwrap();
        assert!(loaded.get("decoder.gru1.w_z").unwrap().requires_grad());
        assert!(!loaded
            .get("encoder.bn.running_mean")
            .unwrap()
            .requires_grad());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample_set().save(&p, "meta").unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(ParamSet::<f64>::load(&p).is_err());
    }

    #[test]
    fn corrupted_payload_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample_set().save(&p, "").unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(ParamSet::<f64>::load(&p).is_err());
    }

    #[test]
    fn missing_entry_detected_on_partial_load() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        sample_set().save(&p, "").unwrap();
        let mut other = ParamSet::<f64>::new();
        other.insert("nonexistent.w", Tensor::zeros(&[2]));
        assert!(other.load_values_from(&p).is_err());
    }
}
