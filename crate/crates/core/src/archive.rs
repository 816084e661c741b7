//! Binary named-tensor archive used for weights and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FTRA" | u32 version | u32 entry count
//! per entry: u16 name len | name bytes | u8 dtype | u8 rank | u64 dims... | payload
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64. Round-trips are bit-exact on
//! (name, dtype, shape, bytes); duplicate names, bad magic, version drift and
//! truncation are rejected.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FTRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a tensor archive")]
    BadMagic,
    #[error("archive version {0} unsupported (expected {VERSION})")]
    VersionMismatch(u32),
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("truncated archive while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("tensor '{0}' not found")]
    Missing(String),
    #[error("tensor '{0}' has dtype {1:?}, expected {2:?}")]
    WrongDType(String, DType, DType),
    #[error("invalid name encoding")]
    BadName,
}

#[derive(Debug, Clone)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Entry {
    pub fn dtype(&self) -> DType {
        match self {
            Entry::F32(_) => DType::F32,
            Entry::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
        }
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Default, Clone)]
pub struct TensorArchive {
    entries: Vec<(String, Entry)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        TensorArchive::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    fn check_unique(&self, name: &str) -> Result<(), ArchiveError> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(ArchiveError::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    pub fn push_f32(&mut self, name: &str, t: &Tensor<f32>) -> Result<(), ArchiveError> {
        self.check_unique(name)?;
        self.entries.push((name.to_string(), Entry::F32(t.clone())));
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, t: &Tensor<f64>) -> Result<(), ArchiveError> {
        self.check_unique(name)?;
        self.entries.push((name.to_string(), Entry::F64(t.clone())));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn get_f32(&self, name: &str) -> Result<&Tensor<f32>, ArchiveError> {
        match self.get(name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(e) => Err(ArchiveError::WrongDType(
                name.into(),
                e.dtype(),
                DType::F32,
            )),
            None => Err(ArchiveError::Missing(name.into())),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<&Tensor<f64>, ArchiveError> {
        match self.get(name) {
            Some(Entry::F64(t)) => Ok(t),
            Some(e) => Err(ArchiveError::WrongDType(
                name.into(),
                e.dtype(),
                DType::F64,
            )),
            None => Err(ArchiveError::Missing(name.into())),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[entry.dtype().code()])?;
            let shape = entry.shape();
            w.write_all(&[shape.len() as u8])?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match entry {
                Entry::F32(t) => {
                    for &v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Entry::F64(t) => {
                    for &v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ArchiveError::VersionMismatch(version));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes, "name")?;
            let name = String::from_utf8(name_bytes).map_err(|_| ArchiveError::BadName)?;
            if !seen.insert(name.clone()) {
                return Err(ArchiveError::DuplicateName(name));
            }
            let mut one = [0u8; 1];
            read_exact(&mut r, &mut one, "dtype")?;
            let dtype = DType::from_code(one[0]).ok_or(ArchiveError::UnknownDType(one[0]))?;
            read_exact(&mut r, &mut one, "rank")?;
            let rank = one[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let entry = match dtype {
                DType::F32 => {
                    let mut data = Vec::with_capacity(numel);
                    let mut buf = [0u8; 4];
                    for _ in 0..numel {
                        read_exact(&mut r, &mut buf, "payload")?;
                        data.push(f32::from_le_bytes(buf));
                    }
                    Entry::F32(Tensor::new(&shape, data))
                }
                DType::F64 => {
                    let mut data = Vec::with_capacity(numel);
                    let mut buf = [0u8; 8];
                    for _ in 0..numel {
                        read_exact(&mut r, &mut buf, "payload")?;
                        data.push(f64::from_le_bytes(buf));
                    }
                    Entry::F64(Tensor::new(&shape, data))
                }
            };
            entries.push((name, entry));
        }
        Ok(TensorArchive { entries })
    }
}

/// Generic push/fetch used by checkpointing.
pub fn push_tensor<T: Scalar>(
    archive: &mut TensorArchive,
    name: &str,
    t: &Tensor<T>,
) -> Result<(), ArchiveError> {
    match T::DTYPE {
        DType::F32 => archive.push_f32(name, &t.cast()),
        DType::F64 => archive.push_f64(name, &t.cast()),
    }
}

pub fn write_archive(path: &Path, archive: &TensorArchive) -> Result<(), ArchiveError> {
    archive.write(path)
}

pub fn read_archive(path: &Path) -> Result<TensorArchive, ArchiveError> {
    TensorArchive::read(path)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), ArchiveError> {
    r.read_exact(buf).map_err(|_| ArchiveError::Truncated(what))
}

fn read_u16(r: &mut impl Read) -> Result<u16, ArchiveError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, "u16")?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, ArchiveError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, "u32")?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ArchiveError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, "u64")?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn empty_archive_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ftra");
        TensorArchive::new().write(&path).unwrap();
        let back = TensorArchive::read(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn mixed_dtypes_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ftra");
        let mut a = TensorArchive::new();
        let t32 = Tensor::<f32>::new(&[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, 1e-20, 7.0]);
        let t64 = Tensor::<f64>::new(&[4], vec![std::f64::consts::PI, -1e-300, 0.1, 2.0]);
        let scalar = Tensor::<f32>::scalar(42.0);
        a.push_f32("w", &t32).unwrap();
        a.push_f64("moments", &t64).unwrap();
        a.push_f32("step", &scalar).unwrap();
        a.write(&path).unwrap();
        let b = TensorArchive::read(&path).unwrap();
        assert_eq!(b.get_f32("w").unwrap().data(), t32.data());
        assert_eq!(b.get_f32("w").unwrap().shape(), t32.shape());
        assert_eq!(b.get_f64("moments").unwrap().data(), t64.data());
        assert_eq!(b.get_f32("step").unwrap().shape(), &[] as &[usize]);
        // order preserved
        let names: Vec<&str> = b.names().collect();
        assert_eq!(names, vec!["w", "moments", "step"]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = TensorArchive::new();
        a.push_f32("x", &Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            a.push_f32("x", &Tensor::scalar(2.0)),
            Err(ArchiveError::DuplicateName(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ftra");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            TensorArchive::read(&path),
            Err(ArchiveError::BadMagic)
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ftra");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(MAGIC).unwrap();
        f.write_all(&9u32.to_le_bytes()).unwrap();
        f.write_all(&0u32.to_le_bytes()).unwrap();
        drop(f);
        assert!(matches!(
            TensorArchive::read(&path),
            Err(ArchiveError::VersionMismatch(9))
        ));
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ftra");
        let mut a = TensorArchive::new();
        a.push_f32("x", &Tensor::new(&[8], vec![1.0; 8])).unwrap();
        a.write(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        assert!(matches!(
            TensorArchive::read(&path),
            Err(ArchiveError::Truncated(_))
        ));
    }
}
