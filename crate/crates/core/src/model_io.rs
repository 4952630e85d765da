//! `MFWB1` weight bundles.
//!
//! ```text
//! magic      5 bytes "MFWB1"
//! version    u32
//! metadata   u32 byte length + UTF-8 "key=value\n" lines
//! directory  u32 tensor count, then per tensor:
//!              u32 name length + UTF-8 name, u8 dtype (0 = f32),
//!              u32 rank, rank * u32 dims
//! data       raw little-endian f32 for each tensor, in directory order
//! ```
//!
//! Tensors are written in name order so the same bundle always serializes
//! to the same bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const BUNDLE_MAGIC: &[u8; 5] = b"MFWB1";
pub const BUNDLE_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub const META_SPEC_HASH: &str = "spec_hash";
pub const META_FORMAT_VERSION: &str = "format_version";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("not a weight bundle (bad magic)")]
    BadMagic,
    #[error("unsupported bundle version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("bundle is truncated")]
    Truncated,
    #[error("malformed bundle: {0}")]
    Malformed(String),
    #[error("spec hash mismatch: bundle has {bundle}, spec hashes to {spec}")]
    HashMismatch { bundle: String, spec: String },
    #[error("tensor `{name}` has shape {found:?}, spec expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor `{0}` is not used by the net spec")]
    OrphanTensor(String),
    #[error("tensor `{0}` required by the net spec is missing")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl WeightBundle {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn spec_hash(&self) -> Option<&str> {
        self.metadata.get(META_SPEC_HASH).map(String::as_str)
    }

    /// Checks a bundle against the `(name, shape)` slots and the hash of a
    /// net spec.
    pub fn check_against(&self, slots: &[(String, Vec<usize>)], spec_hash: &str) -> Result<(), BundleError> {
        if let Some(h) = self.spec_hash() {
            if h != spec_hash {
                return Err(BundleError::HashMismatch { bundle: h.to_string(), spec: spec_hash.to_string() });
            }
        }
        for (name, shape) in slots {
            match self.tensors.get(name) {
                None => return Err(BundleError::MissingTensor(name.clone())),
                Some(t) if &t.shape != shape => {
                    return Err(BundleError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(orphan) = self.tensors.keys().find(|k| !slots.iter().any(|(n, _)| n == *k)) {
            return Err(BundleError::OrphanTensor(orphan.clone()));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), BundleError> {
        w.write_all(BUNDLE_MAGIC)?;
        w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(BundleError::Malformed(format!("metadata entry `{k}` cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        write_u32(w, meta.len())?;
        w.write_all(meta.as_bytes())?;
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(BundleError::Malformed(format!("tensor `{name}` data does not match its shape")));
            }
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F32])?;
            write_u32(w, t.shape.len())?;
            for &d in &t.shape {
                write_u32(w, d)?;
            }
        }
        for t in self.tensors.values() {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, BundleError> {
        let mut magic = [0u8; 5];
        read_exact(r, &mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(BundleError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != BUNDLE_VERSION {
            return Err(BundleError::VersionMismatch { found: version, expected: BUNDLE_VERSION });
        }
        let meta_len = read_u32(r)? as usize;
        let meta = String::from_utf8(read_vec(r, meta_len)?)
            .map_err(|_| BundleError::Malformed("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BundleError::Malformed(format!("metadata line `{line}` has no `=`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }

        let count = read_u32(r)? as usize;
        let mut directory = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_vec(r, name_len)?)
                .map_err(|_| BundleError::Malformed("tensor name is not UTF-8".into()))?;
            let mut dtype = [0u8; 1];
            read_exact(r, &mut dtype)?;
            if dtype[0] != DTYPE_F32 {
                return Err(BundleError::Malformed(format!("tensor `{name}` has unsupported dtype {}", dtype[0])));
            }
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            directory.push((name, shape));
        }

        let mut tensors = BTreeMap::new();
        for (name, shape) in directory {
            let n: usize = shape.iter().product();
            let bytes = read_vec(r, n * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(BundleError::Malformed(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(Self { tensors, metadata })
    }
}

pub fn save_bundle(bundle: &WeightBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let mut w = BufWriter::new(File::create(path)?);
    bundle.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<WeightBundle, BundleError> {
    WeightBundle::read_from(&mut BufReader::new(File::open(path)?))
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<(), BundleError> {
    let v = u32::try_from(v).map_err(|_| BundleError::Malformed(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), BundleError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => BundleError::Truncated,
        _ => BundleError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, BundleError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads `len` bytes without trusting `len` for the up-front allocation.
fn read_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>, BundleError> {
    let mut buf = Vec::with_capacity(len.min(1 << 20));
    let got = r.take(len as u64).read_to_end(&mut buf)?;
    if got != len {
        return Err(BundleError::Truncated);
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightBundle {
        let mut b = WeightBundle::default();
        b.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, -0.0, 7.0]));
        b.insert("a.bias", Tensor::new(vec![2], vec![0.25, -0.5]));
        b.metadata.insert(META_SPEC_HASH.into(), "abc".into());
        b.metadata.insert("sigma_y".into(), "0.25".into());
        b
    }

    fn slots() -> Vec<(String, Vec<usize>)> {
        vec![("a.weight".into(), vec![2, 3]), ("a.bias".into(), vec![2])]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = sample();
        let mut bytes = Vec::new();
        b.write_to(&mut bytes).unwrap();
        let back = WeightBundle::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.metadata, b.metadata);
        for (name, t) in &b.tensors {
            let u = &back.tensors[name];
            assert_eq!(u.shape, t.shape);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&u.data), bits(&t.data));
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn every_truncation_is_reported() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        for cut in 0..bytes.len() {
            let err = WeightBundle::read_from(&mut &bytes[..cut]).unwrap_err();
            assert!(matches!(err, BundleError::Truncated), "cut at {cut}: {err}");
        }
    }

    #[test]
    fn version_and_magic_errors() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let mut v2 = bytes.clone();
        v2[5..9].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            WeightBundle::read_from(&mut v2.as_slice()),
            Err(BundleError::VersionMismatch { found: 2, expected: 1 })
        ));
        bytes[0] = b'Z';
        assert!(matches!(WeightBundle::read_from(&mut bytes.as_slice()), Err(BundleError::BadMagic)));
    }

    #[test]
    fn spec_check_reports_each_problem_distinctly() {
        let b = sample();
        b.check_against(&slots(), "abc").unwrap();
        assert!(matches!(b.check_against(&slots(), "xyz"), Err(BundleError::HashMismatch { .. })));

        let mut extra = b.clone();
        extra.insert("ghost.weight", Tensor::zeros(vec![1]));
        match extra.check_against(&slots(), "abc") {
            Err(BundleError::OrphanTensor(name)) => assert_eq!(name, "ghost.weight"),
            other => panic!("{other:?}"),
        }

        let mut missing = b.clone();
        missing.tensors.remove("a.bias");
        assert!(matches!(missing.check_against(&slots(), "abc"), Err(BundleError::MissingTensor(n)) if n == "a.bias"));

        let mut reshaped = b;
        reshaped.insert("a.bias", Tensor::zeros(vec![3]));
        assert!(matches!(reshaped.check_against(&slots(), "abc"), Err(BundleError::ShapeMismatch { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mfwb");
        save_bundle(&sample(), &path).unwrap();
        assert_eq!(load_bundle(&path).unwrap(), sample());
    }
}
