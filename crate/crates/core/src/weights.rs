//! Named-tensor store and the `CVWT` weight file format.
//!
//! File layout (all integers little-endian): magic `CVWT`, u16 version = 1,
//! u32 tensor count, then per tensor: u16 name length, UTF-8 name, u8 rank,
//! rank × u32 dims, and `product(dims)` float32 values in row-major order.
//! Tensors are stored sorted by name, so a store always serializes to the
//! same bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::fileio::{Reader, Writer};
use crate::{Error, Result};

/// One named tensor: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || values.len() != len {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        Ok(TensorData { shape, values })
    }
}

/// Map from tensor name to shape + values.
///
/// Lookups demand the exact shape the caller expects; there is no silent
/// reshaping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, TensorData>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorData) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Shape of a tensor, if present.
    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.tensors.get(name).map(|t| t.shape.as_slice())
    }

    /// Returns the values of `name`, which must have exactly `shape`.
    pub fn get(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let tensor = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if tensor.shape != shape {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?}, requested {:?}",
                tensor.shape, shape
            )));
        }
        Ok(&tensor.values)
    }
}

/// Writes a weight store as a `CVWT` file.
pub fn save_weights(path: impl AsRef<Path>, store: &WeightStore) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(b"CVWT")?;
    w.u16(1)?;
    w.u32(store.tensors.len() as u32)?;
    for (name, tensor) in &store.tensors {
        let name_bytes = name.as_bytes();
        w.u16(name_bytes.len() as u16)?;
        w.bytes(name_bytes)?;
        w.u8(tensor.shape.len() as u8)?;
        for &d in &tensor.shape {
            w.u32(d as u32)?;
        }
        w.f32_slice(&tensor.values)?;
    }
    w.finish()
}

/// Reads a `CVWT` weight file.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(b"CVWT")?;
    let version = r.u16()?;
    if version != 1 {
        return Err(r.fail(format!("unsupported CVWT version {version}")));
    }
    let count = r.u32()?;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = r.utf8(name_len)?;
        let rank = r.u8()? as usize;
        if rank == 0 {
            return Err(r.fail(format!("tensor `{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(r.fail(format!("tensor `{name}` has a zero dimension")));
            }
            shape.push(d);
        }
        let len: usize = shape.iter().product();
        let values = r.f32_vec(len)?;
        store.insert(name, TensorData { shape, values });
    }
    r.expect_eof()?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.cvwt");
        save_weights(&path, &WeightStore::new()).unwrap();
        let back = load_weights(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn tensor_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.cvwt");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..7 * 7 * 8 * 8)
            .map(|_| rng.random_range(-2.0f32..2.0) as f64)
            .collect();
        let mut store = WeightStore::new();
        store.insert(
            "refine.conv7.w",
            TensorData::new(vec![7, 7, 8, 8], values).unwrap(),
        );
        save_weights(&path, &store).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(store, back);

        // Second save is byte-identical.
        let path2 = dir.path().join("w2.cvwt");
        save_weights(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cvwt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        match load_weights(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.cvwt");
        let mut store = WeightStore::new();
        store.insert("a", TensorData::new(vec![4], vec![1.0; 4]).unwrap());
        save_weights(&path, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_weights(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn lookup_requires_exact_shape() {
        let mut store = WeightStore::new();
        store.insert("k", TensorData::new(vec![2, 3], vec![0.0; 6]).unwrap());
        assert!(store.get("k", &[2, 3]).is_ok());
        assert!(matches!(store.get("k", &[3, 2]), Err(Error::Shape(_))));
        assert!(matches!(store.get("k", &[6]), Err(Error::Shape(_))));
        assert!(matches!(
            store.get("missing", &[1]),
            Err(Error::MissingTensor(_))
        ));
    }
}
