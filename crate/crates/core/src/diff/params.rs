//! Named parameter collections and their checkpoint file format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes   b"DLPP"
//! version    u8        1
//! count      u32       number of tensors
//! key table  count × (u32 byte length, UTF-8 key bytes)
//! shape tbl  count × (u32 rank, rank × u64 extent)
//! payload    for each key in table order, its f64 values row-major
//! ```
//!
//! Keys are written in sorted order, which is also the iteration order of
//! [`ParamSet`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLPP";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) -> Result<()> {
        let key = key.into();
        if self.tensors.contains_key(&key) {
            return Err(Error::KeyMismatch(format!("duplicate key {key}")));
        }
        self.tensors.insert(key, value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(key)
    }

    pub fn require(&self, key: &str) -> Result<&Tensor> {
        self.tensors
            .get(key)
            .ok_or_else(|| Error::KeyMismatch(format!("missing key {key}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same keys and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::KeyMismatch(format!(
                "{} keys vs {} keys",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb {
                return Err(Error::KeyMismatch(format!("{ka} vs {kb}")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::KeyMismatch(format!(
                    "{ka}: shape {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, key-wise.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.axpy(alpha, b);
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// Weighted key-wise sum `Σ wᵢ·setᵢ`.
    pub fn weighted_sum(sets: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
        let first = sets.first().ok_or(Error::Empty("weighted_sum"))?;
        if sets.len() != weights.len() {
            return Err(Error::KeyMismatch(format!(
                "{} parameter sets, {} weights",
                sets.len(),
                weights.len()
            )));
        }
        let mut out = first.zeros_like();
        for (set, &w) in sets.iter().zip(weights) {
            out.axpy(w, set)?;
        }
        Ok(out)
    }

    /// Subset of entries whose key starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) weight matrix, `fan_in` = rows.
    pub fn uniform_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = if fan_in == 0 {
            0.0
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        let data = (0..fan_in * fan_out)
            .map(|_| {
                if bound == 0.0 {
                    0.0
                } else {
                    rng.gen_range(-bound..bound)
                }
            })
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_values() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for key in self.tensors.keys() {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
        }
        for t in self.tensors.values() {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
        }
        for t in self.tensors.values() {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut keys = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("checkpoint key is not UTF-8".into()))?;
            keys.push(key.to_string());
        }
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            shapes.push(shape);
        }
        let mut set = ParamSet::new();
        for (key, shape) in keys.into_iter().zip(shapes) {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.array()?));
            }
            set.insert(key, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("b.bias", Tensor::row(vec![0.5, -1.25])).unwrap();
        p.insert("a.weight", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn iteration_order_is_sorted() {
        let p = sample();
        assert_eq!(p.keys().collect::<Vec<_>>(), vec!["a.weight", "b.bias"]);
    }

    #[test]
    fn duplicate_keys_rejected() {
        let mut p = sample();
        assert!(p.insert("a.weight", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamSet::from_bytes(&bad).is_err());
        assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(ParamSet::from_bytes(&long).is_err());
    }

    #[test]
    fn checkpoint_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let p = sample();
        p.save(&path).unwrap();
        assert_eq!(ParamSet::load(&path).unwrap(), p);
    }

    #[test]
    fn deep_copy_is_independent() {
        let p = sample();
        let mut q = p.clone();
        q.get_mut("b.bias").unwrap().data_mut()[0] = 9.0;
        assert_eq!(p.get("b.bias").unwrap().data()[0], 0.5);
    }

    proptest! {
        #[test]
        fn checkpoint_roundtrip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let data: Vec<f64> = values[..rows * cols].to_vec();
            let mut p = ParamSet::new();
            p.insert("encoder.w", Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
            p.insert("predictor.b", Tensor::row(vec![values[0]])).unwrap();
            let back = ParamSet::from_bytes(&p.to_bytes()).unwrap();
            for ((ka, a), (kb, b)) in p.iter().zip(back.iter()) {
                prop_assert_eq!(ka, kb);
                prop_assert_eq!(a.shape(), b.shape());
                let bits_a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
