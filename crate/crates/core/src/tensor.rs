//! Flat `f64` tensors and ordered, named parameter sets.
//!
//! Models keep their parameters in a [`ParamSet`]; gradients and optimizer
//! state use the same layout, so aggregation, optimizer steps and checkpoints
//! are all elementwise walks over the same ordered list.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View a rank-2 tensor as a matrix.
    pub fn view2(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "view2 on rank-{} tensor", self.shape.len());
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("contiguous")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        assert_eq!(self.shape.len(), 2);
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data)
            .expect("contiguous")
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }
}

/// Ordered map of parameter name to tensor.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &mut self.tensors[i]
    }

    pub fn replace(&mut self, name: &str, tensor: Tensor) {
        *self.get_mut(name) = tensor;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// True when names and shapes agree entry by entry.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            return Ok(());
        }
        let describe = |p: &ParamSet| {
            p.iter()
                .map(|(n, t)| format!("{n}{:?}", t.shape()))
                .collect::<Vec<_>>()
                .join(", ")
        };
        Err(Error::Shape(format!(
            "parameter layouts differ: [{}] vs [{}]",
            describe(self),
            describe(other)
        )))
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Hash of names, shapes and exact bit patterns. Used to prove frozen
    /// snapshots are never mutated.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01B3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Weighted average of parameter sets with identical layouts.
    pub fn weighted_average(sets: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
        if sets.is_empty() {
            return Err(Error::InvalidArgument("nothing to average".into()));
        }
        if sets.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter sets but {} weights",
                sets.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "aggregation weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(
                "aggregation weights must sum to a positive value".into(),
            ));
        }
        for s in &sets[1..] {
            sets[0].check_layout(s)?;
        }
        let mut out = sets[0].zeros_like();
        for (s, w) in sets.iter().zip(weights) {
            out.add_scaled(s, w / total);
        }
        Ok(out)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FCKP";
const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// A parameter set plus free-form string metadata, as stored on disk.
///
/// Layout (little-endian): magic `FCKP`, u32 version, u32 metadata count,
/// then per entry (u32 len, key bytes, u32 len, value bytes); u32 tensor
/// count, then per tensor u32 name length, name bytes, u8 dtype (1 = f64),
/// u32 rank, rank × u64 dims, and the raw f64 values.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamSet,
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Corrupt(format!("checkpoint truncated while reading {what}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r, what)?))
}

fn read_str(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Corrupt(format!("checkpoint truncated while reading {what}")))?;
    String::from_utf8(buf).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
}

impl Checkpoint {
    pub fn new(params: ParamSet) -> Self {
        Checkpoint {
            metadata: BTreeMap::new(),
            params,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        for (k, v) in &self.metadata {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            write_str(w, name)?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic = read_exact::<4>(r, "magic")
            .map_err(|_| Error::Format("checkpoint too short for magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = read_u32(r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..read_u32(r, "metadata count")? {
            let k = read_str(r, "metadata key")?;
            let v = read_str(r, "metadata value")?;
            metadata.insert(k, v);
        }
        let mut params = ParamSet::new();
        for _ in 0..read_u32(r, "tensor count")? {
            let name = read_str(r, "tensor name")?;
            let [dtype] = read_exact::<1>(r, "dtype")?;
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
            }
            let rank = read_u32(r, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(read_exact::<8>(r, "dims")?) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(|_| {
                Error::Corrupt(format!("checkpoint truncated inside tensor {name}"))
            })?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.push(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(Checkpoint { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("a.weight", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap());
        p.push("a.bias", Tensor::from_vec(&[2], vec![0.1, -0.0]).unwrap());
        p
    }

    #[test]
    fn weighted_average_matches_hand_values() {
        let mut a = ParamSet::new();
        a.push("w", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut b = ParamSet::new();
        b.push("w", Tensor::from_vec(&[1], vec![4.0]).unwrap());
        let avg = ParamSet::weighted_average(&[&a, &b], &[1.0, 3.0]).unwrap();
        assert_eq!(avg.get("w").data(), &[3.0]);
        let avg = ParamSet::weighted_average(&[&a, &b], &[1.0, 1.0]).unwrap();
        assert_eq!(avg.get("w").data(), &[2.0]);
    }

    #[test]
    fn weighted_average_rejects_bad_input() {
        let a = sample_set();
        let mut b = ParamSet::new();
        b.push("a.weight", Tensor::zeros(&[2, 3]));
        b.push("a.bias", Tensor::zeros(&[2]));
        assert!(matches!(
            ParamSet::weighted_average(&[&a, &b], &[1.0, 1.0]),
            Err(Error::Shape(_))
        ));
        assert!(ParamSet::weighted_average(&[&a], &[0.0]).is_err());
        assert!(ParamSet::weighted_average(&[&a], &[-1.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new(sample_set());
        ck.metadata.insert("kind".into(), "test".into());
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        for ((n1, t1), (n2, t2)) in back.params.iter().zip(ck.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let ck = Checkpoint::new(sample_set());
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &cut[..]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn fingerprint_sees_single_bit_changes() {
        let a = sample_set();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.get_mut("a.bias").data_mut()[1] = 0.0; // -0.0 -> +0.0
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
