//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RFPK" | u32 version = 1 | u32 count
//! count x ( u16 name_len | name (UTF-8) | u8 dtype (0 = f32, 1 = f64)
//!           | u8 ndim | ndim x u32 dims | row-major payload )
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, LoadReport, Result};
use crate::param::Module;
use crate::sac::SAC_ONLY_SUFFIXES;
use crate::tensor::{DType, Element};

pub const MAGIC: &[u8; 4] = b"RFPK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_slice<T: Element>(data: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(data.iter().map(|v| v.as_f64()).collect()),
        }
    }

    /// Values as `T`. Exact when the dtype matches; f32 -> f64 is also exact.
    pub fn to_vec<T: Element>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

/// How to treat names the model has but the checkpoint lacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Every model parameter must be present.
    Strict,
    /// Parameters that exist only on SAC layers may be absent; they take their
    /// conversion values (`delta_weight`, switch weight and contexts zero,
    /// switch bias one). Loads plain checkpoints into converted models.
    FillSacDefaults,
}

/// Insertion-ordered map from `/`-separated names to tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn insert(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name `{}`", entry.name)));
        }
        if entry.dims.iter().product::<usize>() != entry.data.len() {
            return Err(Error::Format(format!(
                "`{}` has {} values for dims {:?}",
                entry.name,
                entry.data.len(),
                entry.dims
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn from_module<T: Element, M: Module<T> + ?Sized>(model: &M) -> Self {
        let mut ck = Checkpoint::new();
        model.visit("", &mut |name, p| {
            ck.entries.push(Entry {
                name: name.to_string(),
                dims: p.dims().to_vec(),
                data: TensorData::from_slice(p.value().data()),
            })
        });
        ck
    }

    /// True when the archive holds SAC-only parameters.
    pub fn has_sac(&self) -> bool {
        self.entries.iter().any(|e| e.name.ends_with("/delta_weight"))
    }

    /// Matches names and shapes against `model` without changing it.
    pub fn compare<T: Element, M: Module<T> + ?Sized>(&self, model: &M, mode: LoadMode) -> LoadReport {
        let by_name: HashMap<&str, &Entry> = self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut report = LoadReport::default();
        let mut seen = HashSet::new();
        model.visit("", &mut |name, p| {
            seen.insert(name.to_string());
            match by_name.get(name) {
                None => {
                    if !(mode == LoadMode::FillSacDefaults && is_sac_only(name)) {
                        report.missing.push(name.to_string());
                    }
                }
                Some(e) if e.dims != p.dims() => {
                    report
                        .misshapen
                        .push((name.to_string(), p.dims().to_vec(), e.dims.clone()));
                }
                Some(_) => {}
            }
        });
        report.unexpected = self
            .entries
            .iter()
            .filter(|e| !seen.contains(&e.name))
            .map(|e| e.name.clone())
            .collect();
        report
    }

    /// Copies every tensor into `model`. On any mismatch nothing is written
    /// and the full report is returned as [`Error::Mismatch`].
    pub fn apply_to<T: Element, M: Module<T> + ?Sized>(&self, model: &mut M, mode: LoadMode) -> Result<()> {
        let report = self.compare(model, mode);
        if !report.is_clean() {
            return Err(Error::Mismatch(report));
        }
        let by_name: HashMap<&str, &Entry> = self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        model.visit_mut("", &mut |name, p| match by_name.get(name) {
            Some(e) => p.set_data(&e.data.to_vec::<T>()).expect("shape checked"),
            None => p.fill(sac_default(name)),
        });
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for e in &self.entries {
            let name_len = u16::try_from(e.name.len())
                .map_err(|_| Error::Format(format!("name too long: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype().tag());
            let ndim = u8::try_from(e.dims.len())
                .map_err(|_| Error::Format(format!("too many dims on {}", e.name)))?;
            out.push(ndim);
            for &d in &e.dims {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim too large on {}", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"RFPK\"")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut ck = Checkpoint::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("`{name}`: unknown dtype {tag}")))?;
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("dims")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}`: dims overflow")))?;
            let nbytes = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("`{name}`: payload overflow")))?;
            let payload = r.take(nbytes, "payload")?;
            let data = match dtype {
                DType::F32 => TensorData::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => TensorData::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
            };
            ck.insert(Entry { name, dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after {count} tensors",
                bytes.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn is_sac_only(name: &str) -> bool {
    SAC_ONLY_SUFFIXES.iter().any(|s| name.ends_with(&format!("/{s}")))
}

fn sac_default<T: Element>(name: &str) -> T {
    if name.ends_with("/switch/bias") {
        T::one()
    } else {
        T::zero()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated file: need {n} bytes of {what} at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert(Entry {
            name: "a/weight".into(),
            dims: vec![2, 1, 1, 1],
            data: TensorData::F32(vec![1.5, -0.0]),
        })
        .unwrap();
        ck.insert(Entry {
            name: "a/bias".into(),
            dims: vec![2],
            data: TensorData::F64(vec![f64::MIN_POSITIVE, 3.0]),
        })
        .unwrap();
        ck
    }

    #[test]
    fn exact_layout() {
        let bytes = sample().to_bytes().unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"RFPK");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&8u16.to_le_bytes());
        want.extend_from_slice(b"a/weight");
        want.extend_from_slice(&[0, 4]);
        for d in [2u32, 1, 1, 1] {
            want.extend_from_slice(&d.to_le_bytes());
        }
        want.extend_from_slice(&1.5f32.to_le_bytes());
        want.extend_from_slice(&(-0.0f32).to_le_bytes());
        want.extend_from_slice(&6u16.to_le_bytes());
        want.extend_from_slice(b"a/bias");
        want.extend_from_slice(&[1, 1]);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&f64::MIN_POSITIVE.to_le_bytes());
        want.extend_from_slice(&3.0f64.to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), sample());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("magic")));
        for cut in [3, 10, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::Format(m)) if m.contains("truncated")
            ));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        let mut version = bytes;
        version[4] = 2;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ck = sample();
        let dup = ck.entries()[0].clone();
        assert!(ck.insert(dup).is_err());
    }
}
