//! `LDWT` weight container.
//!
//! ```text
//! "LDWT" | version u16 | count u32
//! per tensor: name_len u16 | name utf-8 | dtype u8 (0 f32, 1 f64)
//!             | ndim u8 | dims u64 × ndim | little-endian data
//! ```
//!
//! No padding, no trailing bytes.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LDWT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

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

    /// Bitwise equality (NaN payloads included).
    pub fn bits_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Entry {
    pub fn from_tensor(name: &str, t: &Tensor, dtype: DType) -> Self {
        let data = match dtype {
            DType::F32 => TensorData::F32(t.data().iter().map(|&x| x as f32).collect()),
            DType::F64 => TensorData::F64(t.data().to_vec()),
        };
        Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        };
        Tensor::new(self.shape.clone(), data)
    }
}

/// An ordered set of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
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

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {:?}", entry.name)));
        }
        if entry.name.len() > u16::MAX as usize {
            return Err(Error::Format("tensor name longer than 65535 bytes".into()));
        }
        if entry.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("{}: too many dimensions", entry.name)));
        }
        let expect: usize = entry.shape.iter().product();
        if expect != entry.data.len() {
            return Err(Error::Format(format!(
                "{}: shape {:?} needs {expect} scalars, got {}",
                entry.name,
                entry.shape,
                entry.data.len()
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor, dtype: DType) -> Result<()> {
        self.push(Entry::from_tensor(name, t, dtype))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// The named tensor, or a configuration error naming it.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("tensor {name:?} not found in container")))?
            .to_tensor()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Bitwise equality of names, order, shapes and data.
    pub fn bits_eq(&self, other: &Container) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.shape == b.shape && a.data.bits_eq(&b.data)
            })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Format("too many tensors".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u16).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.data.dtype().code(), e.shape.len() as u8])?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &e.data {
                TensorData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Container::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic, expected LDWT".into()));
        }
        let version = u16::from_le_bytes(cur.array("version")?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(cur.array("tensor count")?);
        let mut out = Container::new();
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.array("name length")?) as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|_| Error::Format("tensor name is not valid utf-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name {name:?}")));
            }
            let [code, ndim] = cur.array::<2>("dtype/ndim")?;
            let dtype = match code {
                0 => DType::F32,
                1 => DType::F64,
                c => return Err(Error::Format(format!("{name}: unknown dtype code {c}"))),
            };
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut n: usize = 1;
            for _ in 0..ndim {
                let d = u64::from_le_bytes(cur.array("dimension")?);
                let d = usize::try_from(d)
                    .map_err(|_| Error::Format(format!("{name}: dimension {d} too large")))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("{name}: element count overflows")))?;
                shape.push(d);
            }
            let nbytes = n
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("{name}: payload size overflows")))?;
            let raw = cur.take(nbytes, &name)?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
            };
            out.entries.push(Entry { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - cur.pos
            )));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.push_tensor("w", &Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.5]]).unwrap(), DType::F32)
            .unwrap();
        c.push(Entry {
            name: "v".into(),
            shape: vec![3],
            data: TensorData::F64(vec![0.1, -0.0, f64::NAN]),
        })
        .unwrap();
        c
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"LDWT");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[10..12], &[1, 0]);
        assert_eq!(bytes[12], b'w');
        assert_eq!(&bytes[13..15], &[0, 2]);
        // header 10 + (2+1+2+16+16) + (2+1+2+8+24)
        assert_eq!(bytes.len(), 10 + 37 + 37);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(c.bits_eq(&back));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Container::from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_duplicates_and_bad_codes() {
        let mut c = sample();
        assert!(c.push_tensor("w", &Tensor::scalar(1.0), DType::F64).is_err());
        let mut bytes = sample().to_bytes().unwrap();
        bytes[13] = 7;
        assert!(Container::from_bytes(&bytes).is_err());
        bytes[..4].copy_from_slice(b"LDWX");
        assert!(Container::from_bytes(&bytes).is_err());
    }

    #[test]
    fn missing_tensor_names_it() {
        let err = sample().tensor("layers.0.q").unwrap_err();
        assert!(err.to_string().contains("layers.0.q"));
        assert_eq!(err.exit_code(), 2);
    }
}
