//! Self-describing binary container of named matrices.
//!
//! Layout, all integers little-endian:
//! `MAGIC` | version u32 | kind (u32 length + UTF-8) | config (u32 length +
//! UTF-8) | entry count u32 | entries | FNV-1a 64 checksum of every
//! preceding byte. Each entry is a name (u32 length + UTF-8), a dtype byte
//! (0 = f64, 1 = u64), rows u64, cols u64 and `rows * cols` column-major
//! 8-byte values.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"MFACEBIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Data,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    /// What the container holds, checked on load.
    pub kind: String,
    /// Effective run configuration text that produced the contents.
    pub config: String,
    pub entries: Vec<(String, Tensor)>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn missing(name: &str) -> Error {
    Error::InvariantViolation {
        field: name.into(),
        msg: "entry missing from container".into(),
    }
}

fn wrong_shape(name: &str, msg: String) -> Error {
    Error::InvariantViolation { field: name.into(), msg }
}

impl Container {
    pub fn new(kind: &str, config: &str) -> Self {
        Self {
            kind: kind.into(),
            config: config.into(),
            entries: Vec::new(),
        }
    }

    pub fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) {
        self.push(name, m.nrows(), m.ncols(), Data::F64(m.as_slice().to_vec()));
    }

    pub fn push_f64s(&mut self, name: &str, values: &[f64]) {
        self.push(name, values.len(), 1, Data::F64(values.to_vec()));
    }

    pub fn push_u64s(&mut self, name: &str, values: &[u64]) {
        self.push(name, values.len(), 1, Data::U64(values.to_vec()));
    }

    fn push(&mut self, name: &str, rows: usize, cols: usize, data: Data) {
        assert!(self.get(name).is_none(), "duplicate container entry `{name}`");
        self.entries.push((name.into(), Tensor { rows, cols, data }));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::InvariantViolation {
                field: "kind".into(),
                msg: format!("expected a `{kind}` container, found `{}`", self.kind),
            })
        }
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let t = self.get(name).ok_or_else(|| missing(name))?;
        match &t.data {
            Data::F64(v) => Ok(DMatrix::from_column_slice(t.rows, t.cols, v)),
            Data::U64(_) => Err(wrong_shape(name, "expected f64 values".into())),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        let m = self.matrix(name)?;
        if m.ncols() != 1 {
            return Err(wrong_shape(name, format!("expected a column, found {} columns", m.ncols())));
        }
        Ok(m.as_slice().to_vec())
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.f64s(name)?))
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        let t = self.get(name).ok_or_else(|| missing(name))?;
        match &t.data {
            Data::U64(v) if t.cols == 1 => Ok(v.clone()),
            _ => Err(wrong_shape(name, "expected a column of u64 values".into())),
        }
    }

    /// A single u64 value stored as a one-element column.
    pub fn scalar_u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)?.as_slice() {
            [v] => Ok(*v),
            v => Err(wrong_shape(name, format!("expected one value, found {}", v.len()))),
        }
    }

    /// A u64 scalar converted to `usize`.
    pub fn scalar_usize(&self, name: &str) -> Result<usize> {
        usize::try_from(self.scalar_u64(name)?).map_err(|_| wrong_shape(name, "value exceeds usize".into()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&u32::try_from(self.entries.len()).expect("entry count fits u32").to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.push(match t.data {
                Data::F64(_) => 0,
                Data::U64(_) => 1,
            });
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            match &t.data {
                Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Data::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    /// Parses a container. Bad magic, truncation, checksum mismatch and
    /// malformed entries are corruption errors; a different format version is
    /// a version-mismatch error.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("not a container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 12 + 8 {
            return Err(Error::Corrupt("truncated container".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let kind = r.string()?;
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut c = Container::new(&kind, &config);
        for _ in 0..n {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let rows = usize::try_from(r.u64()?).map_err(|_| Error::Corrupt("row count overflow".into()))?;
            let cols = usize::try_from(r.u64()?).map_err(|_| Error::Corrupt("column count overflow".into()))?;
            let len = rows
                .checked_mul(cols)
                .filter(|l| l.checked_mul(8).is_some_and(|b| b <= body.len()))
                .ok_or_else(|| Error::Corrupt(format!("entry `{name}` is larger than the file")))?;
            let raw = r.take(len * 8)?;
            let words = raw.chunks_exact(8).map(|w| w.try_into().expect("8 bytes"));
            let data = match dtype {
                0 => Data::F64(words.map(f64::from_le_bytes).collect()),
                1 => Data::U64(words.map(u64::from_le_bytes).collect()),
                d => return Err(Error::Corrupt(format!("entry `{name}` has unknown dtype {d}"))),
            };
            if c.get(&name).is_some() {
                return Err(Error::Corrupt(format!("duplicate entry `{name}`")));
            }
            c.entries.push((name, Tensor { rows, cols, data }));
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after the last entry".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&u32::try_from(s.len()).expect("string length fits u32").to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("truncated container".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", "seed = 7\n");
        c.push_matrix("m", &DMatrix::from_fn(2, 3, |i, j| i as f64 - 0.1 * j as f64));
        c.push_f64s("v", &[f64::MIN_POSITIVE, -0.0, 1e300]);
        c.push_u64s("u", &[0, u64::MAX]);
        c
    }

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let v = back.f64s("v").unwrap();
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.matrix("m").unwrap()[(1, 2)], 1.0 - 0.2);
        assert_eq!(back.u64s("u").unwrap(), vec![0, u64::MAX]);
    }

    #[test]
    fn every_truncation_is_a_corruption_error() {
        let bytes = sample().to_bytes();
        for len in 0..bytes.len() {
            let err = Container::from_bytes(&bytes[..len]).unwrap_err();
            assert_eq!(err.kind(), "corrupt", "len {len}: {err}");
        }
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert_eq!(Container::from_bytes(&bytes).unwrap_err().kind(), "corrupt");
    }

    #[test]
    fn other_version_is_a_version_mismatch() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        match Container::from_bytes(&bytes).unwrap_err() {
            Error::VersionMismatch { found, expected } => assert_eq!((found, expected), (2, FORMAT_VERSION)),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn typed_accessors_name_the_entry() {
        let c = sample();
        for err in [c.u64s("m").unwrap_err(), c.matrix("absent").unwrap_err(), c.f64s("m").unwrap_err()] {
            assert!(matches!(err, Error::InvariantViolation { ref field, .. } if field == "m" || field == "absent"));
        }
        assert!(c.expect_kind("network").is_err());
    }
}
