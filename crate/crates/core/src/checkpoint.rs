//! Self-describing binary checkpoint shared by models, CMA-ES state, prompts
//! and training snapshots.
//!
//! Layout (all integers and floats little-endian, strings are `u32` length + UTF-8):
//!
//! ```text
//! magic     8 bytes  "GDFOCKPT"
//! version   u32      FORMAT_VERSION
//! kind      string   e.g. "model", "cma", "snapshot"
//! n_scalars u32
//!   name    string
//!   tag     u8       0 = f64, 1 = u64, 2 = string
//!   value   f64 | u64 | string
//! n_tensors u32
//!   name    string
//!   rank    u32
//!   dims    u64 x rank
//!   values  f64 x product(dims), row-major
//! ```
//!
//! Entries are written in insertion order, so a writer that pushes fields in a
//! fixed order produces byte-stable files.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GDFOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    F64(f64),
    U64(u64),
    Str(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    kind: String,
    scalars: Vec<(String, Scalar)>,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.to_string(), scalars: Vec::new(), tensors: Vec::new() }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("expected a '{kind}' checkpoint, found '{}'", self.kind)))
        }
    }

    pub fn push_f64(&mut self, name: &str, v: f64) {
        self.scalars.push((name.to_string(), Scalar::F64(v)));
    }

    pub fn push_u64(&mut self, name: &str, v: u64) {
        self.scalars.push((name.to_string(), Scalar::U64(v)));
    }

    pub fn push_str(&mut self, name: &str, v: &str) {
        self.scalars.push((name.to_string(), Scalar::Str(v.to_string())));
    }

    pub fn push_tensor(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push(NamedTensor { name: name.to_string(), shape: shape.to_vec(), values: values.to_vec() });
    }

    /// Appends every scalar and tensor of `other`, prefixing names with `prefix.`.
    pub fn push_nested(&mut self, prefix: &str, other: &Checkpoint) {
        self.push_str(&format!("{prefix}.kind"), &other.kind);
        for (name, s) in &other.scalars {
            self.scalars.push((format!("{prefix}.{name}"), s.clone()));
        }
        for t in &other.tensors {
            self.tensors.push(NamedTensor { name: format!("{prefix}.{}", t.name), ..t.clone() });
        }
    }

    /// Extracts the entries written by [`Checkpoint::push_nested`].
    pub fn nested(&self, prefix: &str) -> Result<Checkpoint> {
        let p = format!("{prefix}.");
        let kind = self.get_str(&format!("{prefix}.kind"))?.to_string();
        let scalars = self
            .scalars
            .iter()
            .filter(|(n, _)| n.starts_with(&p) && n != &format!("{prefix}.kind"))
            .map(|(n, s)| (n[p.len()..].to_string(), s.clone()))
            .collect();
        let tensors = self
            .tensors
            .iter()
            .filter(|t| t.name.starts_with(&p))
            .map(|t| NamedTensor { name: t.name[p.len()..].to_string(), ..t.clone() })
            .collect();
        Ok(Checkpoint { kind, scalars, tensors })
    }

    pub fn scalars(&self) -> &[(String, Scalar)] {
        &self.scalars
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    fn scalar(&self, name: &str) -> Result<&Scalar> {
        self.scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Checkpoint(format!("missing scalar '{name}'")))
    }

    pub fn get_f64(&self, name: &str) -> Result<f64> {
        match self.scalar(name)? {
            Scalar::F64(v) => Ok(*v),
            other => Err(Error::Checkpoint(format!("scalar '{name}' is {other:?}, expected f64"))),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        match self.scalar(name)? {
            Scalar::U64(v) => Ok(*v),
            other => Err(Error::Checkpoint(format!("scalar '{name}' is {other:?}, expected u64"))),
        }
    }

    pub fn get_usize(&self, name: &str) -> Result<usize> {
        usize::try_from(self.get_u64(name)?).map_err(|_| Error::Checkpoint(format!("'{name}' overflows usize")))
    }

    pub fn get_str(&self, name: &str) -> Result<&str> {
        match self.scalar(name)? {
            Scalar::Str(v) => Ok(v),
            other => Err(Error::Checkpoint(format!("scalar '{name}' is {other:?}, expected string"))),
        }
    }

    pub fn get_tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let t = self.get_tensor(name)?;
        Tensor::new(&t.shape, t.values.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, s) in &self.scalars {
            put_str(&mut out, name);
            match s {
                Scalar::F64(v) => {
                    out.push(0);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Scalar::U64(v) => {
                    out.push(1);
                    out.extend_from_slice(&v.to_le_bytes());
                }
                Scalar::Str(v) => {
                    out.push(2);
                    put_str(&mut out, v);
                }
            }
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let n_scalars = r.u32()?;
        let mut scalars = Vec::new();
        for _ in 0..n_scalars {
            let name = r.string()?;
            let s = match r.u8()? {
                0 => Scalar::F64(f64::from_le_bytes(r.array()?)),
                1 => Scalar::U64(u64::from_le_bytes(r.array()?)),
                2 => Scalar::Str(r.string()?),
                t => return Err(Error::Checkpoint(format!("unknown scalar tag {t}"))),
            };
            scalars.push((name, s));
        }
        let n_tensors = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            if count.saturating_mul(8) > r.remaining() {
                return Err(Error::Checkpoint(format!("tensor '{name}' truncated")));
            }
            let values = (0..count).map(|_| r.array().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
            tensors.push(NamedTensor { name, shape, values });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { kind, scalars, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized bytes, lowercase hex.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable digest of a float slice (bit patterns, little-endian).
pub fn digest_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let mut c = Checkpoint::new("model");
        c.push_u64("vocab_size", 3);
        c.push_tensor("w", &[1, 2], &[1.0, -2.0]);
        let b = c.to_bytes();
        assert_eq!(&b[..8], b"GDFOCKPT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(&b[12..16], &5u32.to_le_bytes());
        assert_eq!(&b[16..21], b"model");
        assert_eq!(b.len(), 8 + 4 + (4 + 5) + 4 + (4 + 10 + 1 + 8) + 4 + (4 + 1 + 4 + 16 + 16));
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new("x");
        c.push_tensor("t", &[2], &[1.0, 2.0]);
        let b = c.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = b;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn nested_sections() {
        let mut inner = Checkpoint::new("cma");
        inner.push_f64("sigma", 0.5);
        inner.push_tensor("mean", &[2], &[1.0, 2.0]);
        let mut outer = Checkpoint::new("snapshot");
        outer.push_nested("cma", &inner);
        assert_eq!(outer.nested("cma").unwrap(), inner);
    }

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(any::<f64>(), 0..40), x in any::<u64>(), s in "[a-z]{0,12}") {
            let mut c = Checkpoint::new("prop");
            c.push_u64("x", x);
            c.push_str("s", &s);
            c.push_tensor("v", &[values.len()], &values);
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(back.to_bytes(), c.to_bytes());
        }
    }
}
