//! Named parameter storage and the `HYBNN1` binary container.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "HYBNN1"                      6 bytes
//! record count                  u32
//! per record:
//!   name length                 u32
//!   name                        UTF-8 bytes
//!   rank                        u32
//!   dims                        rank × u32
//!   values                      product(dims) × f32
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 6] = b"HYBNN1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Weight,
    /// State that is updated outside the optimizer (batchnorm running stats).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            kind,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Order-dependent FNV-1a digest over names and raw value bits.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies values from `other` for every parameter, matching by position
    /// and checking name and shape.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::shape(format!(
                    "parameter `{}` {:?} vs `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn write_container<W: Write>(&self, w: &mut W) -> Result<()> {
        let records: Vec<(&str, &Tensor)> =
            self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        write_records(w, &records)
    }

    pub fn to_container_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_container(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Loads values from a container into this store; every parameter of the
    /// store must be present with a matching shape.
    pub fn load_container<R: Read>(&mut self, r: &mut R) -> Result<()> {
        let records = read_records(r)?;
        self.load_records(records)
    }

    pub fn load_records(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = records
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Format(format!("container lacks `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "`{}` has shape {:?} in container, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

pub fn write_records<W: Write>(w: &mut W, records: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 6];
    read_exact(r, &mut magic, "container magic")?;
    if &magic != CONTAINER_MAGIC {
        return Err(Error::BadMagic {
            path: "<container>".into(),
            expected: String::from_utf8_lossy(CONTAINER_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let count = read_u32(r, "record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(r, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non-UTF-8 name".into()))?;
        let rank = read_u32(r, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r, "dimension")? as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(r, &mut raw, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((name, Tensor::new(&dims, data)?));
    }
    Ok(records)
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated {
            path: "<stream>".into(),
            detail: format!("ended while reading {what}"),
        },
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
