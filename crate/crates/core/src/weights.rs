//! `PFW1` binary weight files and the named tensor collections stored in them.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"PFW1" | version: u16 | count: u32 |
//!   count × ( name_len: u16 | name: UTF-8 | rank: u8 | dims: rank × u32 | data: Π(dims) × f64 )
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"PFW1";
pub const VERSION: u16 = 1;

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, t)) => *t = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`ParamSet::get`], but a missing name is an error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |m: &str| Error::WeightFormat(m.to_string());
        let mut exact = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|_| fmt("unexpected end of file"))?;
            Ok(buf)
        };
        if exact(4)? != MAGIC {
            return Err(fmt("bad magic, expected PFW1"));
        }
        let version = u16::from_le_bytes(exact(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(exact(4)?.try_into().unwrap());
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(exact(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(exact(name_len)?).map_err(|_| fmt("tensor name is not UTF-8"))?;
            let rank = exact(1)?[0] as usize;
            let dims: Vec<usize> = exact(4 * rank)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect();
            let n: usize = dims.iter().product();
            let data = exact(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if set.get(&name).is_some() {
                return Err(Error::WeightFormat(format!("duplicate tensor `{name}`")));
            }
            set.insert(name, Tensor::new(&dims, data)?);
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
