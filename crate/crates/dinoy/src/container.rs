//! Binary container of named arrays with an integrity digest.
//!
//! One flat file holds any number of named tensors (f32/f64/u8/u64). The
//! byte layout is fully deterministic given the entries and their insertion
//! order, so identical content produces identical files. A SHA-256 trailer
//! guards against truncation and corruption.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::IxDyn;
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Arr;

const MAGIC: &[u8; 4] = b"DNY1";

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Entry {
    fn dtype_code(&self) -> u8 {
        match self {
            Entry::F32 { .. } => 0,
            Entry::F64 { .. } => 1,
            Entry::U8 { .. } => 2,
            Entry::U64 { .. } => 3,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32 { shape, .. }
            | Entry::F64 { shape, .. }
            | Entry::U8 { shape, .. }
            | Entry::U64 { shape, .. } => shape,
        }
    }

    fn check_len(&self) {
        let n: usize = self.shape().iter().product();
        let got = match self {
            Entry::F32 { data, .. } => data.len(),
            Entry::F64 { data, .. } => data.len(),
            Entry::U8 { data, .. } => data.len(),
            Entry::U64 { data, .. } => data.len(),
        };
        assert_eq!(n, got, "entry data length does not match shape");
    }
}

#[derive(Default)]
pub struct Container {
    entries: IndexMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, name: &str, entry: Entry) {
        entry.check_len();
        self.entries.insert(name.to_string(), entry);
    }

    pub fn put_f32(&mut self, name: &str, arr: &Arr) {
        self.put(
            name,
            Entry::F32 {
                shape: arr.shape().to_vec(),
                data: arr.iter().copied().collect(),
            },
        );
    }

    pub fn put_u8(&mut self, name: &str, shape: Vec<usize>, data: Vec<u8>) {
        self.put(name, Entry::U8 { shape, data });
    }

    pub fn put_u64(&mut self, name: &str, shape: Vec<usize>, data: Vec<u64>) {
        self.put(name, Entry::U64 { shape, data });
    }

    pub fn put_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.put(name, Entry::F64 { shape, data });
    }

    pub fn put_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value)?;
        let n = bytes.len();
        self.put_u8(name, vec![n], bytes);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing container entry {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_f32(&self, name: &str) -> Result<Arr> {
        match self.get(name)? {
            Entry::F32 { shape, data } => {
                Ok(Arr::from_shape_vec(IxDyn(shape), data.clone()).unwrap())
            }
            _ => Err(Error::Checkpoint(format!("{name} is not an f32 entry"))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<(&[usize], &[u8])> {
        match self.get(name)? {
            Entry::U8 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Checkpoint(format!("{name} is not a u8 entry"))),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<(&[usize], &[u64])> {
        match self.get(name)? {
            Entry::U64 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Checkpoint(format!("{name} is not a u64 entry"))),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.get(name)? {
            Entry::F64 { shape, data } => Ok((shape, data)),
            _ => Err(Error::Checkpoint(format!("{name} is not an f64 entry"))),
        }
    }

    pub fn get_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let (_, bytes) = self.get_u8(name)?;
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.dtype_code());
            out.push(entry.shape().len() as u8);
            for &d in entry.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match entry {
                Entry::F32 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::F64 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::U8 { data, .. } => out.extend_from_slice(data),
                Entry::U64 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        let bad = |m: &str| Error::Checkpoint(format!("container: {m}"));
        if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic or truncated file"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != trailer {
            return Err(bad("integrity digest mismatch"));
        }
        let mut at = 4usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            let s = body
                .get(*at..*at + n)
                .ok_or_else(|| Error::Checkpoint("container: truncated".into()))?;
            *at += n;
            Ok(s)
        };
        let n_entries = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let mut entries = IndexMap::new();
        for _ in 0..n_entries {
            let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
                .map_err(|_| bad("entry name is not utf-8"))?;
            let dtype = take(&mut at, 1)?[0];
            let ndim = take(&mut at, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize);
            }
            let count: usize = shape.iter().product();
            let entry = match dtype {
                0 => {
                    let raw = take(&mut at, count * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F32 { shape, data }
                }
                1 => {
                    let raw = take(&mut at, count * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F64 { shape, data }
                }
                2 => Entry::U8 {
                    shape,
                    data: take(&mut at, count)?.to_vec(),
                },
                3 => {
                    let raw = take(&mut at, count * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::U64 { shape, data }
                }
                other => return Err(bad(&format!("unknown dtype code {other}"))),
            };
            entries.insert(name, entry);
        }
        if at != body.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(Container { entries })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Container> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
