//! Named parameter collections and the `HIRW` container format.
//!
//! Layout: magic `HIRW`, u32 version (1), u32 entry count, then per entry a
//! u16 name length, the UTF-8 name and an embedded `HIRT` tensor. Entries are
//! written in name order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::{Parameter, Var};
use crate::error::{Error, Result};
use crate::tensor::{atomic_write, DType, Tensor};

pub const HIRW_MAGIC: &[u8; 4] = b"HIRW";
pub const HIRW_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, Tensor>,
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("HIRW stream ended while reading {what}"))
        } else {
            Error::io("<stream>", e)
        }
    })
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total element count of entries whose name starts with any of `prefixes`.
    pub fn count_with_prefixes(&self, prefixes: &[&str]) -> usize {
        self.iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Moves all entries of `other` into this store.
    pub fn merge(&mut self, other: WeightStore) {
        self.entries.extend(other.entries);
    }

    /// Names from `required` that are absent here, as a `MissingWeights` error.
    pub fn require(&self, required: &[String]) -> Result<()> {
        let missing: Vec<String> = required
            .iter()
            .filter(|n| !self.contains(n))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingWeights(missing))
        }
    }

    pub fn to_parameters(&self) -> Vec<Parameter> {
        self.iter()
            .map(|(n, t)| Parameter::new(n, t.clone()))
            .collect()
    }

    pub fn from_parameters(params: &[Parameter]) -> Self {
        let mut store = WeightStore::new();
        for p in params {
            store.insert(p.name.clone(), p.value.clone());
        }
        store
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<stream>", e);
        w.write_all(HIRW_MAGIC).map_err(io)?;
        w.write_all(&HIRW_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())
            .map_err(io)?;
        for (name, tensor) in &self.entries {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Format(format!("weight name too long: {name}")))?;
            w.write_all(&len.to_le_bytes()).map_err(io)?;
            w.write_all(bytes).map_err(io)?;
            tensor.write_hirt(&mut w, DType::F64)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != HIRW_MAGIC {
            return Err(Error::Format(format!(
                "bad HIRW magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word, "version")?;
        let version = u32::from_le_bytes(word);
        if version != HIRW_VERSION {
            return Err(Error::Format(format!(
                "unsupported HIRW version {version} (expected {HIRW_VERSION})"
            )));
        }
        read_exact(&mut r, &mut word, "entry count")?;
        let count = u32::from_le_bytes(word);
        let mut store = WeightStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_exact(&mut r, &mut len, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("weight name is not UTF-8".into()))?;
            let tensor = Tensor::read_hirt(&mut r)?;
            if store.entries.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate weight entry {name}")));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        atomic_write(path, |w| w.write_all(&buf))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let store = WeightStore::read_from(&mut reader)?;
        let mut probe = [0u8; 1];
        match reader.read(&mut probe) {
            Ok(0) => Ok(store),
            Ok(_) => Err(Error::Format(format!(
                "{}: trailing bytes after HIRW entries",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

/// Tape handles for the entries of a [`WeightStore`].
#[derive(Clone, Default)]
pub struct VarStore {
    vars: BTreeMap<String, Var>,
}

impl VarStore {
    /// Every entry becomes a gradient-tracked leaf.
    pub fn params(store: &WeightStore) -> Self {
        VarStore {
            vars: store
                .iter()
                .map(|(n, t)| (n.to_string(), Var::param(t.clone())))
                .collect(),
        }
    }

    /// Every entry becomes a constant.
    pub fn constants(store: &WeightStore) -> Self {
        VarStore {
            vars: store
                .iter()
                .map(|(n, t)| (n.to_string(), Var::constant(t.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingWeights(vec![name.to_string()]))
    }

    /// Names from `required` that are absent here, as a `MissingWeights` error.
    pub fn require(&self, required: &[String]) -> Result<()> {
        let missing: Vec<String> = required
            .iter()
            .filter(|n| !self.vars.contains_key(n.as_str()))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingWeights(missing))
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}
