//! Named parameter storage and the `DEESCO01` checkpoint container.
//!
//! Layout of a checkpoint file (all integers little-endian `u64`):
//!
//! ```text
//! "DEESCO01" | count | count × ( name_len | name (UTF-8) | rank | extents[rank] | values[∏extents] as f64 )
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEESCO01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether an entry is updated by the optimiser or carried alongside (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Parameter { name, tensor, kind });
        Ok(id)
    }

    pub fn trainable(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.insert(name, tensor, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        self.insert(name, tensor, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.tensor(id).len()).sum()
    }

    /// Overwrites values from another store with identical names, kinds and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::usage(format!(
                "parameter sets differ: {} vs {} entries",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::usage(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }
}

/// Encodes `(name, tensor)` entries into the checkpoint byte layout.
pub fn encode_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for e in t.shape() {
            out.extend_from_slice(&(*e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes a checkpoint byte buffer. `origin` only labels errors.
pub fn decode_entries(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |msg: &str| Error::format(origin, msg);
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(8).ok_or_else(|| bad("file too short for header"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic, not a DEESCO01 checkpoint"));
    }
    let count = c.u64().ok_or_else(|| bad("truncated entry count"))?;
    let mut out = Vec::new();
    for i in 0..count {
        let trunc = || bad(&format!("truncated at entry {i}"));
        let name_len = c.u64().ok_or_else(trunc)? as usize;
        let name = c.take(name_len).ok_or_else(trunc)?;
        let name = std::str::from_utf8(name)
            .map_err(|_| bad(&format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = c.u64().ok_or_else(trunc)? as usize;
        if rank > 16 {
            return Err(bad(&format!("entry {name:?}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64().ok_or_else(trunc)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| bad(&format!("entry {name:?}: extent overflow")))?;
        let raw = c
            .take(n.checked_mul(8).ok_or_else(trunc)?)
            .ok_or_else(trunc)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(bad("trailing bytes after last entry"));
    }
    Ok(out)
}

pub fn write_entries<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let bytes = encode_entries(entries);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_entries(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.trainable("a/w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(
            s.trainable("a/w", Tensor::zeros(&[2])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let t = Tensor::ones(&[3, 2]);
        let bytes = encode_entries([("x", &t)]);
        for cut in [0, 5, 8, 20, bytes.len() - 1] {
            let err = decode_entries(&bytes[..cut], Path::new("mem")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_entries(&wrong, Path::new("mem")).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_encode_is_byte_identical(
            shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..4), 0..5),
            seed in any::<u64>(),
        ) {
            let mut x = seed;
            let tensors: Vec<Tensor> = shapes
                .iter()
                .map(|s| Tensor::from_fn(s, |_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f64::from_bits(x >> 2)
                }))
                .collect();
            let names: Vec<String> = (0..tensors.len()).map(|i| format!("p{i}/ü")).collect();
            let bytes = encode_entries(names.iter().map(|s| s.as_str()).zip(&tensors));
            let back = decode_entries(&bytes, Path::new("mem")).unwrap();
            let again = encode_entries(back.iter().map(|(n, t)| (n.as_str(), t)));
            prop_assert_eq!(bytes, again);
            for ((n, t), (n2, t2)) in names.iter().zip(&tensors).zip(&back) {
                prop_assert_eq!(n, n2);
                prop_assert_eq!(t.shape(), t2.shape());
                let same = t.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }
}
