//! Named parameter collections and checkpoint serialization.
//!
//! Checkpoint format (little-endian): magic "MAGC", version u32, param count
//! u32, then per parameter: name length u32, name bytes, rank u32, dims u32
//! each, f32 data. Round-trips bit-exactly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{MagError, Result};
use crate::rng::fnv1a64;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MAGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self.index.get(name).unwrap_or_else(|| panic!("no param {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no param {name}"));
        &mut self.tensors[i]
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor) {
        (&self.names[i], &self.tensors[i])
    }

    pub fn at_mut(&mut self, i: usize) -> (&str, &mut Tensor) {
        (&self.names[i], &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Hash over names, shapes and exact bit patterns; used to verify that
    /// frozen models stay frozen.
    pub fn content_hash(&self) -> u64 {
        let mut buf: Vec<u8> = Vec::new();
        for (name, t) in self.iter() {
            buf.extend_from_slice(name.as_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a64(&buf)
    }

    /// Shapes must match entry-for-entry (names and dims, same order).
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| MagError::Dependency(format!("cannot open checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > bytes.len() {
                return Err(MagError::Checkpoint(format!(
                    "truncated checkpoint {}",
                    path.display()
                )));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let magic = take(&mut off, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(MagError::Dependency(format!(
                "bad checkpoint magic in {}",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(MagError::Checkpoint(format!(
                "unsupported checkpoint version {version} in {}",
                path.display()
            )));
        }
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, nlen)?.to_vec())
                .map_err(|_| MagError::Checkpoint("non-utf8 parameter name".into()))?;
            let rank = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut off, n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.insert(name, Tensor::new(shape, data));
        }
        if off != bytes.len() {
            return Err(MagError::Checkpoint(format!(
                "trailing bytes in checkpoint {}",
                path.display()
            )));
        }
        Ok(out)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Gradients keyed like a ParamSet.
pub struct GradMap {
    map: HashMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        GradMap { map: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, g: Tensor) {
        self.map.insert(name.to_string(), g);
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor) {
        match self.map.get_mut(name) {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn merge(&mut self, other: &GradMap) {
        for (name, g) in &other.map {
            self.accumulate(name, g);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn max_abs(&self) -> f32 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

impl Default for GradMap {
    fn default() -> Self {
        GradMap::new()
    }
}
