//! Learnable parameters, the registry that owns them, and the `RGCN1`
//! checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"RGCN1"
//! u32 entry count
//! per entry: u32 name length, UTF-8 name, u32 rank, u32 extent × rank
//! f64 payload of every entry, in manifest order
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RGCN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// What a parameter is for. Drives per-category counts and weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution and graph-convolution weights.
    Conv,
    /// Edge-importance masks.
    EdgeMask,
    /// BatchNorm scale and shift.
    NormAffine,
    /// Projections inside part-wise attention.
    Attention,
    Classifier,
    /// Non-trainable state such as BatchNorm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    /// Whether weight decay applies to this entry.
    pub decay: bool,
    pub param: Parameter,
}

/// Ordered owner of every parameter and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        decay: bool,
        value: Tensor,
    ) -> ParamId {
        let trainable = kind != ParamKind::Buffer;
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            decay: decay && trainable,
            param: Parameter::new(value, trainable),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.entries[id.0].param
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.entries[id.0].param
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.param.zero_grad();
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.param.trainable)
            .map(|e| e.param.numel())
            .sum()
    }

    /// Hex SHA-256 over the manifest (names and shapes, in order). Weight
    /// values do not enter the hash.
    pub fn structural_hash(&self) -> String {
        let digest = Sha256::digest(self.manifest_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn manifest_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            let shape = e.param.value.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        buf
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.manifest_bytes())?;
        for e in &self.entries {
            let mut payload = Vec::with_capacity(e.param.numel() * 8);
            for &x in e.param.value.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint into this store. Names and shapes must match the
    /// store's manifest exactly; nothing is modified on mismatch.
    pub fn read_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        let loaded = read_checkpoint(r)?;
        if loaded.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} entries, model has {}",
                loaded.len(),
                self.entries.len()
            )));
        }
        for (e, (name, t)) in self.entries.iter().zip(&loaded) {
            if &e.name != name || e.param.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint entry {name} {:?} does not match {} {:?}",
                    t.shape(),
                    e.name,
                    e.param.value.shape()
                )));
            }
        }
        for (e, (_, t)) in self.entries.iter_mut().zip(loaded) {
            e.param.value = t;
            e.param.zero_grad();
        }
        Ok(())
    }
}

/// Parses an `RGCN1` stream into `(name, tensor)` pairs.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing RGCN1 header".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
