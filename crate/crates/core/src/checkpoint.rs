//! Versioned binary checkpoint container.
//!
//! Layout (little endian): magic `CAGS`, u32 version, u32 tensor count, then
//! per tensor u32 name length, name bytes, u32 rank, u64 dims, f64 data;
//! then the optimizer state; then the RNG state.

use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::optim::{AdamSlot, AdamState};

pub const MAGIC: &[u8; 4] = b"CAGS";
pub const VERSION: u32 = 1;

/// Position of a ChaCha generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub adam: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_name(&mut out, name);
            put_tensor(&mut out, t);
        }
        let a = &self.adam;
        out.extend_from_slice(&a.step.to_le_bytes());
        for v in [a.beta1, a.beta2, a.epsilon] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(a.slots.len() as u32).to_le_bytes());
        for s in &a.slots {
            put_name(&mut out, &s.name);
            out.extend_from_slice(&s.lr.to_le_bytes());
            put_tensor(&mut out, &s.m);
            put_tensor(&mut out, &s.v);
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported (this build reads version {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.name()?;
            tensors.push((name, r.tensor()?));
        }
        let step = r.u64()?;
        let (beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?);
        let slots_n = r.u32()? as usize;
        let mut slots = Vec::with_capacity(slots_n.min(1 << 16));
        for _ in 0..slots_n {
            let name = r.name()?;
            let lr = r.f64()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            slots.push(AdamSlot { name, lr, m, v });
        }
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            tensors,
            adam: AdamState {
                step,
                beta1,
                beta2,
                epsilon,
                slots,
            },
            rng: RngState { seed, stream, word_pos },
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l <= (self.bytes.len() - self.pos) / 8)
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let raw = self.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Encodes text as one byte value per element (for metadata tensors).
pub fn text_tensor(text: &str) -> Tensor {
    let data: Vec<f64> = text.bytes().map(f64::from).collect();
    Tensor::new(&[data.len()], data).expect("1-D shape")
}

pub fn tensor_text(t: &Tensor) -> Result<String> {
    let bytes: Option<Vec<u8>> = t
        .data()
        .iter()
        .map(|&v| (v.fract() == 0.0 && (0.0..256.0).contains(&v)).then_some(v as u8))
        .collect();
    bytes
        .and_then(|b| String::from_utf8(b).ok())
        .ok_or_else(|| Error::Format("metadata tensor is not text".into()))
}
