//! `HCL1` binary container for checkpoints and feature dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HCL1"
//! u32 tensor count
//!   per tensor: u32 name length, UTF-8 name, u32 rank, rank x u64 dims, f64 values
//! u64 queue rows, u64 queue cols, rows*cols f64 values   (0, 0 when absent)
//! u64 seed, u64 next step
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HCL1";
const MAX_RANK: usize = 8;

/// Position of a run in its random streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    /// Number of optimization steps already taken.
    pub next_step: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
    pub queue: Option<Tensor>,
    pub rng: RngState,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&len_u32(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.shape().len(), "rank")?.to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            push_values(&mut out, t.data());
        }
        match &self.queue {
            Some(q) => {
                let (r, c) = q.dims2("container queue")?;
                out.extend_from_slice(&(r as u64).to_le_bytes());
                out.extend_from_slice(&(c as u64).to_le_bytes());
                push_values(&mut out, q.data());
            }
            None => out.extend_from_slice(&[0; 16]),
        }
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.next_step.to_le_bytes());
        Ok(out)
    }

    /// Parses a container, validating every length against the remaining input before allocating.
    pub fn decode(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Container("bad magic, expected HCL1".into()));
        }
        let count = r.u32("tensor count")? as usize;
        // Smallest possible tensor record: name length, one name byte, rank 0, one value.
        if count > r.remaining() / 17 {
            return Err(Error::Container(format!("tensor count {count} exceeds input size")));
        }
        let mut tensors = Vec::with_capacity(count);
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            if name_len == 0 {
                return Err(Error::Container("empty tensor name".into()));
            }
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(Error::Container(format!("duplicate tensor `{name}`")));
            }
            let rank = r.u32("rank")? as usize;
            if rank > MAX_RANK {
                return Err(Error::Container(format!("tensor `{name}` has rank {rank} > {MAX_RANK}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let dim = usize::try_from(r.u64("dim")?)
                    .map_err(|_| Error::Container(format!("tensor `{name}` dimension overflows")))?;
                shape.push(dim);
            }
            let numel = checked_numel(&shape).ok_or_else(|| Error::Container(format!("tensor `{name}` is too large")))?;
            let data = r.values(numel, &name)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Container(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let rows = usize::try_from(r.u64("queue rows")?).map_err(|_| Error::Container("queue too large".into()))?;
        let cols = usize::try_from(r.u64("queue cols")?).map_err(|_| Error::Container("queue too large".into()))?;
        let queue = match (rows, cols) {
            (0, 0) => None,
            (0, _) | (_, 0) => return Err(Error::Container("queue has one empty dimension".into())),
            _ => {
                let numel = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::Container("queue is too large".into()))?;
                Some(Tensor::new(vec![rows, cols], r.values(numel, "queue")?)?)
            }
        };
        let rng = RngState {
            seed: r.u64("seed")?,
            next_step: r.u64("next step")?,
        };
        if r.remaining() != 0 {
            return Err(Error::Container(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Container { tensors, queue, rng })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Container> {
        Container::decode(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Container(format!("{what} {n} does not fit in u32")))
}

fn push_values(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Container(format!(
                "truncated {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn values(&mut self, numel: usize, what: &str) -> Result<Vec<f64>> {
        let len = numel
            .checked_mul(8)
            .ok_or_else(|| Error::Container(format!("`{what}` is too large")))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
