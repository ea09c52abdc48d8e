//! Versioned little-endian checkpoint files.
//!
//! ```text
//! "AOVC" | version u8 | meta_len u32 | meta (UTF-8 JSON)
//! count u32 | count × { name_len u16, name, rank u8, dims u32 × rank, f32 × Π dims }
//! has_opt u8 | [ step u64 | count_opt u32 | count_opt × { m f32 × len, v f32 × len } ]
//! ```
//! Optimizer moments follow the order of the module's trainable parameters.

use std::path::Path;

use super::{Adam, Module, Param};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AOVC";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn from_adam(adam: &Adam) -> Self {
        Self { step: adam.step_count, m: adam.m.clone(), v: adam.v.clone() }
    }

    pub fn restore_into(&self, adam: &mut Adam) {
        adam.step_count = self.step;
        adam.m = self.m.clone();
        adam.v = self.v.clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// Snapshot every trainable and frozen tensor of `module`.
    pub fn capture<M: Module + ?Sized>(module: &M, meta: impl Into<String>, adam: Option<&Adam>) -> Self {
        let tensors = module
            .params()
            .into_iter()
            .chain(module.frozen())
            .map(|p| (p.name.clone(), p.shape.clone(), p.value.clone()))
            .collect();
        Self { meta: meta.into(), tensors, optimizer: adam.map(OptimizerState::from_adam) }
    }

    /// Copy tensors into `module`, matching by name and shape.
    pub fn restore<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        for p in module.params_mut() {
            self.fill(p)?;
        }
        for p in module.frozen_mut() {
            self.fill(p)?;
        }
        Ok(())
    }

    fn fill(&self, p: &mut Param) -> Result<()> {
        let (_, shape, values) = self
            .tensors
            .iter()
            .find(|(n, _, _)| *n == p.name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{}`", p.name)))?;
        if *shape != p.shape {
            return Err(Error::Shape(format!("tensor `{}`: checkpoint {:?} vs model {:?}", p.name, shape, p.shape)));
        }
        p.value.copy_from_slice(values);
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Format(format!("tensor name too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(ck.meta.len() as u32).to_le_bytes());
    out.extend_from_slice(ck.meta.as_bytes());
    out.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in &ck.tensors {
        put_str(&mut out, name)?;
        let rank = u8::try_from(shape.len()).map_err(|_| Error::Format(format!("rank of `{name}` too large")))?;
        out.push(rank);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, values);
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            out.extend_from_slice(&(opt.m.len() as u32).to_le_bytes());
            for (m, v) in opt.m.iter().zip(&opt.v) {
                out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                put_f32s(&mut out, m);
                put_f32s(&mut out, v);
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { context: format!("checkpoint at byte {}", self.pos) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect())
    }
}

pub fn read_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta = String::from_utf8(c.take(meta_len)?.to_vec()).map_err(|_| Error::Format("checkpoint meta is not UTF-8".into()))?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = c.take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let values = c.f32s(shape.iter().product())?;
        tensors.push((name, shape, values));
    }
    let optimizer = match c.take(1)?[0] {
        0 => None,
        1 => {
            let step = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes"));
            let n = c.u32()? as usize;
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                let len = c.u32()? as usize;
                m.push(c.f32s(len)?);
                v.push(c.f32s(len)?);
            }
            Some(OptimizerState { step, m, v })
        }
        flag => return Err(Error::Format(format!("bad optimizer flag {flag}"))),
    };
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { meta, tensors, optimizer })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    read_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamConfig, Dense};
    use crate::rng;

    #[test]
    fn round_trip_with_optimizer_state() {
        let mut d = Dense::new("enc", 3, 2, &mut rng::from_seed(1));
        d.w.grad = vec![0.1; 6];
        d.b.grad = vec![-0.2; 2];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut d.params_mut()).unwrap();

        let ck = Checkpoint::capture(&d, "{\"kind\":\"dense\"}", Some(&adam));
        let back = read_checkpoint(&write_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.optimizer.as_ref().unwrap().step, 1);

        let mut fresh = Dense::zeros("enc", 3, 2);
        back.restore(&mut fresh).unwrap();
        for (a, b) in fresh.w.value.iter().zip(&d.w.value) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let d = Dense::zeros("enc", 3, 2);
        let ck = Checkpoint::capture(&d, "", None);
        let mut other = Dense::zeros("enc", 4, 2);
        assert!(matches!(ck.restore(&mut other), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_checkpoint(b"NOPE\x01").is_err());
    }
}
