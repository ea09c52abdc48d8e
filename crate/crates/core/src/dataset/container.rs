//! AOVR1 binary container, little-endian throughout.
//!
//! ```text
//! "AOVR" | version u8 | D u32 | M u32 | N u32 | C u32 | O u32
//! C × { name_len u16, name, split u8, D × f32 }
//! O × { id_len u16, id, class_index u32, has_info u8, M·N·D × f32, [M·N × f32] }
//! pairs u16, pairs × { key_len u16, key, val_len u16, val }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{ClassEntry, EmbeddingGridDataset, ObjectRecord, Split};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AOVR";
pub const VERSION: u8 = 1;

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Invariant(format!("{what} `{s:.32}…` longer than 65535 bytes")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Invariant(format!("{what} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a dataset to AOVR1 bytes. Refuses datasets that violate invariants.
pub fn write_container(ds: &EmbeddingGridDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, ds.dim, "D")?;
    put_u32(&mut out, ds.rows, "M")?;
    put_u32(&mut out, ds.cols, "N")?;
    put_u32(&mut out, ds.classes.len(), "class count")?;
    put_u32(&mut out, ds.objects.len(), "object count")?;
    for c in &ds.classes {
        put_str(&mut out, &c.name, "class name")?;
        out.push(c.split.code());
        put_f32s(&mut out, &c.text_embedding);
    }
    for o in &ds.objects {
        put_str(&mut out, &o.object_id, "object id")?;
        out.extend_from_slice(&o.class_index.to_le_bytes());
        out.push(o.info_map.is_some() as u8);
        put_f32s(&mut out, &o.grid);
        if let Some(info) = &o.info_map {
            put_f32s(&mut out, info);
        }
    }
    let pairs = u16::try_from(ds.metadata.len())
        .map_err(|_| Error::Invariant("more than 65535 metadata pairs".into()))?;
    out.extend_from_slice(&pairs.to_le_bytes());
    for (k, v) in &ds.metadata {
        put_str(&mut out, k, "metadata key")?;
        put_str(&mut out, v, "metadata value")?;
    }
    Ok(out)
}

pub fn save_container(ds: &EmbeddingGridDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = write_container(ds)?;
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated { context: context() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, context: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    fn u16(&mut self, context: &dyn Fn() -> String) -> Result<u16> {
        let b = self.take(2, context)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, context: &dyn Fn() -> String) -> Result<u32> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, context: &dyn Fn() -> String) -> Result<String> {
        let len = self.u16(context)? as usize;
        let bytes = self.take(len, context)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("invalid UTF-8 in {}", context())))
    }

    fn f32s(&mut self, count: usize, context: &dyn Fn() -> String) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?, context)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }
}

/// Parse AOVR1 bytes and validate every dataset invariant.
pub fn read_container(buf: &[u8]) -> Result<EmbeddingGridDataset> {
    let mut r = Reader { buf, pos: 0 };
    let header = || "header".to_string();
    let magic = r.take(4, &header)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u8(&header)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = r.u32(&header)? as usize;
    let rows = r.u32(&header)? as usize;
    let cols = r.u32(&header)? as usize;
    let n_classes = r.u32(&header)? as usize;
    let n_objects = r.u32(&header)? as usize;

    let mut classes = Vec::with_capacity(n_classes.min(1 << 16));
    for i in 0..n_classes {
        let ctx = move || format!("class {i}");
        let name = r.string(&ctx)?;
        let code = r.u8(&ctx)?;
        let split = Split::from_code(code).ok_or_else(|| Error::Format(format!("class {i}: bad split code {code}")))?;
        let text_embedding = r.f32s(dim, &ctx)?;
        classes.push(ClassEntry { name, split, text_embedding });
    }

    let cells = rows * cols;
    let mut objects = Vec::with_capacity(n_objects.min(1 << 16));
    for i in 0..n_objects {
        let ctx = move || format!("object {i}");
        let object_id = r.string(&ctx)?;
        let class_index = r.u32(&ctx)?;
        let has_info = r.u8(&ctx)?;
        if has_info > 1 {
            return Err(Error::Format(format!("object {i}: bad has_info flag {has_info}")));
        }
        let grid = r.f32s(cells * dim, &move || format!("object {i} grid"))?;
        let info_map = if has_info == 1 { Some(r.f32s(cells, &move || format!("object {i} info map"))?) } else { None };
        objects.push(ObjectRecord { object_id, class_index, grid, info_map });
    }

    let meta_ctx = || "metadata".to_string();
    let pairs = r.u16(&meta_ctx)?;
    let mut metadata = BTreeMap::new();
    for _ in 0..pairs {
        let k = r.string(&meta_ctx)?;
        let v = r.string(&meta_ctx)?;
        metadata.insert(k, v);
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after metadata", buf.len() - r.pos)));
    }

    let ds = EmbeddingGridDataset { dim, rows, cols, classes, objects, metadata };
    ds.validate()?;
    Ok(ds)
}

pub fn load_container(path: impl AsRef<Path>) -> Result<EmbeddingGridDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_container(&bytes)
}
