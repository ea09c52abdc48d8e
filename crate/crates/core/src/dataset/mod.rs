//! Embedding-grid datasets: vocabulary of text embeddings plus per-object
//! viewing grids of unit view embeddings.

mod container;
mod occlusion;
mod synth;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

pub use container::{load_container, read_container, save_container, write_container, MAGIC, VERSION};
pub use occlusion::{apply_occlusion, OcclusionConfig, DEFAULT_OCCLUSION_STRENGTH};
pub use synth::{generate_synthetic, AmbiguityProfile, SynthConfig};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on the unit-norm invariant of every stored embedding.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Base => 0,
            Split::Novel => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Base),
            1 => Some(Split::Novel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    pub split: Split,
    pub text_embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub object_id: String,
    pub class_index: u32,
    /// `M × N × D`, azimuth-major.
    pub grid: Vec<f32>,
    pub info_map: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGridDataset {
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    pub classes: Vec<ClassEntry>,
    pub objects: Vec<ObjectRecord>,
    pub metadata: BTreeMap<String, String>,
}

fn check_unit(v: &[f32], what: impl FnOnce() -> String) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what()));
    }
    let n = linalg::norm(&linalg::to_f64(v));
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Invariant(format!("{} has norm {n:.8}, expected 1", what())));
    }
    Ok(())
}

impl EmbeddingGridDataset {
    pub fn empty(dim: usize, rows: usize, cols: usize) -> Self {
        Self { dim, rows, cols, classes: Vec::new(), objects: Vec::new(), metadata: BTreeMap::new() }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// View embedding of object `obj` at grid cell `(m, n)`.
    pub fn view(&self, obj: usize, m: usize, n: usize) -> &[f32] {
        let d = self.dim;
        let start = (m * self.cols + n) * d;
        &self.objects[obj].grid[start..start + d]
    }

    pub fn view_f64(&self, obj: usize, m: usize, n: usize) -> Vec<f64> {
        linalg::to_f64(self.view(obj, m, n))
    }

    pub fn class_indices(&self, split: Split) -> Vec<usize> {
        self.classes.iter().enumerate().filter(|(_, c)| c.split == split).map(|(i, _)| i).collect()
    }

    pub fn objects_of_class(&self, class: usize) -> Vec<usize> {
        self.objects.iter().enumerate().filter(|(_, o)| o.class_index as usize == class).map(|(i, _)| i).collect()
    }

    /// Check every structural and numeric invariant.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::Invariant(format!(
                "dimensions must be positive (D={}, M={}, N={})",
                self.dim, self.rows, self.cols
            )));
        }
        let mut names = HashSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Invariant(format!("duplicate class name `{}`", c.name)));
            }
            if c.text_embedding.len() != self.dim {
                return Err(Error::Invariant(format!(
                    "class {i} embedding has {} dims, expected {}",
                    c.text_embedding.len(),
                    self.dim
                )));
            }
            check_unit(&c.text_embedding, || format!("class {i} (`{}`) text embedding", c.name))?;
        }
        let cell_len = self.cells() * self.dim;
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_index as usize >= self.classes.len() {
                return Err(Error::Invariant(format!(
                    "object {i} class index {} out of range ({} classes)",
                    o.class_index,
                    self.classes.len()
                )));
            }
            if o.grid.len() != cell_len {
                return Err(Error::Invariant(format!(
                    "object {i} grid has {} values, expected {cell_len}",
                    o.grid.len()
                )));
            }
            for (cell, v) in o.grid.chunks_exact(self.dim).enumerate() {
                check_unit(v, || {
                    format!("object {i} view ({}, {})", cell / self.cols, cell % self.cols)
                })?;
            }
            if let Some(info) = &o.info_map {
                if info.len() != self.cells() {
                    return Err(Error::Invariant(format!("object {i} info map has wrong size")));
                }
                if info.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err(Error::Invariant(format!("object {i} info map outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Text-embedding vocabulary in f64 for classification.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub names: Vec<String>,
    pub splits: Vec<Split>,
    pub embeddings: Vec<Vec<f64>>,
}

impl Vocabulary {
    pub fn from_dataset(ds: &EmbeddingGridDataset) -> Self {
        Self {
            names: ds.classes.iter().map(|c| c.name.clone()).collect(),
            splits: ds.classes.iter().map(|c| c.split).collect(),
            embeddings: ds.classes.iter().map(|c| linalg::to_f64(&c.text_embedding)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits.iter().enumerate().filter(|(_, &s)| s == split).map(|(i, _)| i).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Train/test object partition.
///
/// The last `test_per_class` objects of each class (in file order) form the
/// test set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn partition(ds: &EmbeddingGridDataset, test_per_class: usize) -> Partition {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..ds.classes.len() {
        let objs = ds.objects_of_class(c);
        let cut = objs.len().saturating_sub(test_per_class);
        train.extend_from_slice(&objs[..cut]);
        test.extend_from_slice(&objs[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Partition { train, test }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Tiny dataset: `D = 2`, one class, one 2×2 object.
    pub fn tiny() -> EmbeddingGridDataset {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let mut ds = EmbeddingGridDataset::empty(2, 2, 2);
        ds.classes.push(ClassEntry { name: "mug".into(), split: Split::Base, text_embedding: vec![1.0, 0.0] });
        ds.objects.push(ObjectRecord {
            object_id: "mug-0".into(),
            class_index: 0,
            grid: vec![1.0, 0.0, 0.0, 1.0, s, s, 0.6, 0.8],
            info_map: Some(vec![1.0, 0.0, 0.5, 0.25]),
        });
        ds.metadata.insert("seed".into(), "3".into());
        ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_accepts_tiny_dataset() {
        testutil::tiny().validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_class_index_and_duplicates() {
        let mut ds = testutil::tiny();
        ds.objects[0].class_index = 4;
        assert!(matches!(ds.validate(), Err(Error::Invariant(_))));

        let mut ds = testutil::tiny();
        let dup = ds.classes[0].clone();
        ds.classes.push(dup);
        assert!(matches!(ds.validate(), Err(Error::Invariant(_))));
    }

    #[test]
    fn validate_rejects_info_map_out_of_range() {
        let mut ds = testutil::tiny();
        ds.objects[0].info_map = Some(vec![1.0, 0.0, 1.5, 0.0]);
        assert!(ds.validate().is_err());
    }

    #[test]
    fn partition_takes_tail_of_each_class() {
        let mut ds = testutil::tiny();
        for i in 1..5 {
            let mut o = ds.objects[0].clone();
            o.object_id = format!("mug-{i}");
            ds.objects.push(o);
        }
        let p = partition(&ds, 2);
        assert_eq!(p.train, vec![0, 1, 2]);
        assert_eq!(p.test, vec![3, 4]);
    }
}
