//! Synthetic embedding worlds.
//!
//! Class prototypes are uniform on the unit sphere and double as text
//! embeddings. Each object is a noisy instance of its prototype, and each grid
//! view blends the instance toward a fixed distractor (the two nearest other
//! prototypes) by an ambiguity that grows with wrap-around Chebyshev distance
//! from the object's canonical view(s). Objects of a class share canonical
//! anchors up to a small jitter, like pose-aligned CAD collections.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassEntry, EmbeddingGridDataset, ObjectRecord, Split};
use crate::error::{Error, Result};
use crate::{linalg, rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmbiguityProfile {
    /// `a = min(1, d / radius)` with `d` the distance to the nearest canonical view.
    Canonical { radius: f64 },
    /// Same ambiguity at every view.
    Constant { value: f64 },
}

impl Default for AmbiguityProfile {
    fn default() -> Self {
        AmbiguityProfile::Canonical { radius: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_base: usize,
    pub num_novel: usize,
    /// Objects generated per class (train and test together).
    pub objects_per_class: usize,
    /// How many of each class's objects are held out for testing.
    pub test_objects_per_class: usize,
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    pub instance_noise: f64,
    pub ambiguity: AmbiguityProfile,
    pub canonical_views_per_object: usize,
    /// Per-object offset (in cells, per axis) from the class canonical anchors.
    pub canonical_jitter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_base: 10,
            num_novel: 10,
            objects_per_class: 70,
            test_objects_per_class: 20,
            dim: 64,
            rows: 12,
            cols: 12,
            instance_noise: 0.05,
            ambiguity: AmbiguityProfile::default(),
            canonical_views_per_object: 1,
            canonical_jitter: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_base < 2 {
            return Err(Error::Config(format!("num_base must be at least 2, got {}", self.num_base)));
        }
        if self.dim < 8 {
            return Err(Error::Config(format!("dim must be at least 8, got {}", self.dim)));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid must have at least one cell".into()));
        }
        if !(self.instance_noise >= 0.0 && self.instance_noise.is_finite()) {
            return Err(Error::Config(format!("instance noise must be non-negative, got {}", self.instance_noise)));
        }
        match self.ambiguity {
            AmbiguityProfile::Canonical { radius } if !(radius > 0.0) => {
                return Err(Error::Config(format!("ambiguity radius must be positive, got {radius}")))
            }
            AmbiguityProfile::Constant { value } if !(0.0..=1.0).contains(&value) => {
                return Err(Error::Config(format!("ambiguity profile {value} outside [0, 1]")))
            }
            _ => {}
        }
        if self.canonical_views_per_object == 0 {
            return Err(Error::Config("need at least one canonical view per object".into()));
        }
        if self.test_objects_per_class > self.objects_per_class {
            return Err(Error::Config("more test objects than objects per class".into()));
        }
        Ok(())
    }
}

/// Wrap-around Chebyshev distance on an `rows × cols` torus.
pub fn chebyshev_wrap(a: (usize, usize), b: (usize, usize), rows: usize, cols: usize) -> usize {
    let dm = a.0.abs_diff(b.0);
    let dn = a.1.abs_diff(b.1);
    dm.min(rows - dm).max(dn.min(cols - dn))
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = linalg::normalized(&g) {
            return u;
        }
    }
}

fn wrap_offset(x: usize, off: i64, len: usize) -> usize {
    (x as i64 + off).rem_euclid(len as i64) as usize
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<EmbeddingGridDataset> {
    cfg.validate()?;
    let n_classes = cfg.num_base + cfg.num_novel;
    let (rows, cols, dim) = (cfg.rows, cfg.cols, cfg.dim);

    let prototypes: Vec<Vec<f64>> =
        (0..n_classes).map(|c| random_unit(dim, &mut rng::stream(cfg.seed, "prototype", c as u64))).collect();

    // two nearest other prototypes, blended with equal weight
    let distractors: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let mut others: Vec<(f64, usize)> = (0..n_classes)
                .filter(|&o| o != c)
                .map(|o| (linalg::dot(&prototypes[c], &prototypes[o]), o))
                .collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut mix = vec![0.0; dim];
            for &(_, o) in others.iter().take(2) {
                linalg::axpy(1.0, &prototypes[o], &mut mix);
            }
            linalg::normalized(&mix).unwrap_or_else(|| prototypes[c].clone())
        })
        .collect();

    let anchors: Vec<Vec<(usize, usize)>> = (0..n_classes)
        .map(|c| {
            let mut r = rng::stream(cfg.seed, "anchor", c as u64);
            (0..cfg.canonical_views_per_object).map(|_| (r.random_range(0..rows), r.random_range(0..cols))).collect()
        })
        .collect();

    let mut classes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let (split, name) = if c < cfg.num_base {
            (Split::Base, format!("base-{c:02}"))
        } else {
            (Split::Novel, format!("novel-{:02}", c - cfg.num_base))
        };
        classes.push(ClassEntry { name, split, text_embedding: linalg::to_f32(&prototypes[c]) });
    }

    let jitter = cfg.canonical_jitter as i64;
    let mut objects = Vec::with_capacity(n_classes * cfg.objects_per_class);
    for c in 0..n_classes {
        for i in 0..cfg.objects_per_class {
            let global = (c * cfg.objects_per_class + i) as u64;
            let mut r = rng::stream(cfg.seed, "object", global);
            let noisy: Vec<f64> =
                prototypes[c].iter().map(|p| p + cfg.instance_noise * r.sample::<f64, _>(StandardNormal)).collect();
            let instance = linalg::normalized(&noisy).unwrap_or_else(|| prototypes[c].clone());
            let canon: Vec<(usize, usize)> = anchors[c]
                .iter()
                .map(|&(m, n)| {
                    let dm = r.random_range(-jitter..=jitter);
                    let dn = r.random_range(-jitter..=jitter);
                    (wrap_offset(m, dm, rows), wrap_offset(n, dn, cols))
                })
                .collect();

            let mut grid = Vec::with_capacity(rows * cols * dim);
            let mut info = Vec::with_capacity(rows * cols);
            for m in 0..rows {
                for n in 0..cols {
                    let a = match cfg.ambiguity {
                        AmbiguityProfile::Constant { value } => value,
                        AmbiguityProfile::Canonical { radius } => {
                            let d = canon.iter().map(|&k| chebyshev_wrap((m, n), k, rows, cols)).min().unwrap_or(0);
                            (d as f64 / radius).min(1.0)
                        }
                    };
                    let blend: Vec<f64> =
                        instance.iter().zip(&distractors[c]).map(|(x, y)| (1.0 - a) * x + a * y).collect();
                    let view = linalg::normalized(&blend).unwrap_or_else(|| instance.clone());
                    grid.extend(view.iter().map(|&x| x as f32));
                    info.push((1.0 - a) as f32);
                }
            }
            objects.push(ObjectRecord {
                object_id: format!("{}-{i:03}", classes[c].name),
                class_index: c as u32,
                grid,
                info_map: Some(info),
            });
        }
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("generator".into(), "synthetic".into());
    metadata.insert("seed".into(), cfg.seed.to_string());
    metadata.insert("test_objects_per_class".into(), cfg.test_objects_per_class.to_string());
    metadata.insert("synth_config".into(), serde_json::to_string(cfg)?);

    let ds = EmbeddingGridDataset { dim, rows, cols, classes, objects, metadata };
    ds.validate()?;
    Ok(ds)
}
