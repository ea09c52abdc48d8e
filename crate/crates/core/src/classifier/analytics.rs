//! Viewpoint-sensitivity and occlusion studies over whole datasets.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{similarities, Subset};
use crate::dataset::{apply_occlusion, EmbeddingGridDataset, Vocabulary};
use crate::error::{Error, Result};
use crate::{linalg, rng};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSensitivity {
    pub class: usize,
    pub name: String,
    pub objects: usize,
    /// Row-major `M × N` accuracy map.
    pub map: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl ClassSensitivity {
    pub fn gap(&self) -> f64 {
        self.max - self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub schema_version: u32,
    pub rows: usize,
    pub cols: usize,
    pub classes: Vec<ClassSensitivity>,
    pub skipped: Vec<usize>,
    pub aggregate_mean: f64,
    pub aggregate_max: f64,
    pub aggregate_gap: f64,
}

fn top1(feature: &[f64], vocab: &Vocabulary, all: &[usize]) -> usize {
    all[linalg::argmax(&similarities(feature, vocab, all))]
}

/// Correctness of every view of `obj` under open-vocabulary top-1.
fn view_correctness(ds: &EmbeddingGridDataset, vocab: &Vocabulary, obj: usize) -> Vec<bool> {
    let all = Subset::Open.resolve(vocab);
    let label = ds.objects[obj].class_index as usize;
    let mut out = Vec::with_capacity(ds.cells());
    for m in 0..ds.rows {
        for n in 0..ds.cols {
            out.push(top1(&ds.view_f64(obj, m, n), vocab, &all) == label);
        }
    }
    out
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

/// Per-class accuracy at each clean grid view, with mean/median/max over views.
pub fn viewpoint_sensitivity_report(ds: &EmbeddingGridDataset, temperature: f64) -> Result<SensitivityReport> {
    check_temperature(temperature)?;
    let vocab = Vocabulary::from_dataset(ds);
    let correct: Vec<Vec<bool>> = (0..ds.objects.len()).into_par_iter().map(|o| view_correctness(ds, &vocab, o)).collect();

    let mut classes = Vec::new();
    let mut skipped = Vec::new();
    for (c, entry) in ds.classes.iter().enumerate() {
        let objs = ds.objects_of_class(c);
        if objs.is_empty() {
            log::warn!("class {c} (`{}`) has no objects; skipped", entry.name);
            skipped.push(c);
            continue;
        }
        let mut map = vec![0.0; ds.cells()];
        for &o in &objs {
            for (cell, &ok) in correct[o].iter().enumerate() {
                map[cell] += ok as u8 as f64;
            }
        }
        map.iter_mut().for_each(|x| *x /= objs.len() as f64);
        let mean = map.iter().sum::<f64>() / map.len() as f64;
        let max = map.iter().copied().fold(0.0, f64::max);
        classes.push(ClassSensitivity { class: c, name: entry.name.clone(), objects: objs.len(), median: median(&map), mean, max, map });
    }
    let k = classes.len().max(1) as f64;
    let aggregate_mean = classes.iter().map(|c| c.mean).sum::<f64>() / k;
    let aggregate_max = classes.iter().map(|c| c.max).sum::<f64>() / k;
    Ok(SensitivityReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows: ds.rows,
        cols: ds.cols,
        classes,
        skipped,
        aggregate_mean,
        aggregate_max,
        aggregate_gap: aggregate_max - aggregate_mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassGap {
    pub class: usize,
    pub name: String,
    pub objects: usize,
    pub random_acc: f64,
    pub best_acc: f64,
}

/// Best-view versus random-view accuracy per class.
///
/// Per object, `best` is 1 when any view is classified correctly and `random`
/// is the hit rate over `runs` uniformly drawn views.
pub fn random_vs_best_gap(ds: &EmbeddingGridDataset, temperature: f64, runs: usize, seed: u64) -> Result<Vec<ClassGap>> {
    check_temperature(temperature)?;
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let vocab = Vocabulary::from_dataset(ds);
    let per_object: Vec<(f64, f64)> = (0..ds.objects.len())
        .into_par_iter()
        .map(|o| {
            let correct = view_correctness(ds, &vocab, o);
            let best = correct.iter().any(|&c| c) as u8 as f64;
            let mut r = rng::stream(seed, "random-view", o as u64);
            let hits = (0..runs).filter(|_| correct[r.random_range(0..correct.len())]).count();
            (hits as f64 / runs as f64, best)
        })
        .collect();
    let mut out = Vec::new();
    for (c, entry) in ds.classes.iter().enumerate() {
        let objs = ds.objects_of_class(c);
        if objs.is_empty() {
            log::warn!("class {c} (`{}`) has no objects; skipped", entry.name);
            continue;
        }
        let n = objs.len() as f64;
        out.push(ClassGap {
            class: c,
            name: entry.name.clone(),
            objects: objs.len(),
            random_acc: objs.iter().map(|&o| per_object[o].0).sum::<f64>() / n,
            best_acc: objs.iter().map(|&o| per_object[o].1).sum::<f64>() / n,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OcclusionLevel {
    pub prob: f64,
    pub accuracy: f64,
    /// `baseline − accuracy`.
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OcclusionStudy {
    pub schema_version: u32,
    pub strength: f64,
    pub seed: u64,
    pub views: usize,
    pub baseline: f64,
    pub levels: Vec<OcclusionLevel>,
}

/// Mean top-1 accuracy over all views at each occlusion probability.
///
/// Every view draws from its own stream keyed by `(seed, view)`, shared across
/// levels, so levels differ only through the probability threshold.
pub fn occlusion_study(
    ds: &EmbeddingGridDataset,
    temperature: f64,
    probs: &[f64],
    strength: f64,
    seed: u64,
) -> Result<OcclusionStudy> {
    check_temperature(temperature)?;
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("occlusion probability {p} outside [0, 1]")));
    }
    let vocab = Vocabulary::from_dataset(ds);
    let all = Subset::Open.resolve(&vocab);
    let cells = ds.cells();
    let accuracy_at = |prob: f64| -> f64 {
        let hits: usize = (0..ds.objects.len())
            .into_par_iter()
            .map(|o| {
                let label = ds.objects[o].class_index as usize;
                let mut hits = 0;
                for cell in 0..cells {
                    let view = ds.view_f64(o, cell / ds.cols, cell % ds.cols);
                    let mut r = rng::stream(seed, "occlusion-view", (o * cells + cell) as u64);
                    let seen = apply_occlusion(&view, prob, strength, &mut r);
                    hits += (top1(&seen, &vocab, &all) == label) as usize;
                }
                hits
            })
            .sum();
        hits as f64 / (ds.objects.len() * cells).max(1) as f64
    };
    let baseline = accuracy_at(0.0);
    let levels = probs
        .iter()
        .map(|&prob| {
            let accuracy = if prob == 0.0 { baseline } else { accuracy_at(prob) };
            OcclusionLevel { prob, accuracy, drop: baseline - accuracy }
        })
        .collect();
    Ok(OcclusionStudy { schema_version: REPORT_SCHEMA_VERSION, strength, seed, views: ds.objects.len() * cells, baseline, levels })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

/// Writes `<stem>_maps.csv` (one row per class per cell) and `<stem>_summary.csv`.
pub fn write_sensitivity_csvs(report: &SensitivityReport, dir: &Path, stem: &str) -> Result<()> {
    let mut maps = csv_writer(&dir.join(format!("{stem}_maps.csv")))?;
    maps.write_record(["schema_version", "class", "name", "m", "n", "accuracy"])?;
    for c in &report.classes {
        for (cell, acc) in c.map.iter().enumerate() {
            maps.write_record([
                report.schema_version.to_string(),
                c.class.to_string(),
                c.name.clone(),
                (cell / report.cols).to_string(),
                (cell % report.cols).to_string(),
                format!("{acc:.6}"),
            ])?;
        }
    }
    maps.flush().map_err(|e| Error::io(dir, e))?;

    let mut summary = csv_writer(&dir.join(format!("{stem}_summary.csv")))?;
    summary.write_record(["schema_version", "class", "name", "objects", "mean", "median", "max", "gap"])?;
    for c in &report.classes {
        summary.write_record([
            report.schema_version.to_string(),
            c.class.to_string(),
            c.name.clone(),
            c.objects.to_string(),
            format!("{:.6}", c.mean),
            format!("{:.6}", c.median),
            format!("{:.6}", c.max),
            format!("{:.6}", c.gap()),
        ])?;
    }
    summary.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn write_gap_csv(gaps: &[ClassGap], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["schema_version", "class", "name", "objects", "random_acc", "best_acc", "gap"])?;
    for g in gaps {
        w.write_record([
            REPORT_SCHEMA_VERSION.to_string(),
            g.class.to_string(),
            g.name.clone(),
            g.objects.to_string(),
            format!("{:.6}", g.random_acc),
            format!("{:.6}", g.best_acc),
            format!("{:.6}", g.best_acc - g.random_acc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_occlusion_csv(study: &OcclusionStudy, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["schema_version", "seed", "strength", "prob", "accuracy", "drop"])?;
    for l in std::iter::once(&OcclusionLevel { prob: 0.0, accuracy: study.baseline, drop: 0.0 }).chain(&study.levels) {
        w.write_record([
            study.schema_version.to_string(),
            study.seed.to_string(),
            format!("{:.6}", study.strength),
            format!("{:.4}", l.prob),
            format!("{:.6}", l.accuracy),
            format!("{:.6}", l.drop),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, AmbiguityProfile, ClassEntry, ObjectRecord, Split, SynthConfig};

    /// Two orthogonal classes; every object of class 0 is correct only at cell (0, 0).
    fn one_good_view(rows: usize, cols: usize, objects: usize) -> EmbeddingGridDataset {
        let mut ds = EmbeddingGridDataset::empty(2, rows, cols);
        ds.classes.push(ClassEntry { name: "a".into(), split: Split::Base, text_embedding: vec![1.0, 0.0] });
        ds.classes.push(ClassEntry { name: "b".into(), split: Split::Novel, text_embedding: vec![0.0, 1.0] });
        for i in 0..objects {
            let mut grid = Vec::new();
            for cell in 0..rows * cols {
                grid.extend_from_slice(if cell == 0 { &[1.0f32, 0.0] } else { &[0.0f32, 1.0] });
            }
            ds.objects.push(ObjectRecord { object_id: format!("a-{i}"), class_index: 0, grid, info_map: None });
        }
        ds
    }

    #[test]
    fn single_correct_view_statistics() {
        let ds = one_good_view(12, 12, 3);
        let r = viewpoint_sensitivity_report(&ds, 1.0).unwrap();
        assert_eq!(r.classes.len(), 1);
        assert_eq!(r.skipped, vec![1]);
        let c = &r.classes[0];
        assert!((c.mean - 1.0 / 144.0).abs() < 1e-15);
        assert_eq!(c.max, 1.0);
        assert_eq!(c.median, 0.0);
    }

    #[test]
    fn perfect_world_has_no_gap() {
        let cfg = SynthConfig {
            num_base: 3,
            num_novel: 2,
            objects_per_class: 3,
            test_objects_per_class: 1,
            dim: 16,
            rows: 4,
            cols: 4,
            instance_noise: 0.0,
            ambiguity: AmbiguityProfile::Constant { value: 0.0 },
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let r = viewpoint_sensitivity_report(&ds, 1.0).unwrap();
        assert!(r.classes.iter().all(|c| c.map.iter().all(|&a| a == 1.0)));
        assert_eq!(r.aggregate_gap, 0.0);
        for g in random_vs_best_gap(&ds, 1.0, 10, 1).unwrap() {
            assert_eq!((g.random_acc, g.best_acc), (1.0, 1.0));
        }
        let occ = occlusion_study(&ds, 1.0, &[0.0, 0.5], 0.0, 3).unwrap();
        assert!(occ.levels.iter().all(|l| l.drop == 0.0));
    }

    #[test]
    fn never_correct_object() {
        let mut ds = one_good_view(3, 3, 1);
        ds.objects[0].grid = [0.0f32, 1.0].repeat(9);
        let g = random_vs_best_gap(&ds, 1.0, 50, 2).unwrap();
        assert_eq!((g[0].random_acc, g[0].best_acc), (0.0, 0.0));
    }

    #[test]
    fn half_correct_object_converges_to_one_half() {
        // 2×2 grid with two correct views
        let mut ds = one_good_view(2, 2, 1);
        ds.objects[0].grid = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let runs = 40_000;
        let g = random_vs_best_gap(&ds, 1.0, runs, 5).unwrap();
        assert_eq!(g[0].best_acc, 1.0);
        // binomial standard error sqrt(0.25 / runs)
        let se = (0.25 / runs as f64).sqrt();
        assert!((g[0].random_acc - 0.5).abs() < 4.0 * se, "{}", g[0].random_acc);
    }

    #[test]
    fn zero_probability_has_zero_drop() {
        let ds = one_good_view(3, 3, 2);
        let s = occlusion_study(&ds, 1.0, &[0.0], 1.0 / 9.0, 1).unwrap();
        assert_eq!(s.levels[0].drop, 0.0);
        assert!(occlusion_study(&ds, 1.0, &[1.5], 0.1, 1).is_err());
    }
}
