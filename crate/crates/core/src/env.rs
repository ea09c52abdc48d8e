//! Viewing-grid episodes: relative moves inside a 5×5 window, wrap-around on
//! both axes, optional occlusion, and proprioception.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{apply_occlusion, EmbeddingGridDataset, OcclusionConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Half-width of the move window.
pub const MAX_STEP: i32 = 2;
pub const NUM_ACTIONS: usize = 25;
/// One-hot slot used before the first move.
pub const NULL_ACTION_SLOT: usize = NUM_ACTIONS;
/// `(Δm/2, Δn/2)` plus a one-hot over the 25 actions and the null slot.
pub const PROPRIO_DIM: usize = 2 + NUM_ACTIONS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridAction {
    pub dm: i32,
    pub dn: i32,
}

impl GridAction {
    pub fn new(dm: i32, dn: i32) -> Result<Self> {
        if dm.abs() > MAX_STEP || dn.abs() > MAX_STEP {
            return Err(Error::InvalidArgument(format!("action ({dm}, {dn}) outside the 5×5 window")));
        }
        Ok(Self { dm, dn })
    }

    pub fn index(self) -> usize {
        ((self.dm + MAX_STEP) * 5 + (self.dn + MAX_STEP)) as usize
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < NUM_ACTIONS, "action index {i} out of range");
        Self { dm: i as i32 / 5 - MAX_STEP, dn: i as i32 % 5 - MAX_STEP }
    }

    pub fn all() -> impl Iterator<Item = GridAction> {
        (0..NUM_ACTIONS).map(Self::from_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Observations per episode.
    pub horizon: usize,
    pub occlusion: OcclusionConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { horizon: 6, occlusion: OcclusionConfig::disabled() }
    }
}

pub fn null_proprio() -> Vec<f64> {
    let mut p = vec![0.0; PROPRIO_DIM];
    p[2 + NULL_ACTION_SLOT] = 1.0;
    p
}

pub fn action_proprio(a: GridAction) -> Vec<f64> {
    let mut p = vec![0.0; PROPRIO_DIM];
    p[0] = a.dm as f64 / MAX_STEP as f64;
    p[1] = a.dn as f64 / MAX_STEP as f64;
    p[2 + a.index()] = 1.0;
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub feature: Vec<f64>,
    pub position: (usize, usize),
    pub proprio: Vec<f64>,
}

/// One episode on one object. Owns its random stream.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    dataset: &'a EmbeddingGridDataset,
    pub object: usize,
    pub config: EnvConfig,
    pub position: (usize, usize),
    /// 1-based step index; equals the number of observations delivered.
    pub step_index: usize,
    pub frames: Vec<Vec<f64>>,
    pub positions: Vec<(usize, usize)>,
    pub actions: Vec<GridAction>,
    pub proprio_last: Vec<f64>,
    rng: Rng,
    sticky: HashMap<(usize, usize), Vec<f64>>,
}

/// Start an episode at a uniformly random cell and deliver the first view.
pub fn reset(
    dataset: &EmbeddingGridDataset,
    object: usize,
    config: EnvConfig,
    seed: u64,
) -> Result<(Episode<'_>, Observation)> {
    if object >= dataset.objects.len() {
        return Err(Error::InvalidArgument(format!(
            "object index {object} out of range ({} objects)",
            dataset.objects.len()
        )));
    }
    if config.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, "env", 0);
    let position = (rng.random_range(0..dataset.rows), rng.random_range(0..dataset.cols));
    let mut ep = Episode {
        dataset,
        object,
        config,
        position,
        step_index: 0,
        frames: Vec::with_capacity(config.horizon),
        positions: Vec::with_capacity(config.horizon),
        actions: Vec::with_capacity(config.horizon),
        proprio_last: null_proprio(),
        rng,
        sticky: HashMap::new(),
    };
    let obs = ep.observe();
    Ok((ep, obs))
}

impl<'a> Episode<'a> {
    pub fn dataset(&self) -> &'a EmbeddingGridDataset {
        self.dataset
    }

    pub fn label(&self) -> usize {
        self.dataset.objects[self.object].class_index as usize
    }

    pub fn is_done(&self) -> bool {
        self.step_index >= self.config.horizon
    }

    fn observe(&mut self) -> Observation {
        let (m, n) = self.position;
        let clean = self.dataset.view_f64(self.object, m, n);
        let occ = self.config.occlusion;
        let feature = if !occ.is_active() {
            clean
        } else if occ.sticky {
            if let Some(f) = self.sticky.get(&(m, n)) {
                f.clone()
            } else {
                let f = apply_occlusion(&clean, occ.prob, occ.strength, &mut self.rng);
                self.sticky.insert((m, n), f.clone());
                f
            }
        } else {
            apply_occlusion(&clean, occ.prob, occ.strength, &mut self.rng)
        };
        self.step_index += 1;
        self.frames.push(feature.clone());
        self.positions.push(self.position);
        Observation { feature, position: self.position, proprio: self.proprio_last.clone() }
    }

    /// Move by `action` (wrapping on both axes) and deliver the next view.
    pub fn step(&mut self, action: GridAction) -> Result<Observation> {
        if self.is_done() {
            return Err(Error::Episode(format!("episode already has {} observations", self.config.horizon)));
        }
        let (m, n) = self.position;
        self.position = (
            (m as i64 + action.dm as i64).rem_euclid(self.dataset.rows as i64) as usize,
            (n as i64 + action.dn as i64).rem_euclid(self.dataset.cols as i64) as usize,
        );
        self.actions.push(action);
        self.proprio_last = action_proprio(action);
        Ok(self.observe())
    }
}

pub fn random_policy<R: rand::Rng + ?Sized>(rng: &mut R) -> GridAction {
    GridAction::from_index(rng.random_range(0..NUM_ACTIONS))
}

/// One of the four corner moves `(±2, ±2)`, chosen uniformly.
pub fn largest_step_policy<R: rand::Rng + ?Sized>(rng: &mut R) -> GridAction {
    const CORNERS: [(i32, i32); 4] = [(-2, -2), (-2, 2), (2, -2), (2, 2)];
    let (dm, dn) = CORNERS[rng.random_range(0..4)];
    GridAction { dm, dn }
}

/// Chooses moves from observations; may carry state across an episode.
pub trait Navigator {
    fn begin_episode(&mut self) {}
    fn act(&mut self, obs: &Observation, rng: &mut Rng) -> Result<GridAction>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomNavigator;

impl Navigator for RandomNavigator {
    fn act(&mut self, _obs: &Observation, rng: &mut Rng) -> Result<GridAction> {
        Ok(random_policy(rng))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LargestStepNavigator;

impl Navigator for LargestStepNavigator {
    fn act(&mut self, _obs: &Observation, rng: &mut Rng) -> Result<GridAction> {
        Ok(largest_step_policy(rng))
    }
}

/// Everything observed during one full episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub object: usize,
    pub label: usize,
    pub positions: Vec<(usize, usize)>,
    pub actions: Vec<GridAction>,
    pub features: Vec<Vec<f64>>,
    pub proprios: Vec<Vec<f64>>,
}

/// Run a full episode. Start cell and occlusion come from the `seed` env
/// stream and actions from a separate stream, so different navigators see
/// the same starting conditions.
pub fn run_episode(
    dataset: &EmbeddingGridDataset,
    object: usize,
    config: EnvConfig,
    seed: u64,
    nav: &mut dyn Navigator,
) -> Result<EpisodeRecord> {
    let (mut ep, mut obs) = reset(dataset, object, config, seed)?;
    let mut action_rng = rng::stream(seed, "action", 0);
    let mut proprios = vec![obs.proprio.clone()];
    nav.begin_episode();
    while !ep.is_done() {
        let a = nav.act(&obs, &mut action_rng)?;
        obs = ep.step(a)?;
        proprios.push(obs.proprio.clone());
    }
    Ok(EpisodeRecord {
        object,
        label: ep.label(),
        positions: ep.positions,
        actions: ep.actions,
        features: ep.frames,
        proprios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn world() -> EmbeddingGridDataset {
        generate_synthetic(&SynthConfig {
            num_base: 2,
            num_novel: 1,
            objects_per_class: 2,
            test_objects_per_class: 1,
            dim: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn action_indexing_round_trips() {
        let all: Vec<GridAction> = GridAction::all().collect();
        assert_eq!(all.len(), 25);
        for (i, a) in all.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(GridAction::new(a.dm, a.dn).unwrap(), *a);
        }
        assert_eq!(GridAction { dm: -2, dn: -2 }.index(), 0);
        assert_eq!(GridAction { dm: 0, dn: 0 }.index(), 12);
        assert!(GridAction::new(3, 0).is_err());
    }

    #[test]
    fn reset_is_deterministic_and_clean() {
        let ds = world();
        let (a, oa) = reset(&ds, 1, EnvConfig::default(), 42).unwrap();
        let (_, ob) = reset(&ds, 1, EnvConfig::default(), 42).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.step_index, 1);
        assert_eq!(oa.feature, ds.view_f64(1, oa.position.0, oa.position.1));
        assert_eq!(oa.proprio, null_proprio());
        assert!(reset(&ds, 99, EnvConfig::default(), 0).is_err());
    }

    #[test]
    fn moves_wrap_on_both_axes() {
        let ds = world();
        let (mut ep, _) = reset(&ds, 0, EnvConfig::default(), 1).unwrap();
        ep.position = (0, 0);
        let o = ep.step(GridAction { dm: 2, dn: -1 }).unwrap();
        assert_eq!(o.position, (2, 11));
        assert_eq!(o.proprio[0], 1.0);
        assert_eq!(o.proprio[1], -0.5);
        assert_eq!(o.proprio[2..].iter().filter(|&&x| x == 1.0).count(), 1);
    }

    #[test]
    fn staying_returns_identical_view() {
        let ds = world();
        let (mut ep, first) = reset(&ds, 0, EnvConfig::default(), 3).unwrap();
        let again = ep.step(GridAction { dm: 0, dn: 0 }).unwrap();
        assert_eq!(first.feature, again.feature);
        assert_eq!(first.position, again.position);
    }

    #[test]
    fn twelve_cycle_and_horizon() {
        let ds = world();
        let cfg = EnvConfig { horizon: 7, ..EnvConfig::default() };
        let (mut ep, _) = reset(&ds, 0, cfg, 3).unwrap();
        ep.position = (0, 0);
        for _ in 0..6 {
            ep.step(GridAction { dm: 2, dn: 0 }).unwrap();
        }
        assert_eq!(ep.position, (0, 0));
        assert!(ep.is_done());
        assert!(ep.step(GridAction { dm: 0, dn: 0 }).is_err());
        assert_eq!(ep.frames.len(), 7);
    }

    #[test]
    fn largest_step_only_uses_corners() {
        let mut r = rng::from_seed(0);
        for _ in 0..200 {
            let a = largest_step_policy(&mut r);
            assert_eq!((a.dm.abs(), a.dn.abs()), (2, 2));
        }
    }

    #[test]
    fn episodes_have_exactly_horizon_observations() {
        let ds = world();
        let rec = run_episode(&ds, 2, EnvConfig::default(), 9, &mut RandomNavigator).unwrap();
        assert_eq!(rec.features.len(), 6);
        assert_eq!(rec.actions.len(), 5);
        assert_eq!(rec.proprios.len(), 6);
        let again = run_episode(&ds, 2, EnvConfig::default(), 9, &mut RandomNavigator).unwrap();
        assert_eq!(rec, again);
    }

    #[test]
    fn sticky_occlusion_repeats_per_cell() {
        let ds = world();
        let occ = OcclusionConfig { prob: 1.0, strength: 0.5, sticky: true };
        let (mut ep, first) = reset(&ds, 0, EnvConfig { horizon: 3, occlusion: occ }, 5).unwrap();
        let again = ep.step(GridAction { dm: 0, dn: 0 }).unwrap();
        assert_eq!(first.feature, again.feature);
    }
}
