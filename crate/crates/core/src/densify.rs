//! Seed-level densification: gradient-guided growth on a multi-resolution
//! voxel grid and contribution-based pruning.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{voxel_key, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Iterations per growth window.
    pub grow_interval: u32,
    /// Iterations per prune window.
    pub prune_interval: u32,
    /// Base growth threshold on the mean screen-space gradient.
    pub grow_threshold: f64,
    /// Prune threshold on the mean per-surfel per-iteration opacity.
    pub prune_threshold: f64,
    pub max_level: u8,
    pub start_iter: u32,
    pub end_iter: u32,
    /// Master switch; disabled runs never grow or prune.
    pub enabled: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grow_interval: 100,
            prune_interval: 100,
            grow_threshold: 0.0002,
            prune_threshold: 0.5,
            max_level: 2,
            start_iter: 1500,
            end_iter: 15000,
            enabled: true,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.start_iter >= self.end_iter {
            return Err(Error::InvalidConfig("densify start_iter must be < end_iter".into()));
        }
        if !(self.grow_threshold > 0.0 && self.prune_threshold > 0.0) {
            return Err(Error::InvalidConfig("densify thresholds must be > 0".into()));
        }
        if self.grow_interval == 0 || self.prune_interval == 0 {
            return Err(Error::InvalidConfig("densify intervals must be >= 1".into()));
        }
        Ok(())
    }

    pub fn in_window(&self, iter: u32) -> bool {
        self.enabled && iter >= self.start_iter && iter <= self.end_iter
    }

    /// Growth threshold at a level: finer levels need larger gradients.
    pub fn grow_threshold_at(&self, level: u8) -> f64 {
        self.grow_threshold * f64::from(1u32 << level)
    }

    pub fn is_grow_step(&self, iter: u32) -> bool {
        self.in_window(iter) && iter.is_multiple_of(self.grow_interval)
    }

    pub fn is_prune_step(&self, iter: u32) -> bool {
        self.in_window(iter) && iter.is_multiple_of(self.prune_interval)
    }

    /// Statistics are gathered during the window and the run-up to its
    /// first event.
    pub fn accumulates(&self, iter: u32) -> bool {
        let lead = self.grow_interval.max(self.prune_interval);
        self.enabled && iter + lead > self.start_iter && iter <= self.end_iter
    }
}

/// Adds finer seeds around seeds whose mean gradient exceeds the level
/// threshold. Returns the number of seeds created.
pub fn grow_seeds(scene: &mut Scene, config: &DensifyConfig, iter: u32, rng: &mut impl Rng) -> usize {
    if !config.in_window(iter) {
        return 0;
    }
    let mut occupied = scene.occupied_voxels();
    let centers = scene.world_centers();
    let mut created = 0;
    let n_seeds = scene.seeds.len();
    for sid in 0..n_seeds {
        let seed = &scene.seeds[sid];
        if !seed.active || seed.grad_count < config.grow_interval {
            continue;
        }
        let mean = seed.grad_accum / f64::from(seed.grad_count);
        let level = seed.level;
        if mean > config.grow_threshold_at(level) && level < config.max_level {
            let fine = level + 1;
            let voxel = scene.config.voxel_size(fine);
            // Candidate voxels in first-seen order, with the mean color of
            // the surfels that fall into each.
            let mut order = Vec::new();
            let mut colors: HashMap<[i64; 3], ([f64; 3], usize)> = HashMap::new();
            for &id in &seed.surfel_ids {
                let key = voxel_key(&centers[id], voxel);
                if occupied.contains(&(fine, key)) {
                    continue;
                }
                let c = scene.surfels[id].color();
                let e = colors.entry(key).or_insert_with(|| {
                    order.push(key);
                    ([0.0; 3], 0)
                });
                for k in 0..3 {
                    e.0[k] += c[k];
                }
                e.1 += 1;
            }
            for key in order {
                let (sum, n) = colors[&key];
                scene.add_seed(key, fine, sum.map(|s| s / n as f64), rng);
                occupied.insert((fine, key));
                created += 1;
            }
        }
        scene.seeds[sid].reset_grad_stats();
    }
    created
}

/// Result of one pruning pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub pruned: usize,
    /// Every seed failed the threshold and the strongest one was kept.
    pub kept_last: bool,
    /// Keep-mask over the surfel indices before the pass.
    pub keep_mask: Vec<bool>,
}

/// Deactivates seeds whose mean surfel opacity over the last window is
/// below the threshold, then drops their surfels.
pub fn prune_seeds(scene: &mut Scene, config: &DensifyConfig, iter: u32) -> PruneOutcome {
    let n = scene.surfels.len();
    if !config.in_window(iter) {
        return PruneOutcome {
            pruned: 0,
            kept_last: false,
            keep_mask: vec![true; n],
        };
    }
    let k = scene.config.k as f64;
    let mut doomed = Vec::new();
    for (sid, seed) in scene.seeds.iter().enumerate() {
        if !seed.active || seed.opacity_count < config.prune_interval {
            continue;
        }
        let mean = seed.opacity_accum / (f64::from(seed.opacity_count) * k);
        if mean < config.prune_threshold {
            doomed.push(sid);
        }
    }
    let mut kept_last = false;
    if !doomed.is_empty() && doomed.len() == scene.active_seed_count() {
        let best = doomed
            .iter()
            .enumerate()
            .max_by(|a, b| {
                scene.seeds[*a.1]
                    .opacity_accum
                    .total_cmp(&scene.seeds[*b.1].opacity_accum)
                    .then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i)
            .expect("non-empty");
        log::warn!("pruning would empty the scene; keeping seed {}", doomed[best]);
        doomed.remove(best);
        kept_last = true;
    }
    let doomed_set: HashSet<usize> = doomed.iter().copied().collect();
    for (sid, seed) in scene.seeds.iter_mut().enumerate() {
        if doomed_set.contains(&sid) {
            seed.active = false;
        } else if seed.active && seed.opacity_count >= config.prune_interval {
            seed.reset_opacity_stats();
        }
    }
    let keep_mask = if doomed.is_empty() {
        vec![true; n]
    } else {
        scene.drop_inactive_surfels()
    };
    PruneOutcome {
        pruned: doomed.len(),
        kept_last,
        keep_mask,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use crate::scene::{voxel_center, voxelize_seeds, SeedConfig, SfmPoint};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_scene(n: usize, k: usize) -> Scene {
        let pts: Vec<_> = (0..n)
            .map(|i| SfmPoint::new(Vector3::new(i as f64 * 0.1 + 0.05, 0.05, 0.05), 5))
            .collect();
        voxelize_seeds(
            &pts,
            &SeedConfig {
                delta: 0.1,
                k,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn config() -> DensifyConfig {
        DensifyConfig::default()
    }

    #[test]
    fn zero_gradients_grow_nothing() {
        let mut scene = grid_scene(5, 3);
        for s in &mut scene.seeds {
            s.grad_count = 100;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(grow_seeds(&mut scene, &config(), 1500, &mut rng), 0);
        assert_eq!(scene.seeds.len(), 5);
    }

    #[test]
    fn single_candidate_voxel() {
        let mut scene = grid_scene(1, 4);
        let anchor = scene.seeds[0].anchor;
        // Put every surfel well inside one level-1 voxel.
        let target = voxel_center([1, 1, 1], 0.05);
        for s in &mut scene.surfels {
            s.offset = target - anchor + Vector3::new(0.001, -0.002, 0.0);
        }
        scene.seeds[0].grad_accum = 10.0 * 0.0002 * 100.0;
        scene.seeds[0].grad_count = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(grow_seeds(&mut scene, &config(), 2000, &mut rng), 1);
        let new = &scene.seeds[1];
        assert_eq!(new.level, 1);
        assert!((new.anchor - target).norm() < 1e-12);
        assert_eq!(scene.seeds[0].grad_count, 0);
        scene.check_integrity().unwrap();
        // The voxel is now occupied, so repeating growth adds nothing.
        scene.seeds[0].grad_accum = 1.0;
        scene.seeds[0].grad_count = 100;
        assert_eq!(grow_seeds(&mut scene, &config(), 2100, &mut rng), 0);
    }

    #[test]
    fn growth_respects_window_and_max_level() {
        let mut scene = grid_scene(1, 2);
        scene.seeds[0].grad_accum = 1.0;
        scene.seeds[0].grad_count = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(grow_seeds(&mut scene, &config(), 1400, &mut rng), 0);
        assert_eq!(grow_seeds(&mut scene, &config(), 15100, &mut rng), 0);
        scene.seeds[0].level = 2;
        assert_eq!(grow_seeds(&mut scene, &config(), 2000, &mut rng), 0);
    }

    #[test]
    fn growth_matches_rule_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let mut scene = grid_scene(12, 5);
            for s in &mut scene.surfels {
                s.offset = Vector3::new(
                    rng.random_range(-0.08..0.08),
                    rng.random_range(-0.08..0.08),
                    rng.random_range(-0.08..0.08),
                );
            }
            for s in &mut scene.seeds {
                s.grad_count = 100;
                s.grad_accum = rng.random_range(0.0..0.06);
                s.level = rng.random_range(0..3);
            }
            // Literal replay of the rule on a copy.
            let cfg = config();
            let mut occupied: HashSet<(u8, [i64; 3])> =
                scene.seeds.iter().map(|s| (s.level, s.key)).collect();
            let mut expected = Vec::new();
            for seed in &scene.seeds {
                let mean = seed.grad_accum / 100.0;
                if mean > 0.0002 * 2f64.powi(seed.level as i32) && seed.level < 2 {
                    let size = 0.1 / 2f64.powi(seed.level as i32 + 1);
                    for &id in &seed.surfel_ids {
                        let p = seed.anchor + scene.surfels[id].offset;
                        let key = [
                            (p.x / size).floor() as i64,
                            (p.y / size).floor() as i64,
                            (p.z / size).floor() as i64,
                        ];
                        if occupied.insert((seed.level + 1, key)) {
                            expected.push((seed.level + 1, key));
                        }
                    }
                }
            }
            let before = scene.seeds.len();
            let created = grow_seeds(&mut scene, &cfg, 3000, &mut rng);
            let got: Vec<_> = scene.seeds[before..].iter().map(|s| (s.level, s.key)).collect();
            assert_eq!(created, expected.len(), "trial {trial}");
            assert_eq!(got, expected, "trial {trial}");
            scene.check_integrity().unwrap();
            let unique: HashSet<_> = scene.seeds.iter().map(|s| (s.level, s.key)).collect();
            assert_eq!(unique.len(), scene.seeds.len());
        }
    }

    fn set_opacity_history(scene: &mut Scene, sid: usize, alpha: f64) {
        let k = scene.config.k as f64;
        for &id in &scene.seeds[sid].surfel_ids.clone() {
            scene.surfels[id].raw_opacity = logit(alpha);
        }
        scene.seeds[sid].opacity_accum = alpha * k * 100.0;
        scene.seeds[sid].opacity_count = 100;
    }

    #[test]
    fn healthy_seeds_survive() {
        let mut scene = grid_scene(4, 3);
        for sid in 0..4 {
            set_opacity_history(&mut scene, sid, 0.99);
        }
        let out = prune_seeds(&mut scene, &config(), 1500);
        assert_eq!(out.pruned, 0);
        assert!(scene.seeds.iter().all(|s| s.active && s.opacity_accum == 0.0));
    }

    #[test]
    fn dead_seed_is_pruned() {
        let mut scene = grid_scene(4, 3);
        for sid in 0..4 {
            set_opacity_history(&mut scene, sid, 0.9);
        }
        scene.seeds[2].opacity_accum = 0.0;
        let out = prune_seeds(&mut scene, &config(), 1600);
        assert_eq!(out.pruned, 1);
        assert!(!scene.seeds[2].active);
        assert_eq!(scene.surfels.len(), 9);
        assert_eq!(out.keep_mask.iter().filter(|k| !**k).count(), 3);
        scene.check_integrity().unwrap();
    }

    #[test]
    fn pruning_never_empties_the_scene() {
        let mut scene = grid_scene(3, 2);
        for sid in 0..3 {
            set_opacity_history(&mut scene, sid, 0.01);
        }
        scene.seeds[1].opacity_accum = 50.0;
        let out = prune_seeds(&mut scene, &config(), 1500);
        assert!(out.kept_last);
        assert_eq!(out.pruned, 2);
        assert!(scene.seeds[1].active);
        assert_eq!(scene.active_seed_count(), 1);
        scene.check_integrity().unwrap();
    }

    #[test]
    fn young_seeds_are_not_judged() {
        let mut scene = grid_scene(2, 2);
        set_opacity_history(&mut scene, 0, 0.9);
        scene.seeds[1].opacity_count = 10;
        let out = prune_seeds(&mut scene, &config(), 1500);
        assert_eq!(out.pruned, 0);
        assert_eq!(scene.seeds[1].opacity_count, 10);
    }

    #[test]
    fn pruning_matches_rule_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut scene = grid_scene(15, 4);
            for s in &mut scene.seeds {
                s.opacity_count = 100;
                s.opacity_accum = rng.random_range(0.0..1.0) * 400.0;
            }
            let expected: Vec<bool> = scene
                .seeds
                .iter()
                .map(|s| s.opacity_accum / 400.0 >= 0.5)
                .collect();
            if expected.iter().all(|k| !k) {
                continue;
            }
            let before = scene.active_seed_count();
            let out = prune_seeds(&mut scene, &config(), 5000);
            let got: Vec<bool> = scene.seeds.iter().map(|s| s.active).collect();
            assert_eq!(got, expected);
            assert_eq!(before - out.pruned, scene.active_seed_count());
            scene.check_integrity().unwrap();
        }
    }

    #[test]
    fn schedule_windows() {
        let c = config();
        assert!(!c.is_grow_step(1400));
        assert!(c.is_grow_step(1500));
        assert!(!c.is_grow_step(1550));
        assert!(c.is_prune_step(15000));
        assert!(!c.is_prune_step(15100));
        assert!(c.accumulates(1401) && !c.accumulates(1400));
        let off = DensifyConfig {
            enabled: false,
            ..c
        };
        assert!(!off.is_grow_step(1500) && !off.accumulates(2000));
    }
}
