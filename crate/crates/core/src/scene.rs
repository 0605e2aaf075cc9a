//! Reconstruction state: the filtered point cloud, seed points, their surfels
//! and the cameras that observe them.

use std::collections::{HashMap, HashSet};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logit, quat_to_matrix, sigmoid};

/// Opacity given to freshly created surfels.
pub const INIT_OPACITY: f64 = 0.1;

/// One point of the sparse structure-from-motion cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct SfmPoint {
    pub position: Vector3<f64>,
    /// Number of image feature matches supporting the point.
    pub match_count: u32,
    pub color: Option<[f64; 3]>,
}

impl SfmPoint {
    pub fn new(position: Vector3<f64>, match_count: u32) -> Self {
        Self {
            position,
            match_count,
            color: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    /// Minimum match count for a point to be kept.
    pub epsilon: u32,
    /// Base voxel size in meters.
    pub delta: f64,
    /// Surfels per seed.
    pub k: usize,
    /// RNG seed for the offset jitter.
    pub seed: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            epsilon: 3,
            delta: 0.05,
            k: 10,
            seed: 0,
        }
    }
}

impl SeedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidConfig(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        Ok(())
    }

    /// Voxel size at a multi-resolution level.
    pub fn voxel_size(&self, level: u8) -> f64 {
        self.delta / f64::from(1u32 << level)
    }
}

/// A voxel-derived anchor owning `k` surfels.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedPoint {
    pub anchor: Vector3<f64>,
    pub level: u8,
    /// Integer voxel coordinates at `level`.
    pub key: [i64; 3],
    pub grad_accum: f64,
    pub grad_count: u32,
    pub opacity_accum: f64,
    /// Iterations folded into `opacity_accum` since the last prune window.
    pub opacity_count: u32,
    pub surfel_ids: Vec<usize>,
    pub active: bool,
}

impl SeedPoint {
    fn new(key: [i64; 3], level: u8, voxel: f64) -> Self {
        Self {
            anchor: voxel_center(key, voxel),
            level,
            key,
            grad_accum: 0.0,
            grad_count: 0,
            opacity_accum: 0.0,
            opacity_count: 0,
            surfel_ids: Vec::new(),
            active: true,
        }
    }

    pub fn reset_grad_stats(&mut self) {
        self.grad_accum = 0.0;
        self.grad_count = 0;
    }

    pub fn reset_opacity_stats(&mut self) {
        self.opacity_accum = 0.0;
        self.opacity_count = 0;
    }
}

/// A 2D Gaussian disk, stored in raw (pre-activation) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfel {
    /// Learnable offset from the owning seed's anchor.
    pub offset: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; its matrix columns are `t_u, t_v, t_w`.
    pub rotation: [f64; 4],
    /// `s = exp(log_scale)`.
    pub log_scale: [f64; 2],
    /// `alpha = sigmoid(raw_opacity)`.
    pub raw_opacity: f64,
    /// `c = sigmoid(raw_color)` per channel.
    pub raw_color: [f64; 3],
    pub seed_id: usize,
}

/// Number of scalar parameters per surfel.
pub const SURFEL_PARAMS: usize = 13;

impl Surfel {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.raw_opacity)
    }

    pub fn color(&self) -> [f64; 3] {
        self.raw_color.map(sigmoid)
    }

    pub fn scales(&self) -> [f64; 2] {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.rotation)
    }

    /// Flat parameter layout: offset(3), rotation(4), log_scale(2),
    /// raw_opacity(1), raw_color(3).
    pub fn params(&self) -> [f64; SURFEL_PARAMS] {
        let o = &self.offset;
        let q = &self.rotation;
        let c = &self.raw_color;
        [
            o.x,
            o.y,
            o.z,
            q[0],
            q[1],
            q[2],
            q[3],
            self.log_scale[0],
            self.log_scale[1],
            self.raw_opacity,
            c[0],
            c[1],
            c[2],
        ]
    }

    pub fn set_params(&mut self, p: &[f64; SURFEL_PARAMS]) {
        self.offset = Vector3::new(p[0], p[1], p[2]);
        self.rotation = [p[3], p[4], p[5], p[6]];
        self.log_scale = [p[7], p[8]];
        self.raw_opacity = p[9];
        self.raw_color = [p[10], p[11], p[12]];
    }
}

/// Pinhole camera with a world-to-camera pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        let e = self.rotation * self.rotation.transpose() - Matrix3::identity();
        if e.abs().max() > 1e-6 {
            return Err(Error::InvalidConfig("camera rotation is not orthonormal".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("camera has an empty image".into()));
        }
        Ok(())
    }

    /// Camera looking from `eye` along `forward`, with image rows pointing
    /// away from `up`.
    pub fn look_at(
        eye: Vector3<f64>,
        forward: Vector3<f64>,
        up: Vector3<f64>,
        intrinsics: [f64; 4],
        width: usize,
        height: usize,
    ) -> Self {
        let f = forward.normalize();
        let right = f.cross(&up).normalize();
        let down = f.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        let translation = -(rotation * eye);
        let [fx, fy, cx, cy] = intrinsics;
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        }
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics_inv(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Viewing direction (camera `+z`) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// Camera-space ray through a pixel, normalized to unit depth.
    pub fn pixel_ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// World-to-screen matrix mapping world points to `(x·z, y·z, z, z)`.
    pub fn world_to_screen(&self) -> Matrix4<f64> {
        let mut proj = Matrix4::zeros();
        proj[(0, 0)] = self.fx;
        proj[(0, 2)] = self.cx;
        proj[(1, 1)] = self.fy;
        proj[(1, 2)] = self.cy;
        proj[(2, 2)] = 1.0;
        proj[(3, 2)] = 1.0;
        let mut view = Matrix4::identity();
        view.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        view.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        proj * view
    }
}

/// The full optimizable scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SeedConfig,
    pub seeds: Vec<SeedPoint>,
    pub surfels: Vec<Surfel>,
}

/// Keeps exactly the points with at least `epsilon` matches, in order.
pub fn filter_points(points: &[SfmPoint], epsilon: u32) -> Vec<SfmPoint> {
    points
        .iter()
        .filter(|p| p.match_count >= epsilon)
        .cloned()
        .collect()
}

/// Axis-aligned bounds of the points, `None` when there are none.
pub fn point_bounds(points: &[SfmPoint]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let first = points.first()?.position;
    Some(points.iter().fold((first, first), |(lo, hi), p| (lo.inf(&p.position), hi.sup(&p.position))))
}

#[inline]
pub fn voxel_key(p: &Vector3<f64>, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

#[inline]
pub fn voxel_center(key: [i64; 3], voxel: f64) -> Vector3<f64> {
    Vector3::new(
        key[0] as f64 * voxel + voxel / 2.0,
        key[1] as f64 * voxel + voxel / 2.0,
        key[2] as f64 * voxel + voxel / 2.0,
    )
}

/// Builds one level-0 seed per occupied voxel, each with `k` fresh surfels.
///
/// Seeds are ordered by first occurrence in `points`, so the result is
/// deterministic for a given input order and `config.seed`.
pub fn voxelize_seeds(points: &[SfmPoint], config: &SeedConfig) -> Result<Scene> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::NoPoints);
    }
    let mut order: Vec<[i64; 3]> = Vec::new();
    let mut colors: HashMap<[i64; 3], ([f64; 3], usize)> = HashMap::new();
    for p in points {
        let key = voxel_key(&p.position, config.delta);
        let entry = colors.entry(key).or_insert_with(|| {
            order.push(key);
            ([0.0; 3], 0)
        });
        if let Some(c) = p.color {
            for i in 0..3 {
                entry.0[i] += c[i];
            }
            entry.1 += 1;
        }
    }
    let mut scene = Scene::empty(*config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for key in order {
        let (sum, n) = colors[&key];
        let color = if n > 0 {
            sum.map(|s| s / n as f64)
        } else {
            [0.5; 3]
        };
        scene.add_seed(key, 0, color, &mut rng);
    }
    Ok(scene)
}

impl Scene {
    pub fn empty(config: SeedConfig) -> Self {
        Self {
            config,
            seeds: Vec::new(),
            surfels: Vec::new(),
        }
    }

    /// Appends an active seed at voxel `key` of `level` with `k` fresh
    /// surfels and returns its handle.
    pub fn add_seed(&mut self, key: [i64; 3], level: u8, color: [f64; 3], rng: &mut impl Rng) -> usize {
        let voxel = self.config.voxel_size(level);
        let seed_id = self.seeds.len();
        let mut seed = SeedPoint::new(key, level, voxel);
        let raw_color = color.map(|c| logit(c.clamp(0.02, 0.98)));
        let log_scale = (voxel / 4.0).ln();
        for _ in 0..self.config.k {
            let jitter = Vector3::new(
                rng.random_range(-voxel / 4.0..=voxel / 4.0),
                rng.random_range(-voxel / 4.0..=voxel / 4.0),
                rng.random_range(-voxel / 4.0..=voxel / 4.0),
            );
            seed.surfel_ids.push(self.surfels.len());
            self.surfels.push(Surfel {
                offset: jitter,
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [log_scale; 2],
                raw_opacity: logit(INIT_OPACITY),
                raw_color,
                seed_id,
            });
        }
        self.seeds.push(seed);
        seed_id
    }

    pub fn active_seed_count(&self) -> usize {
        self.seeds.iter().filter(|s| s.active).count()
    }

    /// World position of a surfel: its seed's anchor plus its offset.
    pub fn surfel_world_center(&self, surfel_id: usize) -> Result<Vector3<f64>> {
        let surfel = self
            .surfels
            .get(surfel_id)
            .ok_or(Error::DanglingSurfel(surfel_id))?;
        match self.seeds.get(surfel.seed_id) {
            Some(seed) if seed.active => Ok(seed.anchor + surfel.offset),
            _ => Err(Error::DanglingSurfel(surfel_id)),
        }
    }

    /// World centers of all surfels, indexed like `surfels`.
    pub fn world_centers(&self) -> Vec<Vector3<f64>> {
        self.surfels
            .iter()
            .map(|s| self.seeds[s.seed_id].anchor + s.offset)
            .collect()
    }

    /// Diagonal of the bounding box of active seed anchors.
    pub fn extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for s in self.seeds.iter().filter(|s| s.active) {
            lo = lo.inf(&s.anchor);
            hi = hi.sup(&s.anchor);
        }
        if lo.x.is_finite() {
            (hi - lo).norm()
        } else {
            0.0
        }
    }

    /// Removes the surfels of every inactive seed, compacting the surfel array.
    ///
    /// Returns the keep-mask over the old surfel indices so callers can
    /// compact parallel buffers the same way.
    pub fn drop_inactive_surfels(&mut self) -> Vec<bool> {
        let keep: Vec<bool> = self
            .surfels
            .iter()
            .map(|s| self.seeds[s.seed_id].active)
            .collect();
        let mut remap = vec![usize::MAX; self.surfels.len()];
        let mut next = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                remap[i] = next;
                next += 1;
            }
        }
        let mut i = 0;
        self.surfels.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        for seed in &mut self.seeds {
            if seed.active {
                for id in &mut seed.surfel_ids {
                    *id = remap[*id];
                }
            } else {
                seed.surfel_ids.clear();
            }
        }
        keep
    }

    /// Checks that every active seed owns exactly `k` surfels which point
    /// back at it, and that every surfel belongs to an active seed.
    pub fn check_integrity(&self) -> std::result::Result<(), String> {
        let k = self.config.k;
        let mut owned = vec![false; self.surfels.len()];
        for (sid, seed) in self.seeds.iter().enumerate() {
            if !seed.active {
                if !seed.surfel_ids.is_empty() {
                    return Err(format!("inactive seed {sid} still owns surfels"));
                }
                continue;
            }
            if seed.surfel_ids.len() != k {
                return Err(format!("seed {sid} owns {} surfels, expected {k}", seed.surfel_ids.len()));
            }
            for &id in &seed.surfel_ids {
                let s = self
                    .surfels
                    .get(id)
                    .ok_or_else(|| format!("seed {sid} references missing surfel {id}"))?;
                if s.seed_id != sid {
                    return Err(format!("surfel {id} points at seed {}, owned by {sid}", s.seed_id));
                }
                if owned[id] {
                    return Err(format!("surfel {id} owned twice"));
                }
                owned[id] = true;
            }
        }
        if let Some(id) = owned.iter().position(|o| !o) {
            return Err(format!("surfel {id} is orphaned"));
        }
        Ok(())
    }

    /// Set of `(level, key)` pairs held by active seeds.
    pub fn occupied_voxels(&self) -> HashSet<(u8, [i64; 3])> {
        self.seeds
            .iter()
            .filter(|s| s.active)
            .map(|s| (s.level, s.key))
            .collect()
    }
}

/// `n` level-0 seeds at voxels drawn uniformly from the box `[lo, hi]`,
/// ignoring where the points are. Used as the unguided baseline.
pub fn random_seeds(lo: &Vector3<f64>, hi: &Vector3<f64>, n: usize, config: &SeedConfig) -> Result<Scene> {
    config.validate()?;
    if n == 0 {
        return Err(Error::NoPoints);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut scene = Scene::empty(*config);
    let mut seen = HashSet::new();
    // Cap the draws so tiny boxes with few voxels still terminate.
    for _ in 0..n.saturating_mul(20) {
        if scene.seeds.len() == n {
            break;
        }
        let p = Vector3::from_fn(|i, _| lo[i] + rng.random::<f64>() * (hi[i] - lo[i]));
        let key = voxel_key(&p, config.delta);
        if seen.insert(key) {
            scene.add_seed(key, 0, [0.5; 3], &mut rng);
        }
    }
    Ok(scene)
}
