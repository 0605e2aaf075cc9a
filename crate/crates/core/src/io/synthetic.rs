//! Procedural test scene: the inside of an axis-aligned textured box seen by
//! a ring or grid of cameras, with exact depth and normal maps, a noisy
//! sparse point cloud and the ground-truth box mesh.
//!
//! The room spans `[-W/2, W/2] × [-D/2, D/2] × [0, H]` with `+z` up.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Frame};
use super::png::quantize_u8;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::meshing::TriangleMesh;
use crate::scene::{Camera, SfmPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Checker,
    GradientNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trajectory {
    Circle,
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRoomSpec {
    /// Extent along x, meters.
    pub width: f64,
    /// Extent along y, meters.
    pub depth: f64,
    /// Extent along z, meters.
    pub height: f64,
    pub texture: Texture,
    /// Checker square / noise feature size, meters.
    pub texture_scale: f64,
    pub n_views: usize,
    pub trajectory: Trajectory,
    /// Camera distance from the vertical axis, as a fraction of the smaller
    /// floor extent (circle), or half-width of the camera grid (grid).
    pub trajectory_radius: f64,
    /// Alternating camera pitch, degrees.
    pub pitch_deg: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub hfov_deg: f64,
    /// Relative standard deviation of the depth prior.
    pub depth_noise: f64,
    /// Standard deviation of the normal prior jitter, degrees.
    pub normal_noise_deg: f64,
    /// Affine mis-scaling of the depth prior: `prior = scale · depth + shift`.
    pub depth_prior_scale: f64,
    pub depth_prior_shift: f64,
    pub n_points: usize,
    /// Standard deviation of the point positions, meters.
    pub point_noise: f64,
    /// Share of points scattered uniformly through the room with match
    /// counts of 1 or 2.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticRoomSpec {
    fn default() -> Self {
        Self {
            width: 3.0,
            depth: 3.0,
            height: 2.5,
            texture: Texture::Checker,
            texture_scale: 0.25,
            n_views: 24,
            trajectory: Trajectory::Circle,
            trajectory_radius: 0.3,
            pitch_deg: 25.0,
            image_width: 80,
            image_height: 60,
            hfov_deg: 75.0,
            depth_noise: 0.0,
            normal_noise_deg: 0.0,
            depth_prior_scale: 1.0,
            depth_prior_shift: 0.0,
            n_points: 20000,
            point_noise: 0.0,
            outlier_fraction: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticRoomSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.width > 0.0 && self.depth > 0.0 && self.height > 0.0) {
            errs.push("room extents must be > 0".to_string());
        }
        if self.n_views < 2 {
            errs.push("n_views must be >= 2".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            errs.push("image size must be >= 1".into());
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            errs.push("hfov_deg must be in (0, 180)".into());
        }
        if !(self.texture_scale > 0.0) {
            errs.push("texture_scale must be > 0".into());
        }
        if !(self.trajectory_radius >= 0.0 && self.trajectory_radius < 0.5) {
            errs.push("trajectory_radius must be in [0, 0.5)".into());
        }
        if [self.depth_noise, self.normal_noise_deg, self.point_noise].iter().any(|v| !(*v >= 0.0)) {
            errs.push("noise levels must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            errs.push("outlier_fraction must be in [0, 1]".into());
        }
        if !(self.depth_prior_scale > 0.0) {
            errs.push("depth_prior_scale must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs.join("; ")))
        }
    }

    pub fn min_corner(&self) -> Vector3<f64> {
        Vector3::new(-self.width / 2.0, -self.depth / 2.0, 0.0)
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        Vector3::new(self.width / 2.0, self.depth / 2.0, self.height)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max_corner() - self.min_corner()).norm()
    }

    pub fn intrinsics(&self) -> [f64; 4] {
        let f = (self.image_width as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        [f, f, self.image_width as f64 / 2.0, self.image_height as f64 / 2.0]
    }
}

/// Faces in the order `-x, +x, -y, +y, -z (floor), +z (ceiling)`.
pub const FACE_COLORS: [[f64; 3]; 6] = [
    [0.72, 0.32, 0.30],
    [0.30, 0.62, 0.36],
    [0.30, 0.40, 0.72],
    [0.76, 0.70, 0.30],
    [0.56, 0.46, 0.36],
    [0.86, 0.86, 0.80],
];

/// Where a ray leaves the room.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub face: usize,
    pub point: Vector3<f64>,
}

/// Inward unit normal of a face.
pub fn face_normal(face: usize) -> Vector3<f64> {
    let mut n = Vector3::zeros();
    n[face / 2] = if face.is_multiple_of(2) { 1.0 } else { -1.0 };
    n
}

/// Exit point of a ray starting inside the room.
pub fn trace(spec: &SyntheticRoomSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let (lo, hi) = (spec.min_corner(), spec.max_corner());
    let mut best: Option<(f64, usize)> = None;
    for axis in 0..3 {
        let (t, face) = if dir[axis] > 0.0 {
            ((hi[axis] - origin[axis]) / dir[axis], 2 * axis + 1)
        } else if dir[axis] < 0.0 {
            ((lo[axis] - origin[axis]) / dir[axis], 2 * axis)
        } else {
            continue;
        };
        if best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, face));
        }
    }
    let (t, face) = best?;
    let mut point = origin + dir * t;
    // Snap the exit coordinate so the point lies exactly on its face.
    let axis = face / 2;
    point[axis] = if face % 2 == 0 { lo[axis] } else { hi[axis] };
    Some(Hit { t, face, point })
}

fn hash2(x: i64, y: i64, seed: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x as u64, y as u64] {
        h ^= v.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 31)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 29;
    }
    h
}

/// 2D Perlin-style gradient noise in roughly `[-1, 1]`.
pub fn gradient_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let grad = |ix: i64, iy: i64, dx: f64, dy: f64| {
        let a = (hash2(ix, iy, seed) >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
        a.cos() * dx + a.sin() * dy
    };
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let n00 = grad(ix, iy, fx, fy);
    let n10 = grad(ix + 1, iy, fx - 1.0, fy);
    let n01 = grad(ix, iy + 1, fx, fy - 1.0);
    let n11 = grad(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
    let (u, v) = (fade(fx), fade(fy));
    let a = n00 + u * (n10 - n00);
    let b = n01 + u * (n11 - n01);
    (a + v * (b - a)) * std::f64::consts::SQRT_2
}

/// Albedo of the wall point `p` on `face`.
pub fn shade(spec: &SyntheticRoomSpec, face: usize, p: &Vector3<f64>) -> [f64; 3] {
    let axis = face / 2;
    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
    let (u, v) = (p[a] / spec.texture_scale, p[b] / spec.texture_scale);
    let base = FACE_COLORS[face];
    let k = match spec.texture {
        Texture::Checker => {
            if (u.floor() as i64 + v.floor() as i64).rem_euclid(2) == 0 {
                1.0
            } else {
                0.5
            }
        }
        Texture::GradientNoise => 0.7 + 0.3 * gradient_noise(u, v, spec.seed ^ face as u64).clamp(-1.0, 1.0),
    };
    base.map(|c| c * k)
}

/// Exact maps of one view: 8-bit-quantized color, depth along `+z` and
/// camera-space normals facing the camera.
pub struct ViewMaps {
    pub image: Grid<[f64; 3]>,
    pub depth: Grid<f64>,
    pub normal: Grid<[f64; 3]>,
}

pub fn render_view(spec: &SyntheticRoomSpec, camera: &Camera) -> ViewMaps {
    let (w, h) = (camera.width, camera.height);
    let center = camera.center();
    let rt = camera.rotation.transpose();
    let mut image = Grid::new(w, h, [0.0; 3]);
    let mut depth = Grid::new(w, h, 0.0);
    let mut normal = Grid::new(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let ray = camera.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
            let Some(hit) = trace(spec, &center, &(rt * ray)) else {
                continue;
            };
            let i = y * w + x;
            // The camera ray has unit z, so the ray parameter is the depth.
            depth.data[i] = hit.t;
            let n = camera.rotation * face_normal(hit.face);
            normal.data[i] = [n.x, n.y, n.z];
            image.data[i] = shade(spec, hit.face, &hit.point).map(|c| f64::from(quantize_u8(c)) / 255.0);
        }
    }
    ViewMaps { image, depth, normal }
}

pub fn trajectory(spec: &SyntheticRoomSpec) -> Result<Vec<Camera>> {
    spec.validate()?;
    let n = spec.n_views;
    let mid = Vector3::new(0.0, 0.0, spec.height / 2.0);
    let r = spec.trajectory_radius * spec.width.min(spec.depth);
    let side = (n as f64).sqrt().ceil() as usize;
    let pitches = [0.0, spec.pitch_deg, -spec.pitch_deg];
    let cams: Vec<Camera> = (0..n)
        .map(|i| {
            let yaw = std::f64::consts::TAU * i as f64 / n as f64;
            let (eye, heading) = match spec.trajectory {
                Trajectory::Circle => {
                    let out = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
                    (mid + out * r, -out)
                }
                Trajectory::Grid => {
                    let (gx, gy) = (i % side, i / side);
                    let lerp = |g: usize| {
                        if side == 1 {
                            0.0
                        } else {
                            (2.0 * g as f64 / (side - 1) as f64 - 1.0) * r
                        }
                    };
                    (mid + Vector3::new(lerp(gx), lerp(gy), 0.0), Vector3::new(yaw.cos(), yaw.sin(), 0.0))
                }
            };
            let pitch = pitches[i % 3].to_radians();
            let forward = heading * pitch.cos() + Vector3::z() * pitch.sin();
            Camera::look_at(eye, forward, Vector3::z(), spec.intrinsics(), spec.image_width, spec.image_height)
        })
        .collect();
    let c0 = cams[0].center();
    if cams.iter().all(|c| (c.center() - c0).norm() < 1e-9) {
        return Err(Error::DegenerateTrajectory(format!("all {n} cameras share one center")));
    }
    Ok(cams)
}

/// Closed box mesh, two triangles per face.
pub fn box_mesh(spec: &SyntheticRoomSpec) -> TriangleMesh {
    let (lo, hi) = (spec.min_corner(), spec.max_corner());
    let vertices: Vec<Vector3<f64>> = (0..8)
        .map(|i| {
            Vector3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            )
        })
        .collect();
    let quads: [[u32; 4]; 6] = [
        [0, 4, 6, 2],
        [1, 3, 7, 5],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 2, 3, 1],
        [4, 5, 7, 6],
    ];
    let triangles = quads.iter().flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]).collect();
    TriangleMesh {
        vertices,
        triangles,
        colors: None,
    }
}

/// A generated room together with its noise-free maps.
pub struct SyntheticRoom {
    pub spec: SyntheticRoomSpec,
    pub dataset: Dataset,
    pub gt_depth: Vec<Grid<f64>>,
    pub gt_normal: Vec<Grid<[f64; 3]>>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn jitter_normal(n: [f64; 3], sigma_rad: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Vector3::from(n);
    if sigma_rad == 0.0 {
        return [n.x, n.y, n.z];
    }
    let g = Normal::new(0.0, sigma_rad).expect("finite sigma");
    let d = Vector3::new(g.sample(rng), g.sample(rng), g.sample(rng));
    let tangent = d - n * n.dot(&d);
    let m = (n + tangent).normalize();
    [m.x, m.y, m.z]
}

fn sample_points(spec: &SyntheticRoomSpec, rng: &mut ChaCha8Rng) -> Vec<SfmPoint> {
    let (lo, hi) = (spec.min_corner(), spec.max_corner());
    let ext = hi - lo;
    let areas: Vec<f64> = (0..6).map(|f| ext[(f / 2 + 1) % 3] * ext[(f / 2 + 2) % 3]).collect();
    let total: f64 = areas.iter().sum();
    let noise = Normal::new(0.0, spec.point_noise.max(0.0)).expect("finite sigma");
    let n_out = (spec.n_points as f64 * spec.outlier_fraction).round() as usize;
    let mut pts = Vec::with_capacity(spec.n_points);
    for i in 0..spec.n_points {
        if i < spec.n_points - n_out {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 5;
            for (f, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = f;
                    break;
                }
                pick -= a;
            }
            let mut p = lo + Vector3::new(rng.random::<f64>() * ext.x, rng.random::<f64>() * ext.y, rng.random::<f64>() * ext.z);
            let axis = face / 2;
            p[axis] = if face % 2 == 0 { lo[axis] } else { hi[axis] };
            let color = shade(spec, face, &p).map(|c| f64::from(quantize_u8(c)) / 255.0);
            if spec.point_noise > 0.0 {
                p += Vector3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
            }
            let mut pt = SfmPoint::new(p, rng.random_range(1..=10));
            pt.color = Some(color);
            pts.push(pt);
        } else {
            let p = lo + Vector3::new(rng.random::<f64>() * ext.x, rng.random::<f64>() * ext.y, rng.random::<f64>() * ext.z);
            let mut pt = SfmPoint::new(p, rng.random_range(1..=2));
            pt.color = Some([128.0 / 255.0; 3]);
            pts.push(pt);
        }
    }
    pts
}

/// Generates the room deterministically from `spec.seed`.
pub fn generate_synthetic_room(spec: &SyntheticRoomSpec) -> Result<SyntheticRoom> {
    let cameras = trajectory(spec)?;
    let depth_noise = Normal::new(0.0, spec.depth_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let views: Vec<(Frame, Grid<f64>, Grid<[f64; 3]>)> = cameras
        .par_iter()
        .enumerate()
        .map(|(i, cam)| {
            let maps = render_view(spec, cam);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1 + i as u64));
            let (w, h) = (cam.width, cam.height);
            let depth_prior = Grid::from_vec(
                w,
                h,
                maps.depth
                    .data
                    .iter()
                    .map(|d| {
                        let noisy = if spec.depth_noise > 0.0 { d * (1.0 + depth_noise.sample(&mut rng)) } else { *d };
                        f32_round(spec.depth_prior_scale * noisy + spec.depth_prior_shift)
                    })
                    .collect(),
            );
            let sigma = spec.normal_noise_deg.to_radians();
            let normal_prior = Grid::from_vec(
                w,
                h,
                maps.normal.data.iter().map(|n| jitter_normal(*n, sigma, &mut rng).map(f32_round)).collect(),
            );
            let frame = Frame {
                name: format!("view_{i:03}"),
                camera_id: format!("cam_{i:03}"),
                camera: cam.clone(),
                image: maps.image,
                depth: Some(depth_prior),
                normal: Some(normal_prior),
            };
            (frame, maps.depth, maps.normal)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = sample_points(spec, &mut rng);
    let mut frames = Vec::with_capacity(views.len());
    let mut gt_depth = Vec::with_capacity(views.len());
    let mut gt_normal = Vec::with_capacity(views.len());
    for (f, d, n) in views {
        frames.push(f);
        gt_depth.push(d);
        gt_normal.push(n);
    }
    Ok(SyntheticRoom {
        spec: spec.clone(),
        dataset: Dataset {
            root: Default::default(),
            frames,
            points,
            gt_mesh: Some(box_mesh(spec)),
        },
        gt_depth,
        gt_normal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::dataset::{load_dataset, save_dataset};

    fn small() -> SyntheticRoomSpec {
        SyntheticRoomSpec {
            n_views: 4,
            image_width: 24,
            image_height: 18,
            n_points: 500,
            ..Default::default()
        }
    }

    #[test]
    fn central_pixel_of_a_facing_wall() {
        let spec = SyntheticRoomSpec {
            width: 2.0,
            depth: 2.0,
            height: 2.0,
            ..Default::default()
        };
        let cam = Camera::look_at(Vector3::new(0.0, 0.0, 1.0), Vector3::x(), Vector3::z(), [40.0, 40.0, 40.5, 30.5], 81, 61);
        let maps = render_view(&spec, &cam);
        assert_eq!(*maps.depth.get(40, 30), 1.0);
        assert_eq!(*maps.normal.get(40, 30), [0.0, 0.0, -1.0]);
    }

    #[test]
    fn image_matches_per_face_intersection_oracle() {
        let spec = small();
        let (lo, hi) = (spec.min_corner(), spec.max_corner());
        for cam in trajectory(&spec).unwrap() {
            let maps = render_view(&spec, &cam);
            let o = cam.center();
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let d = cam.rotation.transpose() * cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                    // Intersect each of the six planes and keep the nearest
                    // forward hit that lies on its rectangle.
                    let mut best = (f64::INFINITY, 0, Vector3::zeros());
                    for face in 0..6 {
                        let axis = face / 2;
                        let plane = if face % 2 == 0 { lo[axis] } else { hi[axis] };
                        if d[axis] == 0.0 {
                            continue;
                        }
                        let t = (plane - o[axis]) / d[axis];
                        let mut p = o + d * t;
                        p[axis] = plane;
                        let inside = (0..3).all(|k| p[k] >= lo[k] - 1e-9 && p[k] <= hi[k] + 1e-9);
                        if t > 0.0 && inside && t < best.0 {
                            best = (t, face, p);
                        }
                    }
                    let want = shade(&spec, best.1, &best.2).map(|c| f64::from(quantize_u8(c)) / 255.0);
                    assert_eq!(*maps.image.get(x, y), want, "pixel ({x}, {y})");
                    assert!((maps.depth.get(x, y) - best.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gt_maps_lie_on_the_box_planes() {
        let spec = small();
        let room = generate_synthetic_room(&spec).unwrap();
        let (lo, hi) = (spec.min_corner(), spec.max_corner());
        for (f, (d, n)) in room.dataset.frames.iter().zip(room.gt_depth.iter().zip(&room.gt_normal)) {
            let cam = &f.camera;
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let pc = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5) * *d.get(x, y);
                    let pw = cam.rotation.transpose() * (pc - cam.translation);
                    let nw = cam.rotation.transpose() * Vector3::from(*n.get(x, y));
                    let axis = nw.iamax();
                    let plane = if nw[axis] > 0.0 { lo[axis] } else { hi[axis] };
                    assert!((pw[axis] - plane).abs() < 1e-12, "{} vs {}", pw[axis], plane);
                    // Normals face the camera.
                    assert!(nw.dot(&(cam.center() - pw)) > 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_noise_priors_equal_gt_at_storage_precision() {
        let room = generate_synthetic_room(&small()).unwrap();
        for (f, d) in room.dataset.frames.iter().zip(&room.gt_depth) {
            assert_eq!(f.depth.as_ref().unwrap(), &d.map(|v| f32_round(*v)));
        }
    }

    #[test]
    fn mis_scaled_and_noisy_priors() {
        let spec = SyntheticRoomSpec {
            depth_prior_scale: 2.0,
            depth_prior_shift: 0.5,
            normal_noise_deg: 5.0,
            depth_noise: 0.02,
            ..small()
        };
        let room = generate_synthetic_room(&spec).unwrap();
        let f = &room.dataset.frames[0];
        let (mut dev, mut ang, mut n) = (0.0, 0.0, 0.0);
        for i in 0..f.image.len() {
            let gt = room.gt_depth[0].data[i];
            dev += ((f.depth.as_ref().unwrap().data[i] - 0.5) / (2.0 * gt) - 1.0).abs();
            let a = Vector3::from(f.normal.as_ref().unwrap().data[i]);
            let b = Vector3::from(room.gt_normal[0].data[i]);
            ang += a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees();
            n += 1.0;
        }
        // Mean |N(0, σ)| = σ·√(2/π); the tangent jitter is 2D.
        assert!((dev / n - 0.02 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.004, "{}", dev / n);
        let mean_angle = ang / n;
        assert!(mean_angle > 3.0 && mean_angle < 9.0, "{mean_angle}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_room(&small()).unwrap();
        let b = generate_synthetic_room(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
    }

    #[test]
    fn points_lie_on_walls_or_are_weak_outliers() {
        let spec = small();
        let room = generate_synthetic_room(&spec).unwrap();
        let (lo, hi) = (spec.min_corner(), spec.max_corner());
        let mut outliers = 0;
        for p in &room.dataset.points {
            let on_wall = (0..3).any(|k| p.position[k] == lo[k] || p.position[k] == hi[k]);
            if !on_wall {
                outliers += 1;
                assert!(p.match_count <= 2);
            }
            assert!((1..=10).contains(&p.match_count));
        }
        assert_eq!(outliers, 25);
    }

    #[test]
    fn coincident_cameras_are_rejected() {
        let spec = SyntheticRoomSpec {
            trajectory_radius: 0.0,
            ..small()
        };
        assert!(matches!(generate_synthetic_room(&spec), Err(Error::DegenerateTrajectory(_))));
    }

    #[test]
    fn save_then_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticRoomSpec {
            texture: Texture::GradientNoise,
            trajectory: Trajectory::Grid,
            normal_noise_deg: 5.0,
            depth_noise: 0.02,
            point_noise: 0.01,
            ..small()
        };
        let room = generate_synthetic_room(&spec).unwrap();
        let manifest = save_dataset(&room.dataset, dir.path()).unwrap();
        let mut back = load_dataset(&manifest).unwrap();
        back.root = Default::default();
        assert_eq!(back, room.dataset);
    }

    #[test]
    fn box_mesh_is_closed() {
        let m = box_mesh(&small());
        assert_eq!(m.triangles.len(), 12);
        assert_eq!(m.euler_characteristic(), 2);
        assert!((m.area() - (2.0 * 9.0 + 4.0 * 7.5)).abs() < 1e-12);
    }
}
