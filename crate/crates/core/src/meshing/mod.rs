//! TSDF fusion of rendered depth maps and marching-cubes extraction.

mod tables;

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rasterizer::{render, RasterConfig};
use crate::scene::{Camera, Scene};

use tables::{CORNERS, EDGES, TRIANGLES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsdfConfig {
    pub voxel_size: f64,
    /// Truncation distance as a multiple of the voxel size.
    pub truncation_factor: f64,
    /// Pixels with lower rendered alpha are not integrated.
    pub alpha_threshold: f64,
    /// Padding around the surfel bounding box, in voxels.
    pub margin_voxels: usize,
    /// Refuse volumes with more voxels than this.
    pub max_voxels: usize,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.02,
            truncation_factor: 5.0,
            alpha_threshold: 0.5,
            margin_voxels: 8,
            max_voxels: 64_000_000,
        }
    }
}

impl TsdfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.truncation_factor > 0.0) {
            return Err(Error::InvalidConfig("voxel size and truncation must be positive".into()));
        }
        Ok(())
    }

    pub fn truncation(&self) -> f64 {
        self.voxel_size * self.truncation_factor
    }
}

/// Dense TSDF sampled at grid nodes `origin + (i, j, k) · voxel_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub truncation: f64,
    pub dims: [usize; 3],
    /// Normalized signed distance in `[-1, 1]`, x fastest.
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
    pub color: Vec<[f32; 3]>,
}

impl TsdfVolume {
    pub fn new(origin: Vector3<f64>, dims: [usize; 3], voxel_size: f64, truncation: f64) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            origin,
            voxel_size,
            truncation,
            dims,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    /// Volume covering the box `[min, max]` plus the configured margin.
    pub fn from_bounds(min: &Vector3<f64>, max: &Vector3<f64>, config: &TsdfConfig) -> Result<Self> {
        config.validate()?;
        let pad = config.margin_voxels as f64 * config.voxel_size;
        let origin = min - Vector3::repeat(pad);
        let span = max - min + Vector3::repeat(2.0 * pad);
        let dims = [0, 1, 2].map(|a| (span[a] / config.voxel_size).ceil() as usize + 1);
        let total = dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
        if total.is_none_or(|t| t > config.max_voxels) {
            return Err(Error::InvalidConfig(format!(
                "TSDF volume {}x{}x{} exceeds the voxel budget",
                dims[0], dims[1], dims[2]
            )));
        }
        Ok(Self::new(origin, dims, config.voxel_size, config.truncation()))
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    /// Upper corner of the sampled region.
    pub fn max_corner(&self) -> Vector3<f64> {
        self.position(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    /// Fuse one depth map. Pixels below `alpha_threshold` or with depth
    /// outside `[near, far]` are skipped, as are nodes more than one
    /// truncation band behind the observed surface.
    #[allow(clippy::too_many_arguments)]
    pub fn integrate_depth(
        &mut self,
        depth: &Grid<f64>,
        color: Option<&Grid<[f64; 3]>>,
        alpha: &Grid<f64>,
        camera: &Camera,
        alpha_threshold: f64,
        near: f64,
        far: f64,
    ) -> Result<()> {
        if depth.width != camera.width
            || depth.height != camera.height
            || !depth.same_shape(alpha)
            || color.is_some_and(|c| !c.same_shape(depth))
        {
            return Err(Error::DimensionMismatch("depth, alpha, color and camera sizes differ".into()));
        }
        let [nx, ny, _] = self.dims;
        let slab = nx * ny;
        let (origin, vs, trunc) = (self.origin, self.voxel_size, self.truncation);
        self.tsdf
            .par_chunks_mut(slab)
            .zip(self.weight.par_chunks_mut(slab))
            .zip(self.color.par_chunks_mut(slab))
            .enumerate()
            .for_each(|(k, ((tsdf, weight), col))| {
                for j in 0..ny {
                    for i in 0..nx {
                        let p = origin + Vector3::new(i as f64, j as f64, k as f64) * vs;
                        let pc = camera.to_camera(&p);
                        if pc.z <= near {
                            continue;
                        }
                        let (u, v) = camera.project_camera(&pc);
                        if !(u >= 0.0 && v >= 0.0 && u < camera.width as f64 && v < camera.height as f64) {
                            continue;
                        }
                        let (px, py) = (u as usize, v as usize);
                        if *alpha.get(px, py) < alpha_threshold {
                            continue;
                        }
                        let d = *depth.get(px, py);
                        if !(d >= near && d <= far) {
                            continue;
                        }
                        let sdf = d - pc.z;
                        if sdf < -trunc {
                            continue;
                        }
                        let s = sdf.min(trunc) / trunc;
                        let idx = j * nx + i;
                        let w = weight[idx];
                        tsdf[idx] = (tsdf[idx] * w + s) / (w + 1.0);
                        if let Some(c) = color {
                            let c = c.get(px, py);
                            for ch in 0..3 {
                                col[idx][ch] = ((col[idx][ch] as f64 * w + c[ch]) / (w + 1.0)) as f32;
                            }
                        }
                        weight[idx] = w + 1.0;
                    }
                }
            });
        Ok(())
    }

    /// Marching cubes over cells whose eight corners are all observed.
    pub fn extract_mesh(&self) -> TriangleMesh {
        let [nx, ny, nz] = self.dims;
        if nx < 2 || ny < 2 || nz < 2 {
            return TriangleMesh::default();
        }
        // Per slab: triangles as triples of (edge key, position, color).
        type Slab = Vec<[(EdgeKey, Vector3<f64>, [f64; 3]); 3]>;
        let slabs: Vec<Slab> = (0..nz - 1)
            .into_par_iter()
            .map(|k| {
                let mut tris = Slab::new();
                for j in 0..ny - 1 {
                    for i in 0..nx - 1 {
                        self.polygonize(i, j, k, &mut tris);
                    }
                }
                tris
            })
            .collect();

        let mut mesh = TriangleMesh {
            colors: Some(Vec::new()),
            ..Default::default()
        };
        let mut lookup: HashMap<EdgeKey, u32> = HashMap::new();
        let min_area = 1e-12 * self.voxel_size * self.voxel_size;
        for tri in slabs.into_iter().flatten() {
            let a = tri[1].1 - tri[0].1;
            let b = tri[2].1 - tri[0].1;
            if a.cross(&b).norm() * 0.5 <= min_area {
                continue;
            }
            let ids = tri.map(|(key, pos, col)| {
                *lookup.entry(key).or_insert_with(|| {
                    mesh.vertices.push(pos);
                    if let Some(c) = mesh.colors.as_mut() {
                        c.push(col);
                    }
                    (mesh.vertices.len() - 1) as u32
                })
            });
            if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                mesh.triangles.push(ids);
            }
        }
        mesh
    }

    fn polygonize(&self, i: usize, j: usize, k: usize, out: &mut Vec<[(EdgeKey, Vector3<f64>, [f64; 3]); 3]>) {
        let mut vals = [0f64; 8];
        let mut idx = [0usize; 8];
        let mut case = 0usize;
        for (c, off) in CORNERS.iter().enumerate() {
            let id = self.index(i + off[0], j + off[1], k + off[2]);
            if self.weight[id] <= 0.0 {
                return;
            }
            idx[c] = id;
            vals[c] = self.tsdf[id];
            if vals[c] < 0.0 {
                case |= 1 << c;
            }
        }
        let row = &TRIANGLES[case];
        let mut t = 0;
        while t + 2 < 16 && row[t] >= 0 {
            let tri = [row[t], row[t + 1], row[t + 2]].map(|e| {
                let [c0, c1] = EDGES[e as usize];
                let (o0, o1) = (CORNERS[c0], CORNERS[c1]);
                let g0 = [i + o0[0], j + o0[1], k + o0[2]];
                let g1 = [i + o1[0], j + o1[1], k + o1[2]];
                let (v0, v1) = (vals[c0], vals[c1]);
                let f = if v0 == v1 { 0.5 } else { v0 / (v0 - v1) };
                let p0 = self.position(g0[0], g0[1], g0[2]);
                let p1 = self.position(g1[0], g1[1], g1[2]);
                let col0 = self.color[idx[c0]];
                let col1 = self.color[idx[c1]];
                let col = [0, 1, 2].map(|ch| col0[ch] as f64 + f * (col1[ch] as f64 - col0[ch] as f64));
                // Key the vertex by its lower grid node and axis.
                let (lo, axis) = if g0 <= g1 { (g0, axis_of(g0, g1)) } else { (g1, axis_of(g1, g0)) };
                ((lo, axis), p0 + (p1 - p0) * f, col)
            });
            out.push(tri);
            t += 3;
        }
    }
}

type EdgeKey = ([usize; 3], u8);

fn axis_of(a: [usize; 3], b: [usize; 3]) -> u8 {
    (0..3).find(|&ax| a[ax] != b[ax]).unwrap_or(0) as u8
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Vector3<f64>; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                (b - a).cross(&(c - a)).norm() * 0.5
            })
            .sum()
    }

    /// `V - E + F` over the indexed mesh.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Validation(vec!["triangle index out of range".into()]));
        }
        if self.colors.as_ref().is_some_and(|c| c.len() != self.vertices.len()) {
            return Err(Error::Validation(vec!["vertex color count differs from vertex count".into()]));
        }
        Ok(())
    }
}

/// Render every camera's depth, fuse into a TSDF around the surfels and
/// extract the zero level set.
pub fn reconstruct_mesh(
    scene: &Scene,
    cameras: &[Camera],
    raster: &RasterConfig,
    config: &TsdfConfig,
) -> Result<TriangleMesh> {
    let centers = scene.world_centers();
    if centers.is_empty() || cameras.is_empty() {
        return Ok(TriangleMesh::default());
    }
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    for c in &centers {
        min = min.inf(c);
        max = max.sup(c);
    }
    let mut volume = TsdfVolume::from_bounds(&min, &max, config)?;
    for cam in cameras {
        let out = render(scene, cam, raster);
        volume.integrate_depth(&out.depth, Some(&out.color), &out.alpha, cam, config.alpha_threshold, raster.near, raster.far)?;
    }
    Ok(volume.extract_mesh())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn facing_camera(size: usize) -> Camera {
        let s = size as f64;
        Camera::look_at(
            Vector3::zeros(),
            Vector3::z(),
            -Vector3::y(),
            [s, s, s / 2.0, s / 2.0],
            size,
            size,
        )
    }

    fn plane_volume() -> TsdfVolume {
        TsdfVolume::new(Vector3::new(-0.5, -0.5, 1.0), [51, 51, 101], 0.02, 0.1)
    }

    #[test]
    fn plane_crossing_on_central_ray() {
        let cam = facing_camera(32);
        let mut vol = plane_volume();
        let depth = Grid::new(32, 32, 2.0);
        let alpha = Grid::new(32, 32, 1.0);
        vol.integrate_depth(&depth, None, &alpha, &cam, 0.5, 0.05, 100.0).unwrap();
        // Node (25, 25, k) lies on the optical axis at z = 1 + 0.02 k.
        let before = vol.tsdf[vol.index(25, 25, 49)];
        let after = vol.tsdf[vol.index(25, 25, 51)];
        assert!(before > 0.0 && after < 0.0);
        assert!(vol.tsdf[vol.index(25, 25, 50)].abs() < 1e-9);
    }

    #[test]
    fn repeated_integration_is_a_fixed_point() {
        let cam = facing_camera(32);
        let mut vol = plane_volume();
        let depth = Grid::new(32, 32, 1.7);
        let alpha = Grid::new(32, 32, 1.0);
        vol.integrate_depth(&depth, None, &alpha, &cam, 0.5, 0.05, 100.0).unwrap();
        let once = vol.clone();
        vol.integrate_depth(&depth, None, &alpha, &cam, 0.5, 0.05, 100.0).unwrap();
        assert_eq!(vol.tsdf, once.tsdf);
        for (a, b) in vol.weight.iter().zip(&once.weight) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn low_alpha_is_skipped() {
        let cam = facing_camera(16);
        let mut vol = plane_volume();
        vol.integrate_depth(&Grid::new(16, 16, 2.0), None, &Grid::new(16, 16, 0.4), &cam, 0.5, 0.05, 100.0).unwrap();
        assert!(vol.weight.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn two_views_of_a_plane() {
        // Plane z = 2 seen head-on and from an oblique camera.
        let size = 96;
        let s = size as f64;
        let cams = [
            facing_camera(size),
            Camera::look_at(Vector3::new(0.6, 0.0, 0.2), Vector3::new(-0.3, 0.0, 1.0), -Vector3::y(), [s, s, s / 2.0, s / 2.0], size, size),
        ];
        let mut vol = TsdfVolume::new(Vector3::new(-0.6, -0.6, 1.6), [61, 61, 41], 0.02, 0.1);
        for cam in &cams {
            let mut depth = Grid::new(size, size, 0.0);
            for y in 0..size {
                for x in 0..size {
                    let ray = cam.rotation.transpose() * cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                    let c = cam.center();
                    let t = (2.0 - c.z) / ray.z;
                    // Camera z of the hit equals t because the ray has unit camera z.
                    *depth.get_mut(x, y) = t;
                }
            }
            vol.integrate_depth(&depth, None, &Grid::new(size, size, 1.0), cam, 0.5, 0.05, 100.0).unwrap();
        }
        let mesh = vol.extract_mesh();
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            assert!((v.z - 2.0).abs() <= 0.01, "{}", v.z);
        }
    }

    fn analytic_volume(f: impl Fn(&Vector3<f64>) -> f64, dims: [usize; 3], origin: Vector3<f64>, vs: f64) -> TsdfVolume {
        let mut vol = TsdfVolume::new(origin, dims, vs, 1.0);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let id = vol.index(i, j, k);
                    vol.tsdf[id] = f(&vol.position(i, j, k)).clamp(-1.0, 1.0);
                    vol.weight[id] = 1.0;
                }
            }
        }
        vol
    }

    #[test]
    fn all_positive_is_empty() {
        let vol = analytic_volume(|_| 0.5, [5, 5, 5], Vector3::zeros(), 0.1);
        assert!(vol.extract_mesh().is_empty());
    }

    #[test]
    fn sphere_radius_and_topology() {
        let r = 0.37;
        let vs = 0.05;
        let vol = analytic_volume(|p| p.norm() - r, [21, 21, 21], Vector3::repeat(-0.5), vs);
        let mesh = vol.extract_mesh();
        mesh.validate().unwrap();
        assert!(mesh.triangles.len() > 100);
        for v in &mesh.vertices {
            assert!((v.norm() - r).abs() < vs, "{}", v.norm());
        }
        assert_eq!(mesh.euler_characteristic(), 2);
    }

    #[test]
    fn affine_field_is_exact() {
        let n = Vector3::new(0.3, -0.5, 0.8).normalize();
        let vs = 0.04;
        let vol = analytic_volume(|p| n.dot(p) - 0.11, [16, 16, 16], Vector3::repeat(-0.3), vs);
        let mesh = vol.extract_mesh();
        assert!(!mesh.is_empty());
        let lo = vol.origin;
        let hi = vol.max_corner();
        for v in &mesh.vertices {
            assert!((n.dot(v) - 0.11).abs() < 1e-6 * vs);
            assert!((0..3).all(|a| v[a] >= lo[a] - 1e-12 && v[a] <= hi[a] + 1e-12));
        }
    }

    #[test]
    fn unobserved_cells_are_skipped() {
        let mut vol = analytic_volume(|p| p.z - 0.2, [6, 6, 6], Vector3::zeros(), 0.1);
        vol.weight.iter_mut().for_each(|w| *w = 0.0);
        assert!(vol.extract_mesh().is_empty());
    }

    #[test]
    fn order_independent_integration() {
        let size = 24;
        let s = size as f64;
        let cams: Vec<Camera> = (0..3)
            .map(|i| {
                let x = i as f64 * 0.2 - 0.2;
                Camera::look_at(Vector3::new(x, 0.0, 0.0), Vector3::new(-x * 0.3, 0.0, 1.0), -Vector3::y(), [s, s, s / 2.0, s / 2.0], size, size)
            })
            .collect();
        let depths: Vec<Grid<f64>> = (0..3).map(|i| Grid::from_vec(size, size, (0..size * size).map(|j| 1.8 + 0.01 * ((j * (i + 3)) % 7) as f64).collect())).collect();
        let alpha = Grid::new(size, size, 1.0);
        let run = |order: &[usize]| {
            let mut vol = TsdfVolume::new(Vector3::new(-0.5, -0.5, 1.5), [26, 26, 26], 0.04, 0.2);
            for &i in order {
                vol.integrate_depth(&depths[i], None, &alpha, &cams[i], 0.5, 0.05, 100.0).unwrap();
            }
            vol
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        for (x, y) in a.tsdf.iter().zip(&b.tsdf) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a.weight, b.weight);
    }
}
