//! Forward surfel rasterization.
//!
//! Each surfel is a 2D Gaussian disk with homogeneous geometry
//! `H = [s_u t_u, s_v t_v, 0, p]`. For a pixel, the ray is the intersection
//! of the planes `(-1, 0, 0, x)` and `(0, -1, 0, y)`; pulling both planes
//! through `(W H)^T` gives the disk coordinates `(u, v)` in closed form.
//! Contributions are composited front to back per pixel, in tiles that run
//! in parallel against an immutable snapshot of the scene.

use nalgebra::{Matrix4, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::Grid;
use crate::scene::{Camera, Scene, Surfel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub near: f64,
    pub far: f64,
    pub tile_size: usize,
    /// Contributions `alpha * G` below this are skipped.
    pub alpha_cutoff: f64,
    /// Compositing stops once transmittance falls below this.
    pub transmittance_floor: f64,
    /// Screen-space low-pass radius in pixels.
    pub lowpass_sigma: f64,
    /// Pixels with accumulated alpha above this count as covered.
    pub alpha_valid_threshold: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            near: 0.05,
            far: 100.0,
            tile_size: 16,
            alpha_cutoff: 1.0 / 255.0,
            transmittance_floor: 1e-4,
            lowpass_sigma: 0.3,
            alpha_valid_threshold: 0.5,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(crate::Error::InvalidConfig(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.tile_size == 0 {
            return Err(crate::Error::InvalidConfig("tile_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Homogeneous geometry of one surfel seen from one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGeometry {
    /// Surfel frame `[s_u t_u, s_v t_v, 0, p]` with last row `(0, 0, 0, 1)`.
    pub h: Matrix4<f64>,
    /// `W · H`.
    pub m: Matrix4<f64>,
    /// Center lies outside `[near, far]`.
    pub culled: bool,
}

/// Builds the splat transform of a surfel whose world center is `center`.
pub fn build_splat_geometry(
    surfel: &Surfel,
    center: &Vector3<f64>,
    camera: &Camera,
    config: &RasterConfig,
) -> SplatGeometry {
    let r = surfel.rotation_matrix();
    let [su, sv] = surfel.scales();
    let mut h = Matrix4::zeros();
    h.fixed_view_mut::<3, 1>(0, 0).copy_from(&(r.column(0) * su));
    h.fixed_view_mut::<3, 1>(0, 1).copy_from(&(r.column(1) * sv));
    h.fixed_view_mut::<3, 1>(0, 3).copy_from(center);
    h[(3, 3)] = 1.0;
    let m = camera.world_to_screen() * h;
    let z = m[(2, 3)];
    SplatGeometry {
        h,
        m,
        culled: !(z >= config.near && z <= config.far),
    }
}

/// Intersection of a pixel ray with a splat plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intersection {
    pub u: f64,
    pub v: f64,
    /// Camera depth of the intersection point.
    pub z: f64,
}

/// Closed-form ray/splat intersection at pixel coordinates `(x, y)`.
///
/// Returns `None` when the ray is parallel to the splat plane or the hit lies
/// outside `[near, far]`.
pub fn ray_splat_intersect(m: &Matrix4<f64>, x: f64, y: f64, near: f64, far: f64) -> Option<Intersection> {
    // h_u = M^T (-1, 0, 0, x), h_v = M^T (0, -1, 0, y)
    let hu = [
        x * m[(3, 0)] - m[(0, 0)],
        x * m[(3, 1)] - m[(0, 1)],
        x * m[(3, 3)] - m[(0, 3)],
    ];
    let hv = [
        y * m[(3, 0)] - m[(1, 0)],
        y * m[(3, 1)] - m[(1, 1)],
        y * m[(3, 3)] - m[(1, 3)],
    ];
    let den = hu[0] * hv[1] - hu[1] * hv[0];
    if den.abs() < 1e-12 {
        return None;
    }
    let u = (hu[1] * hv[2] - hu[2] * hv[1]) / den;
    let v = (hu[2] * hv[0] - hu[0] * hv[2]) / den;
    let z = m[(2, 0)] * u + m[(2, 1)] * v + m[(2, 3)];
    if !(z >= near && z <= far) {
        return None;
    }
    Some(Intersection { u, v, z })
}

/// Object-space Gaussian with a screen-space low-pass floor.
#[inline]
pub fn gaussian_weight(u: f64, v: f64, screen_dist_sq: f64, lowpass_sigma: f64) -> f64 {
    let q3 = (u * u + v * v) / 2.0;
    let q2 = screen_dist_sq / (2.0 * lowpass_sigma * lowpass_sigma);
    (-q3.min(q2)).exp()
}

/// Rendered maps of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Grid<[f64; 3]>,
    /// Expected camera depth; zero where nothing was hit.
    pub depth: Grid<f64>,
    /// Camera-space unit normals; zero where nothing was hit.
    pub normal: Grid<[f64; 3]>,
    pub alpha: Grid<f64>,
}

impl RenderOutput {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            color: Grid::new(width, height, [0.0; 3]),
            depth: Grid::new(width, height, 0.0),
            normal: Grid::new(width, height, [0.0; 3]),
            alpha: Grid::new(width, height, 0.0),
        }
    }

    pub fn width(&self) -> usize {
        self.alpha.width
    }

    pub fn height(&self) -> usize {
        self.alpha.height
    }
}

/// Per-camera state of one visible surfel.
#[derive(Clone, Debug)]
pub(crate) struct ProjectedSplat {
    pub surfel: usize,
    pub m: Matrix4<f64>,
    /// Camera-space center, `s_u t_u` and `s_v t_v`.
    pub pc: Vector3<f64>,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    /// Camera-space normal, flipped to face the camera.
    pub normal: Vector3<f64>,
    /// `+1` or `-1`: sign applied to `R t_w` to get `normal`.
    pub flip: f64,
    pub opacity: f64,
    /// Exponent `ln(opacity / alpha_cutoff)` past which the weight is cut.
    pub q_max: f64,
    pub color: [f64; 3],
    /// Projected center in pixels.
    pub center: (f64, f64),
    /// Inclusive pixel bounds `[x0, x1] × [y0, y1]`.
    pub bbox: [i64; 4],
}

/// Visible splats plus, for every tile, the depth-sorted indices into them.
pub(crate) struct Binning {
    pub splats: Vec<ProjectedSplat>,
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub tile_size: usize,
}

/// One non-skipped contribution to a pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    pub splat: u32,
    /// Position in the tile list.
    pub slot: u32,
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub g: f64,
    /// Weight came from the screen-space floor rather than the disk.
    pub lowpass: bool,
    pub w: f64,
    /// Transmittance in front of this splat.
    pub t: f64,
}

pub(crate) fn project_surfels(scene: &Scene, camera: &Camera, config: &RasterConfig) -> Vec<ProjectedSplat> {
    let w2s = camera.world_to_screen();
    let (w, h) = (camera.width as f64, camera.height as f64);
    let frustum = FrustumPlanes::new(camera, config.lowpass_sigma * 4.0 + 1.0);
    let mut out: Vec<ProjectedSplat> = scene
        .surfels
        .par_iter()
        .enumerate()
        .filter_map(|(id, s)| {
            let seed = &scene.seeds[s.seed_id];
            if !seed.active {
                return None;
            }
            let center = seed.anchor + s.offset;
            let pc = camera.to_camera(&center);
            if !(pc.z >= config.near && pc.z <= config.far) {
                return None;
            }
            let opacity = s.opacity();
            if opacity < config.alpha_cutoff {
                return None;
            }
            // Beyond this radius the contribution falls under the cutoff.
            let cut = (2.0 * (opacity / config.alpha_cutoff).ln()).sqrt();
            let [su, sv] = s.scales();
            if frustum.excludes(&pc, cut * su.max(sv), config.near) {
                return None;
            }
            let r = s.rotation_matrix();
            let a = camera.rotation * r.column(0) * su;
            let b = camera.rotation * r.column(1) * sv;
            let tw = camera.rotation * r.column(2);
            let flip = if tw.dot(&pc) > 0.0 { -1.0 } else { 1.0 };
            let mut world_h = Matrix4::zeros();
            world_h.fixed_view_mut::<3, 1>(0, 0).copy_from(&(r.column(0) * su));
            world_h.fixed_view_mut::<3, 1>(0, 1).copy_from(&(r.column(1) * sv));
            world_h.fixed_view_mut::<3, 1>(0, 3).copy_from(&center);
            world_h[(3, 3)] = 1.0;
            let m = w2s * world_h;
            let center_px = camera.project_camera(&pc);

            let lp = config.lowpass_sigma * cut;
            let mut bx = [center_px.0 - lp, center_px.0 + lp];
            let mut by = [center_px.1 - lp, center_px.1 + lp];
            let (ex, ey) = ellipse_bounds(&m, cut).unwrap_or_else(|| clipped_disk_bounds(camera, &pc, &a, &b, cut, config.near));
            bx = [bx[0].min(ex[0]), bx[1].max(ex[1])];
            by = [by[0].min(ey[0]), by[1].max(ey[1])];
            let bbox = [
                (bx[0] - 0.5).ceil().max(0.0) as i64,
                (bx[1] - 0.5).floor().min(w - 1.0) as i64,
                (by[0] - 0.5).ceil().max(0.0) as i64,
                (by[1] - 0.5).floor().min(h - 1.0) as i64,
            ];
            if bbox[0] > bbox[1] || bbox[2] > bbox[3] {
                return None;
            }
            Some(ProjectedSplat {
                surfel: id,
                m,
                pc,
                a,
                b,
                normal: tw * flip,
                flip,
                opacity,
                q_max: (opacity / config.alpha_cutoff).ln(),
                color: s.color(),
                center: center_px,
                bbox,
            })
        })
        .collect();
    out.sort_by(|p, q| p.pc.z.total_cmp(&q.pc.z).then(p.surfel.cmp(&q.surfel)));
    out
}

/// Inward unit normals of the four side planes of the view frustum, widened
/// by `margin` pixels.
struct FrustumPlanes([Vector3<f64>; 4]);

impl FrustumPlanes {
    fn new(camera: &Camera, margin: f64) -> Self {
        let (w, h) = (camera.width as f64, camera.height as f64);
        let planes = [
            Vector3::new(camera.fx, 0.0, camera.cx + margin),
            Vector3::new(-camera.fx, 0.0, w - camera.cx + margin),
            Vector3::new(0.0, camera.fy, camera.cy + margin),
            Vector3::new(0.0, -camera.fy, h - camera.cy + margin),
        ];
        Self(planes.map(|p| p.normalize()))
    }

    /// Whether a sphere lies entirely outside the frustum or before `near`.
    fn excludes(&self, pc: &Vector3<f64>, radius: f64, near: f64) -> bool {
        pc.z + radius < near || self.0.iter().any(|n| n.dot(pc) < -radius)
    }
}

/// Screen bounds of the part of the disk `|(u, v)| ≤ r` in front of `near`,
/// from a circumscribed polygon clipped against that plane.
fn clipped_disk_bounds(
    camera: &Camera,
    pc: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    r: f64,
    near: f64,
) -> ([f64; 2], [f64; 2]) {
    const SIDES: usize = 16;
    let radius = r / (std::f64::consts::PI / SIDES as f64).cos();
    let ring: Vec<Vector3<f64>> = (0..SIDES)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / SIDES as f64;
            pc + a * (radius * th.cos()) + b * (radius * th.sin())
        })
        .collect();
    let mut bx = [f64::INFINITY, f64::NEG_INFINITY];
    let mut by = [f64::INFINITY, f64::NEG_INFINITY];
    let mut add = |p: &Vector3<f64>| {
        let (x, y) = camera.project_camera(p);
        bx = [bx[0].min(x), bx[1].max(x)];
        by = [by[0].min(y), by[1].max(y)];
    };
    for k in 0..SIDES {
        let (p, q) = (&ring[k], &ring[(k + 1) % SIDES]);
        if p.z >= near {
            add(p);
        }
        if (p.z >= near) != (q.z >= near) {
            let t = (near - p.z) / (q.z - p.z);
            let mut x = p + (q - p) * t;
            x.z = near;
            add(&x);
        }
    }
    (bx, by)
}

/// Screen bounding box of the projected disk `u² + v² ≤ r²`, from the dual
/// conic of the homography. `None` if the disk reaches the camera plane.
fn ellipse_bounds(m: &Matrix4<f64>, r: f64) -> Option<([f64; 2], [f64; 2])> {
    let row = |i: usize| [m[(i, 0)] * r, m[(i, 1)] * r, m[(i, 3)]];
    let dual = |p: [f64; 3], q: [f64; 3]| p[0] * q[0] + p[1] * q[1] - p[2] * q[2];
    let (t0, t1, t3) = (row(0), row(1), row(3));
    let ww = dual(t3, t3);
    if ww >= 0.0 {
        return None;
    }
    let solve = |t: [f64; 3]| {
        let xw = dual(t, t3);
        let xx = dual(t, t);
        let disc = (xw * xw - xx * ww).max(0.0).sqrt();
        let c1 = (xw + disc) / ww;
        let c2 = (xw - disc) / ww;
        [c1.min(c2), c1.max(c2)]
    };
    Some((solve(t0), solve(t1)))
}

pub(crate) fn bin_splats(splats: Vec<ProjectedSplat>, camera: &Camera, config: &RasterConfig) -> Binning {
    let ts = config.tile_size;
    let tiles_x = camera.width.div_ceil(ts);
    let tiles_y = camera.height.div_ceil(ts);
    let tiles: Vec<Vec<u32>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let x0 = ((t % tiles_x) * ts) as i64;
            let y0 = ((t / tiles_x) * ts) as i64;
            let x1 = x0 + ts as i64 - 1;
            let y1 = y0 + ts as i64 - 1;
            splats
                .iter()
                .enumerate()
                .filter(|(_, s)| s.bbox[0] <= x1 && s.bbox[1] >= x0 && s.bbox[2] <= y1 && s.bbox[3] >= y0)
                .map(|(i, _)| i as u32)
                .collect()
        })
        .collect();
    Binning {
        splats,
        tiles,
        tiles_x,
        tile_size: ts,
    }
}

pub(crate) fn prepare(scene: &Scene, camera: &Camera, config: &RasterConfig) -> Binning {
    bin_splats(project_surfels(scene, camera, config), camera, config)
}

/// A tile-list entry whose box covers the current pixel row.
#[derive(Clone, Copy)]
pub(crate) struct RowEntry {
    slot: u32,
    splat: u32,
    x0: i64,
    x1: i64,
}

/// Entries of a tile list whose boxes cover row `py`, in list order.
pub(crate) fn row_entries(splats: &[ProjectedSplat], list: &[u32], py: usize, out: &mut Vec<RowEntry>) {
    let y = py as i64;
    out.clear();
    out.extend(list.iter().enumerate().filter_map(|(slot, &idx)| {
        let b = &splats[idx as usize].bbox;
        (b[2] <= y && y <= b[3]).then_some(RowEntry {
            slot: slot as u32,
            splat: idx,
            x0: b[0],
            x1: b[1],
        })
    }));
}

/// Walks one pixel's depth-sorted splat list, calling `visit` for every
/// contribution. Returns the final transmittance.
#[inline]
pub(crate) fn composite_pixel(
    splats: &[ProjectedSplat],
    row: &[RowEntry],
    px: usize,
    py: usize,
    config: &RasterConfig,
    mut visit: impl FnMut(&ProjectedSplat, &Contribution),
) -> f64 {
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let pxi = px as i64;
    let mut t = 1.0;
    let inv_2s2 = 1.0 / (2.0 * config.lowpass_sigma * config.lowpass_sigma);
    for e in row {
        if pxi < e.x0 || pxi > e.x1 {
            continue;
        }
        let (slot, idx) = (e.slot, e.splat);
        let s = &splats[idx as usize];
        let Some(hit) = ray_splat_intersect(&s.m, x, y, config.near, config.far) else {
            continue;
        };
        let dx = x - s.center.0;
        let dy = y - s.center.1;
        let q2 = (dx * dx + dy * dy) * inv_2s2;
        let q3 = (hit.u * hit.u + hit.v * hit.v) / 2.0;
        let q = q3.min(q2);
        // Cheap rejection well before the exact cutoff test.
        if q > s.q_max + 1e-9 {
            continue;
        }
        let g = (-q).exp();
        let w = s.opacity * g;
        if w < config.alpha_cutoff {
            continue;
        }
        visit(
            s,
            &Contribution {
                splat: idx,
                slot,
                u: hit.u,
                v: hit.v,
                z: hit.z,
                g,
                lowpass: q2 < q3,
                w,
                t,
            },
        );
        t *= 1.0 - w;
        if t < config.transmittance_floor {
            break;
        }
    }
    t
}

/// Per-pixel accumulators before normalization.
#[derive(Clone, Copy, Default)]
pub(crate) struct PixelSums {
    pub color: [f64; 3],
    pub depth: f64,
    pub normal: [f64; 3],
    pub t_final: f64,
}

pub(crate) fn pixel_sums(binning: &Binning, row: &[RowEntry], px: usize, py: usize, config: &RasterConfig) -> PixelSums {
    let mut acc = PixelSums::default();
    acc.t_final = composite_pixel(&binning.splats, row, px, py, config, |s, c| {
        let wt = c.w * c.t;
        for k in 0..3 {
            acc.color[k] += s.color[k] * wt;
            acc.normal[k] += s.normal[k] * wt;
        }
        acc.depth += c.z * wt;
    });
    acc
}

/// Renders color, expected depth, normal and alpha maps.
pub fn render(scene: &Scene, camera: &Camera, config: &RasterConfig) -> RenderOutput {
    render_keep_binning(scene, camera, config).0
}

/// Renders and keeps the binning so a backward pass can reuse it.
pub(crate) fn render_keep_binning(scene: &Scene, camera: &Camera, config: &RasterConfig) -> (RenderOutput, Binning) {
    let binning = prepare(scene, camera, config);
    (render_binned(&binning, camera, config), binning)
}

pub(crate) fn render_binned(binning: &Binning, camera: &Camera, config: &RasterConfig) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let ts = binning.tile_size;
    let tiles: Vec<Vec<(usize, PixelSums)>> = binning
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let x0 = (t % binning.tiles_x) * ts;
            let y0 = (t / binning.tiles_x) * ts;
            let mut out = Vec::with_capacity(ts * ts);
            let mut row = Vec::new();
            for py in y0..(y0 + ts).min(h) {
                row_entries(&binning.splats, list, py, &mut row);
                for px in x0..(x0 + ts).min(w) {
                    out.push((py * w + px, pixel_sums(binning, &row, px, py, config)));
                }
            }
            out
        })
        .collect();
    let mut out = RenderOutput::empty(w, h);
    for tile in tiles {
        for (i, s) in tile {
            let alpha = 1.0 - s.t_final;
            out.color.data[i] = s.color;
            out.alpha.data[i] = alpha;
            if alpha > 0.0 {
                out.depth.data[i] = s.depth / alpha;
                let n = Vector3::from(s.normal);
                let len = n.norm();
                if len > 0.0 {
                    out.normal.data[i] = (n / len).into();
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{logit, quat_from_z_to};
    use crate::scene::{SeedConfig, SeedPoint};

    pub(crate) fn camera(size: usize) -> Camera {
        let f = size as f64;
        Camera::look_at(
            Vector3::zeros(),
            Vector3::z(),
            -Vector3::y(),
            [f, f, f / 2.0, f / 2.0],
            size,
            size,
        )
    }

    fn scene_with(surfels: Vec<(Vector3<f64>, Vector3<f64>, f64, f64, [f64; 3])>) -> Scene {
        // (center, normal, scale, opacity, color)
        let mut scene = Scene::empty(SeedConfig {
            k: 1,
            ..Default::default()
        });
        for (i, (c, n, s, a, col)) in surfels.into_iter().enumerate() {
            scene.seeds.push(SeedPoint {
                anchor: c,
                level: 0,
                key: [i as i64, 0, 0],
                grad_accum: 0.0,
                grad_count: 0,
                opacity_accum: 0.0,
                opacity_count: 0,
                surfel_ids: vec![i],
                active: true,
            });
            scene.surfels.push(Surfel {
                offset: Vector3::zeros(),
                rotation: quat_from_z_to(&n.normalize()),
                log_scale: [s.ln(); 2],
                raw_opacity: logit(a),
                raw_color: col.map(logit),
                seed_id: i,
            });
        }
        scene
    }

    #[test]
    fn identity_frame_geometry() {
        let scene = scene_with(vec![(Vector3::zeros(), Vector3::z(), 1.0, 0.5, [0.5; 3])]);
        let cam = camera(100);
        let g = build_splat_geometry(&scene.surfels[0], &Vector3::zeros(), &cam, &RasterConfig::default());
        let expected = Matrix4::new(
            1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        );
        assert!((g.h - expected).norm() < 1e-12);
        assert_eq!(g.h.row(3), nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        assert!(g.culled, "center at the camera is behind the near plane");
    }

    #[test]
    fn on_axis_center_projects_to_principal_point() {
        let cam = camera(100);
        let c = Vector3::new(0.0, 0.0, 5.0);
        let scene = scene_with(vec![(c, -Vector3::z(), 0.1, 0.5, [0.5; 3])]);
        let g = build_splat_geometry(&scene.surfels[0], &c, &cam, &RasterConfig::default());
        let x = g.m * nalgebra::Vector4::new(0.0, 0.0, 1.0, 1.0);
        assert!((x[0] / x[3] - 50.0).abs() < 1e-12);
        assert!((x[1] / x[3] - 50.0).abs() < 1e-12);
        assert!(!g.culled);
    }

    #[test]
    fn central_ray_hits_disk_center() {
        let cam = camera(100);
        let c = Vector3::new(0.0, 0.0, 5.0);
        let scene = scene_with(vec![(c, -Vector3::z(), 0.2, 0.5, [0.5; 3])]);
        let g = build_splat_geometry(&scene.surfels[0], &c, &cam, &RasterConfig::default());
        let hit = ray_splat_intersect(&g.m, 50.0, 50.0, 0.01, 100.0).unwrap();
        assert!(hit.u.abs() < 1e-12 && hit.v.abs() < 1e-12);
        assert!((hit.z - 5.0).abs() < 1e-12);
        // The pixel whose ray passes through center + s_u t_u.
        let tu = scene.surfels[0].rotation_matrix().column(0) * 0.2;
        let p = c + tu;
        let (x, y) = cam.project_camera(&p);
        let hit = ray_splat_intersect(&g.m, x, y, 0.01, 100.0).unwrap();
        assert!((hit.u - 1.0).abs() < 1e-6 && hit.v.abs() < 1e-6, "{hit:?}");
    }

    #[test]
    fn parallel_ray_misses() {
        let cam = camera(100);
        let c = Vector3::new(0.0, 0.0, 5.0);
        // Normal along x: the plane contains the optical axis.
        let scene = scene_with(vec![(c, Vector3::x(), 0.2, 0.5, [0.5; 3])]);
        let g = build_splat_geometry(&scene.surfels[0], &c, &cam, &RasterConfig::default());
        assert!(ray_splat_intersect(&g.m, 50.0, 50.0, 0.01, 100.0).is_none());
    }

    #[test]
    fn gaussian_weight_branches() {
        assert_eq!(gaussian_weight(0.0, 0.0, 123.0, 0.3), 1.0);
        assert!((gaussian_weight(1.0, 1.0, 1e6, 0.3) - (-1.0f64).exp()).abs() < 1e-15);
        // Needle seen edge-on: huge (u, v), pixel 0.3 px from the center.
        let w = gaussian_weight(50.0, 0.0, 0.09, 0.3);
        assert!(w >= (-0.5f64).exp() - 1e-15);
        assert!((w - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn single_opaque_splat() {
        let cam = camera(16);
        let c = Vector3::new(0.0, 0.0, 2.0);
        let scene = scene_with(vec![(c, Vector3::z(), 0.5, 0.0, [0.2, 0.4, 0.6])]);
        let mut scene = scene;
        scene.surfels[0].raw_opacity = 10.0;
        let out = render(&scene, &cam, &RasterConfig::default());
        let i = out.alpha.index(8, 8);
        // Pixel (8, 8) center is (8.5, 8.5): u, v ≈ 0.125 → G ≈ 0.98.
        let hit_g = (-(2.0 * (0.5 / 16.0 * 2.0 / 0.5f64).powi(2)) / 2.0).exp();
        let a = crate::math::sigmoid(10.0) * hit_g;
        assert!(out.alpha.data[i] >= 0.97);
        assert!((out.alpha.data[i] - a).abs() < 1e-9);
        for k in 0..3 {
            assert!((out.color.data[i][k] - [0.2, 0.4, 0.6][k] * a).abs() < 1e-9);
        }
        assert!((out.depth.data[i] - 2.0).abs() < 1e-12);
        let n = out.normal.data[i];
        assert!((n[2] + 1.0).abs() < 1e-12 && n[0].abs() < 1e-12, "flipped toward the camera: {n:?}");
    }

    #[test]
    fn two_stacked_splats() {
        let cam = camera(8);
        // Huge disks so G = 1 to within rounding at the pixel.
        let mut scene = scene_with(vec![
            (Vector3::new(0.0, 0.0, 2.0), -Vector3::z(), 1e4, 0.5, [0.9999, 1e-9, 1e-9]),
            (Vector3::new(0.0, 0.0, 3.0), -Vector3::z(), 1e4, 0.5, [1e-9, 1e-9, 0.9999]),
        ]);
        scene.surfels[1].raw_opacity = 60.0;
        scene.surfels[0].raw_color = [60.0, -60.0, -60.0];
        scene.surfels[1].raw_color = [-60.0, -60.0, 60.0];
        let out = render(&scene, &cam, &RasterConfig::default());
        let i = out.alpha.index(4, 4);
        let c = out.color.data[i];
        assert!((c[0] - 0.5).abs() < 1e-9 && (c[2] - 0.5).abs() < 1e-9 && c[1].abs() < 1e-9);
        assert!((out.alpha.data[i] - 1.0).abs() < 1e-9);
        assert!((out.depth.data[i] - 2.5).abs() < 1e-9);
    }

    #[test]
    fn empty_frustum_renders_transparent() {
        let cam = camera(8);
        let scene = scene_with(vec![(Vector3::new(0.0, 0.0, -2.0), Vector3::z(), 0.5, 0.9, [0.5; 3])]);
        let out = render(&scene, &cam, &RasterConfig::default());
        assert!(out.alpha.data.iter().all(|&a| a == 0.0));
        assert!(out.normal.data.iter().all(|n| *n == [0.0; 3]));
    }
}
