//! Multi-view geometric and photometric consistency.
//!
//! A reference pixel's rendered depth and normal define a local plane. The
//! plane-induced homography maps the pixel into a neighbor view, where the
//! neighbor's own rendered plane maps it back; the round-trip error is the
//! geometric term. The photometric term compares grayscale patches of the two
//! input images through the same homography with normalized
//! cross-correlation.
//!
//! Gradients flow into the sampled depths and normals. The nearest neighbor
//! pixel used for the backward homography is held fixed.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradients::OutputGrads;
use crate::grid::{grayscale, Grid};
use crate::rasterizer::RenderOutput;
use crate::scene::Camera;

use super::{LossWeights, MvConfig};

/// Rendered maps must exceed this alpha to define a plane.
const ALPHA_VALID: f64 = 0.5;
/// Patch variance (sum of squared deviations) below which NCC is undefined.
const MIN_PATCH_VAR: f64 = 1e-12;
const MIN_PLANE_DIST: f64 = 1e-8;

/// `H = K_n (R - T nᵀ / D) K_r⁻¹` for the plane through the back-projection
/// of `pixel` at `depth` with camera-space `normal`, where `D = -n·X`.
/// Normalized so that `H[2,2] = 1` when that entry is nonzero.
pub fn plane_homography(
    k_r: &Matrix3<f64>,
    k_n: &Matrix3<f64>,
    r_rn: &Matrix3<f64>,
    t_rn: &Vector3<f64>,
    normal: &Vector3<f64>,
    depth: f64,
    pixel: (f64, f64),
) -> Result<Matrix3<f64>> {
    let mut n = *normal;
    if n.z > 0.0 {
        n = -n;
    }
    let k_r_inv = k_r.try_inverse().ok_or(Error::DegeneratePlane)?;
    let ray = k_r_inv * Vector3::new(pixel.0, pixel.1, 1.0);
    let x = ray * depth;
    let d = -n.dot(&x);
    if d.abs() < MIN_PLANE_DIST || !d.is_finite() {
        return Err(Error::DegeneratePlane);
    }
    let mut h = k_n * (r_rn - t_rn * n.transpose() / d) * k_r_inv;
    let s = h[(2, 2)];
    if s != 0.0 {
        h /= s;
    }
    Ok(h)
}

/// Normalized cross-correlation of two equally sized patches, clamped to
/// `[-1, 1]`; `None` when either patch has no variance.
pub fn ncc(a: &[f64], b: &[f64]) -> Option<f64> {
    ncc_parts(a, b).map(|p| p.value)
}

struct NccParts {
    value: f64,
    /// d(ncc)/d(b).
    grad_b: Vec<f64>,
}

fn ncc_parts(a: &[f64], b: &[f64]) -> Option<NccParts> {
    let n = a.len() as f64;
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa < MIN_PATCH_VAR || sbb < MIN_PATCH_VAR {
        return None;
    }
    let denom = (saa * sbb).sqrt();
    let value = sab / denom;
    let grad_b = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) / denom - value * (y - mb) / sbb)
        .collect();
    Some(NccParts {
        value: value.clamp(-1.0, 1.0),
        grad_b,
    })
}

/// The training view nearest to `index` whose viewing direction is within
/// `max_angle_deg` of it.
pub fn select_neighbor(cameras: &[Camera], index: usize, max_angle_deg: f64) -> Option<usize> {
    let me = &cameras[index];
    let cos_max = max_angle_deg.to_radians().cos();
    let (c, f) = (me.center(), me.forward());
    cameras
        .iter()
        .enumerate()
        .filter(|(j, cam)| *j != index && cam.forward().dot(&f) > cos_max)
        .map(|(j, cam)| (j, (cam.center() - c).norm()))
        .filter(|(_, d)| *d > 0.0)
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(j, _)| j)
}

/// One view taking part in the consistency loss.
#[derive(Clone, Copy)]
pub struct MvView<'a> {
    pub camera: &'a Camera,
    pub render: &'a RenderOutput,
    pub image: &'a Grid<[f64; 3]>,
}

#[derive(Clone, Copy)]
pub struct MvInputs<'a> {
    pub reference: MvView<'a>,
    pub neighbor: MvView<'a>,
}

pub struct MvLoss {
    /// `lambda_geo · geo + lambda_pho · pho`.
    pub value: f64,
    pub geo: f64,
    pub pho: f64,
    /// Pixels in the forward-backward consistent set.
    pub consistent: usize,
    /// Consistent pixels that also had a valid NCC.
    pub photometric: usize,
    /// Gradient with respect to the reference render (depth and normal only).
    pub grad_reference: OutputGrads,
    /// Gradient with respect to the neighbor render (depth and normal only).
    pub grad_neighbor: OutputGrads,
}

impl MvLoss {
    /// True when no pixel passed the consistency filter.
    pub fn is_empty(&self) -> bool {
        self.consistent == 0
    }
}

/// `m = n / (n·X)`: the plane `{Y : m·Y = 1}`. Invariant to the scale and
/// sign of `n`.
fn plane_vector(normal: &Vector3<f64>, depth: f64, ray: &Vector3<f64>) -> Option<Vector3<f64>> {
    let s = normal.dot(ray);
    let c = depth * s;
    (depth > 0.0 && c.abs() >= MIN_PLANE_DIST).then(|| normal / c)
}

/// Pull `g_m` back to the depth and normal that produced `m`.
fn plane_vector_backward(
    normal: &Vector3<f64>,
    depth: f64,
    ray: &Vector3<f64>,
    m: &Vector3<f64>,
    g_m: &Vector3<f64>,
) -> (f64, Vector3<f64>) {
    let s = normal.dot(ray);
    let g_d = -m.dot(g_m) / depth;
    let g_n = (g_m - ray * (normal.dot(g_m) / s)) / (depth * s);
    (g_d, g_n)
}

/// Perspective division and its Jacobian.
fn dehom(w: &Vector3<f64>) -> (Vector2<f64>, Matrix2x3<f64>) {
    let iz = 1.0 / w.z;
    let p = Vector2::new(w.x * iz, w.y * iz);
    let j = Matrix2x3::new(iz, 0.0, -p.x * iz, 0.0, iz, -p.y * iz);
    (p, j)
}

/// Bilinear sample at a continuous pixel coordinate (centers at +0.5).
/// Returns the value and its spatial gradient, or `None` outside the grid.
fn bilinear(img: &Grid<f64>, p: &Vector2<f64>) -> Option<(f64, Vector2<f64>)> {
    let (fx, fy) = (p.x - 0.5, p.y - 0.5);
    let (w, h) = (img.width as f64, img.height as f64);
    if !(fx >= 0.0 && fy >= 0.0 && fx <= w - 1.0 && fy <= h - 1.0) {
        return None;
    }
    let x0 = (fx.floor() as usize).min(img.width.saturating_sub(2));
    let y0 = (fy.floor() as usize).min(img.height.saturating_sub(2));
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    let v00 = *img.get(x0, y0);
    let v10 = *img.get(x1, y0);
    let v01 = *img.get(x0, y1);
    let v11 = *img.get(x1, y1);
    let top = v00 + ax * (v10 - v00);
    let bot = v01 + ax * (v11 - v01);
    let value = top + ay * (bot - top);
    let gx = (1.0 - ay) * (v10 - v00) + ay * (v11 - v01);
    let gy = bot - top;
    Some((value, Vector2::new(gx, gy)))
}

/// Per-sample contribution, reduced in sample order.
#[derive(Default)]
struct Sample {
    geo: Option<f64>,
    pho: Option<f64>,
    /// (pixel index, d/d depth, d/d normal) before mean normalization.
    geo_ref: Option<(usize, f64, Vector3<f64>)>,
    geo_nbr: Option<(usize, f64, Vector3<f64>)>,
    pho_ref: Option<(usize, f64, Vector3<f64>)>,
}

struct Geometry {
    k_r: Matrix3<f64>,
    k_n: Matrix3<f64>,
    k_r_inv: Matrix3<f64>,
    k_n_inv: Matrix3<f64>,
    r_rn: Matrix3<f64>,
    t_rn: Vector3<f64>,
    r_nr: Matrix3<f64>,
    t_nr: Vector3<f64>,
}

impl Geometry {
    fn new(r: &Camera, n: &Camera) -> Self {
        let r_rn = n.rotation * r.rotation.transpose();
        let t_rn = n.translation - r_rn * r.translation;
        let r_nr = r_rn.transpose();
        Self {
            k_r: r.intrinsics(),
            k_n: n.intrinsics(),
            k_r_inv: r.intrinsics_inv(),
            k_n_inv: n.intrinsics_inv(),
            r_rn,
            t_rn,
            t_nr: -(r_nr * t_rn),
            r_nr,
        }
    }
}

fn vec3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn sample_pixel(
    inputs: &MvInputs,
    geo: &Geometry,
    gray_r: &Grid<f64>,
    gray_n: &Grid<f64>,
    config: &MvConfig,
    px: usize,
    py: usize,
) -> Sample {
    let mut out = Sample::default();
    let rr = inputs.reference.render;
    let rn = inputs.neighbor.render;
    let ip = rr.alpha.index(px, py);
    if rr.alpha.data[ip] <= ALPHA_VALID {
        return out;
    }
    let d_r = rr.depth.data[ip];
    let n_r = vec3(&rr.normal.data[ip]);
    let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
    let ray_p = geo.k_r_inv * Vector3::new(p.x, p.y, 1.0);
    let Some(m_r) = plane_vector(&n_r, d_r, &ray_p) else {
        return out;
    };

    // Forward: the plane point seen from the neighbor.
    let w1 = geo.k_n * (geo.r_rn * ray_p + geo.t_rn * m_r.dot(&ray_p));
    if w1.z <= 0.0 {
        return out;
    }
    let (p1, j1) = dehom(&w1);
    let (wn, hn) = (rn.width() as f64, rn.height() as f64);
    if !(p1.x >= 0.0 && p1.y >= 0.0 && p1.x < wn && p1.y < hn) {
        return out;
    }
    let (qx, qy) = (p1.x.floor() as usize, p1.y.floor() as usize);
    let iq = rn.alpha.index(qx, qy);
    if rn.alpha.data[iq] <= ALPHA_VALID {
        return out;
    }
    let d_n = rn.depth.data[iq];
    let n_n = vec3(&rn.normal.data[iq]);
    let ray_q = geo.k_n_inv * Vector3::new(qx as f64 + 0.5, qy as f64 + 0.5, 1.0);
    let Some(m_n) = plane_vector(&n_n, d_n, &ray_q) else {
        return out;
    };

    // Backward: the neighbor's plane maps the forward point home.
    let ray1 = geo.k_n_inv * Vector3::new(p1.x, p1.y, 1.0);
    let w2 = geo.k_r * (geo.r_nr * ray1 + geo.t_nr * m_n.dot(&ray1));
    if w2.z <= 0.0 {
        return out;
    }
    let (p2, j2) = dehom(&w2);
    let diff = p2 - p;
    let phi = diff.norm();
    if !(phi < config.tau_geo) {
        return out;
    }
    out.geo = Some(phi);
    if phi > 0.0 {
        let g_p2 = diff / phi;
        let g_w2 = j2.transpose() * g_p2;
        let g_mn = ray1 * geo.t_nr.dot(&(geo.k_r.transpose() * g_w2));
        let a2 = geo.k_r * (geo.r_nr + geo.t_nr * m_n.transpose());
        let g_ray1 = a2.transpose() * g_w2;
        let g_p1 = (geo.k_n_inv.transpose() * g_ray1).xy();
        let g_w1 = j1.transpose() * g_p1;
        // w1 depends on the reference plane only through m_r·ray_p = 1/d_r.
        let g_mr = ray_p * geo.t_rn.dot(&(geo.k_n.transpose() * g_w1));
        let (gd, gn) = plane_vector_backward(&n_r, d_r, &ray_p, &m_r, &g_mr);
        out.geo_ref = Some((ip, gd, gn));
        let (gd, gn) = plane_vector_backward(&n_n, d_n, &ray_q, &m_n, &g_mn);
        out.geo_nbr = Some((iq, gd, gn));
    }

    // Photometric: reference patch against the warped neighbor patch.
    let r = config.patch_radius as isize;
    let (wr, hr) = (gray_r.width as isize, gray_r.height as isize);
    let (cx, cy) = (px as isize, py as isize);
    if cx - r < 0 || cy - r < 0 || cx + r >= wr || cy + r >= hr {
        return out;
    }
    let side = (2 * r + 1) as usize;
    let mut a = Vec::with_capacity(side * side);
    let mut b = Vec::with_capacity(side * side);
    // Per patch sample: d(b)/d(m_r).
    let mut db_dm = Vec::with_capacity(side * side);
    let kt = geo.k_n * geo.t_rn;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx + dx, cy + dy);
            a.push(*gray_r.get(x as usize, y as usize));
            let ray = geo.k_r_inv * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
            let w = geo.k_n * (geo.r_rn * ray) + kt * m_r.dot(&ray);
            if w.z <= 0.0 {
                return out;
            }
            let (q, jq) = dehom(&w);
            let Some((val, grad)) = bilinear(gray_n, &q) else {
                return out;
            };
            b.push(val);
            // b = G(dehom(w)), w = ... + kt (m·ray)
            let g_w = jq.transpose() * grad;
            db_dm.push(ray * kt.dot(&g_w));
        }
    }
    let Some(parts) = ncc_parts(&a, &b) else {
        return out;
    };
    out.pho = Some(1.0 - parts.value);
    let mut g_mr = Vector3::zeros();
    for (g, dm) in parts.grad_b.iter().zip(&db_dm) {
        g_mr -= dm * *g;
    }
    let (gd, gn) = plane_vector_backward(&n_r, d_r, &ray_p, &m_r, &g_mr);
    out.pho_ref = Some((ip, gd, gn));
    out
}

fn add_grad(target: &mut OutputGrads, entry: Option<(usize, f64, Vector3<f64>)>, scale: f64) {
    if let Some((i, gd, gn)) = entry {
        target.depth.data[i] += scale * gd;
        for k in 0..3 {
            target.normal.data[i][k] += scale * gn[k];
        }
    }
}

/// `lambda_geo · L_geo + lambda_pho · L_pho` for one reference/neighbor pair,
/// sampled on a stride grid of the reference view.
pub fn mv_consistency_loss(inputs: &MvInputs, config: &MvConfig, weights: &LossWeights) -> Result<MvLoss> {
    let (r, n) = (inputs.reference, inputs.neighbor);
    for v in [r, n] {
        if v.render.width() != v.camera.width
            || v.render.height() != v.camera.height
            || !v.image.same_shape(&v.render.alpha)
        {
            return Err(Error::DimensionMismatch(
                "render, image and camera sizes differ in a consistency view".into(),
            ));
        }
    }
    let geo = Geometry::new(r.camera, n.camera);
    let gray_r = r.image.map(grayscale);
    let gray_n = n.image.map(grayscale);
    let (w, h) = (r.render.width(), r.render.height());
    let stride = config.sample_stride.max(1);
    let pixels: Vec<(usize, usize)> = (0..h)
        .step_by(stride)
        .flat_map(|y| (0..w).step_by(stride).map(move |x| (x, y)))
        .collect();
    let samples: Vec<Sample> = pixels
        .par_iter()
        .map(|&(x, y)| sample_pixel(inputs, &geo, &gray_r, &gray_n, config, x, y))
        .collect();

    let consistent = samples.iter().filter(|s| s.geo.is_some()).count();
    let photometric = samples.iter().filter(|s| s.pho.is_some()).count();
    let mut grad_reference = OutputGrads::zeros(w, h);
    let mut grad_neighbor = OutputGrads::zeros(n.render.width(), n.render.height());
    let (mut geo_sum, mut pho_sum) = (0.0, 0.0);
    let sg = if consistent > 0 { weights.lambda_geo / consistent as f64 } else { 0.0 };
    let sp = if photometric > 0 { weights.lambda_pho / photometric as f64 } else { 0.0 };
    for s in samples {
        geo_sum += s.geo.unwrap_or(0.0);
        pho_sum += s.pho.unwrap_or(0.0);
        add_grad(&mut grad_reference, s.geo_ref, sg);
        add_grad(&mut grad_neighbor, s.geo_nbr, sg);
        add_grad(&mut grad_reference, s.pho_ref, sp);
    }
    let geo_mean = if consistent > 0 { geo_sum / consistent as f64 } else { 0.0 };
    let pho_mean = if photometric > 0 { pho_sum / photometric as f64 } else { 0.0 };
    Ok(MvLoss {
        value: weights.lambda_geo * geo_mean + weights.lambda_pho * pho_mean,
        geo: geo_mean,
        pho: pho_mean,
        consistent,
        photometric,
        grad_reference,
        grad_neighbor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k(f: f64, c: f64) -> Matrix3<f64> {
        Matrix3::new(f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0)
    }

    fn apply(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
        let w = h * Vector3::new(x, y, 1.0);
        (w.x / w.z, w.y / w.z)
    }

    #[test]
    fn identical_cameras_give_identity() {
        let kk = k(100.0, 50.0);
        let h = plane_homography(&kk, &kk, &Matrix3::identity(), &Vector3::zeros(), &Vector3::new(0.2, -0.1, -1.0).normalize(), 3.0, (40.0, 61.0)).unwrap();
        assert!((h - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn translation_parallax() {
        // Neighbor camera shifted by +t along x: X_n = X_r - (t, 0, 0).
        let (f, c, t, d) = (120.0, 64.0, 0.3, 2.5);
        let kk = k(f, c);
        let h = plane_homography(&kk, &kk, &Matrix3::identity(), &Vector3::new(-t, 0.0, 0.0), &Vector3::new(0.0, 0.0, -1.0), d, (10.0, 20.0)).unwrap();
        for (x, y) in [(0.0, 0.0), (31.5, 7.0), (100.0, 90.0)] {
            let (u, v) = apply(&h, x, y);
            assert!((u - (x - f * t / d)).abs() < 1e-9);
            assert!((v - y).abs() < 1e-9);
        }
    }

    #[test]
    fn homography_matches_reprojection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let kr = k(rng.random_range(60.0..200.0), rng.random_range(30.0..70.0));
            let kn = k(rng.random_range(60.0..200.0), rng.random_range(30.0..70.0));
            let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) - Vector3::repeat(0.5);
            let rot = Rotation3::new(axis * 0.5).into_inner();
            let t = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2));
            let px = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            let depth = rng.random_range(1.0..5.0);
            let ray = kr.try_inverse().unwrap() * Vector3::new(px.0, px.1, 1.0);
            let mut n = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0).normalize();
            if rng.random_bool(0.5) {
                n = -n;
            }
            let Ok(h) = plane_homography(&kr, &kn, &rot, &t, &n, depth, px) else {
                continue;
            };
            let x0 = ray * depth;
            // A second point on the same plane.
            let tangent = n.cross(&Vector3::new(0.3, 0.8, 0.1)).normalize();
            let x1 = x0 + tangent * 0.2;
            for x in [x0, x1] {
                let q = kr * x;
                let (qx, qy) = (q.x / q.z, q.y / q.z);
                let y = kn * (rot * x + t);
                let (u, v) = apply(&h, qx, qy);
                assert!((u - y.x / y.z).abs() < 1e-6 && (v - y.y / y.z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_plane_errors() {
        let kk = k(100.0, 50.0);
        // Normal perpendicular to the viewing ray of the central pixel.
        let r = plane_homography(&kk, &kk, &Matrix3::identity(), &Vector3::zeros(), &Vector3::new(1.0, 0.0, 0.0), 2.0, (50.0, 50.0));
        assert!(matches!(r, Err(Error::DegeneratePlane)));
    }

    #[test]
    fn ncc_identity_and_negation() {
        let a: Vec<f64> = (0..49).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|v| 0.7 - 0.4 * v).collect();
        let v = ncc(&a, &b).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
        assert!((1.0 - v - 2.0).abs() < 1e-12);
        assert!(ncc(&a, &vec![0.3; 49]).is_none());
    }

    #[test]
    fn ncc_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let a: Vec<f64> = (0..49).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..49).map(|_| rng.random()).collect();
            let v = ncc(&a, &b).unwrap();
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
        }
    }

    #[test]
    fn neighbor_selection() {
        let intr = [50.0, 50.0, 32.0, 32.0];
        let up = Vector3::new(0.0, 0.0, 1.0);
        let cams = vec![
            Camera::look_at(Vector3::zeros(), Vector3::x(), up, intr, 64, 64),
            Camera::look_at(Vector3::new(0.0, 0.1, 0.0), -Vector3::x(), up, intr, 64, 64),
            Camera::look_at(Vector3::new(0.0, 0.5, 0.0), Vector3::new(1.0, 0.2, 0.0), up, intr, 64, 64),
            Camera::look_at(Vector3::new(0.0, 1.0, 0.0), Vector3::x(), up, intr, 64, 64),
        ];
        assert_eq!(select_neighbor(&cams, 0, 30.0), Some(2));
        assert_eq!(select_neighbor(&cams, 1, 30.0), None);
    }

    /// Two views of the plane `z_world = 0` seen from above, with exact
    /// rendered depth and normal and an affine texture.
    #[derive(Clone)]
    pub(super) struct PlaneScene {
        pub cams: [Camera; 2],
        pub renders: [RenderOutput; 2],
        pub images: [Grid<[f64; 3]>; 2],
    }

    pub(super) fn plane_scene(size: usize) -> PlaneScene {
        let intr = [size as f64, size as f64, size as f64 / 2.0, size as f64 / 2.0];
        let down = Vector3::new(0.0, 0.0, -1.0);
        let up = Vector3::new(0.0, 1.0, 0.0);
        let cams = [
            Camera::look_at(Vector3::new(0.0, 0.0, 2.0), down, up, intr, size, size),
            Camera::look_at(Vector3::new(0.25, 0.05, 2.1), Vector3::new(-0.1, 0.0, -1.0), up, intr, size, size),
        ];
        let make = |cam: &Camera| {
            let mut r = RenderOutput::empty(size, size);
            let mut img = Grid::new(size, size, [0.0; 3]);
            let c = cam.center();
            let n_cam = cam.rotation * Vector3::z();
            for y in 0..size {
                for x in 0..size {
                    let ray_c = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                    let ray_w = cam.rotation.transpose() * ray_c;
                    let s = -c.z / ray_w.z;
                    let p = c + ray_w * s;
                    let i = r.alpha.index(x, y);
                    r.alpha.data[i] = 1.0;
                    r.depth.data[i] = s;
                    r.normal.data[i] = [n_cam.x, n_cam.y, n_cam.z];
                    let g = 0.5 + 0.3 * p.x - 0.2 * p.y;
                    img.data[i] = [g; 3];
                }
            }
            (r, img)
        };
        let (r0, i0) = make(&cams[0]);
        let (r1, i1) = make(&cams[1]);
        PlaneScene {
            cams,
            renders: [r0, r1],
            images: [i0, i1],
        }
    }

    fn inputs(s: &PlaneScene) -> MvInputs<'_> {
        MvInputs {
            reference: MvView {
                camera: &s.cams[0],
                render: &s.renders[0],
                image: &s.images[0],
            },
            neighbor: MvView {
                camera: &s.cams[1],
                render: &s.renders[1],
                image: &s.images[1],
            },
        }
    }

    #[test]
    fn identical_views_are_consistent() {
        let s = plane_scene(32);
        let v = MvView {
            camera: &s.cams[0],
            render: &s.renders[0],
            image: &s.images[0],
        };
        let l = mv_consistency_loss(&MvInputs { reference: v, neighbor: v }, &MvConfig::default(), &LossWeights::default()).unwrap();
        assert!(l.consistent > 0);
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn analytic_plane_pair() {
        let s = plane_scene(48);
        let l = mv_consistency_loss(&inputs(&s), &MvConfig::default(), &LossWeights::default()).unwrap();
        assert!(l.consistent > 20, "{}", l.consistent);
        assert!(l.photometric > 10);
        // The backward homography uses the neighbor's plane at the nearest
        // pixel; on an exact plane that plane is identical.
        assert!(l.geo < 1e-6, "{}", l.geo);
        assert!(l.pho < 1e-4, "{}", l.pho);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut s = plane_scene(24);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Perturb the geometry so both terms are active.
        for r in s.renders.iter_mut() {
            for d in r.depth.data.iter_mut() {
                *d *= 1.0 + rng.random_range(-0.01..0.01);
            }
            for n in r.normal.data.iter_mut() {
                let v = Vector3::new(n[0] + rng.random_range(-0.1..0.1), n[1] + rng.random_range(-0.1..0.1), n[2]).normalize();
                *n = [v.x, v.y, v.z];
            }
        }
        for (i, img) in s.images.iter_mut().enumerate() {
            for (j, p) in img.data.iter_mut().enumerate() {
                let g = p[0] + 0.05 * (((j * 31 + i * 7) % 13) as f64 / 13.0);
                *p = [g; 3];
            }
        }
        let cfg = MvConfig {
            sample_stride: 3,
            tau_geo: 50.0,
            ..Default::default()
        };
        let w = LossWeights::default();
        let base = mv_consistency_loss(&inputs(&s), &cfg, &w).unwrap();
        assert!(base.consistent > 0 && base.photometric > 0);
        let eval = |s: &PlaneScene| mv_consistency_loss(&inputs(s), &cfg, &w).unwrap().value;
        let h = 1e-6;
        let mut checked = 0;
        for view in 0..2 {
            let g = if view == 0 { &base.grad_reference } else { &base.grad_neighbor };
            for i in (0..24 * 24).step_by(7) {
                let an = g.depth.data[i];
                let mut p = s.clone();
                p.renders[view].depth.data[i] += h;
                let mut m = s.clone();
                m.renders[view].depth.data[i] -= h;
                let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                assert!((fd - an).abs() <= 1e-6 + 1e-3 * an.abs(), "depth view {view} px {i}: {fd} vs {an}");
                for c in 0..3 {
                    let an = g.normal.data[i][c];
                    let mut p = s.clone();
                    p.renders[view].normal.data[i][c] += h;
                    let mut m = s.clone();
                    m.renders[view].normal.data[i][c] -= h;
                    let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                    assert!((fd - an).abs() <= 1e-6 + 1e-3 * an.abs(), "normal view {view} px {i}: {fd} vs {an}");
                }
                if an != 0.0 {
                    checked += 1;
                }
            }
        }
        assert!(checked > 5);
    }
}
