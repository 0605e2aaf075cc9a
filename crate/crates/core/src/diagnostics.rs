//! Verification harness. Every check runs an optimized path against an
//! independent oracle (naive loops, dense linear solves, central finite
//! differences, analytic scenes) and reports the worst deviation it saw.
//!
//! The oracles live here and share no code with what they check. Both suites
//! are deterministic in their seed and never panic on a failed comparison.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::densify::{grow_seeds, prune_seeds, DensifyConfig};
use crate::eval::{compute_metrics, sample_mesh, EvalConfig, KdTree};
use crate::gradients::{accumulate_seed_stats, backward, OutputGrads, ParamGrads};
use crate::grid::Grid;
use crate::io::dataset::{Dataset, Frame};
use crate::io::synthetic::{render_view, trajectory, SyntheticRoomSpec, Texture, FACE_COLORS};
use crate::losses::{
    align_depth, depth_loss, mv_consistency_loss, ncc, normal_loss, plane_homography, rgb_loss, ssim, total_loss,
    LossTerms, LossWeights, MvConfig, MvInputs, MvView,
};
use crate::math::{logit, quat_from_z_to, sigmoid};
use crate::meshing::{reconstruct_mesh, TriangleMesh, TsdfConfig, TsdfVolume};
use crate::rasterizer::{
    build_splat_geometry, composite_pixel, gaussian_weight, prepare, ray_splat_intersect, render, row_entries,
    RasterConfig, RenderOutput,
};
use crate::trainer::{fit, TrainOptions};
use crate::scene::{voxelize_seeds, Camera, Scene, SeedConfig, SeedPoint, SfmPoint, Surfel};

/// Central-difference step of the gradient suite.
pub const FD_STEP: f64 = 1e-4;
/// Agreement required between analytic and finite-difference gradients.
pub const FD_TOLERANCE: Tolerance = Tolerance::new(1e-6, 1e-3);
/// Rasterizer probes per gradient-suite run.
pub const RASTER_PROBES: usize = 240;

/// A comparison passes when the absolute or the relative error is within
/// bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Tolerance {
    pub const fn new(abs: f64, rel: f64) -> Self {
        Self { abs, rel }
    }

    pub const fn abs(abs: f64) -> Self {
        Self { abs, rel: 0.0 }
    }

    pub const EXACT: Tolerance = Tolerance::new(0.0, 0.0);

    pub fn admits(&self, got: f64, want: f64) -> bool {
        let d = (got - want).abs();
        d <= self.abs || d <= self.rel * got.abs().max(want.abs())
    }

    /// Multiplies both bounds; an infinite factor admits everything finite.
    pub fn scaled(self, factor: f64) -> Self {
        let s = |v: f64| if factor.is_infinite() { f64::INFINITY } else { v * factor };
        Self::new(s(self.abs), s(self.rel))
    }
}

/// Worst-case outcome of one named check on one instance family.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub check: String,
    pub instance: String,
    pub probes: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tolerance: Tolerance,
    pub passed: bool,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} {:>5} probes  max abs {:.3e}  max rel {:.3e}  tol {:.0e}/{:.0e}  [{}]",
            if self.passed { "PASS" } else { "FAIL" },
            self.check,
            self.probes,
            self.max_abs,
            self.max_rel,
            self.tolerance.abs,
            self.tolerance.rel,
            self.instance
        )
    }
}

struct Tally {
    check: &'static str,
    instance: String,
    tol: Tolerance,
    probes: usize,
    max_abs: f64,
    max_rel: f64,
    failed: bool,
}

impl Tally {
    fn new(check: &'static str, instance: impl Into<String>, tol: Tolerance, slack: f64) -> Self {
        Self {
            check,
            instance: instance.into(),
            tol: tol.scaled(slack),
            probes: 0,
            max_abs: 0.0,
            max_rel: 0.0,
            failed: false,
        }
    }

    fn compare(&mut self, got: f64, want: f64) {
        self.probes += 1;
        let d = (got - want).abs();
        if d.is_nan() {
            self.max_abs = f64::NAN;
            self.max_rel = f64::NAN;
            self.failed = true;
            return;
        }
        let scale = got.abs().max(want.abs());
        let rel = if d == 0.0 { 0.0 } else { d / scale };
        if !self.max_abs.is_nan() {
            self.max_abs = self.max_abs.max(d);
            self.max_rel = self.max_rel.max(rel);
        }
        if !self.tol.admits(got, want) {
            self.failed = true;
        }
    }

    /// Records how far `value` exceeds `bound` (zero when it does not).
    fn at_most(&mut self, value: f64, bound: f64) {
        let excess = if value.is_nan() { f64::NAN } else { (value - bound).max(0.0) };
        self.compare(excess, 0.0);
    }

    fn finish(self) -> OracleReport {
        OracleReport {
            check: self.check.to_string(),
            instance: self.instance,
            probes: self.probes,
            max_abs: self.max_abs,
            max_rel: self.max_rel,
            tolerance: self.tol,
            passed: !self.failed && self.probes > 0,
        }
    }
}

/// Finite-difference checks of the rasterizer backward pass and every loss.
pub fn run_gradient_suite(seed: u64) -> Vec<OracleReport> {
    run_gradient_suite_with(seed, 1.0)
}

/// [`run_gradient_suite`] with every tolerance multiplied by `slack`.
pub fn run_gradient_suite_with(seed: u64, slack: f64) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = raster_gradient_checks(&mut rng, slack);
    out.push(rgb_gradient_check(&mut rng, slack));
    out.push(depth_gradient_check(&mut rng, slack));
    out.push(normal_gradient_check(&mut rng, slack));
    out.push(mv_gradient_check(&mut rng, slack));
    out.push(total_gradient_check(&mut rng, slack));
    out
}

/// Brute-force and analytic equivalence checks of the fast paths.
pub fn run_equivalence_suite(seed: u64) -> Vec<OracleReport> {
    run_equivalence_suite_with(seed, 1.0)
}

/// [`run_equivalence_suite`] with every tolerance multiplied by `slack`.
pub fn run_equivalence_suite_with(seed: u64, slack: f64) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checks: [fn(&mut ChaCha8Rng, f64) -> OracleReport; 29] = [
        projection_check,
        intersection_check,
        offset_pixel_check,
        lowpass_floor_check,
        compositor_check,
        seed_stats_check,
        voxelization_check,
        grow_rule_check,
        prune_rule_check,
        ssim_check,
        alignment_check,
        orthogonal_depth_check,
        ramp_gradient_term_check,
        normal_loop_check,
        parallax_check,
        homography_reprojection_check,
        mv_plane_check,
        ncc_identity_check,
        ncc_bounds_check,
        total_loss_check,
        tsdf_plane_check,
        tsdf_sphere_check,
        tsdf_affine_check,
        single_splat_mesh_check,
        sampling_check,
        metrics_check,
        kd_tree_check,
        synthetic_render_check,
        train_smoke_check,
    ];
    checks.iter().map(|c| c(&mut rng, slack)).collect()
}

// ---------------------------------------------------------------------------
// Shared fixtures

fn pinhole(size: usize) -> Camera {
    let f = size as f64;
    Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), [f, f, f / 2.0, f / 2.0], size, size)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.2 && n <= 1.0 {
            return q.map(|c| c / n);
        }
    }
}

/// One surfel per seed, in front of [`pinhole`] and not viewed edge-on.
fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Scene {
    let mut scene = Scene::empty(SeedConfig {
        k: 1,
        ..Default::default()
    });
    for i in 0..n {
        let anchor = Vector3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(2.5..3.5));
        let offset = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let view = (anchor + offset).normalize();
        let rotation = loop {
            let q = random_quat(rng);
            let tw = crate::math::quat_to_matrix(&q).column(2).into_owned();
            if tw.dot(&view).abs() > 0.05 {
                // Off-unit length exercises the normalization in the backward pass.
                let s = rng.random_range(0.8..1.25);
                break q.map(|c| c * s);
            }
        };
        scene.seeds.push(SeedPoint {
            anchor,
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
            offset,
            rotation,
            log_scale: [rng.random_range(0.1f64..0.35).ln(), rng.random_range(0.1f64..0.35).ln()],
            raw_opacity: rng.random_range(logit(0.2)..logit(0.85)),
            raw_color: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
            seed_id: i,
        });
    }
    scene
}

/// `Σ a·m + ½ b·m²` over every rendered channel, with its map gradient.
struct QuadraticLoss {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl QuadraticLoss {
    fn random(rng: &mut ChaCha8Rng, pixels: usize) -> Self {
        let len = pixels * 8;
        Self {
            a: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            b: (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    fn channels(out: &RenderOutput) -> Vec<f64> {
        let mut v = Vec::with_capacity(out.alpha.len() * 8);
        for i in 0..out.alpha.len() {
            v.extend_from_slice(&out.color.data[i]);
            v.push(out.depth.data[i]);
            v.extend_from_slice(&out.normal.data[i]);
            v.push(out.alpha.data[i]);
        }
        v
    }

    fn value(&self, out: &RenderOutput) -> f64 {
        Self::channels(out)
            .iter()
            .enumerate()
            .map(|(i, m)| self.a[i] * m + 0.5 * self.b[i] * m * m)
            .sum()
    }

    fn grads(&self, out: &RenderOutput) -> OutputGrads {
        let m = Self::channels(out);
        let g = |i: usize| self.a[i] + self.b[i] * m[i];
        let mut grads = OutputGrads::zeros(out.alpha.width, out.alpha.height);
        for p in 0..out.alpha.len() {
            let o = p * 8;
            grads.color.data[p] = [g(o), g(o + 1), g(o + 2)];
            grads.depth.data[p] = g(o + 3);
            grads.normal.data[p] = [g(o + 4), g(o + 5), g(o + 6)];
            grads.alpha.data[p] = g(o + 7);
        }
        grads
    }
}

/// Which splats reach which pixel, through which branch of the Gaussian,
/// and which way each splat faces. Finite differences are only meaningful
/// when this is the same on both sides of the probe.
fn contribution_signature(scene: &Scene, camera: &Camera, config: &RasterConfig) -> Vec<(usize, usize, bool)> {
    let binning = prepare(scene, camera, config);
    let ts = binning.tile_size;
    let mut sig: Vec<(usize, usize, bool)> = binning
        .splats
        .iter()
        .map(|s| (usize::MAX, s.surfel, s.flip > 0.0))
        .collect();
    let mut row = Vec::new();
    for (t, list) in binning.tiles.iter().enumerate() {
        let x0 = (t % binning.tiles_x) * ts;
        let y0 = (t / binning.tiles_x) * ts;
        for py in y0..(y0 + ts).min(camera.height) {
            row_entries(&binning.splats, list, py, &mut row);
            for px in x0..(x0 + ts).min(camera.width) {
                composite_pixel(&binning.splats, &row, px, py, config, |s, c| {
                    sig.push((py * camera.width + px, s.surfel, c.lowpass));
                });
            }
        }
    }
    sig
}

const PARAM_GROUPS: [(&str, std::ops::Range<usize>); 5] = [
    ("backward/offset", 0..3),
    ("backward/rotation", 3..7),
    ("backward/log_scale", 7..9),
    ("backward/opacity", 9..10),
    ("backward/color", 10..13),
];

fn raster_gradient_checks(rng: &mut ChaCha8Rng, slack: f64) -> Vec<OracleReport> {
    const SCENES: usize = 6;
    const SIZE: usize = 16;
    let config = RasterConfig::default();
    let camera = pinhole(SIZE);
    let per_scene = RASTER_PROBES / SCENES;
    let mut tallies: Vec<Tally> = PARAM_GROUPS
        .iter()
        .map(|(name, _)| Tally::new(name, String::new(), FD_TOLERANCE, slack))
        .collect();
    let mut skipped = 0;
    for _ in 0..SCENES {
        let n = rng.random_range(8..=20);
        let mut scene = random_scene(rng, n);
        let loss = QuadraticLoss::random(rng, SIZE * SIZE);
        let out = render(&scene, &camera, &config);
        let analytic = match backward(&scene, &camera, &config, &out, &loss.grads(&out)) {
            Ok(g) => g,
            Err(_) => ParamGrads::zeros(0),
        };
        let base_sig = contribution_signature(&scene, &camera, &config);
        let mut done = 0;
        let mut attempts = 0;
        while done < per_scene && attempts < per_scene * 20 {
            attempts += 1;
            let id = rng.random_range(0..n);
            let group = done % PARAM_GROUPS.len();
            let range = PARAM_GROUPS[group].1.clone();
            let j = rng.random_range(range);
            let base = scene.surfels[id].params();
            let eval = |delta: f64, scene: &mut Scene| {
                let mut p = base;
                p[j] += delta;
                scene.surfels[id].set_params(&p);
                let v = loss.value(&render(scene, &camera, &config));
                let sig = contribution_signature(scene, &camera, &config);
                scene.surfels[id].set_params(&base);
                (v, sig)
            };
            let (plus, sig_p) = eval(FD_STEP, &mut scene);
            let (minus, sig_m) = eval(-FD_STEP, &mut scene);
            if sig_p != base_sig || sig_m != base_sig {
                skipped += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let an = analytic.surfels.get(id).map_or(f64::NAN, |g| g.as_array()[j]);
            tallies[group].compare(an, fd);
            done += 1;
        }
    }
    let instance = format!("{SCENES} scenes of 8-20 splats, {SIZE}x{SIZE}, random quadratic loss, h={FD_STEP:e}, {skipped} probes redrawn at visibility changes");
    tallies
        .into_iter()
        .map(|mut t| {
            t.instance = instance.clone();
            t.finish()
        })
        .collect()
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Grid<[f64; 3]> {
    Grid::from_vec(w, h, (0..w * h).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect())
}

fn random_unit_field(rng: &mut ChaCha8Rng, w: usize, h: usize, length: f64) -> Grid<[f64; 3]> {
    Grid::from_vec(w, h, (0..w * h).map(|_| (random_unit(rng) * length).into()).collect())
}

/// Central differences of a scalar function of a flat vector at random
/// coordinates.
fn fd_probes(
    tally: &mut Tally,
    rng: &mut ChaCha8Rng,
    x: &[f64],
    analytic: &[f64],
    probes: usize,
    f: impl Fn(&[f64]) -> f64,
) {
    for _ in 0..probes {
        let i = rng.random_range(0..x.len());
        let mut p = x.to_vec();
        p[i] += FD_STEP;
        let mut m = x.to_vec();
        m[i] -= FD_STEP;
        let fd = (f(&p) - f(&m)) / (2.0 * FD_STEP);
        tally.compare(analytic[i], fd);
    }
}

fn flat3(g: &Grid<[f64; 3]>) -> Vec<f64> {
    g.data.iter().flatten().copied().collect()
}

fn unflat3(w: usize, h: usize, v: &[f64]) -> Grid<[f64; 3]> {
    Grid::from_vec(w, h, v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn rgb_gradient_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let (w, h) = (16, 16);
    let mut t = Tally::new("loss/rgb", format!("random {w}x{h} pair, ssim mix 0.2"), FD_TOLERANCE, slack);
    let x = random_image(rng, w, h);
    let y = random_image(rng, w, h);
    if let Ok(l) = rgb_loss(&x, &y, 0.2) {
        let f = |v: &[f64]| rgb_loss(&unflat3(w, h, v), &y, 0.2).map_or(f64::NAN, |l| l.value);
        fd_probes(&mut t, rng, &flat3(&x), &flat3(&l.grad), 40, f);
    }
    t.finish()
}

fn depth_gradient_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let (w, h) = (16, 16);
    let mut t = Tally::new("loss/depth", format!("random {w}x{h} maps, 85% mask, lambda_grad 0.5"), FD_TOLERANCE, slack);
    let d = Grid::from_vec(w, h, (0..w * h).map(|_| rng.random_range(1.0..3.0)).collect());
    let p = Grid::from_vec(w, h, (0..w * h).map(|_| rng.random_range(2.0..5.0)).collect());
    let mask = Grid::from_vec(w, h, (0..w * h).map(|_| rng.random_bool(0.85)).collect());
    let l = depth_loss(&d, &p, &mask, 0.5);
    let f = |v: &[f64]| depth_loss(&Grid::from_vec(w, h, v.to_vec()), &p, &mask, 0.5).value;
    fd_probes(&mut t, rng, &d.data, &l.grad.data, 40, f);
    t.finish()
}

fn normal_gradient_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let (w, h) = (16, 16);
    let mut t = Tally::new("loss/normal", format!("random {w}x{h} fields, lambda_1 0.3, lambda_cos 0.7"), FD_TOLERANCE, slack);
    let n = random_unit_field(rng, w, h, 0.7);
    let p = random_unit_field(rng, w, h, 1.0);
    let mask = Grid::from_vec(w, h, (0..w * h).map(|_| rng.random_bool(0.85)).collect());
    let l = normal_loss(&n, &p, &mask, 0.3, 0.7);
    let f = |v: &[f64]| normal_loss(&unflat3(w, h, v), &p, &mask, 0.3, 0.7).value;
    fd_probes(&mut t, rng, &flat3(&n), &flat3(&l.grad), 40, f);
    t.finish()
}

/// Two views of the plane `z = 0` seen from above, with exact maps and a
/// smooth grayscale texture.
struct PlanePair {
    cams: [Camera; 2],
    renders: [RenderOutput; 2],
    images: [Grid<[f64; 3]>; 2],
}

impl PlanePair {
    fn new(size: usize) -> Self {
        let s = size as f64;
        let intr = [s, s, s / 2.0, s / 2.0];
        let up = Vector3::y();
        let cams = [
            Camera::look_at(Vector3::new(0.0, 0.0, 2.0), -Vector3::z(), up, intr, size, size),
            Camera::look_at(Vector3::new(0.25, 0.05, 2.1), Vector3::new(-0.1, 0.0, -1.0), up, intr, size, size),
        ];
        let make = |cam: &Camera| {
            let mut r = RenderOutput::empty(size, size);
            let mut img = Grid::new(size, size, [0.0; 3]);
            let c = cam.center();
            let n = cam.rotation * Vector3::z();
            for y in 0..size {
                for x in 0..size {
                    let dir = cam.rotation.transpose() * cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                    let t = -c.z / dir.z;
                    let p = c + dir * t;
                    let i = y * size + x;
                    r.alpha.data[i] = 1.0;
                    r.depth.data[i] = t;
                    r.normal.data[i] = n.into();
                    img.data[i] = [0.5 + 0.3 * p.x - 0.2 * p.y; 3];
                }
            }
            (r, img)
        };
        let (r0, i0) = make(&cams[0]);
        let (r1, i1) = make(&cams[1]);
        Self {
            cams,
            renders: [r0, r1],
            images: [i0, i1],
        }
    }

    fn inputs(&self) -> MvInputs<'_> {
        let view = |i: usize| MvView {
            camera: &self.cams[i],
            render: &self.renders[i],
            image: &self.images[i],
        };
        MvInputs {
            reference: view(0),
            neighbor: view(1),
        }
    }
}

fn mv_gradient_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let size = 24;
    let mut t = Tally::new(
        "loss/multiview",
        format!("perturbed two-view plane, {size}x{size}, depth and normal of both views"),
        FD_TOLERANCE,
        slack,
    );
    let mut pair = PlanePair::new(size);
    for r in pair.renders.iter_mut() {
        for d in r.depth.data.iter_mut() {
            *d *= 1.0 + rng.random_range(-0.01..0.01);
        }
        for n in r.normal.data.iter_mut() {
            let v = Vector3::new(n[0] + rng.random_range(-0.1..0.1), n[1] + rng.random_range(-0.1..0.1), n[2]).normalize();
            *n = v.into();
        }
    }
    for img in pair.images.iter_mut() {
        for p in img.data.iter_mut() {
            *p = [p[0] + rng.random_range(0.0..0.05); 3];
        }
    }
    let cfg = MvConfig {
        sample_stride: 3,
        tau_geo: 50.0,
        ..Default::default()
    };
    let weights = LossWeights::default();
    let Ok(base) = mv_consistency_loss(&pair.inputs(), &cfg, &weights) else {
        return t.finish();
    };
    let value = |p: &PlanePair| mv_consistency_loss(&p.inputs(), &cfg, &weights).map_or(f64::NAN, |l| l.value);
    for probe in 0..40 {
        let view = probe % 2;
        let g = if view == 0 { &base.grad_reference } else { &base.grad_neighbor };
        // Half the probes land on pixels the loss actually touches.
        let touched: Vec<usize> = (0..size * size).filter(|&i| g.depth.data[i] != 0.0).collect();
        let i = if probe % 4 < 2 && !touched.is_empty() {
            touched[rng.random_range(0..touched.len())]
        } else {
            rng.random_range(0..size * size)
        };
        let channel = rng.random_range(0..4);
        let shift = |p: &mut PlanePair, d: f64| {
            if channel == 3 {
                p.renders[view].depth.data[i] += d;
            } else {
                p.renders[view].normal.data[i][channel] += d;
            }
        };
        let an = if channel == 3 { g.depth.data[i] } else { g.normal.data[i][channel] };
        shift(&mut pair, FD_STEP);
        let plus = value(&pair);
        shift(&mut pair, -2.0 * FD_STEP);
        let minus = value(&pair);
        shift(&mut pair, FD_STEP);
        t.compare(an, (plus - minus) / (2.0 * FD_STEP));
    }
    t.finish()
}

fn total_gradient_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("loss/total", "random weights and terms", FD_TOLERANCE, slack);
    for _ in 0..10 {
        let weights = LossWeights {
            lambda_rgb: rng.random_range(0.0..2.0),
            lambda_d: rng.random_range(0.0..2.0),
            lambda_n: rng.random_range(0.0..2.0),
            ..Default::default()
        };
        let terms = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let f = |v: &[f64]| {
            let lt = LossTerms {
                rgb: v[0],
                depth: Some(v[1]),
                normal: Some(v[2]),
                mv: Some(v[3]),
            };
            total_loss(&lt, &weights).unwrap_or(f64::NAN)
        };
        let analytic = [weights.lambda_rgb, weights.lambda_d, weights.lambda_n, 1.0];
        fd_probes(&mut t, rng, &terms, &analytic, 4, f);
    }
    t.finish()
}

// ---------------------------------------------------------------------------
// Rasterizer

/// A random camera looking at the origin region from a few meters away.
fn random_camera(rng: &mut ChaCha8Rng, size: usize) -> Camera {
    let center = random_unit(rng) * rng.random_range(2.0..4.0);
    let target = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let forward = target - center;
    let mut up = random_unit(rng);
    while up.cross(&forward).norm() < 0.3 * forward.norm() {
        up = random_unit(rng);
    }
    let f = rng.random_range(0.8..1.6) * size as f64;
    let c = size as f64 / 2.0 + rng.random_range(-2.0..2.0);
    Camera::look_at(center, forward, up, [f, f * rng.random_range(0.9..1.1), c, c], size, size)
}

fn random_surfel(rng: &mut ChaCha8Rng) -> (Surfel, Vector3<f64>) {
    let center = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
    let s = Surfel {
        offset: Vector3::zeros(),
        rotation: random_quat(rng),
        log_scale: [rng.random_range(-3.0..0.0), rng.random_range(-3.0..0.0)],
        raw_opacity: rng.random_range(-2.0..2.0),
        raw_color: [0.0; 3],
        seed_id: 0,
    };
    (s, center)
}

fn projection_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("splat_projection", "1000 random surfels and cameras, M(0,0,1,1) vs pinhole", Tolerance::new(1e-12, 1e-9), slack);
    let config = RasterConfig::default();
    for _ in 0..1000 {
        let cam = random_camera(rng, 64);
        let (s, c) = random_surfel(rng);
        let g = build_splat_geometry(&s, &c, &cam, &config);
        let x = g.m * Vector4::new(0.0, 0.0, 1.0, 1.0);
        // Standard pinhole: world -> camera -> normalized -> pixels.
        let r = cam.rotation;
        let tr = cam.translation;
        let xc = [0, 1, 2].map(|i| r[(i, 0)] * c.x + r[(i, 1)] * c.y + r[(i, 2)] * c.z + tr[i]);
        t.compare(x[0] / x[3], cam.fx * xc[0] / xc[2] + cam.cx);
        t.compare(x[1] / x[3], cam.fy * xc[1] / xc[2] + cam.cy);
        t.compare(x[3], xc[2]);
    }
    t.finish()
}

fn intersection_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new(
        "ray_splat_intersect",
        "1000 random splats and pixels vs 3x3 solve of p + u su tu + v sv tv = o + s d",
        Tolerance::new(1e-12, 1e-8),
        slack,
    );
    let config = RasterConfig::default();
    let mut done = 0;
    while done < 1000 {
        let cam = random_camera(rng, 64);
        let (s, c) = random_surfel(rng);
        let px = (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
        let r = s.rotation_matrix();
        let [su, sv] = s.scales();
        let (a, b) = (r.column(0) * su, r.column(1) * sv);
        let o = cam.center();
        let d = cam.rotation.transpose() * cam.intrinsics_inv() * Vector3::new(px.0, px.1, 1.0);
        // Skip near-grazing rays, whose solutions are ill-conditioned for
        // any method.
        if r.column(2).dot(&d.normalize()).abs() < 0.05 {
            continue;
        }
        let sys = Matrix3::from_columns(&[a, b, -d]);
        let Some(sol) = sys.lu().solve(&(o - c)) else {
            continue;
        };
        let hit = c + a * sol[0] + b * sol[1];
        let z = (cam.rotation * hit + cam.translation).z;
        let g = build_splat_geometry(&s, &c, &cam, &config);
        match ray_splat_intersect(&g.m, px.0, px.1, f64::MIN_POSITIVE, f64::MAX) {
            Some(i) if z > 0.0 => {
                t.compare(i.u, sol[0]);
                t.compare(i.v, sol[1]);
                t.compare(i.z, z);
                done += 1;
            }
            None if z <= 0.0 => done += 1,
            _ => {
                t.compare(1.0, 0.0);
                done += 1;
            }
        }
    }
    t.finish()
}

fn offset_pixel_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("intersect_offset_pixel", "100 facing splats, pixel through p + su tu gives (1, 0)", Tolerance::abs(1e-6), slack);
    let config = RasterConfig::default();
    let cam = pinhole(100);
    for _ in 0..100 {
        let c = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(3.0..6.0));
        let s = Surfel {
            offset: Vector3::zeros(),
            rotation: quat_from_z_to(&-random_facing(rng, &c)),
            log_scale: [rng.random_range(0.05f64..0.3).ln(), rng.random_range(0.05f64..0.3).ln()],
            raw_opacity: 0.0,
            raw_color: [0.0; 3],
            seed_id: 0,
        };
        let p = c + s.rotation_matrix().column(0) * s.scales()[0];
        let x = cam.fx * p.x / p.z + cam.cx;
        let y = cam.fy * p.y / p.z + cam.cy;
        let g = build_splat_geometry(&s, &c, &cam, &config);
        match ray_splat_intersect(&g.m, x, y, config.near, config.far) {
            Some(i) => {
                t.compare(i.u, 1.0);
                t.compare(i.v, 0.0);
            }
            None => t.compare(f64::NAN, 0.0),
        }
    }
    t.finish()
}

/// A unit vector within 60 degrees of the direction to `c`.
fn random_facing(rng: &mut ChaCha8Rng, c: &Vector3<f64>) -> Vector3<f64> {
    let view = c.normalize();
    loop {
        let n = random_unit(rng);
        if n.dot(&view) > 0.5 {
            return n;
        }
    }
}

fn lowpass_floor_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("gaussian_lowpass_floor", "edge-on splat 0.3 px from its center, and 200 random inputs", Tolerance::new(1e-15, 1e-14), slack);
    let config = RasterConfig::default();
    let cam = pinhole(64);
    let c = Vector3::new(0.0, 0.0, 4.0);
    // Normal along x with the disk in the y-z plane: seen exactly edge-on,
    // so the object-space Gaussian is undefined and the floor must take over.
    let s = Surfel {
        offset: Vector3::zeros(),
        rotation: quat_from_z_to(&Vector3::x()),
        log_scale: [(0.01f64).ln(), (0.2f64).ln()],
        raw_opacity: 0.0,
        raw_color: [0.0; 3],
        seed_id: 0,
    };
    let g = build_splat_geometry(&s, &c, &cam, &config);
    let hit = ray_splat_intersect(&g.m, 32.3, 32.0, config.near, config.far);
    let (u, v) = hit.map_or((f64::INFINITY, 0.0), |i| (i.u, i.v));
    let sigma = config.lowpass_sigma;
    t.compare(gaussian_weight(u, v, 0.09, sigma), (-0.09 / (2.0 * sigma * sigma)).exp());
    for _ in 0..200 {
        let (u, v): (f64, f64) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
        let d2: f64 = rng.random_range(0.0..2.0);
        let want = (-(u * u + v * v) / 2.0).exp().max((-d2 / (2.0 * 0.09)).exp());
        t.compare(gaussian_weight(u, v, d2, 0.3), want);
    }
    t.finish()
}

/// Scalar reference compositor: every splat at every pixel, in depth order,
/// with the intersection solved as a 3x3 system.
fn naive_render(scene: &Scene, cam: &Camera, cfg: &RasterConfig) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput::empty(w, h);
    struct S {
        id: usize,
        c: Vector3<f64>,
        a: Vector3<f64>,
        b: Vector3<f64>,
        n: Vector3<f64>,
        zc: f64,
        opacity: f64,
        color: [f64; 3],
    }
    let mut list: Vec<S> = Vec::new();
    for (id, s) in scene.surfels.iter().enumerate() {
        let seed = &scene.seeds[s.seed_id];
        if !seed.active {
            continue;
        }
        let c = seed.anchor + s.offset;
        let zc = (cam.rotation * c + cam.translation).z;
        let opacity = sigmoid(s.raw_opacity);
        if !(zc >= cfg.near && zc <= cfg.far) || opacity < cfg.alpha_cutoff {
            continue;
        }
        let r = crate::math::quat_to_matrix(&s.rotation);
        let mut n = cam.rotation * r.column(2);
        if n.dot(&(cam.rotation * c + cam.translation)) > 0.0 {
            n = -n;
        }
        list.push(S {
            id,
            c,
            a: r.column(0) * s.log_scale[0].exp(),
            b: r.column(1) * s.log_scale[1].exp(),
            n,
            zc,
            opacity,
            color: s.raw_color.map(sigmoid),
        });
    }
    list.sort_by(|p, q| p.zc.total_cmp(&q.zc).then(p.id.cmp(&q.id)));
    let o = cam.center();
    let kinv = cam.intrinsics_inv();
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = cam.rotation.transpose() * kinv * Vector3::new(fx, fy, 1.0);
            let mut t = 1.0;
            let (mut col, mut dep, mut nor) = ([0.0; 3], 0.0, Vector3::zeros());
            for s in &list {
                if t < cfg.transmittance_floor {
                    continue;
                }
                let sys = Matrix3::from_columns(&[s.a, s.b, -d]);
                let Some(sol) = sys.lu().solve(&(o - s.c)) else {
                    continue;
                };
                let hit = s.c + s.a * sol[0] + s.b * sol[1];
                let z = (cam.rotation * hit + cam.translation).z;
                if !(z >= cfg.near && z <= cfg.far) {
                    continue;
                }
                let pc = cam.rotation * s.c + cam.translation;
                let (cx, cy) = (cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy);
                let g3 = (-(sol[0] * sol[0] + sol[1] * sol[1]) / 2.0).exp();
                let g2 = (-((fx - cx).powi(2) + (fy - cy).powi(2)) / (2.0 * cfg.lowpass_sigma.powi(2))).exp();
                let wgt = s.opacity * g3.max(g2);
                if wgt < cfg.alpha_cutoff {
                    continue;
                }
                for k in 0..3 {
                    col[k] += s.color[k] * wgt * t;
                }
                dep += z * wgt * t;
                nor += s.n * wgt * t;
                t *= 1.0 - wgt;
            }
            let i = y * w + x;
            let alpha = 1.0 - t;
            out.color.data[i] = col;
            out.alpha.data[i] = alpha;
            if alpha > 0.0 {
                out.depth.data[i] = dep / alpha;
                if nor.norm() > 0.0 {
                    out.normal.data[i] = nor.normalize().into();
                }
            }
        }
    }
    out
}

fn compositor_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("tiled_vs_naive_compositor", "5 random 20-splat scenes, 8x8 (tile 4) and 16x16 (tile 16)", Tolerance::abs(1e-6), slack);
    for (size, tile) in [(8, 4), (8, 4), (8, 4), (16, 16), (16, 16)] {
        let cam = pinhole(size);
        let scene = random_scene(rng, 20);
        let cfg = RasterConfig {
            tile_size: tile,
            ..Default::default()
        };
        let fast = render(&scene, &cam, &cfg);
        let slow = naive_render(&scene, &cam, &cfg);
        for i in 0..size * size {
            for k in 0..3 {
                t.compare(fast.color.data[i][k], slow.color.data[i][k]);
                t.compare(fast.normal.data[i][k], slow.normal.data[i][k]);
            }
            t.compare(fast.depth.data[i], slow.depth.data[i]);
            t.compare(fast.alpha.data[i], slow.alpha.data[i]);
        }
    }
    t.finish()
}

// ---------------------------------------------------------------------------
// Seeds and densification

fn seed_stats_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("seed_stat_accumulation", "100 iterations of random screen gradients and opacities", Tolerance::new(1e-12, 1e-12), slack);
    let pts: Vec<SfmPoint> = (0..12).map(|i| SfmPoint::new(Vector3::new(i as f64 * 0.1 + 0.05, 0.05, 0.05), 5)).collect();
    let cfg = SeedConfig {
        delta: 0.1,
        k: 4,
        ..Default::default()
    };
    let Ok(mut scene) = voxelize_seeds(&pts, &cfg) else {
        return t.finish();
    };
    let n = scene.surfels.len();
    let mut grad_sum = vec![0.0; scene.seeds.len()];
    let mut alpha_sum = vec![0.0; scene.seeds.len()];
    for _ in 0..100 {
        let mut g = ParamGrads::zeros(n);
        for v in g.screen.iter_mut() {
            *v = rng.random_range(0.0..1e-3);
        }
        for s in scene.surfels.iter_mut() {
            s.raw_opacity = rng.random_range(-3.0..3.0);
        }
        for (sid, seed) in scene.seeds.iter().enumerate() {
            let ids = &seed.surfel_ids;
            grad_sum[sid] += ids.iter().map(|&i| g.screen[i]).sum::<f64>() / ids.len() as f64;
            alpha_sum[sid] += ids.iter().map(|&i| 1.0 / (1.0 + (-scene.surfels[i].raw_opacity).exp())).sum::<f64>();
        }
        accumulate_seed_stats(&g, &mut scene);
    }
    for (sid, seed) in scene.seeds.iter().enumerate() {
        t.compare(seed.grad_accum, grad_sum[sid]);
        t.compare(seed.opacity_accum, alpha_sum[sid]);
        t.compare(f64::from(seed.grad_count), 100.0);
    }
    t.finish()
}

fn voxelization_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("voxelization", "20 random clouds of 500 points, seeds vs distinct floor(p / delta)", Tolerance::new(1e-12, 1e-12), slack);
    for _ in 0..20 {
        let delta = rng.random_range(0.02..0.3);
        let pts: Vec<SfmPoint> = (0..500)
            .map(|_| SfmPoint::new(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)), 5))
            .collect();
        let cfg = SeedConfig {
            delta,
            k: 2,
            ..Default::default()
        };
        let Ok(scene) = voxelize_seeds(&pts, &cfg) else {
            t.compare(f64::NAN, 0.0);
            continue;
        };
        let mut expected = BTreeSet::new();
        for p in &pts {
            let cell = [p.position.x, p.position.y, p.position.z].map(|c| (c / delta).floor() as i64);
            expected.insert(cell);
        }
        t.compare(scene.seeds.len() as f64, expected.len() as f64);
        for seed in &scene.seeds {
            t.compare(f64::from(u8::from(expected.contains(&seed.key))), 1.0);
            for a in 0..3 {
                t.compare(seed.anchor[a], (seed.key[a] as f64 + 0.5) * delta);
            }
        }
    }
    t.finish()
}

fn grid_scene(n: usize, k: usize) -> Option<Scene> {
    let pts: Vec<SfmPoint> = (0..n).map(|i| SfmPoint::new(Vector3::new(i as f64 * 0.1 + 0.05, 0.05, 0.05), 5)).collect();
    voxelize_seeds(
        &pts,
        &SeedConfig {
            delta: 0.1,
            k,
            ..Default::default()
        },
    )
    .ok()
}

fn grow_rule_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("grow_rule_replay", "20 random gradient histories and offsets, new (level, voxel) list", Tolerance::EXACT, slack);
    let cfg = DensifyConfig::default();
    for _ in 0..20 {
        let Some(mut scene) = grid_scene(12, 5) else {
            return t.finish();
        };
        for s in &mut scene.surfels {
            s.offset = Vector3::new(rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
        }
        for s in &mut scene.seeds {
            s.grad_count = cfg.grow_interval;
            s.grad_accum = rng.random_range(0.0..0.06);
            s.level = rng.random_range(0..=cfg.max_level);
        }
        let mut occupied: HashSet<(u8, [i64; 3])> = scene.seeds.iter().map(|s| (s.level, s.key)).collect();
        let mut expected = Vec::new();
        for seed in &scene.seeds {
            let mean = seed.grad_accum / f64::from(seed.grad_count);
            if seed.level < cfg.max_level && mean > cfg.grow_threshold * 2f64.powi(i32::from(seed.level)) {
                let size = scene.config.delta / 2f64.powi(i32::from(seed.level) + 1);
                for &id in &seed.surfel_ids {
                    let p = seed.anchor + scene.surfels[id].offset;
                    let key = [p.x, p.y, p.z].map(|c| (c / size).floor() as i64);
                    if occupied.insert((seed.level + 1, key)) {
                        expected.push((seed.level + 1, key));
                    }
                }
            }
        }
        let before = scene.seeds.len();
        let created = grow_seeds(&mut scene, &cfg, cfg.start_iter + cfg.grow_interval, rng);
        let got: Vec<(u8, [i64; 3])> = scene.seeds[before..].iter().map(|s| (s.level, s.key)).collect();
        t.compare(created as f64, expected.len() as f64);
        let mismatched = got.iter().zip(&expected).filter(|(a, b)| a != b).count() + got.len().abs_diff(expected.len());
        t.compare(mismatched as f64, 0.0);
    }
    t.finish()
}

fn prune_rule_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("prune_rule_replay", "20 random opacity histories, surviving seed set", Tolerance::EXACT, slack);
    let cfg = DensifyConfig::default();
    let k = 4;
    for _ in 0..20 {
        let Some(mut scene) = grid_scene(15, k) else {
            return t.finish();
        };
        for s in &mut scene.seeds {
            s.opacity_count = cfg.prune_interval;
            s.opacity_accum = rng.random_range(0.0..1.0) * f64::from(cfg.prune_interval) * k as f64;
        }
        let norm = f64::from(cfg.prune_interval) * k as f64;
        let mut keep: Vec<bool> = scene.seeds.iter().map(|s| s.opacity_accum / norm >= cfg.prune_threshold).collect();
        if keep.iter().all(|k| !k) {
            let best = (0..keep.len())
                .max_by(|&a, &b| scene.seeds[a].opacity_accum.total_cmp(&scene.seeds[b].opacity_accum).then(b.cmp(&a)))
                .unwrap_or(0);
            keep[best] = true;
        }
        let out = prune_seeds(&mut scene, &cfg, cfg.start_iter);
        let got: Vec<bool> = scene.seeds.iter().map(|s| s.active).collect();
        t.compare(got.iter().zip(&keep).filter(|(a, b)| a != b).count() as f64, 0.0);
        t.compare(out.pruned as f64, keep.iter().filter(|k| !**k).count() as f64);
        t.compare(f64::from(u8::from(scene.check_integrity().is_ok())), 1.0);
    }
    t.finish()
}

// ---------------------------------------------------------------------------
// Losses

/// Windowed SSIM evaluated one pixel at a time with a 2D kernel.
fn ssim_direct(x: &Grid<[f64; 3]>, y: &Grid<[f64; 3]>) -> f64 {
    let (w, h) = (x.width as isize, x.height as isize);
    let g1: Vec<f64> = (0..11).map(|i| (-((i - 5) as f64).powi(2) / 4.5).exp()).collect();
    let s: f64 = g1.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for c in 0..3 {
        for py in 0..h {
            for px in 0..w {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in -5..=5isize {
                    for kx in -5..=5isize {
                        let (qx, qy) = (px + kx, py + ky);
                        if qx < 0 || qy < 0 || qx >= w || qy >= h {
                            continue;
                        }
                        let wt = g1[(kx + 5) as usize] * g1[(ky + 5) as usize] / (s * s);
                        let a = x.get(qx as usize, qy as usize)[c];
                        let b = y.get(qx as usize, qy as usize)[c];
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (3 * w * h) as f64
}

fn ssim_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("ssim_separable", "4 random image pairs (16x16, 13x7, 5x5, 20x3) vs 2D convolution", Tolerance::abs(1e-6), slack);
    for (w, h) in [(16, 16), (13, 7), (5, 5), (20, 3)] {
        let a = random_image(rng, w, h);
        let b = random_image(rng, w, h);
        t.compare(ssim(&a, &b), ssim_direct(&a, &b));
        t.compare(ssim(&a, &a), 1.0);
    }
    t.finish()
}

fn alignment_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("depth_alignment", "20 random masked depth pairs vs SVD least squares", Tolerance::abs(1e-6), slack);
    for _ in 0..20 {
        let (w, h) = (rng.random_range(4..16), rng.random_range(4..16));
        let x: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.5..4.0)).collect();
        let (s0, t0) = (rng.random_range(0.2..3.0), rng.random_range(-1.0..1.0));
        let y: Vec<f64> = x.iter().map(|v| s0 * v + t0 + rng.random_range(-0.2..0.2)).collect();
        let mask: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
        let idx: Vec<usize> = (0..w * h).filter(|&i| mask[i]).collect();
        if idx.len() < 3 {
            continue;
        }
        let design = DMatrix::from_fn(idx.len(), 2, |r, c| if c == 0 { x[idx[r]] } else { 1.0 });
        let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]));
        let Ok(sol) = design.svd(true, true).solve(&rhs, 1e-14) else {
            t.compare(f64::NAN, 0.0);
            continue;
        };
        let a = align_depth(&Grid::from_vec(w, h, x), &Grid::from_vec(w, h, y), &Grid::from_vec(w, h, mask));
        t.compare(a.s, sol[0]);
        t.compare(a.t, sol[1]);
    }
    t.finish()
}

fn orthogonal_depth_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("depth_data_term", "10 random 8x8 pairs, data term vs (Vy - Cov^2/Vx)/n", Tolerance::new(1e-12, 1e-10), slack);
    for _ in 0..10 {
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(1.0..3.0)).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.random_range(1.0..3.0)).collect();
        let n = 64.0;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        let l = depth_loss(&Grid::from_vec(8, 8, x), &Grid::from_vec(8, 8, y), &Grid::new(8, 8, true), 0.0);
        t.compare(l.data, (vy - cov * cov / vx) / n);
    }
    t.finish()
}

fn ramp_gradient_term_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("depth_gradient_term", "10 injected residual fields on 8x8, 4 scales summed by hand", Tolerance::new(1e-10, 1e-9), slack);
    let (w, h) = (8usize, 8usize);
    for _ in 0..10 {
        let x: Vec<f64> = (0..w * h).map(|_| rng.random_range(1.0..3.0)).collect();
        let (a, b) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let ramp: Vec<f64> = (0..w * h).map(|i| a * (i % w) as f64 + b * (i / w) as f64 + 0.01 * rng.random_range(-1.0..1.0)).collect();
        // Remove the part of the ramp explained by span{x, 1}, so that the
        // alignment is exactly (1, 0) and the residual is the field itself.
        let design = DMatrix::from_fn(w * h, 2, |r, c| if c == 0 { x[r] } else { 1.0 });
        let Ok(coef) = design.clone().svd(true, true).solve(&DVector::from_vec(ramp.clone()), 1e-14) else {
            t.compare(f64::NAN, 0.0);
            continue;
        };
        let fit = &design * coef;
        let res: Vec<f64> = (0..w * h).map(|i| ramp[i] - fit[i]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| x[i] - res[i]).collect();
        let mut expected = 0.0;
        for step in [1usize, 2, 4, 8] {
            let pts: Vec<(usize, usize)> = (0..h).step_by(step).flat_map(|py| (0..w).step_by(step).map(move |px| (px, py))).collect();
            let mut sum = 0.0;
            for &(px, py) in &pts {
                let r = res[py * w + px];
                if px + step < w {
                    sum += (res[py * w + px + step] - r).abs();
                }
                if py + step < h {
                    sum += (res[(py + step) * w + px] - r).abs();
                }
            }
            expected += sum / pts.len() as f64;
        }
        let lam = 0.5;
        let l = depth_loss(&Grid::from_vec(w, h, x), &Grid::from_vec(w, h, y), &Grid::new(w, h, true), lam);
        t.compare(l.alignment.s, 1.0);
        t.compare(l.alignment.t, 0.0);
        t.compare(l.gradient, expected);
        t.compare(l.value, res.iter().map(|r| r * r).sum::<f64>() / (w * h) as f64 + lam * expected);
    }
    t.finish()
}

fn normal_loop_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("normal_loss_loop", "10 random unit fields with 70% masks vs per-pixel loop", Tolerance::abs(1e-7), slack);
    for _ in 0..10 {
        let (w, h) = (rng.random_range(3..12), rng.random_range(3..12));
        let n = random_unit_field(rng, w, h, 1.0);
        let p = random_unit_field(rng, w, h, 1.0);
        let mask = Grid::from_vec(w, h, (0..w * h).map(|_| rng.random_bool(0.7)).collect());
        let (l1w, cw) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let l = normal_loss(&n, &p, &mask, l1w, cw);
        let (mut a, mut b, mut cnt) = (0.0, 0.0, 0.0);
        for i in 0..w * h {
            if !mask.data[i] {
                continue;
            }
            cnt += 1.0;
            let (x, y) = (n.data[i], p.data[i]);
            a += (0..3).map(|k| (x[k] - y[k]).abs()).sum::<f64>();
            b += 1.0 - (0..3).map(|k| x[k] * y[k]).sum::<f64>();
        }
        let want = if cnt > 0.0 { (l1w * a + cw * b) / cnt } else { 0.0 };
        t.compare(l.value, want);
    }
    t.finish()
}

fn intrinsics(f: f64, c: f64) -> Matrix3<f64> {
    Matrix3::new(f, 0.0, c, 0.0, f, c, 0.0, 0.0, 1.0)
}

fn apply_homography(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let w = h * Vector3::new(x, y, 1.0);
    (w.x / w.z, w.y / w.z)
}

fn parallax_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("homography_parallax", "20 sideways translations of a fronto-parallel plane, shift f t / d", Tolerance::abs(1e-9), slack);
    for _ in 0..20 {
        let (f, c) = (rng.random_range(60.0..200.0), rng.random_range(30.0..70.0));
        let (tx, d) = (rng.random_range(-0.5..0.5), rng.random_range(1.0..5.0));
        let k = intrinsics(f, c);
        let px = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        let Ok(h) = plane_homography(&k, &k, &Matrix3::identity(), &Vector3::new(-tx, 0.0, 0.0), &Vector3::new(0.0, 0.0, -1.0), d, px) else {
            t.compare(f64::NAN, 0.0);
            continue;
        };
        for _ in 0..5 {
            let (x, y) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            let (u, v) = apply_homography(&h, x, y);
            t.compare(u, x - f * tx / d);
            t.compare(v, y);
        }
    }
    t.finish()
}

fn homography_reprojection_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("homography_reprojection", "200 random planes and rigid motions, two plane points each", Tolerance::abs(1e-6), slack);
    for _ in 0..200 {
        let kr = intrinsics(rng.random_range(60.0..200.0), rng.random_range(30.0..70.0));
        let kn = intrinsics(rng.random_range(60.0..200.0), rng.random_range(30.0..70.0));
        let rot = nalgebra::Rotation3::new(random_unit(rng) * rng.random_range(0.0..0.5)).into_inner();
        let tr = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2));
        let px = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        let depth = rng.random_range(1.0..5.0);
        let Some(kr_inv) = kr.try_inverse() else {
            continue;
        };
        let ray = kr_inv * Vector3::new(px.0, px.1, 1.0);
        let mut n = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0).normalize();
        if rng.random_bool(0.5) {
            n = -n;
        }
        let Ok(h) = plane_homography(&kr, &kn, &rot, &tr, &n, depth, px) else {
            continue;
        };
        let x0 = ray * depth;
        let tangent = n.cross(&Vector3::new(0.3, 0.8, 0.1)).normalize();
        for x in [x0, x0 + tangent * 0.2] {
            let q = kr * x;
            let y = kn * (rot * x + tr);
            let (u, v) = apply_homography(&h, q.x / q.z, q.y / q.z);
            t.compare(u, y.x / y.z);
            t.compare(v, y.y / y.z);
        }
    }
    t.finish()
}

fn mv_plane_check(_rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("mv_exact_plane", "two 48x48 views of an exact textured plane: geo and pho vanish", Tolerance::EXACT, slack);
    let pair = PlanePair::new(48);
    match mv_consistency_loss(&pair.inputs(), &MvConfig::default(), &LossWeights::default()) {
        Ok(l) => {
            t.at_most(l.geo, 1e-6);
            t.at_most(l.pho, 1e-4);
            // Enough samples to make the zero meaningful.
            t.at_most(20.0, l.consistent as f64);
            t.at_most(10.0, l.photometric as f64);
        }
        Err(_) => t.compare(f64::NAN, 0.0),
    }
    t.finish()
}

fn ncc_identity_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("ncc_identity", "50 random 7x7 patches: self, negated affine copy, flat patch", Tolerance::abs(1e-12), slack);
    for _ in 0..50 {
        let a: Vec<f64> = (0..49).map(|_| rng.random()).collect();
        let (s, o) = (rng.random_range(0.1..3.0), rng.random_range(-1.0..1.0));
        let pos: Vec<f64> = a.iter().map(|v| s * v + o).collect();
        let neg: Vec<f64> = a.iter().map(|v| o - s * v).collect();
        t.compare(ncc(&a, &a).unwrap_or(f64::NAN), 1.0);
        t.compare(ncc(&a, &pos).unwrap_or(f64::NAN), 1.0);
        t.compare(ncc(&a, &neg).unwrap_or(f64::NAN), -1.0);
        t.compare(f64::from(u8::from(ncc(&a, &[o; 49]).is_none())), 1.0);
    }
    t.finish()
}

fn ncc_bounds_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("ncc_bounds", "500 random patch pairs: |ncc| <= 1 and Pearson agreement", Tolerance::abs(1e-12), slack);
    for _ in 0..500 {
        let a: Vec<f64> = (0..49).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..49).map(|i| 0.5 * a[i] + rng.random::<f64>()).collect();
        let v = ncc(&a, &b).unwrap_or(f64::NAN);
        t.at_most(v.abs(), 1.0);
        let n = 49.0;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        t.compare(v, sab / (saa * sbb).sqrt());
    }
    t.finish()
}

fn total_loss_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("total_loss", "100 random terms and weights, absent terms count as zero", Tolerance::new(1e-15, 1e-14), slack);
    for _ in 0..100 {
        let mut opt = || rng.random_bool(0.7).then(|| rng.random_range(0.0..2.0));
        let terms = LossTerms {
            rgb: 0.0,
            depth: opt(),
            normal: opt(),
            mv: opt(),
        };
        let terms = LossTerms {
            rgb: rng.random_range(0.0..2.0),
            ..terms
        };
        let w = LossWeights {
            lambda_rgb: rng.random_range(0.0..2.0),
            lambda_d: rng.random_range(0.0..2.0),
            lambda_n: rng.random_range(0.0..2.0),
            ..Default::default()
        };
        let want = w.lambda_rgb * terms.rgb
            + w.lambda_d * terms.depth.unwrap_or(0.0)
            + w.lambda_n * terms.normal.unwrap_or(0.0)
            + terms.mv.unwrap_or(0.0);
        t.compare(total_loss(&terms, &w).unwrap_or(f64::NAN), want);
    }
    t.finish()
}

// ---------------------------------------------------------------------------
// Meshing

fn plane_depth(cam: &Camera, normal: &Vector3<f64>, offset: f64) -> Grid<f64> {
    let (w, h) = (cam.width, cam.height);
    let c = cam.center();
    let mut depth = Grid::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let ray = cam.rotation.transpose() * cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
            // The camera ray has unit z, so the parameter is the depth.
            depth.data[y * w + x] = (offset - normal.dot(&c)) / normal.dot(&ray);
        }
    }
    depth
}

fn tsdf_plane_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("tsdf_plane", "3 tilted planes fused from two 96x96 views, vertex distance <= voxel/2", Tolerance::EXACT, slack);
    let (size, vs) = (96usize, 0.02);
    let s = size as f64;
    for _ in 0..3 {
        let normal = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0).normalize();
        let offset = normal.dot(&Vector3::new(0.0, 0.0, rng.random_range(1.9..2.1)));
        let side = rng.random_range(0.3..0.6);
        let cams = [
            Camera::look_at(Vector3::zeros(), Vector3::z(), -Vector3::y(), [s, s, s / 2.0, s / 2.0], size, size),
            Camera::look_at(Vector3::new(side, 0.0, 0.2), Vector3::new(-side / 2.0, 0.0, 1.0), -Vector3::y(), [s, s, s / 2.0, s / 2.0], size, size),
        ];
        let mut vol = TsdfVolume::new(Vector3::new(-0.6, -0.6, 1.6), [61, 61, 41], vs, 5.0 * vs);
        for cam in &cams {
            if vol.integrate_depth(&plane_depth(cam, &normal, offset), None, &Grid::new(size, size, 1.0), cam, 0.5, 0.05, 100.0).is_err() {
                t.compare(f64::NAN, 0.0);
            }
        }
        let mesh = vol.extract_mesh();
        t.at_most(1.0, mesh.vertices.len() as f64);
        for v in &mesh.vertices {
            t.at_most((normal.dot(v) - offset).abs(), vs / 2.0);
        }
    }
    t.finish()
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

fn tsdf_sphere_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("marching_cubes_sphere", "5 analytic spheres, radius within one voxel and Euler characteristic 2", Tolerance::EXACT, slack);
    let vs = 0.05;
    for _ in 0..5 {
        let r = rng.random_range(0.25..0.4);
        let c = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let mesh = analytic_volume(|p| (p - c).norm() - r, [21, 21, 21], Vector3::repeat(-0.5), vs).extract_mesh();
        t.at_most(1.0, mesh.triangles.len() as f64);
        t.compare(mesh.euler_characteristic() as f64, 2.0);
        t.compare(f64::from(u8::from(mesh.validate().is_ok())), 1.0);
        for v in &mesh.vertices {
            t.at_most(((v - c).norm() - r).abs(), vs);
        }
    }
    t.finish()
}

fn tsdf_affine_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let vs = 0.04;
    let mut t = Tally::new("marching_cubes_affine", "10 random affine fields, vertices on the zero plane", Tolerance::abs(1e-6 * vs), slack);
    for _ in 0..10 {
        let n = random_unit(rng);
        let d = rng.random_range(-0.1..0.1);
        let vol = analytic_volume(|p| n.dot(p) - d, [16, 16, 16], Vector3::repeat(-0.3), vs);
        let mesh = vol.extract_mesh();
        t.at_most(1.0, mesh.vertices.len() as f64);
        let (lo, hi) = (vol.origin, vol.max_corner());
        for v in &mesh.vertices {
            t.compare(n.dot(v), d);
            let outside = (0..3).map(|a| (lo[a] - v[a]).max(v[a] - hi[a])).fold(0.0, f64::max);
            t.at_most(outside, 1e-12);
        }
    }
    t.finish()
}

fn single_splat_mesh_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("single_splat_mesh", "one opaque facing splat rendered from 3 views, mesh on its plane", Tolerance::EXACT, slack);
    let size = 48;
    let s = size as f64;
    let z = rng.random_range(1.8..2.2);
    let mut scene = Scene::empty(SeedConfig {
        k: 1,
        ..Default::default()
    });
    scene.seeds.push(SeedPoint {
        anchor: Vector3::new(0.0, 0.0, z),
        level: 0,
        key: [0; 3],
        grad_accum: 0.0,
        grad_count: 0,
        opacity_accum: 0.0,
        opacity_count: 0,
        surfel_ids: vec![0],
        active: true,
    });
    let sigma: f64 = 0.12;
    scene.surfels.push(Surfel {
        offset: Vector3::zeros(),
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: [sigma.ln(); 2],
        raw_opacity: logit(0.95),
        raw_color: [0.0; 3],
        seed_id: 0,
    });
    let cams: Vec<Camera> = [0.0, 0.15, -0.15]
        .iter()
        .map(|&x| Camera::look_at(Vector3::new(x, 0.0, 0.0), Vector3::new(-x / z, 0.0, 1.0), -Vector3::y(), [s, s, s / 2.0, s / 2.0], size, size))
        .collect();
    let cfg = TsdfConfig {
        voxel_size: 0.01,
        margin_voxels: 40,
        ..Default::default()
    };
    match reconstruct_mesh(&scene, &cams, &RasterConfig::default(), &cfg) {
        Ok(mesh) => {
            t.at_most(1.0, mesh.vertices.len() as f64);
            for v in &mesh.vertices {
                t.at_most((v.z - z).abs(), cfg.voxel_size / 2.0);
                t.at_most(v.xy().norm(), 3.0 * sigma);
            }
        }
        Err(_) => t.compare(f64::NAN, 0.0),
    }
    t.finish()
}

// ---------------------------------------------------------------------------
// Evaluation

fn sampling_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("area_weighted_sampling", "5 triangles on distinct planes, 20000 samples, counts within 4 sigma", Tolerance::abs(1e-12), slack);
    let mut mesh = TriangleMesh::default();
    let mut areas = Vec::new();
    for i in 0..5 {
        let z = i as f64;
        let base = mesh.vertices.len() as u32;
        let pts = [0, 1, 2].map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), z));
        areas.push((pts[1] - pts[0]).cross(&(pts[2] - pts[0])).norm() / 2.0);
        mesh.vertices.extend(pts);
        mesh.triangles.push([base, base + 1, base + 2]);
    }
    let n = 20000;
    let Ok(samples) = sample_mesh(&mesh, n, rng.random()) else {
        t.compare(f64::NAN, 0.0);
        return t.finish();
    };
    t.compare(samples.len() as f64, n as f64);
    let total: f64 = areas.iter().sum();
    let mut counts = [0usize; 5];
    for p in &samples {
        let i = p.z.round() as usize;
        t.compare(p.z, i as f64);
        counts[i.min(4)] += 1;
        // Barycentric coordinates of the sample in its triangle.
        let [a, b, c] = mesh.triangle(i.min(4));
        let area = |p: &Vector3<f64>, q: &Vector3<f64>, r: &Vector3<f64>| (q - p).cross(&(r - p)).z / 2.0;
        let full = area(&a, &b, &c);
        for bary in [area(p, &b, &c) / full, area(&a, p, &c) / full, area(&a, &b, p) / full] {
            t.at_most(-bary, 1e-12);
        }
    }
    for (count, area) in counts.iter().zip(&areas) {
        let p = area / total;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        t.at_most((*count as f64 - n as f64 * p).abs(), 4.0 * sd);
    }
    t.finish()
}

fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> f64 {
    points.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)
}

fn metrics_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("chamfer_metrics", "5 random cloud pairs of 200 points vs O(n^2) loops", Tolerance::abs(1e-9), slack);
    for _ in 0..5 {
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<Vector3<f64>> {
            (0..200).map(|_| Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.2))).collect()
        };
        let pred = cloud(rng);
        let gt = cloud(rng);
        let cfg = EvalConfig {
            threshold: rng.random_range(0.02..0.1),
            n_samples: 200,
            seed: 0,
        };
        let Ok(m) = compute_metrics(&pred, &gt, &cfg) else {
            t.compare(f64::NAN, 0.0);
            continue;
        };
        let d_pred: Vec<f64> = pred.iter().map(|p| brute_nearest(&gt, p).sqrt()).collect();
        let d_gt: Vec<f64> = gt.iter().map(|p| brute_nearest(&pred, p).sqrt()).collect();
        let acc = d_pred.iter().sum::<f64>() / 200.0;
        let comp = d_gt.iter().sum::<f64>() / 200.0;
        let prec = d_pred.iter().filter(|d| **d < cfg.threshold).count() as f64 / 200.0;
        let rec = d_gt.iter().filter(|d| **d < cfg.threshold).count() as f64 / 200.0;
        let f = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        t.compare(m.accuracy, acc);
        t.compare(m.completion, comp);
        t.compare(m.precision, prec);
        t.compare(m.recall, rec);
        t.compare(m.fscore, f);
    }
    t.finish()
}

fn kd_tree_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("kd_tree_nearest", "uniform, clustered and duplicated sets, 500 queries each vs brute force", Tolerance::EXACT, slack);
    let uniform: Vec<Vector3<f64>> = (0..500).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
    let clustered: Vec<Vector3<f64>> = (0..500)
        .map(|i| Vector3::new((i % 3) as f64, 0.0, 0.0) + Vector3::new(rng.random(), rng.random(), rng.random()) * 1e-3)
        .collect();
    let duplicated: Vec<Vector3<f64>> = (0..500).map(|i| Vector3::new((i % 7) as f64 * 0.1, 0.0, (i % 2) as f64)).collect();
    for pts in [uniform, clustered, duplicated] {
        let tree = KdTree::new(&pts);
        for _ in 0..500 {
            let q = Vector3::new(rng.random_range(-0.5..3.0), rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5));
            t.compare(tree.nearest_sq(&q), brute_nearest(&pts, &q));
        }
    }
    t.finish()
}

// ---------------------------------------------------------------------------
// Pipeline

fn synthetic_render_check(rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("synthetic_room_render", "4 trajectory views at 24x18 vs per-face intersection and checker shading", Tolerance::abs(1e-12), slack);
    let spec = SyntheticRoomSpec {
        n_views: 4,
        image_width: 24,
        image_height: 18,
        n_points: 500,
        texture: Texture::Checker,
        seed: rng.random_range(0..1000),
        ..Default::default()
    };
    let Ok(cams) = trajectory(&spec) else {
        t.compare(f64::NAN, 0.0);
        return t.finish();
    };
    let (lo, hi) = (spec.min_corner(), spec.max_corner());
    for cam in &cams {
        let maps = render_view(&spec, cam);
        let o = cam.center();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let d = cam.rotation.transpose() * cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                let mut best = (f64::INFINITY, 0, Vector3::zeros());
                for face in 0..6 {
                    let axis = face / 2;
                    let plane = if face % 2 == 0 { lo[axis] } else { hi[axis] };
                    if d[axis] == 0.0 {
                        continue;
                    }
                    let s = (plane - o[axis]) / d[axis];
                    let mut p = o + d * s;
                    p[axis] = plane;
                    let inside = (0..3).all(|k| p[k] >= lo[k] - 1e-9 && p[k] <= hi[k] + 1e-9);
                    if s > 0.0 && inside && s < best.0 {
                        best = (s, face, p);
                    }
                }
                let (s, face, p) = best;
                let axis = face / 2;
                let (u, v) = (p[(axis + 1) % 3] / spec.texture_scale, p[(axis + 2) % 3] / spec.texture_scale);
                let k = if (u.floor() + v.floor()).rem_euclid(2.0) == 0.0 { 1.0 } else { 0.5 };
                let got = maps.image.get(x, y);
                for ch in 0..3 {
                    let want = ((FACE_COLORS[face][ch] * k).clamp(0.0, 1.0) * 255.0).round() / 255.0;
                    t.compare(got[ch], want);
                }
                t.compare(*maps.depth.get(x, y), s);
            }
        }
    }
    t.finish()
}

fn train_smoke_check(_rng: &mut ChaCha8Rng, slack: f64) -> OracleReport {
    let mut t = Tally::new("train_smoke", "5 grey splats fitted to a colored 8x8 target for 200 steps, loss halves", Tolerance::EXACT, slack);
    let spots = [(0.0, 0.0), (0.3, 0.0), (-0.3, 0.0), (0.0, 0.3), (0.0, -0.3)];
    let target = [[0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.2, 0.2, 0.9], [0.9, 0.9, 0.2], [0.2, 0.9, 0.9]];
    let build = |colors: &[[f64; 3]; 5]| {
        let mut scene = Scene::empty(SeedConfig {
            k: 1,
            delta: 0.2,
            ..Default::default()
        });
        for (i, ((x, y), c)) in spots.iter().zip(colors).enumerate() {
            scene.seeds.push(SeedPoint {
                anchor: Vector3::new(*x, *y, 2.0),
                level: 0,
                key: [i as i64, 0, 10],
                grad_accum: 0.0,
                grad_count: 0,
                opacity_accum: 0.0,
                opacity_count: 0,
                surfel_ids: vec![i],
                active: true,
            });
            scene.surfels.push(Surfel {
                offset: Vector3::zeros(),
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [0.15f64.ln(); 2],
                raw_opacity: logit(0.8),
                raw_color: c.map(logit),
                seed_id: i,
            });
        }
        scene
    };
    let mut cfg = PipelineConfig::default();
    cfg.train.total_iters = 200;
    cfg.train.checkpoint_every = 0;
    cfg.loss.lambda_d = 0.0;
    cfg.loss.lambda_n = 0.0;
    let cam = pinhole(8);
    let out = render(&build(&target), &cam, &cfg.raster);
    let dataset = Dataset {
        root: Default::default(),
        frames: vec![Frame {
            name: "target".into(),
            camera_id: "c0".into(),
            camera: cam,
            image: out.color,
            depth: Some(out.depth),
            normal: Some(out.normal),
        }],
        points: Vec::new(),
        gt_mesh: None,
    };
    match fit(build(&[[0.5; 3]; 5]), &dataset, &cfg, &TrainOptions::default()) {
        Ok(fitted) => {
            let first = fitted.reports.first().map_or(f64::NAN, |r| r.total);
            let last = fitted.reports.last().map_or(f64::NAN, |r| r.total);
            t.at_most(last, 0.5 * first);
            t.compare(fitted.reports.len() as f64, 200.0);
        }
        Err(_) => t.compare(f64::NAN, 0.0),
    }
    t.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn show(reports: &[OracleReport]) {
        for r in reports {
            println!("{r}");
        }
    }

    #[test]
    fn equivalence_suite_passes() {
        let reports = run_equivalence_suite(7);
        show(&reports);
        assert_eq!(reports.len(), 29);
        assert!(reports.iter().all(|r| r.passed));
    }

    #[test]
    fn gradient_suite_passes() {
        let reports = run_gradient_suite(7);
        show(&reports);
        assert!(reports.iter().all(|r| r.passed));
    }

    #[test]
    fn reports_depend_only_on_the_seed() {
        assert_eq!(run_gradient_suite(3), run_gradient_suite(3));
    }

    #[test]
    fn infinite_slack_admits_any_finite_error() {
        let tol = FD_TOLERANCE.scaled(f64::INFINITY);
        assert!(tol.admits(1e300, -1e300));
        assert!(!tol.admits(f64::NAN, 0.0));
    }

    #[test]
    fn vanishing_slack_exposes_rounding() {
        // Finite differences are never exact, so a zero tolerance must fail.
        let reports = run_gradient_suite_with(7, 0.0);
        assert!(reports.iter().any(|r| !r.passed));
    }

    #[test]
    fn a_nan_comparison_fails_the_check() {
        let mut t = Tally::new("nan", "", Tolerance::abs(1.0), 1.0);
        t.compare(1.0, 1.0);
        t.compare(f64::NAN, 0.0);
        t.compare(2.0, 2.0);
        let r = t.finish();
        assert!(!r.passed && r.max_abs.is_nan());
    }

    #[test]
    fn an_empty_check_does_not_pass() {
        assert!(!Tally::new("empty", "", Tolerance::EXACT, 1.0).finish().passed);
    }
}
