//! Reverse-mode differentiation of [`crate::rasterizer::render`].
//!
//! The backward pass replays each pixel's compositing list and propagates the
//! map gradients to camera-space splat quantities (center, scaled tangents,
//! normal, opacity, color). Tiles accumulate partial sums privately and are
//! reduced in tile order, so the result does not depend on the worker count.
//! Camera-space gradients are then pulled back to the raw surfel parameters.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math::quat_matrix_backward;
use crate::rasterizer::{composite_pixel, prepare, row_entries, Binning, Contribution, RasterConfig, RenderOutput};
use crate::scene::{Camera, Scene, SURFEL_PARAMS};

/// d(loss)/d(rendered map) for every output of a render.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads {
    pub color: Grid<[f64; 3]>,
    pub depth: Grid<f64>,
    pub normal: Grid<[f64; 3]>,
    pub alpha: Grid<f64>,
}

impl OutputGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Grid::new(width, height, [0.0; 3]),
            depth: Grid::new(width, height, 0.0),
            normal: Grid::new(width, height, [0.0; 3]),
            alpha: Grid::new(width, height, 0.0),
        }
    }

    pub fn add_assign(&mut self, other: &OutputGrads) {
        for (a, b) in self.color.data.iter_mut().zip(&other.color.data) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.normal.data.iter_mut().zip(&other.normal.data) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.depth.data.iter_mut().zip(&other.depth.data) {
            *a += b;
        }
        for (a, b) in self.alpha.data.iter_mut().zip(&other.alpha.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.color.data.iter_mut().flatten().for_each(|v| *v *= s);
        self.normal.data.iter_mut().flatten().for_each(|v| *v *= s);
        self.depth.data.iter_mut().for_each(|v| *v *= s);
        self.alpha.data.iter_mut().for_each(|v| *v *= s);
    }

    fn check_finite(&self) -> Result<()> {
        if !self.color.data.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient("color"));
        }
        if !self.depth.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient("depth"));
        }
        if !self.normal.data.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient("normal"));
        }
        if !self.alpha.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient("alpha"));
        }
        Ok(())
    }
}

/// Gradient of one surfel's raw parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SurfelGrad {
    pub offset: Vector3<f64>,
    pub rotation: [f64; 4],
    pub log_scale: [f64; 2],
    pub raw_opacity: f64,
    pub raw_color: [f64; 3],
}

impl SurfelGrad {
    /// Same layout as [`crate::scene::Surfel::params`].
    pub fn as_array(&self) -> [f64; SURFEL_PARAMS] {
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

    pub fn add_assign(&mut self, o: &SurfelGrad) {
        self.offset += o.offset;
        for i in 0..4 {
            self.rotation[i] += o.rotation[i];
        }
        for i in 0..2 {
            self.log_scale[i] += o.log_scale[i];
        }
        self.raw_opacity += o.raw_opacity;
        for i in 0..3 {
            self.raw_color[i] += o.raw_color[i];
        }
    }
}

/// Parameter gradients for every surfel of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub surfels: Vec<SurfelGrad>,
    /// Screen-space center gradient norm per surfel (NDC units).
    pub screen: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            surfels: vec![SurfelGrad::default(); n],
            screen: vec![0.0; n],
        }
    }

    /// Accumulates another pass; screen-space norms add as well.
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.surfels.iter_mut().zip(&other.surfels) {
            a.add_assign(b);
        }
        for (a, b) in self.screen.iter_mut().zip(&other.screen) {
            *a += b;
        }
    }
}

/// Camera-space gradient of one projected splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    pc: Vector3<f64>,
    a: Vector3<f64>,
    b: Vector3<f64>,
    normal: Vector3<f64>,
    opacity: f64,
    color: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.pc += o.pc;
        self.a += o.a;
        self.b += o.b;
        self.normal += o.normal;
        self.opacity += o.opacity;
        for k in 0..3 {
            self.color[k] += o.color[k];
        }
    }
}

/// Backpropagates `output_grads` through the render of `scene` from `camera`.
///
/// `render_output` must be the forward result for the same inputs.
pub fn backward(
    scene: &Scene,
    camera: &Camera,
    config: &RasterConfig,
    render_output: &RenderOutput,
    output_grads: &OutputGrads,
) -> Result<ParamGrads> {
    let binning = prepare(scene, camera, config);
    backward_reusing(scene, camera, config, &binning, render_output, output_grads)
}

/// [`backward`] with the binning of the forward pass.
pub(crate) fn backward_reusing(
    scene: &Scene,
    camera: &Camera,
    config: &RasterConfig,
    binning: &Binning,
    render_output: &RenderOutput,
    output_grads: &OutputGrads,
) -> Result<ParamGrads> {
    if !output_grads.alpha.same_shape(&render_output.alpha)
        || output_grads.alpha.width != camera.width
        || output_grads.alpha.height != camera.height
    {
        return Err(Error::DimensionMismatch(format!(
            "output grads {}x{} vs render {}x{}",
            output_grads.alpha.width,
            output_grads.alpha.height,
            render_output.alpha.width,
            render_output.alpha.height
        )));
    }
    output_grads.check_finite()?;
    Ok(backward_binned(scene, camera, config, binning, render_output, output_grads))
}

pub(crate) fn backward_binned(
    scene: &Scene,
    camera: &Camera,
    config: &RasterConfig,
    binning: &Binning,
    out: &RenderOutput,
    grads: &OutputGrads,
) -> ParamGrads {
    let (w, h) = (camera.width, camera.height);
    let ts = binning.tile_size;
    let tile_grads: Vec<Vec<SplatGrad>> = binning
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut acc = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let x0 = (t % binning.tiles_x) * ts;
            let y0 = (t / binning.tiles_x) * ts;
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut row = Vec::new();
            for py in y0..(y0 + ts).min(h) {
                row_entries(&binning.splats, list, py, &mut row);
                for px in x0..(x0 + ts).min(w) {
                    contribs.clear();
                    composite_pixel(&binning.splats, &row, px, py, config, |_, c| contribs.push(*c));
                    if contribs.is_empty() {
                        continue;
                    }
                    let i = py * w + px;
                    pixel_backward(binning, camera, config, out, grads, i, px, py, &contribs, |slot, g| {
                        acc[slot as usize].add(g)
                    });
                }
            }
            acc
        })
        .collect();

    let mut per_splat = vec![SplatGrad::default(); binning.splats.len()];
    for (list, acc) in binning.tiles.iter().zip(&tile_grads) {
        for (&idx, g) in list.iter().zip(acc) {
            per_splat[idx as usize].add(g);
        }
    }

    let mut result = ParamGrads::zeros(scene.surfels.len());
    let world: Vec<(usize, SurfelGrad, f64)> = binning
        .splats
        .par_iter()
        .zip(per_splat.par_iter())
        .map(|(s, g)| {
            let surfel = &scene.surfels[s.surfel];
            let rcw = camera.rotation.transpose();
            let rot = surfel.rotation_matrix();
            let [su, sv] = surfel.scales();
            let offset = rcw * g.pc;
            let ga = rcw * g.a;
            let gb = rcw * g.b;
            let gtw = rcw * g.normal * s.flip;
            let tu = rot.column(0).into_owned();
            let tv = rot.column(1).into_owned();
            let grad_r = Matrix3::from_columns(&[ga * su, gb * sv, gtw]);
            let rotation = quat_matrix_backward(&surfel.rotation, &grad_r);
            let log_scale = [tu.dot(&ga) * su, tv.dot(&gb) * sv];
            let raw_opacity = g.opacity * s.opacity * (1.0 - s.opacity);
            let raw_color = [0, 1, 2].map(|k| g.color[k] * s.color[k] * (1.0 - s.color[k]));
            // Moving the projected center by one pixel at fixed depth moves
            // the camera-space center by z / f.
            let gx = g.pc.x * s.pc.z / camera.fx * (w as f64 / 2.0);
            let gy = g.pc.y * s.pc.z / camera.fy * (h as f64 / 2.0);
            (
                s.surfel,
                SurfelGrad {
                    offset,
                    rotation,
                    log_scale,
                    raw_opacity,
                    raw_color,
                },
                (gx * gx + gy * gy).sqrt(),
            )
        })
        .collect();
    for (id, g, screen) in world {
        result.surfels[id] = g;
        result.screen[id] = screen;
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    binning: &Binning,
    camera: &Camera,
    config: &RasterConfig,
    out: &RenderOutput,
    grads: &OutputGrads,
    i: usize,
    px: usize,
    py: usize,
    contribs: &[Contribution],
    mut emit: impl FnMut(u32, &SplatGrad),
) {
    let alpha = out.alpha.data[i];
    let depth = out.depth.data[i];
    let g_color = grads.color.data[i];
    let g_depth = grads.depth.data[i];
    let g_normal = Vector3::from(grads.normal.data[i]);

    // Upstream gradients on the unnormalized sums Σ f_i w_i T_i.
    let (g_dnum, g_alpha) = if alpha > 0.0 {
        (g_depth / alpha, grads.alpha.data[i] - g_depth * depth / alpha)
    } else {
        (0.0, grads.alpha.data[i])
    };
    let mut n_num = Vector3::zeros();
    for c in contribs {
        n_num += binning.splats[c.splat as usize].normal * (c.w * c.t);
    }
    let n_len = n_num.norm();
    let g_nnum = if n_len > 0.0 {
        let n = n_num / n_len;
        (g_normal - n * n.dot(&g_normal)) / n_len
    } else {
        Vector3::zeros()
    };

    let x = px as f64 + 0.5;
    let y = py as f64 + 0.5;
    let dx = (x - camera.cx) / camera.fx;
    let dy = (y - camera.cy) / camera.fy;
    let sigma2 = config.lowpass_sigma * config.lowpass_sigma;

    // Score of each splat: f_i · g_f.
    let score = |c: &Contribution| {
        let s = &binning.splats[c.splat as usize];
        let mut v = g_alpha + c.z * g_dnum + s.normal.dot(&g_nnum);
        for k in 0..3 {
            v += s.color[k] * g_color[k];
        }
        v
    };

    // Back to front: rest = Σ_{j>i} s_j w_j Π_{i<k<j} (1 - w_k).
    let mut rest = 0.0;
    for c in contribs.iter().rev() {
        let s = &binning.splats[c.splat as usize];
        let si = score(c);
        let wt = c.w * c.t;
        let g_w = c.t * (si - rest);
        rest = si * c.w + (1.0 - c.w) * rest;

        let mut g = SplatGrad {
            normal: g_nnum * wt,
            opacity: c.g * g_w,
            color: [g_color[0] * wt, g_color[1] * wt, g_color[2] * wt],
            ..Default::default()
        };
        let g_g = s.opacity * g_w;
        let g_z = g_dnum * wt;

        let (mut g_u, mut g_v) = (0.0, 0.0);
        if c.lowpass {
            // G = exp(-|p - x|² / 2σ²), p the projected center.
            let ddx = x - s.center.0;
            let ddy = y - s.center.1;
            let g_cx = c.g * ddx / sigma2 * g_g;
            let g_cy = c.g * ddy / sigma2 * g_g;
            let iz = 1.0 / s.pc.z;
            g.pc.x += g_cx * camera.fx * iz;
            g.pc.y += g_cy * camera.fy * iz;
            g.pc.z -= (g_cx * camera.fx * s.pc.x + g_cy * camera.fy * s.pc.y) * iz * iz;
        } else {
            g_u -= c.u * c.g * g_g;
            g_v -= c.v * c.g * g_g;
        }

        // z = pc.z + u a.z + v b.z
        g_u += s.a.z * g_z;
        g_v += s.b.z * g_z;
        g.pc.z += g_z;
        g.a.z += c.u * g_z;
        g.b.z += c.v * g_z;

        // (u, v) solves [A_a A_b; B_a B_b] (u, v) = -(A_p, B_p) with
        // A_j = col_j.x - dx col_j.z and B_j = col_j.y - dy col_j.z.
        if g_u != 0.0 || g_v != 0.0 {
            let aa = s.a.x - dx * s.a.z;
            let ab = s.b.x - dx * s.b.z;
            let ba = s.a.y - dy * s.a.z;
            let bb = s.b.y - dy * s.b.z;
            let det = aa * bb - ab * ba;
            // λ = M^{-T} (g_u, g_v)
            let l0 = (bb * g_u - ba * g_v) / det;
            let l1 = (-ab * g_u + aa * g_v) / det;
            let ga = [-l0 * c.u, -l0 * c.v, -l0];
            let gb = [-l1 * c.u, -l1 * c.v, -l1];
            let push = |col: &mut Vector3<f64>, gaj: f64, gbj: f64| {
                col.x += gaj;
                col.y += gbj;
                col.z -= dx * gaj + dy * gbj;
            };
            push(&mut g.a, ga[0], gb[0]);
            push(&mut g.b, ga[1], gb[1]);
            push(&mut g.pc, ga[2], gb[2]);
        }
        emit(c.slot, &g);
    }
}

/// Folds one iteration of gradient and opacity statistics into the seeds.
pub fn accumulate_seed_stats(grads: &ParamGrads, scene: &mut Scene) {
    let Scene { seeds, surfels, .. } = scene;
    for seed in seeds.iter_mut().filter(|s| s.active) {
        if seed.surfel_ids.is_empty() {
            continue;
        }
        let mut g = 0.0;
        let mut a = 0.0;
        for &id in &seed.surfel_ids {
            g += grads.screen[id];
            a += surfels[id].opacity();
        }
        seed.grad_accum += g / seed.surfel_ids.len() as f64;
        seed.grad_count += 1;
        seed.opacity_accum += a;
        seed.opacity_count += 1;
    }
}
