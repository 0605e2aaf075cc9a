//! Scale-and-shift-invariant depth supervision.
//!
//! The rendered depth is first aligned to the prior with a least-squares
//! `(s, t)`; the loss is the mean squared residual plus a multi-scale
//! gradient-matching term on the residual. Gradients flow through `s` and
//! `t` as well as through the rendered depth directly.

use crate::grid::Grid;

use super::sign;

/// Number of scales in the gradient-matching term (steps 1, 2, 4, 8).
const GRAD_SCALES: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthAlignment {
    pub s: f64,
    pub t: f64,
    /// The rendered depth was constant; `s = 0` and `t` is the prior mean.
    pub degenerate: bool,
}

/// Least-squares `(s, t)` minimizing `Σ_valid (s·rendered + t - prior)²`.
pub fn align_depth(rendered: &Grid<f64>, prior: &Grid<f64>, mask: &Grid<bool>) -> DepthAlignment {
    let sums = Sums::collect(rendered, prior, mask);
    sums.solve()
}

#[derive(Default)]
struct Sums {
    n: f64,
    x: f64,
    xx: f64,
    y: f64,
    xy: f64,
}

impl Sums {
    fn collect(rendered: &Grid<f64>, prior: &Grid<f64>, mask: &Grid<bool>) -> Self {
        let mut s = Sums::default();
        for i in 0..mask.len() {
            if mask.data[i] {
                let (x, y) = (rendered.data[i], prior.data[i]);
                s.n += 1.0;
                s.x += x;
                s.xx += x * x;
                s.y += y;
                s.xy += x * y;
            }
        }
        s
    }

    fn det(&self) -> f64 {
        self.n * self.xx - self.x * self.x
    }

    fn solve(&self) -> DepthAlignment {
        let det = self.det();
        // Relative test: det is n² times the variance of the rendered depth.
        if self.n < 2.0 || det <= 1e-12 * self.n * self.xx.max(f64::MIN_POSITIVE) {
            return DepthAlignment {
                s: 0.0,
                t: if self.n > 0.0 { self.y / self.n } else { 0.0 },
                degenerate: true,
            };
        }
        DepthAlignment {
            s: (self.n * self.xy - self.x * self.y) / det,
            t: (self.xx * self.y - self.x * self.xy) / det,
            degenerate: false,
        }
    }
}

pub struct DepthLoss {
    /// `data + lambda_grad · gradient`.
    pub value: f64,
    pub data: f64,
    pub gradient: f64,
    pub alignment: DepthAlignment,
    pub valid: usize,
    /// d(value)/d(rendered depth).
    pub grad: Grid<f64>,
}

/// Multi-scale gradient-matching term on the residual, accumulating
/// d(term)/d(residual) into `g_res` scaled by `weight`.
fn gradient_matching(res: &Grid<f64>, mask: &Grid<bool>, weight: f64, g_res: &mut [f64]) -> f64 {
    let (w, h) = (res.width, res.height);
    let mut total = 0.0;
    for scale in 0..GRAD_SCALES {
        let step = 1usize << scale;
        let mut count = 0usize;
        for y in (0..h).step_by(step) {
            for x in (0..w).step_by(step) {
                if mask.data[y * w + x] {
                    count += 1;
                }
            }
        }
        if count == 0 {
            continue;
        }
        let norm = 1.0 / count as f64;
        let mut sum = 0.0;
        for y in (0..h).step_by(step) {
            for x in (0..w).step_by(step) {
                let i = y * w + x;
                if !mask.data[i] {
                    continue;
                }
                for j in [
                    (x + step < w).then(|| i + step),
                    (y + step < h).then(|| i + step * w),
                ]
                .into_iter()
                .flatten()
                {
                    if mask.data[j] {
                        let d = res.data[j] - res.data[i];
                        sum += d.abs();
                        let g = weight * norm * sign(d);
                        g_res[j] += g;
                        g_res[i] -= g;
                    }
                }
            }
        }
        total += sum * norm;
    }
    total
}

/// Aligned depth loss over the pixels where `mask` is set.
pub fn depth_loss(rendered: &Grid<f64>, prior: &Grid<f64>, mask: &Grid<bool>, lambda_grad: f64) -> DepthLoss {
    let (w, h) = (rendered.width, rendered.height);
    let sums = Sums::collect(rendered, prior, mask);
    let alignment = sums.solve();
    let valid = sums.n as usize;
    let mut grad = Grid::new(w, h, 0.0);
    if valid == 0 {
        return DepthLoss {
            value: 0.0,
            data: 0.0,
            gradient: 0.0,
            alignment,
            valid,
            grad,
        };
    }
    let DepthAlignment { s, t, .. } = alignment;
    let mut res = Grid::new(w, h, 0.0);
    for i in 0..mask.len() {
        if mask.data[i] {
            res.data[i] = s * rendered.data[i] + t - prior.data[i];
        }
    }
    let inv_n = 1.0 / sums.n;
    let mut g_res = vec![0.0; w * h];
    let mut data = 0.0;
    for i in 0..mask.len() {
        if mask.data[i] {
            data += res.data[i] * res.data[i];
            g_res[i] = 2.0 * res.data[i] * inv_n;
        }
    }
    data *= inv_n;
    let gradient = gradient_matching(&res, mask, lambda_grad, &mut g_res);

    // Residual r = s x + t - y: direct path plus the (s, t) path.
    let (mut g_s, mut g_t) = (0.0, 0.0);
    for i in 0..mask.len() {
        if mask.data[i] {
            grad.data[i] = s * g_res[i];
            g_s += g_res[i] * rendered.data[i];
            g_t += g_res[i];
        }
    }
    if !alignment.degenerate {
        // s = (n Sxy - Sx Sy) / det, t = (Sxx Sy - Sx Sxy) / det,
        // det = n Sxx - Sx².
        let det = sums.det();
        let (n, sx, sy, sxy) = (sums.n, sums.x, sums.y, sums.xy);
        let ds_dsx = (-sy - 2.0 * s * (-sx)) / det;
        let ds_dsxx = -s * n / det;
        let ds_dsxy = n / det;
        let dt_dsx = (-sxy - 2.0 * t * (-sx)) / det;
        let dt_dsxx = (sy - t * n) / det;
        let dt_dsxy = -sx / det;
        let g_sx = g_s * ds_dsx + g_t * dt_dsx;
        let g_sxx = g_s * ds_dsxx + g_t * dt_dsxx;
        let g_sxy = g_s * ds_dsxy + g_t * dt_dsxy;
        for i in 0..mask.len() {
            if mask.data[i] {
                grad.data[i] += g_sx + 2.0 * rendered.data[i] * g_sxx + prior.data[i] * g_sxy;
            }
        }
    }
    DepthLoss {
        value: data + lambda_grad * gradient,
        data,
        gradient,
        alignment,
        valid,
        grad,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(w: usize, h: usize, v: Vec<f64>) -> Grid<f64> {
        Grid::from_vec(w, h, v)
    }

    #[test]
    fn identity_fit() {
        let d = grid(3, 1, vec![1.0, 4.0, 2.0]);
        let m = Grid::new(3, 1, true);
        let a = align_depth(&d, &d, &m);
        assert!((a.s - 1.0).abs() < 1e-12 && a.t.abs() < 1e-12);
    }

    #[test]
    fn affine_fit() {
        let d = grid(3, 1, vec![1.0, 2.0, 3.0]);
        let p = grid(3, 1, vec![3.0, 5.0, 7.0]);
        let m = Grid::new(3, 1, true);
        let a = align_depth(&d, &p, &m);
        assert!((a.s - 2.0).abs() < 1e-12 && (a.t - 1.0).abs() < 1e-12);
        let l = depth_loss(&d, &p, &m, 0.5);
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn constant_render_is_degenerate() {
        let d = Grid::new(4, 1, 2.0);
        let p = grid(4, 1, vec![1.0, 2.0, 3.0, 6.0]);
        let a = align_depth(&d, &p, &Grid::new(4, 1, true));
        assert!(a.degenerate);
        assert_eq!(a.s, 0.0);
        assert!((a.t - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_contributes_nothing() {
        let d = Grid::new(4, 4, 1.0);
        let l = depth_loss(&d, &d, &Grid::new(4, 4, false), 0.5);
        assert_eq!(l.value, 0.0);
        assert_eq!(l.valid, 0);
    }

    #[test]
    fn alignment_matches_generic_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x: Vec<f64> = (0..100).map(|_| rng.random_range(0.5..4.0)).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|v| 1.7 * v - 0.3 + rng.random_range(-0.2..0.2))
                .collect();
            let a = align_depth(&grid(10, 10, x.clone()), &grid(10, 10, y.clone()), &Grid::new(10, 10, true));
            // Generic solve of the overdetermined system [x 1] (s t)^T = y.
            let design = nalgebra::DMatrix::from_fn(100, 2, |i, j| if j == 0 { x[i] } else { 1.0 });
            let rhs = nalgebra::DVector::from_vec(y);
            let sol = design.svd(true, true).solve(&rhs, 1e-14).unwrap();
            assert!((a.s - sol[0]).abs() < 1e-6 && (a.t - sol[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn orthogonal_case_data_term() {
        // After alignment the residual is y minus its projection onto
        // span{x, 1}; compute that directly.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(1.0..3.0)).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.random_range(1.0..3.0)).collect();
        let n = 64.0;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        let expected = (vy - cov * cov / vx) / n;
        let l = depth_loss(&grid(8, 8, x), &grid(8, 8, y), &Grid::new(8, 8, true), 0.0);
        assert!((l.data - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_term_on_injected_ramp() {
        // An exact affine fit leaves no residual and no gradient term.
        let (w, h) = (8, 8);
        let x: Vec<f64> = (0..64).map(|i| 1.0 + (i % 8) as f64 * 0.1 + (i / 8) as f64 * 0.05).collect();
        let mask = Grid::new(w, h, true);
        let l = depth_loss(&grid(w, h, x.clone()), &grid(w, h, x), &mask, 1.0);
        assert!(l.gradient.abs() < 1e-12);

        // Residual ramp R = 0.01·col + 0.02·row, summed by hand per scale.
        let res = Grid::from_vec(w, h, (0..64).map(|i| 0.01 * (i % 8) as f64 + 0.02 * (i / 8) as f64).collect());
        let mut g = vec![0.0; 64];
        let term = gradient_matching(&res, &mask, 1.0, &mut g);
        let mut expected = 0.0;
        for step in [1usize, 2, 4, 8] {
            let pts: Vec<(usize, usize)> = (0..8)
                .step_by(step)
                .flat_map(|y| (0..8).step_by(step).map(move |x| (x, y)))
                .collect();
            let mut sum = 0.0;
            for &(px, py) in &pts {
                if px + step < 8 {
                    sum += 0.01 * step as f64;
                }
                if py + step < 8 {
                    sum += 0.02 * step as f64;
                }
            }
            expected += sum / pts.len() as f64;
        }
        assert!((term - expected).abs() < 1e-12, "{term} vs {expected}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (w, h) = (12, 10);
        let x: Vec<f64> = (0..w * h).map(|_| rng.random_range(1.0..3.0)).collect();
        let y: Vec<f64> = (0..w * h).map(|_| rng.random_range(2.0..5.0)).collect();
        let mask = Grid::from_vec(w, h, (0..w * h).map(|_| rng.random_bool(0.8)).collect());
        let d = grid(w, h, x);
        let p = grid(w, h, y);
        let l = depth_loss(&d, &p, &mask, 0.5);
        for i in 0..w * h {
            let hstep = 1e-6;
            let mut a = d.clone();
            a.data[i] += hstep;
            let mut b = d.clone();
            b.data[i] -= hstep;
            let fd = (depth_loss(&a, &p, &mask, 0.5).value - depth_loss(&b, &p, &mask, 0.5).value) / (2.0 * hstep);
            let an = l.grad.data[i];
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * an.abs(), "{i}: {fd} vs {an}");
        }
    }

    #[test]
    fn alignment_is_a_local_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let x: Vec<f64> = (0..50).map(|_| rng.random_range(1.0..3.0)).collect();
            let y: Vec<f64> = (0..50).map(|_| rng.random_range(1.0..3.0)).collect();
            let a = align_depth(&grid(50, 1, x.clone()), &grid(50, 1, y.clone()), &Grid::new(50, 1, true));
            let data = |s: f64, t: f64| x.iter().zip(&y).map(|(a, b)| (s * a + t - b).powi(2)).sum::<f64>();
            let best = data(a.s, a.t);
            for (ds, dt) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3), (1e-3, 1e-3), (-1e-3, 1e-3)] {
                assert!(data(a.s + ds, a.t + dt) >= best);
            }
        }
    }
}
