//! Photometric loss: L1 blended with windowed SSIM.

use crate::error::{Error, Result};
use crate::grid::Grid;

use super::sign;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

pub struct RgbLoss {
    pub value: f64,
    pub l1: f64,
    pub ssim: f64,
    /// d(value)/d(rendered color).
    pub grad: Grid<[f64; 3]>,
}

fn window() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Zero-padded "same" filtering with the separable Gaussian window.
fn blur(src: &[f64], width: usize, height: usize, w: &[f64; WINDOW]) -> Vec<f64> {
    let half = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let xx = x as isize + k as isize - half;
                if xx >= 0 && (xx as usize) < width {
                    acc += wk * src[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let yy = y as isize + k as isize - half;
                if yy >= 0 && (yy as usize) < height {
                    acc += wk * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Mean SSIM over all pixels and channels, and optionally its gradient
/// with respect to `x`.
fn ssim_with_grad(x: &Grid<[f64; 3]>, y: &Grid<[f64; 3]>, want_grad: bool) -> (f64, Option<Grid<[f64; 3]>>) {
    let (w, h) = (x.width, x.height);
    let n = w * h;
    let win = window();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Grid::new(w, h, [0.0; 3]));
    let norm = 1.0 / (3 * n) as f64;
    for c in 0..3 {
        let xs: Vec<f64> = x.data.iter().map(|p| p[c]).collect();
        let ys: Vec<f64> = y.data.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mx = blur(&xs, w, h, &win);
        let my = blur(&ys, w, h, &win);
        let exx = blur(&xx, w, h, &win);
        let eyy = blur(&yy, w, h, &win);
        let exy = blur(&xy, w, h, &win);
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for i in 0..n {
            let a1 = 2.0 * mx[i] * my[i] + C1;
            let a2 = 2.0 * (exy[i] - mx[i] * my[i]) + C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + C1;
            let b2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // Grouped so that every term cancels exactly when x == y.
                let bb = b1 * b2;
                d_mx[i] = 2.0 * (my[i] * (a2 - a1) - s * mx[i] * (b2 - b1)) / bb;
                d_exx[i] = -s / b2;
                d_exy[i] = if a2 != 0.0 { 2.0 * s / a2 } else { 2.0 * a1 / bb };
            }
        }
        if let Some(g) = grad.as_mut() {
            let gm = blur(&d_mx, w, h, &win);
            let gxx = blur(&d_exx, w, h, &win);
            let gxy = blur(&d_exy, w, h, &win);
            for i in 0..n {
                g.data[i][c] = norm * (gm[i] + 2.0 * xs[i] * gxx[i] + ys[i] * gxy[i]);
            }
        }
    }
    (total * norm, grad)
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, zero padding).
pub fn ssim(x: &Grid<[f64; 3]>, y: &Grid<[f64; 3]>) -> f64 {
    ssim_with_grad(x, y, false).0
}

/// `(1 - mix) · L1 + mix · (1 - SSIM)` between the render and the image.
pub fn rgb_loss(rendered: &Grid<[f64; 3]>, target: &Grid<[f64; 3]>, ssim_mix: f64) -> Result<RgbLoss> {
    if !rendered.same_shape(target) {
        return Err(Error::DimensionMismatch(format!(
            "rendered {}x{} vs image {}x{}",
            rendered.width, rendered.height, target.width, target.height
        )));
    }
    let n = (rendered.len() * 3) as f64;
    let mut l1 = 0.0;
    let mut grad = Grid::new(rendered.width, rendered.height, [0.0; 3]);
    for ((r, t), g) in rendered.data.iter().zip(&target.data).zip(grad.data.iter_mut()) {
        for c in 0..3 {
            let d = r[c] - t[c];
            l1 += d.abs();
            g[c] = (1.0 - ssim_mix) * sign(d) / n;
        }
    }
    l1 /= n;
    let (s, sg) = if ssim_mix > 0.0 {
        ssim_with_grad(rendered, target, true)
    } else {
        (ssim(rendered, target), None)
    };
    if let Some(sg) = sg {
        for (g, s) in grad.data.iter_mut().zip(&sg.data) {
            for c in 0..3 {
                g[c] -= ssim_mix * s[c];
            }
        }
    }
    Ok(RgbLoss {
        value: (1.0 - ssim_mix) * l1 + ssim_mix * (1.0 - s),
        l1,
        ssim: s,
        grad,
    })
}
