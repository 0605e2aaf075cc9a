//! Training objectives. Every loss returns its value together with the
//! gradient with respect to the rendered maps it reads.

mod depth;
mod multiview;
mod normal;
mod rgb;

pub use depth::{align_depth, depth_loss, DepthAlignment, DepthLoss};
pub use multiview::{
    mv_consistency_loss, ncc, plane_homography, select_neighbor, MvInputs, MvLoss, MvView,
};
pub use normal::{normal_loss, NormalLoss};
pub use rgb::{rgb_loss, ssim, RgbLoss};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_1: f64,
    pub lambda_cos: f64,
    pub lambda_grad: f64,
    pub lambda_geo: f64,
    pub lambda_pho: f64,
    /// Share of `1 - SSIM` in the photometric loss.
    pub rgb_ssim_mix: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rgb: 1.0,
            lambda_d: 1.0,
            lambda_n: 1.0,
            lambda_1: 0.01,
            lambda_cos: 0.01,
            lambda_grad: 0.5,
            lambda_geo: 0.05,
            lambda_pho: 0.2,
            rgb_ssim_mix: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_rgb,
            self.lambda_d,
            self.lambda_n,
            self.lambda_1,
            self.lambda_cos,
            self.lambda_grad,
            self.lambda_geo,
            self.lambda_pho,
            self.rgb_ssim_mix,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be finite and >= 0".into()));
        }
        if self.rgb_ssim_mix > 1.0 {
            return Err(Error::InvalidConfig("rgb_ssim_mix must be <= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvConfig {
    /// Half-width of the NCC patch (3 gives 7×7).
    pub patch_radius: usize,
    /// Pixel stride of the sampling grid.
    pub sample_stride: usize,
    /// Forward-backward reprojection cutoff in pixels.
    pub tau_geo: f64,
    pub start_iter: u32,
    /// Maximum angle between viewing directions of neighbor views.
    pub max_neighbor_angle_deg: f64,
}

impl Default for MvConfig {
    fn default() -> Self {
        Self {
            patch_radius: 3,
            sample_stride: 4,
            tau_geo: 1.0,
            start_iter: 7000,
            max_neighbor_angle_deg: 30.0,
        }
    }
}

impl MvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_radius < 1 || self.sample_stride < 1 {
            return Err(Error::InvalidConfig("patch_radius and sample_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scalar loss terms of one iteration; `None` marks an inactive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub depth: Option<f64>,
    pub normal: Option<f64>,
    /// Already weighted by `lambda_geo` / `lambda_pho`.
    pub mv: Option<f64>,
}

/// `L = λ_rgb L_rgb + λ_d L_d + λ_n L_n + L_mv`, with `λ_rgb = 1` by default.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    let check = |name: &str, v: f64| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteLoss {
                term: name.to_string(),
                view: usize::MAX,
            })
        }
    };
    let rgb = check("rgb", terms.rgb)?;
    let d = check("depth", terms.depth.unwrap_or(0.0))?;
    let n = check("normal", terms.normal.unwrap_or(0.0))?;
    let mv = check("mv", terms.mv.unwrap_or(0.0))?;
    Ok(weights.lambda_rgb * rgb + weights.lambda_d * d + weights.lambda_n * n + mv)
}

/// `sign(x)` with `sign(0) = 0`.
#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
