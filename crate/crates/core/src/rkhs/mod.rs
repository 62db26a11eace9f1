//! Edge detection with a smooth kernel part plus a sparse dictionary of
//! oriented, smoothed step functions.
//!
//! Each slice is tiled into overlapping square patches. On a patch with pixel
//! positions `t` normalised to `[0, 1]`, the image is modelled as `Kd + Ψb`: `K`
//! is a Gaussian kernel matrix and the columns of `Ψ` are steps
//! `ψ(n_θ · (x − t_j))` for orientations `θ_i = 2πi/l` through every pixel `t_j`.
//! The edge descriptor is the gradient magnitude of the step layer `Ψb`.

mod patch;
mod tiling;

pub use patch::{solve_rkhs_patch, EdgeModelCoefficients, PatchOperator, PatchSolution};
pub use tiling::{edge_map, edge_map_with_progress, patch_origins, EdgeMap, PatchDiagnostics};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::ScalarVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RkhsParams {
    /// Kernel width in pixels.
    pub sigma: f64,
    pub n_orientations: usize,
    /// Width of the smoothed step, in normalised patch units.
    pub heaviside_eps: f64,
    pub gamma_smooth: f64,
    pub alpha_l1: f64,
    pub nu_edge: f64,
    /// Contrast parameter of the edge weights inside the total-variation term.
    pub tv_edge_alpha: f64,
    pub admm_rho: f64,
    pub admm_iters: usize,
    pub admm_tol: f64,
    pub outer_iters: usize,
    pub patch_size: usize,
    pub patch_overlap: usize,
    /// Kernel eigenvalues below this fraction of the largest are dropped.
    pub kernel_tol: f64,
}

impl Default for RkhsParams {
    fn default() -> Self {
        RkhsParams {
            sigma: 2.0,
            n_orientations: 4,
            heaviside_eps: 0.01,
            gamma_smooth: 1.0,
            alpha_l1: 0.1,
            nu_edge: 1e-2,
            tv_edge_alpha: 100.0,
            admm_rho: 1.0,
            admm_iters: 200,
            admm_tol: 1e-4,
            outer_iters: 3,
            patch_size: 16,
            patch_overlap: 4,
            kernel_tol: 1e-6,
        }
    }
}

impl RkhsParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_orientations < 2 {
            return Err(Error::Param("n_orientations must be at least 2".into()));
        }
        if self.patch_size <= 2 * self.patch_overlap {
            return Err(Error::Param(format!(
                "patch size {} must exceed twice the overlap {}",
                self.patch_size, self.patch_overlap
            )));
        }
        if !(self.sigma > 0.0 && self.heaviside_eps > 0.0 && self.admm_rho > 0.0) {
            return Err(Error::Param(
                "sigma, heaviside_eps and admm_rho must be positive".into(),
            ));
        }
        if !(self.gamma_smooth >= 0.0 && self.alpha_l1 >= 0.0 && self.nu_edge >= 0.0 && self.tv_edge_alpha >= 0.0) {
            return Err(Error::Param("regularisation weights must be non-negative".into()));
        }
        if !(self.kernel_tol >= 0.0 && self.kernel_tol < 1.0) {
            return Err(Error::Param("kernel_tol must lie in [0, 1)".into()));
        }
        if self.outer_iters == 0 || self.admm_iters == 0 {
            return Err(Error::Param("iteration counts must be positive".into()));
        }
        Ok(())
    }
}

/// `½(1 + (2/π)·atan(x/ε))`.
#[inline]
pub fn approx_heaviside(x: f64, eps: f64) -> f64 {
    0.5 * (1.0 + std::f64::consts::FRAC_2_PI * (x / eps).atan())
}

/// Isotropic 2D Gaussian kernel normalised to unit mass.
#[inline]
pub fn gaussian_kernel(x: [f64; 2], xt: [f64; 2], sigma: f64) -> f64 {
    let d2 = (x[0] - xt[0]).powi(2) + (x[1] - xt[1]).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma)
}

/// `g = 1/(1 + α_e·E)`, with `E` the edge descriptor.
pub fn edge_stopping(edge: &ScalarVolume, alpha_e: f64) -> Result<ScalarVolume> {
    if !(alpha_e > 0.0) {
        return Err(Error::Param(format!("alpha_e must be positive, got {alpha_e}")));
    }
    Ok(edge.map(|e| 1.0 / (1.0 + alpha_e * e.max(0.0))))
}

/// In-plane gradient magnitude (pixel units): central differences inside,
/// one-sided differences on the border.
pub(crate) fn gradient_magnitude_2d(f: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let at = |xx: usize, yy: usize| f[yy * w + xx];
            let gx = if w == 1 {
                0.0
            } else if x == 0 {
                at(1, y) - at(0, y)
            } else if x == w - 1 {
                at(x, y) - at(x - 1, y)
            } else {
                0.5 * (at(x + 1, y) - at(x - 1, y))
            };
            let gy = if h == 1 {
                0.0
            } else if y == 0 {
                at(x, 1) - at(x, 0)
            } else if y == h - 1 {
                at(x, y) - at(x, y - 1)
            } else {
                0.5 * (at(x, y + 1) - at(x, y - 1))
            };
            out[y * w + x] = gx.hypot(gy);
        }
    }
    out
}
